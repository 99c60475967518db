//! Procedural articulated figures: ellipse head, rectangular torso and
//! capsule limbs over a textured background, with optional occluders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RgbImage, Sample};
use crate::error::{Error, Result};
use crate::hierarchy::{LabelMap, ValidatedHierarchy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    Flat,
    Noise,
    Stripes,
    /// One of the above, chosen per sample.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub figures_per_image: usize,
    /// Figure height as a fraction of the image side.
    pub figure_height: (f64, f64),
    /// Upper arm angle away from hanging straight down (radians).
    pub shoulder_angle: (f64, f64),
    pub elbow_bend: (f64, f64),
    pub hip_angle: (f64, f64),
    pub knee_bend: (f64, f64),
    pub torso_lean: (f64, f64),
    /// Multiplier on limb and torso widths.
    pub part_width: (f64, f64),
    pub background: BackgroundMode,
    pub occluders: (usize, usize),
    /// Occluder side as a fraction of the image side.
    pub occluder_size: (f64, f64),
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: 64,
            figures_per_image: 1,
            figure_height: (0.6, 0.92),
            shoulder_angle: (0.1, 2.4),
            elbow_bend: (-0.3, 1.8),
            hip_angle: (0.0, 0.5),
            knee_bend: (-0.2, 1.0),
            torso_lean: (-0.25, 0.25),
            part_width: (1.0, 1.4),
            background: BackgroundMode::Mixed,
            occluders: (0, 2),
            occluder_size: (0.08, 0.2),
            pixel_noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("image_size {} is not a positive multiple of 8", self.image_size)));
        }
        if self.figures_per_image > 2 {
            return Err(Error::Config("figures_per_image must be 0, 1 or 2".into()));
        }
        let ranges = [
            ("figure_height", self.figure_height),
            ("shoulder_angle", self.shoulder_angle),
            ("elbow_bend", self.elbow_bend),
            ("hip_angle", self.hip_angle),
            ("knee_bend", self.knee_bend),
            ("torso_lean", self.torso_lean),
            ("part_width", self.part_width),
            ("occluder_size", self.occluder_size),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if self.figure_height.0 <= 0.0 || self.part_width.0 <= 0.0 || self.occluder_size.0 < 0.0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if self.occluders.0 > self.occluders.1 {
            return Err(Error::Config("occluder count range is empty".into()));
        }
        if !(self.pixel_noise >= 0.0) {
            return Err(Error::Config("pixel_noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Seed of the `i`-th sample of a dataset generated from this config.
    pub fn sample_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64).rotate_left(17) ^ 0xD1B5_4A32_D192_ED03
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Capsule { ax: f64, ay: f64, bx: f64, by: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Capsule { ax, ay, bx, by, r } => {
                let (ex, ey) = (bx - ax, by - ay);
                let len2 = ex * ex + ey * ey;
                let t = if len2 > 0.0 { (((x - ax) * ex + (y - ay) * ey) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (px, py) = (ax + t * ex - x, ay + t * ey - y);
                px * px + py * py <= r * r
            }
        }
    }

    /// `(min_x, min_y, max_x, max_y)`, conservative.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, .. } => {
                let r = rx.max(ry);
                (cx - r, cy - r, cx + r, cy + r)
            }
            Shape::Rect { cx, cy, hw, hh, .. } => {
                let r = (hw * hw + hh * hh).sqrt();
                (cx - r, cy - r, cx + r, cy + r)
            }
            Shape::Capsule { ax, ay, bx, by, r } => (ax.min(bx) - r, ay.min(by) - r, ax.max(bx) + r, ay.max(by) + r),
        }
    }

    fn shifted(self, dx: f64, dy: f64) -> Shape {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => Shape::Ellipse { cx: cx + dx, cy: cy + dy, rx, ry, angle },
            Shape::Rect { cx, cy, hw, hh, angle } => Shape::Rect { cx: cx + dx, cy: cy + dy, hw, hh, angle },
            Shape::Capsule { ax, ay, bx, by, r } => Shape::Capsule { ax: ax + dx, ay: ay + dy, bx: bx + dx, by: by + dy, r },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Head,
    Torso,
    UpperArm,
    LowerArm,
    UpperLeg,
    LowerLeg,
}

impl Part {
    const ALL: [Part; 6] = [Part::Head, Part::Torso, Part::UpperArm, Part::LowerArm, Part::UpperLeg, Part::LowerLeg];

    fn node_id(self) -> &'static str {
        match self {
            Part::Head => "head",
            Part::Torso => "torso",
            Part::UpperArm => "upper_arm",
            Part::LowerArm => "lower_arm",
            Part::UpperLeg => "upper_leg",
            Part::LowerLeg => "lower_leg",
        }
    }
}

struct Layer {
    shape: Shape,
    label: u32,
    color: [f64; 3],
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn color_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn skin_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    const TONES: [[f64; 3]; 4] = [[0.96, 0.80, 0.69], [0.87, 0.67, 0.52], [0.69, 0.49, 0.35], [0.45, 0.31, 0.22]];
    let t = TONES[rng.gen_range(0..TONES.len())];
    [t[0] + rng.gen_range(-0.04..0.04), t[1] + rng.gen_range(-0.04..0.04), t[2] + rng.gen_range(-0.04..0.04)]
}

/// A colour at least `min` away from every colour in `avoid`, best effort.
fn distinct_color(rng: &mut ChaCha8Rng, avoid: &[[f64; 3]], min: f64) -> [f64; 3] {
    let mut best = random_color(rng);
    for _ in 0..16 {
        if avoid.iter().all(|&a| color_dist(a, best) >= min) {
            break;
        }
        best = random_color(rng);
    }
    best
}

struct Figure {
    layers: Vec<(Shape, Part)>,
}

fn rot(angle: f64, (x, y): (f64, f64)) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Unit direction `angle` radians away from straight down, towards side `side`.
fn down_dir(angle: f64, side: f64) -> (f64, f64) {
    (side * angle.sin(), angle.cos())
}

fn pose_figure(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, height: f64, cx: f64, top: f64) -> Figure {
    let wscale = uniform(rng, cfg.part_width);
    let lean = uniform(rng, cfg.torso_lean);
    let head = Shape::Ellipse {
        cx: cx + rng.gen_range(-0.02..0.02) * height,
        cy: top + 0.09 * height,
        rx: 0.07 * height,
        ry: 0.09 * height,
        angle: rng.gen_range(-0.2..0.2),
    };
    let (hw, hh) = (0.11 * height * wscale, 0.15 * height);
    let neck_y = top + 0.175 * height;
    let (tcx, tcy) = (cx, neck_y + hh);
    let torso = Shape::Rect { cx: tcx, cy: tcy, hw, hh, angle: lean };
    let at = |dx: f64, dy: f64| {
        let (x, y) = rot(lean, (dx, dy));
        (tcx + x, tcy + y)
    };

    let mut layers_back = Vec::new();
    let mut layers_front = Vec::new();
    let mut legs = Vec::new();
    for side in [-1.0, 1.0] {
        let (sx, sy) = at(side * (hw - 0.02 * height), -hh + 0.03 * height);
        let a1 = uniform(rng, cfg.shoulder_angle);
        let bend = uniform(rng, cfg.elbow_bend);
        let (d1x, d1y) = down_dir(a1, side);
        let (ex, ey) = (sx + 0.17 * height * d1x, sy + 0.17 * height * d1y);
        let (d2x, d2y) = down_dir(a1 + bend, side);
        let (wx, wy) = (ex + 0.16 * height * d2x, ey + 0.16 * height * d2y);
        let upper = Shape::Capsule { ax: sx, ay: sy, bx: ex, by: ey, r: 0.037 * height * wscale };
        let lower = Shape::Capsule { ax: ex, ay: ey, bx: wx, by: wy, r: 0.031 * height * wscale };
        let target = if rng.gen_bool(0.2) { &mut layers_back } else { &mut layers_front };
        target.push((upper, Part::UpperArm));
        target.push((lower, Part::LowerArm));

        let (px, py) = at(side * 0.055 * height * wscale, hh - 0.015 * height);
        let a = uniform(rng, cfg.hip_angle) * 0.5 + rng.gen_range(-0.08..0.08);
        let (d1x, d1y) = down_dir(a, side);
        let (kx, ky) = (px + 0.24 * height * d1x, py + 0.24 * height * d1y);
        let knee = uniform(rng, cfg.knee_bend);
        let (d2x, d2y) = down_dir(a - knee * 0.6, side);
        let (fx, fy) = (kx + 0.23 * height * d2x, ky + 0.23 * height * d2y);
        legs.push((Shape::Capsule { ax: kx, ay: ky, bx: fx, by: fy, r: 0.038 * height * wscale }, Part::LowerLeg));
        legs.push((Shape::Capsule { ax: px, ay: py, bx: kx, by: ky, r: 0.047 * height * wscale }, Part::UpperLeg));
    }
    let mut layers = layers_back;
    layers.extend(legs);
    layers.push((torso, Part::Torso));
    layers.push((head, Part::Head));
    layers.extend(layers_front);
    Figure { layers }
}

fn figure_bounds(f: &Figure) -> (f64, f64, f64, f64) {
    f.layers.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |acc, (s, _)| {
        let b = s.bounds();
        (acc.0.min(b.0), acc.1.min(b.1), acc.2.max(b.2), acc.3.max(b.3))
    })
}

fn place_figure(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, scale: f64) -> Figure {
    let size = cfg.image_size as f64;
    let mut last = None;
    for _ in 0..20 {
        let height = uniform(rng, cfg.figure_height) * size * scale;
        let cx = rng.gen_range(0.2..0.8) * size;
        let top = rng.gen_range(0.0..(size - 0.9 * height).max(1.0));
        let f = pose_figure(cfg, rng, height, cx, top);
        let b = figure_bounds(&f);
        if b.0 >= 0.0 && b.1 >= 0.0 && b.2 <= size && b.3 <= size {
            return f;
        }
        last = Some(f);
    }
    let mut f = last.expect("at least one attempt");
    let b = figure_bounds(&f);
    let (dx, dy) = (size / 2.0 - (b.0 + b.2) / 2.0, size / 2.0 - (b.1 + b.3) / 2.0);
    for (s, _) in f.layers.iter_mut() {
        *s = s.shifted(dx, dy);
    }
    f
}

fn background(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = cfg.image_size;
    let mode = match cfg.background {
        BackgroundMode::Mixed => [BackgroundMode::Flat, BackgroundMode::Noise, BackgroundMode::Stripes][rng.gen_range(0..3)],
        m => m,
    };
    let a = random_color(rng);
    let b = random_color(rng);
    let mut out = Vec::with_capacity(n * n);
    match mode {
        BackgroundMode::Flat | BackgroundMode::Mixed => out.resize(n * n, a),
        BackgroundMode::Noise => {
            let waves: Vec<(f64, f64, f64)> = (0..4)
                .map(|_| (rng.gen_range(0.05..0.35), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let v: f64 = waves.iter().map(|&(f, dir, ph)| (f * (x as f64 * dir.cos() + y as f64 * dir.sin()) + ph).sin()).sum::<f64>();
                    let t = (v / 8.0 + 0.5).clamp(0.0, 1.0);
                    out.push([0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t));
                }
            }
        }
        BackgroundMode::Stripes => {
            let f = rng.gen_range(0.3..1.2);
            let dir: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            for y in 0..n {
                for x in 0..n {
                    let v = (f * (x as f64 * dir.cos() + y as f64 * dir.sin())).sin();
                    out.push(if v > 0.0 { a } else { b });
                }
            }
        }
    }
    out
}

/// Renders one sample; deterministic in `(cfg, seed)`.
pub fn generate_sample(cfg: &SyntheticConfig, seed: u64, h: &ValidatedHierarchy) -> Result<Sample> {
    cfg.validate()?;
    let labels: Vec<u32> = Part::ALL
        .iter()
        .map(|p| {
            let v = h.find(p.node_id())?;
            h.label_of_leaf(v).ok_or_else(|| Error::LabelSchema(format!("{} has no label", p.node_id())))
        })
        .collect::<Result<_>>()?;
    let label_of = |p: Part| labels[Part::ALL.iter().position(|&q| q == p).expect("known part")];
    let bg_label = h.background_index();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let mut canvas = background(cfg, &mut rng);
    let mut layers: Vec<Layer> = Vec::new();
    let scale = if cfg.figures_per_image == 2 { 0.75 } else { 1.0 };
    for _ in 0..cfg.figures_per_image {
        let skin = skin_color(&mut rng);
        let shirt = distinct_color(&mut rng, &[skin], 0.35);
        let pants = distinct_color(&mut rng, &[skin, shirt], 0.35);
        let fig = place_figure(cfg, &mut rng, scale);
        for (shape, part) in fig.layers {
            let color = match part {
                Part::Head | Part::LowerArm => skin,
                Part::Torso | Part::UpperArm => shirt,
                Part::UpperLeg | Part::LowerLeg => pants,
            };
            layers.push(Layer { shape, label: label_of(part), color });
        }
    }
    let occluders = if cfg.occluders.0 == cfg.occluders.1 { cfg.occluders.0 } else { rng.gen_range(cfg.occluders.0..=cfg.occluders.1) };
    for _ in 0..occluders {
        let side = uniform(&mut rng, cfg.occluder_size) * n as f64;
        let (cx, cy) = (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64));
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let shape = if rng.gen_bool(0.5) {
            Shape::Rect { cx, cy, hw: side / 2.0, hh: side * rng.gen_range(0.25..0.6), angle }
        } else {
            Shape::Ellipse { cx, cy, rx: side / 2.0, ry: side * rng.gen_range(0.25..0.6), angle }
        };
        layers.push(Layer { shape, label: bg_label, color: random_color(&mut rng) });
    }

    let noise = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).expect("valid noise");
    let mut label_data = vec![bg_label; n * n];
    let mut rgb = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * n + x;
            if let Some(top) = layers.iter().rev().find(|l| l.shape.contains(px, py)) {
                canvas[i] = top.color;
                label_data[i] = top.label;
            }
            for c in 0..3 {
                let v = canvas[i][c] + if cfg.pixel_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Sample::new(RgbImage::new(n, n, rgb), LabelMap::new(n, n, label_data), seed, h)
}

/// `n` samples with seeds [`SyntheticConfig::sample_seed`]`(0..n)`.
pub fn generate_dataset(cfg: &SyntheticConfig, n: usize, h: &ValidatedHierarchy) -> Result<Vec<Sample>> {
    (0..n).map(|i| generate_sample(cfg, cfg.sample_seed(i), h)).collect()
}
