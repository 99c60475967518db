//! Segmentation metrics, multi-scale flip inference and the ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use hparse_tensor::kernels::bilinear_resize;
use hparse_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::STRIDE;
use crate::data::{RgbImage, Sample};
use crate::error::{Error, Result};
use crate::hierarchy::{RelationKind, ValidatedHierarchy};
use crate::inference::{ParserModel, RelationKinds, RelationMode};
use crate::params::ParamStore;
use crate::training::{Trainer, TrainConfig};

/// Revision string of the build, `git describe` style when available.
pub const REVISION: &str = env!("HPARSE_REVISION");

pub const DEFAULT_SCALES: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];

/// `K × K` pixel counts, row = groundtruth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds counts of pixel pairs.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("{} predictions for {} groundtruth pixels", pred.len(), gt.len())));
        }
        let k = self.classes;
        if let Some(bad) = pred.iter().chain(gt).find(|&&c| c >= k) {
            return Err(Error::Range(format!("class {bad} outside [0, {k})")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!("merging {}-class and {}-class matrices", self.classes, other.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    fn col(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }
}

pub fn confusion(pred: &[usize], gt: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(classes);
    m.accumulate(pred, gt)?;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Class index of background.
    pub background: usize,
    /// Count background as a class in mIoU.
    pub include_background: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { background: 0, include_background: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pix_acc: f64,
    pub mean_acc: f64,
    /// `None` for classes absent from both groundtruth and prediction.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub fg_acc: f64,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub avg_f1: f64,
    pub include_background: bool,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = vals.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// All rates from a confusion matrix. Class means skip classes with no
/// groundtruth and no predicted pixels.
pub fn metrics(m: &ConfusionMatrix, opts: MetricOptions) -> Result<MetricReport> {
    let k = m.classes;
    if k == 0 || opts.background >= k {
        return Err(Error::Range(format!("background {} with {k} classes", opts.background)));
    }
    let total = m.total();
    let tp: Vec<u64> = (0..k).map(|i| m.get(i, i)).collect();
    let gt: Vec<u64> = (0..k).map(|i| m.row(i)).collect();
    let pred: Vec<u64> = (0..k).map(|j| m.col(j)).collect();
    let iou: Vec<Option<f64>> = (0..k).map(|i| ratio(tp[i], gt[i] + pred[i] - tp[i])).collect();
    let recall: Vec<Option<f64>> = (0..k).map(|i| ratio(tp[i], gt[i])).collect();
    let precision: Vec<Option<f64>> = (0..k).map(|i| ratio(tp[i], pred[i])).collect();
    let f1: Vec<Option<f64>> = (0..k)
        .map(|i| match (precision[i], recall[i]) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        })
        .collect();
    let absent: Vec<usize> = (0..k).filter(|&i| iou[i].is_none()).collect();
    if !absent.is_empty() {
        log::debug!("classes {absent:?} absent from groundtruth and prediction; excluded from means");
    }
    let counted = |i: &usize| opts.include_background || *i != opts.background;
    let fg = (0..k).filter(|&i| i != opts.background);
    let fg_total: u64 = fg.clone().map(|i| gt[i]).sum();
    let fg_tp: u64 = fg.clone().map(|i| tp[i]).sum();
    Ok(MetricReport {
        pix_acc: ratio(tp.iter().sum(), total).unwrap_or(0.0),
        mean_acc: mean((0..k).filter(counted).map(|i| recall[i])),
        miou: mean((0..k).filter(counted).map(|i| iou[i])),
        fg_acc: ratio(fg_tp, fg_total).unwrap_or(0.0),
        avg_precision: mean(fg.clone().map(|i| precision[i])),
        avg_recall: mean(fg.clone().map(|i| recall[i])),
        avg_f1: mean(fg.map(|i| f1[i])),
        iou,
        precision,
        recall,
        f1,
        include_background: opts.include_background,
        confusion: m.clone(),
    })
}

impl MetricReport {
    /// Plain-text summary with one line per class.
    pub fn table(&self, class_names: &[String]) -> String {
        let pct = |v: Option<f64>| v.map_or("    -".to_string(), |x| format!("{:5.2}", 100.0 * x));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "pixAcc {:.2}  meanAcc {:.2}  mIoU {:.2}  fgAcc {:.2}  avgP {:.2}  avgR {:.2}  avgF1 {:.2}",
            100.0 * self.pix_acc,
            100.0 * self.mean_acc,
            100.0 * self.miou,
            100.0 * self.fg_acc,
            100.0 * self.avg_precision,
            100.0 * self.avg_recall,
            100.0 * self.avg_f1
        );
        let _ = writeln!(s, "{:<14} {:>6} {:>6} {:>6} {:>6}", "class", "IoU", "P", "R", "F1");
        for i in 0..self.iou.len() {
            let name = class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
            let _ = writeln!(s, "{name:<14} {} {} {} {}", pct(self.iou[i]), pct(self.precision[i]), pct(self.recall[i]), pct(self.f1[i]));
        }
        s
    }
}

/// Per-pixel argmax over channels of a `[1, K, H, W]` or `[K, H, W]` map.
pub fn argmax_channels<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let shape = probs.shape();
    let (k, plane) = match shape.len() {
        4 => (shape[1], shape[2] * shape[3]),
        3 => (shape[0], shape[1] * shape[2]),
        _ => panic!("argmax over shape {shape:?}"),
    };
    let d = probs.data();
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub scales: Vec<f64>,
    pub flip: bool,
    pub iterations: usize,
}

impl InferOptions {
    pub fn single_scale(iterations: usize) -> Self {
        InferOptions { scales: vec![1.0], flip: false, iterations }
    }
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { scales: DEFAULT_SCALES.to_vec(), flip: true, iterations: 2 }
    }
}

fn flip_planes<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for p in 0..planes {
        for y in 0..h {
            let row = &mut out[(p * h + y) * w..(p * h + y + 1) * w];
            row.reverse();
        }
    }
    out
}

/// Side length nearest to `len · scale` that the backbone accepts.
fn scaled_side(len: usize, scale: f64) -> usize {
    (((len as f64 * scale) / STRIDE as f64).round() as usize).max(1) * STRIDE
}

/// Level probabilities at image resolution, averaged over scales and
/// (optionally) mirrored copies, one `[1, K_l, H, W]` tensor per level.
pub fn multiscale_infer<T: Scalar>(
    model: &ParserModel,
    params: &ParamStore<T>,
    image: &RgbImage,
    opts: &InferOptions,
) -> Result<Vec<Tensor<T>>> {
    if opts.scales.is_empty() || opts.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("invalid scales {:?}", opts.scales)));
    }
    let (w, h) = (image.width, image.height);
    let planar = image.to_planar::<T>();
    let mut sums: Option<Vec<Tensor<T>>> = None;
    let mut terms = 0usize;
    for &scale in &opts.scales {
        let (sw, sh) = (scaled_side(w, scale), scaled_side(h, scale));
        let resized = if (sw, sh) == (w, h) { planar.clone() } else { bilinear_resize(&planar, 3, h, w, sh, sw) };
        for flipped in [false, true] {
            if flipped && !opts.flip {
                continue;
            }
            let input = if flipped { flip_planes(&resized, 3, sh, sw) } else { resized.clone() };
            let levels = model.predict(params, &Tensor::new(&[1, 3, sh, sw], input), opts.iterations)?;
            let mut back = Vec::with_capacity(levels.len());
            for p in levels {
                let (_, k, ph, pw) = p.dims4();
                let data = if flipped { flip_planes(p.data(), k, ph, pw) } else { p.into_data() };
                back.push(Tensor::new(&[1, k, h, w], bilinear_resize(&data, k, ph, pw, h, w)));
            }
            match sums.as_mut() {
                None => sums = Some(back),
                Some(acc) => acc.iter_mut().zip(&back).for_each(|(a, b)| a.add_assign(b)),
            }
            terms += 1;
        }
    }
    let inv = T::of(1.0 / terms as f64);
    let mut out = sums.expect("at least one scale");
    for t in out.iter_mut() {
        let (_, k, hh, ww) = t.dims4();
        let plane = hh * ww;
        let d = t.data_mut();
        for p in 0..plane {
            let z: T = (0..k).map(|c| d[c * plane + p]).sum::<T>() * inv;
            for c in 0..k {
                d[c * plane + p] = d[c * plane + p] * inv / z;
            }
        }
    }
    Ok(out)
}

/// Confusion over level-1 classes for one sample.
pub fn sample_confusion<T: Scalar>(
    model: &ParserModel,
    params: &ParamStore<T>,
    sample: &Sample,
    opts: &InferOptions,
) -> Result<ConfusionMatrix> {
    let h = &model.hierarchy;
    let probs = multiscale_infer(model, params, &sample.image, opts)?;
    let level1 = probs.first().ok_or_else(|| Error::Shape("model has no levels".into()))?;
    let k = level1.shape()[1];
    confusion(&argmax_channels(level1), &sample.pyramid.level_classes(h, 1), k)
}

/// Level-1 metrics over a test set.
pub fn evaluate<T: Scalar>(
    model: &ParserModel,
    params: &ParamStore<T>,
    samples: &[Sample],
    opts: &InferOptions,
    metric: MetricOptions,
) -> Result<MetricReport> {
    let k = model.hierarchy.leaves().len() + 1;
    let mut total = ConfusionMatrix::new(k);
    for s in samples {
        total.merge(&sample_confusion(model, params, s, opts)?)?;
    }
    metrics(&total, metric)
}

/// Class names of level 1 in channel order, background first.
pub fn level1_names(h: &ValidatedHierarchy) -> Vec<String> {
    std::iter::once("background".to_string()).chain(h.leaves().into_iter().map(|v| h.id(v).to_string())).collect()
}

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Node states read out directly, no message passing.
    Baseline,
    /// One shared relation network for every edge kind.
    TypeAgnostic,
    /// Typed networks on raw source features, no attention adaption.
    TypedNoAdapt,
    DecompositionOnly,
    CompositionOnly,
    DependencyOnly,
    /// Full model with the given number of iterations.
    Iterations(usize),
}

impl Variant {
    pub const FULL: Variant = Variant::Iterations(2);

    /// Relation rows followed by the iteration sweep.
    pub fn table_rows() -> Vec<Variant> {
        let mut v = vec![
            Variant::Baseline,
            Variant::TypeAgnostic,
            Variant::TypedNoAdapt,
            Variant::DecompositionOnly,
            Variant::CompositionOnly,
            Variant::DependencyOnly,
        ];
        v.extend((0..=5).map(Variant::Iterations));
        v
    }

    pub fn name(self) -> String {
        match self {
            Variant::Baseline => "baseline".into(),
            Variant::TypeAgnostic => "type_agnostic".into(),
            Variant::TypedNoAdapt => "typed_no_adapt".into(),
            Variant::DecompositionOnly => "decomposition_only".into(),
            Variant::CompositionOnly => "composition_only".into(),
            Variant::DependencyOnly => "dependency_only".into(),
            Variant::Iterations(t) => format!("iterations_{t}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::table_rows()
            .into_iter()
            .chain([Variant::FULL])
            .find(|v| v.name() == s)
            .or_else(|| s.strip_prefix("iterations_").and_then(|t| t.parse().ok()).map(Variant::Iterations))
            .or_else(|| (s == "full").then_some(Variant::FULL))
            .ok_or_else(|| Error::Config(format!("unknown variant {s}")))
    }

    /// Training config of this variant derived from the full model's.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let m = &mut cfg.model;
        m.relation_mode = RelationMode::Typed;
        m.kinds = RelationKinds::ALL;
        match self {
            Variant::Baseline => m.iterations = 0,
            Variant::TypeAgnostic => m.relation_mode = RelationMode::Agnostic,
            Variant::TypedNoAdapt => m.relation_mode = RelationMode::TypedNoAdapt,
            Variant::DecompositionOnly => m.kinds = RelationKinds::only(RelationKind::Decomposition),
            Variant::CompositionOnly => m.kinds = RelationKinds::only(RelationKind::Composition),
            Variant::DependencyOnly => m.kinds = RelationKinds::only(RelationKind::Dependency),
            Variant::Iterations(t) => m.iterations = t,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSuite {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Full-model training config; each variant modifies a copy.
    pub train: TrainConfig,
    pub scales: Vec<f64>,
    pub flip: bool,
    pub metric: MetricOptions,
}

impl AblationSuite {
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("suite serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub name: String,
    pub seed: u64,
    pub miou: f64,
    pub pix_acc: f64,
    pub mean_acc: f64,
    pub fg_acc: f64,
    pub final_loss: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub revision: String,
    pub suite: AblationSuite,
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl AblationTable {
    /// Median mIoU of a variant over seeds.
    pub fn median_miou(&self, v: Variant) -> Option<f64> {
        median(self.rows.iter().filter(|r| r.variant == v).map(|r| r.miou).collect())
    }

    /// Per-seed mIoU of a variant, in seed order.
    pub fn mious(&self, v: Variant) -> BTreeMap<u64, f64> {
        self.rows.iter().filter(|r| r.variant == v).map(|r| (r.seed, r.miou)).collect()
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}  revision {}", &self.config_hash[..12], self.revision);
        let _ = write!(s, "{:<20}", "variant");
        for seed in &self.suite.seeds {
            let _ = write!(s, " {:>9}", format!("seed {seed}"));
        }
        let _ = writeln!(s, " {:>9}", "median");
        for &v in &self.suite.variants {
            let _ = write!(s, "{:<20}", v.name());
            for seed in &self.suite.seeds {
                match self.mious(v).get(seed) {
                    Some(m) => {
                        let _ = write!(s, " {:>9.2}", 100.0 * m);
                    }
                    None => {
                        let _ = write!(s, " {:>9}", "-");
                    }
                }
            }
            let _ = writeln!(s, " {:>9}", self.median_miou(v).map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m)));
        }
        s
    }
}

/// Trains and evaluates one variant for one seed.
pub fn run_variant(
    suite: &AblationSuite,
    variant: Variant,
    seed: u64,
    h: &ValidatedHierarchy,
    train: &[Sample],
    test: &[Sample],
    out: Option<&Path>,
) -> Result<AblationRow> {
    let cfg = TrainConfig { seed, ..variant.apply(&suite.train) };
    let dir = out.map(|d| d.join(format!("{}-seed{seed}", variant.name())));
    let mut trainer = Trainer::<f32>::new(cfg, h.clone(), train, dir)?;
    let mut last = f64::NAN;
    trainer.run(|r| last = r.loss["total"])?;
    let opts = InferOptions { scales: suite.scales.clone(), flip: suite.flip, iterations: trainer.cfg.model.iterations };
    let report = evaluate(&trainer.model, &trainer.state.params, test, &opts, suite.metric)?;
    Ok(AblationRow {
        variant,
        name: variant.name(),
        seed,
        miou: report.miou,
        pix_acc: report.pix_acc,
        mean_acc: report.mean_acc,
        fg_acc: report.fg_acc,
        final_loss: last,
        report,
    })
}

/// Runs every variant for every seed. `on_row` sees each row as it finishes.
pub fn ablate(
    suite: &AblationSuite,
    h: &ValidatedHierarchy,
    train: &[Sample],
    test: &[Sample],
    out: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &seed in &suite.seeds {
        for &v in &suite.variants {
            let row = run_variant(suite, v, seed, h, train, test, out)?;
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(AblationTable { config_hash: suite.config_hash(), revision: REVISION.to_string(), suite: suite.clone(), rows })
}
