//! Momentum SGD with polynomial decay, augmentation, the training loop and
//! checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use hparse_tensor::kernels::{bilinear_resize, nearest_index};
use hparse_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{hierarchy_hash, image_batch, pyramids_at, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::hierarchy::{LabelMap, ValidatedHierarchy};
use crate::inference::{Emit, ModelConfig, ParserModel};
use crate::objectives::{self, LossReport};
use crate::params::{ParamStore, Session};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Environment switch that forces deterministic mode.
pub const DETERMINISTIC_ENV: &str = "PARSER_DETERMINISTIC";

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).map(|v| v == "1").unwrap_or(false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Weight of the attention losses.
    pub alpha: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub deterministic: bool,
    /// Architecture, including the number of message-passing iterations.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            power: 0.9,
            total_iters: 2000,
            batch_size: 4,
            crop_size: 64,
            scale_range: (0.5, 2.0),
            flip_prob: 0.5,
            alpha: objectives::DEFAULT_ALPHA,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
            deterministic: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_iters == 0 {
            return bad("total_iters must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.crop_size == 0 || self.crop_size % crate::backbone::STRIDE != 0 {
            return bad("crop_size must be a positive multiple of 8");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("scale_range must satisfy 0 < lo <= hi < inf");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if !(self.base_lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0 && self.alpha >= 0.0) {
            return bad("base_lr, momentum, weight_decay and alpha must be non-negative");
        }
        Ok(())
    }
}

/// `base_lr · (1 − iter/total_iters)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, total_iters: usize, power: f64) -> Result<f64> {
    if total_iters == 0 || iter > total_iters {
        return Err(Error::Range(format!("iteration {iter} outside [0, {total_iters}]")));
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

/// One concrete draw of the augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    /// Top-left corner of the crop in the rescaled image; negative values pad.
    pub offset: (i64, i64),
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { scale: 1.0, flip: false, offset: (0, 0) }
    }
}

fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

fn crop_offset(rng: &mut impl Rng, len: usize, crop: usize) -> i64 {
    if len >= crop {
        rng.gen_range(0..=(len - crop)) as i64
    } else {
        -(rng.gen_range(0..=(crop - len)) as i64)
    }
}

/// Draws scale, flip and crop position for a sample of the given size.
pub fn draw_augment(rng: &mut impl Rng, width: usize, height: usize, cfg: &TrainConfig) -> AugmentParams {
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let flip = rng.gen_bool(cfg.flip_prob);
    let (sw, sh) = (scaled_len(width, scale), scaled_len(height, scale));
    let ox = crop_offset(rng, sw, cfg.crop_size);
    let oy = crop_offset(rng, sh, cfg.crop_size);
    AugmentParams { scale, flip, offset: (ox, oy) }
}

/// Rescales (bilinear image, nearest labels), crops to `crop × crop` padding
/// with background, optionally mirrors, and rebuilds the pyramid.
pub fn apply_augment(sample: &Sample, p: AugmentParams, crop: usize, h: &ValidatedHierarchy) -> Result<Sample> {
    let (w, ht) = (sample.image.width, sample.image.height);
    let (sw, sh) = (scaled_len(w, p.scale), scaled_len(ht, p.scale));
    let planar = sample.image.to_planar::<f64>();
    let scaled = if (sw, sh) == (w, ht) { planar } else { bilinear_resize(&planar, 3, ht, w, sh, sw) };
    let xs = nearest_index(w, sw);
    let ys = nearest_index(ht, sh);
    let background = h.background_index();
    let mut img = vec![0.0f64; 3 * crop * crop];
    let mut labels = vec![background; crop * crop];
    for y in 0..crop {
        let sy = y as i64 + p.offset.1;
        if sy < 0 || sy >= sh as i64 {
            continue;
        }
        for x in 0..crop {
            let sx = x as i64 + p.offset.0;
            if sx < 0 || sx >= sw as i64 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            let dx = if p.flip { crop - 1 - x } else { x };
            for c in 0..3 {
                img[c * crop * crop + y * crop + dx] = scaled[c * sw * sh + sy * sw + sx];
            }
            labels[y * crop + dx] = sample.labels.get(xs[sx], ys[sy]);
        }
    }
    let image = RgbImage::from_planar(crop, crop, &img);
    Sample::new(image, LabelMap::new(crop, crop, labels), sample.seed, h)
}

/// Random scale, crop and flip of one sample.
pub fn augment(sample: &Sample, rng: &mut impl Rng, cfg: &TrainConfig, h: &ValidatedHierarchy) -> Result<Sample> {
    let p = draw_augment(rng, sample.image.width, sample.image.height, cfg);
    apply_augment(sample, p, cfg.crop_size, h)
}

/// One velocity slot per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn zeros(params: &ParamStore<T>) -> Self {
        OptimizerState { velocity: params.iter().map(|(n, p)| (n.clone(), Tensor::zeros(p.value.shape()))).collect() }
    }
}

/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`; weight decay only where the
/// parameter allows it. Nothing is modified when any gradient is non-finite.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::Shape(format!("no gradient for {name}")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Shape(format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.value.shape())));
        }
        if !g.is_finite() {
            log::error!("non-finite gradient for {name}; step skipped");
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let (lr, m) = (T::of(lr), T::of(momentum));
    for (name, p) in params.iter_mut() {
        let wd = if p.decay { T::of(weight_decay) } else { T::zero() };
        let v = state.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.value.shape()));
        let g = &grads[name];
        for ((pi, vi), &gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = m * *vi + (gi + wd * *pi);
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

/// Parameters, optimizer state and progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: usize,
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds: Option<f64>,
}

/// Generator for the batch of a given step; a pure function of `(seed, step)`.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Augmented batch for `step`.
pub fn batch_for_step(data: &[Sample], cfg: &TrainConfig, step: usize, h: &ValidatedHierarchy) -> Result<Vec<Sample>> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = step_rng(cfg.seed, step);
    (0..cfg.batch_size)
        .map(|_| {
            let i = rng.gen_range(0..data.len());
            augment(&data[i], &mut rng, cfg, h)
        })
        .collect()
}

/// Forward, objective and gradients for one batch.
pub fn loss_and_grads<T: Scalar>(
    model: &ParserModel,
    params: &ParamStore<T>,
    batch: &[Sample],
    alpha: f64,
) -> Result<(LossReport, BTreeMap<String, Tensor<T>>)> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut s = Session::new(params, true);
    let image = s.constant(image_batch::<T>(&refs)?);
    let out = model.forward(&mut s, image, model.config.iterations, Emit::All)?;
    let fine_shape = s.tape.shape(out.last().levels[0].scores).to_vec();
    let coarse_shape = s.tape.shape(out.features.x).to_vec();
    let h = &model.hierarchy;
    let fine = pyramids_at(&refs, fine_shape[3], fine_shape[2], h)?;
    let coarse = pyramids_at(&refs, coarse_shape[3], coarse_shape[2], h)?;
    let (loss, report) = objectives::objective(&mut s, h, &out, &fine, &coarse, alpha)?;
    let mut g = s.tape.backward(loss);
    Ok((report, s.param_grads(&mut g)))
}

/// Drives optimization and writes the log and checkpoints under `out`.
pub struct Trainer<'a, T: Scalar> {
    pub cfg: TrainConfig,
    pub model: ParserModel,
    pub state: TrainState<T>,
    data: &'a [Sample],
    out: Option<PathBuf>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(cfg: TrainConfig, hierarchy: ValidatedHierarchy, data: &'a [Sample], out: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let model = ParserModel::new(hierarchy, cfg.model.clone());
        let params = model.init_params::<T>(cfg.seed);
        let optimizer = OptimizerState::zeros(&params);
        Ok(Trainer { cfg, model, state: TrainState { step: 0, params, optimizer }, data, out })
    }

    /// Continues from a saved checkpoint; the checkpoint's config is authoritative.
    pub fn resume(ckpt: Checkpoint<T>, hierarchy: ValidatedHierarchy, data: &'a [Sample], out: Option<PathBuf>) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ParserModel::new(hierarchy, ckpt.config.model.clone());
        Ok(Trainer { cfg: ckpt.config, model, state: ckpt.state, data, out })
    }

    fn apply(&mut self, step: usize, batch: &[Sample], started: Instant) -> Result<StepRecord> {
        let lr = poly_lr(self.cfg.base_lr, step, self.cfg.total_iters, self.cfg.power)?;
        let (report, grads) = loss_and_grads(&self.model, &self.state.params, batch, self.cfg.alpha)?;
        sgd_step(&mut self.state.params, &grads, &mut self.state.optimizer, lr, self.cfg.momentum, self.cfg.weight_decay)?;
        self.state.step = step + 1;
        let seconds = (!self.cfg.deterministic).then(|| started.elapsed().as_secs_f64());
        Ok(StepRecord { step, lr, loss: report.record(), seconds })
    }

    /// Runs one step on the batch the step index determines.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let batch = batch_for_step(self.data, &self.cfg, step, &self.model.hierarchy)?;
        self.apply(step, &batch, Instant::now())
    }

    /// Trains until `stop` steps (capped at `total_iters`) have been taken.
    pub fn run_until(&mut self, stop: usize, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        let stop = stop.min(self.cfg.total_iters);
        let mut log = match &self.out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
                let path = dir.join("train.jsonl");
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let start = self.state.step;
        if start >= stop {
            return Ok(());
        }
        let started = Instant::now();
        let prefetch = !self.cfg.deterministic;
        let (cfg, h, data) = (self.cfg.clone(), self.model.hierarchy.clone(), self.data);
        std::thread::scope(|scope| -> Result<()> {
            let rx = prefetch.then(|| {
                let (tx, rx) = mpsc::sync_channel(2);
                scope.spawn(move || {
                    for step in start..stop {
                        if tx.send(batch_for_step(data, &cfg, step, &h)).is_err() {
                            break;
                        }
                    }
                });
                rx
            });
            for step in start..stop {
                let batch = match &rx {
                    Some(rx) => rx.recv().map_err(|_| Error::Config("batch loader stopped".into()))??,
                    None => batch_for_step(self.data, &self.cfg, step, &self.model.hierarchy)?,
                };
                let rec = self.apply(step, &batch, started)?;
                if let Some(w) = log.as_mut() {
                    let line = serde_json::to_string(&rec).expect("record serializes");
                    writeln!(w, "{line}").map_err(|e| Error::io("writing training log", e))?;
                }
                on_step(&rec);
                let done = step + 1;
                if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 && done < self.cfg.total_iters {
                    if let Some(dir) = &self.out {
                        self.checkpoint().save(&dir.join(format!("checkpoint-{done:06}")))?;
                    }
                }
            }
            Ok(())
        })?;
        if let Some(w) = log.as_mut() {
            w.flush().map_err(|e| Error::io("flushing training log", e))?;
        }
        Ok(())
    }

    /// Trains to `total_iters` and writes the final checkpoint.
    pub fn run(&mut self, on_step: impl FnMut(&StepRecord)) -> Result<()> {
        self.run_until(self.cfg.total_iters, on_step)?;
        if let Some(dir) = &self.out {
            self.checkpoint().save(&dir.join("final"))?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint { config: self.cfg.clone(), hierarchy: hierarchy_hash(&self.model.hierarchy), state: self.state.clone() }
    }
}

/// Trains from scratch and returns the final state.
pub fn train<T: Scalar>(cfg: TrainConfig, data: &[Sample], hierarchy: &ValidatedHierarchy, out: Option<&Path>) -> Result<TrainState<T>> {
    let mut t = Trainer::<T>::new(cfg, hierarchy.clone(), data, out.map(Path::to_path_buf))?;
    t.run(|r| log::debug!("step {} lr {:.6} loss {:.4}", r.step, r.lr, r.loss["total"]))?;
    Ok(t.state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step: usize,
    pub config: TrainConfig,
    /// Hash of the hierarchy the parameters belong to.
    pub hierarchy: String,
    pub params: Vec<TensorEntry>,
    pub velocity: Vec<TensorEntry>,
}

/// Everything needed to continue training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub hierarchy: String,
    pub state: TrainState<T>,
}

fn blob<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptManifest { path: path.to_path_buf(), reason: reason.into() }
}

fn read_blob<T: Scalar>(dir: &Path, e: &TensorEntry) -> Result<Tensor<T>> {
    let path = dir.join(&e.file);
    let bytes = fs::read(&path).map_err(|err| Error::io(format!("reading {}", path.display()), err))?;
    let n: usize = e.shape.iter().product();
    let width = match e.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(corrupt(&path, format!("unknown dtype {other}"))),
    };
    if bytes.len() != n * width {
        return Err(corrupt(&path, format!("{} bytes for {} {} values", bytes.len(), n, e.dtype)));
    }
    let data: Vec<T> = bytes
        .chunks_exact(width)
        .map(|c| if width == 4 { T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64) } else { T::of(f64::from_le_bytes(c.try_into().unwrap())) })
        .collect();
    Ok(Tensor::new(&e.shape, data))
}

impl<T: Scalar> Checkpoint<T> {
    /// Writes into a sibling temporary directory and renames it into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        let result = self.write_into(&tmp).and_then(|()| {
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(|e| Error::io(format!("replacing {}", dir.display()), e))?;
            }
            fs::rename(&tmp, dir).map_err(|e| Error::io(format!("moving checkpoint to {}", dir.display()), e))
        });
        if result.is_err() {
            let _ = fs::remove_dir_all(&tmp);
        }
        result
    }

    fn write_into(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(format!("clearing {}", dir.display()), e))?;
        }
        for sub in ["params", "velocity"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        for (name, p) in self.state.params.iter() {
            let v = self.state.optimizer.velocity.get(name).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            for (sub, t, list) in [("params", &p.value, &mut params), ("velocity", &v, &mut velocity)] {
                let file = format!("{sub}/{name}.bin");
                let path = dir.join(&file);
                fs::write(&path, blob(t)).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
                list.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: T::DTYPE.into(), file, decay: p.decay });
            }
        }
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            step: self.state.step,
            config: self.config.clone(),
            hierarchy: self.hierarchy.clone(),
            params,
            velocity,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Reads a checkpoint, converting stored values to `T` if needed.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: m.version, expected: CHECKPOINT_VERSION });
        }
        let mut params = ParamStore::new();
        for e in &m.params {
            params.insert(e.name.clone(), read_blob(dir, e)?, e.decay);
        }
        let mut optimizer = OptimizerState::default();
        for e in &m.velocity {
            if !params.contains(&e.name) {
                return Err(corrupt(&path, format!("velocity for unknown parameter {}", e.name)));
            }
            optimizer.velocity.insert(e.name.clone(), read_blob(dir, e)?);
        }
        Ok(Checkpoint { config: m.config, hierarchy: m.hierarchy, state: TrainState { step: m.step, params, optimizer } })
    }

    /// Fails unless the checkpoint was trained on `h`.
    pub fn check_hierarchy(&self, h: &ValidatedHierarchy) -> Result<()> {
        if self.hierarchy != hierarchy_hash(h) {
            return Err(Error::Config("checkpoint was trained on a different hierarchy".into()));
        }
        Ok(())
    }
}
