//! Self-checks that hold for any parameter values: attention normalization,
//! gradient fidelity, the T = 0 degeneracy, metric and pyramid oracles, and
//! training determinism.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use hparse_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, generate_sample, pyramid_is_consistent, SyntheticConfig};
use crate::error::Result;
use crate::evaluation::{confusion, metrics, MetricOptions, Variant};
use crate::hierarchy::ValidatedHierarchy;
use crate::inference::{Emit, ModelConfig, ParserModel};
use crate::params::Session;
use crate::training::{apply_augment, loss_and_grads, AugmentParams, Checkpoint, TrainConfig, Trainer};

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub checked: usize,
    pub failures: usize,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {} checked, {} failed, {:.1}s. {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.failures,
            self.seconds,
            self.detail
        )
    }
}

fn finish(name: &str, started: Instant, checked: usize, failures: usize, passed: bool, detail: String) -> SuiteResult {
    SuiteResult { name: name.into(), passed, checked, failures, detail, seconds: started.elapsed().as_secs_f64() }
}

/// Narrow model used by the numerical suites.
pub fn probe_config(iterations: usize) -> ModelConfig {
    ModelConfig { feat_channels: 8, low_channels: 4, node_channels: 4, decoder_channels: 4, low_reduce: 2, iterations, ..ModelConfig::default() }
}

fn random_image(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 3, size, size], |_| rng.gen_range(0.0..1.0))
}

/// Decomposition and dependency attentions sum to one over their channel set
/// at every pixel, for random images and random parameters.
pub fn attention_normalization(h: &ValidatedHierarchy, inputs: usize, seed: u64) -> Result<SuiteResult> {
    let started = Instant::now();
    let model = ParserModel::new(h.clone(), probe_config(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut failures, mut worst) = (0usize, 0usize, 0.0f64);
    for i in 0..inputs {
        let params = model.init_params::<f64>(seed.wrapping_add(i as u64));
        let size = 8 * rng.gen_range(1..=4);
        let mut s = Session::new(&params, false);
        let img = s.constant(random_image(&mut rng, 1, size));
        let out = model.forward(&mut s, img, 2, Emit::Last)?;
        for it in &out.iterations {
            for (_, att) in it.attention.decomposition.iter().chain(&it.attention.dependency) {
                let t = s.tape.value(att.weights);
                let (n, k, hh, ww) = t.dims4();
                let plane = hh * ww;
                for b in 0..n {
                    for p in 0..plane {
                        let sum: f64 = (0..k).map(|c| t.data()[(b * k + c) * plane + p]).sum();
                        let err = (sum - 1.0).abs();
                        worst = worst.max(err);
                        checked += 1;
                        if err > 1e-5 {
                            failures += 1;
                        }
                    }
                }
            }
        }
    }
    let detail = format!("{inputs} random inputs, max |sum - 1| = {worst:.2e} (tolerance 1e-5)");
    Ok(finish("attention normalization", started, checked, failures, failures == 0 && checked > 0, detail))
}

/// Finite-difference check on `samples` parameter entries drawn round-robin
/// over every parameter tensor of the full model on an 8×8 input.
pub fn gradient_fidelity(h: &ValidatedHierarchy, samples: usize, seed: u64) -> Result<SuiteResult> {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let started = Instant::now();
    let model = ParserModel::new(h.clone(), probe_config(2));
    let cfg = SyntheticConfig { image_size: 8, ..SyntheticConfig::default() };
    let batch = vec![generate_sample(&cfg, cfg.sample_seed(seed as usize), h)?];
    let mut params = model.init_params::<f64>(seed);
    // Zero biases over an all-zero feature map put ReLU inputs exactly on the
    // kink; jitter them so the check runs at a differentiable point.
    let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for (name, p) in params.iter_mut() {
        if name.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|b| *b += jitter.gen_range(-0.1..0.1));
        }
    }
    let (report, grads) = loss_and_grads(&model, &params, &batch, 0.1)?;
    // Round-off of a central difference of a loss of this size; differences
    // below it say nothing about the analytic gradient.
    let noise = 4.0 * f64::EPSILON * report.total.abs().max(1.0) / STEP;
    let names: Vec<String> = params.names().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (mut failures, mut worst) = (0usize, 0.0f64);
    let mut modules: BTreeMap<String, usize> = BTreeMap::new();
    for k in 0..samples {
        let name = &names[k % names.len()];
        let i = rng.gen_range(0..params.value(name).len());
        let orig = params.value(name).data()[i];
        let mut eval = |v: f64| -> Result<f64> {
            params.get_mut(name).expect("known parameter").value.data_mut()[i] = v;
            Ok(loss_and_grads(&model, &params, &batch, 0.1)?.0.total)
        };
        let up = eval(orig + STEP)?;
        let down = eval(orig - STEP)?;
        eval(orig)?;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads[name].data()[i];
        let scale = numeric.abs().max(analytic.abs());
        let diff = (numeric - analytic).abs();
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        if diff > noise {
            worst = worst.max(rel);
        }
        if diff > TOL * scale + noise {
            failures += 1;
            log::info!("gradient mismatch {name}[{i}]: analytic {analytic:e}, numeric {numeric:e}");
        }
        *modules.entry(name.split('.').next().unwrap_or("").to_string()).or_insert(0) += 1;
    }
    let pass_rate = 1.0 - failures as f64 / samples.max(1) as f64;
    let detail = format!(
        "{:.2}% within relative error {TOL:e} plus round-off {noise:.1e} (need 99%), modules {:?}, worst above round-off {worst:.2e}",
        100.0 * pass_rate,
        modules.keys().collect::<Vec<_>>()
    );
    Ok(finish("gradient fidelity", started, samples, failures, samples > 0 && pass_rate >= 0.99, detail))
}

/// T = 0 touches no relation or recurrent parameter, receives zero gradient
/// there, and predicts exactly what the Baseline variant predicts.
pub fn degeneracy(h: &ValidatedHierarchy, seed: u64) -> Result<SuiteResult> {
    let started = Instant::now();
    let full_cfg = TrainConfig { model: probe_config(2), ..TrainConfig::default() };
    let full = ParserModel::new(h.clone(), full_cfg.model.clone());
    let baseline = ParserModel::new(h.clone(), Variant::Baseline.apply(&full_cfg).model);
    let params = full.init_params::<f64>(seed);
    let cfg = SyntheticConfig { image_size: 16, ..SyntheticConfig::default() };
    let batch = vec![generate_sample(&cfg, cfg.sample_seed(seed as usize), h)?];
    let mut problems = Vec::new();
    let mut checked = 0;

    let mut s = Session::new(&params, true);
    let img = s.constant(crate::data::image_batch::<f64>(&batch.iter().collect::<Vec<_>>())?);
    let out = full.forward(&mut s, img, 0, Emit::All)?;
    let calls: usize = out.relation_calls.values().sum();
    if calls != 0 {
        problems.push(format!("{calls} relation evaluations"));
    }
    let mut terms = Vec::new();
    for p in &out.last().levels {
        let weights = Tensor::full(s.tape.shape(p.scores), 1.0);
        terms.push(s.tape.dot(p.scores, weights));
    }
    let loss = s.tape.add_n(&terms);
    let touched = s.touched();
    let mut g = s.tape.backward(loss);
    let grads = s.param_grads(&mut g);
    for (name, grad) in &grads {
        if name.starts_with("relations.") || name.starts_with("inference.gru") {
            checked += 1;
            if touched.contains(name) || grad.max_abs() != 0.0 {
                problems.push(format!("{name} touched"));
            }
        }
    }

    let image = crate::data::image_batch::<f64>(&batch.iter().collect::<Vec<_>>())?;
    let a = full.predict(&params, &image, 0)?;
    let base_params = baseline.init_params::<f64>(seed);
    let b = baseline.predict(&base_params, &image, baseline.config.iterations)?;
    checked += a.len();
    if a != b {
        problems.push("T=0 and Baseline predictions differ".into());
    }
    let detail = if problems.is_empty() {
        format!("{checked} relation/recurrent parameters untouched with zero gradient; T=0 output equals Baseline bit for bit")
    } else {
        problems.join("; ")
    };
    Ok(finish("T=0 degeneracy", started, checked, problems.len(), problems.is_empty(), detail))
}

/// `metrics()` against a direct per-pixel recount on random 8×8 label pairs.
pub fn metric_oracle(pairs: usize, seed: u64) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 7;
    let mut failures = 0;
    for _ in 0..pairs {
        // skewed draws so some classes are absent in gt, pred or both
        let upper = rng.gen_range(2..=k);
        let gt: Vec<usize> = (0..64).map(|_| rng.gen_range(0..upper)).collect();
        let pred: Vec<usize> = (0..64).map(|_| rng.gen_range(0..k)).collect();
        let include_background = rng.gen_bool(0.5);
        let r = metrics(&confusion(&pred, &gt, k)?, MetricOptions { background: 0, include_background })?;
        let mut ious = Vec::new();
        let mut recalls = Vec::new();
        let mut correct = 0u64;
        let mut fg = (0u64, 0u64);
        for c in 0..k {
            let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
            for (&p, &g) in pred.iter().zip(&gt) {
                match (p == c, g == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fnn += 1,
                    _ => {}
                }
            }
            correct += tp;
            if c != 0 {
                fg.0 += tp;
                fg.1 += tp + fnn;
            }
            if c == 0 && !include_background {
                continue;
            }
            if tp + fp + fnn > 0 {
                ious.push(tp as f64 / (tp + fp + fnn) as f64);
            }
            if tp + fnn > 0 {
                recalls.push(tp as f64 / (tp + fnn) as f64);
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let ok = r.miou == mean(&ious)
            && r.mean_acc == mean(&recalls)
            && r.pix_acc == correct as f64 / 64.0
            && r.fg_acc == if fg.1 == 0 { 0.0 } else { fg.0 as f64 / fg.1 as f64 }
            && r.confusion.total() == 64;
        if !ok {
            failures += 1;
        }
    }
    let detail = format!("{pairs} random 8x8 pairs, exact equality of mIoU, meanAcc, pixAcc, fgAcc");
    Ok(finish("metric oracle", started, pairs, failures, failures == 0, detail))
}

/// Parent = union of children and disjoint leaves for generated samples and
/// their augmented copies.
pub fn pyramid_consistency(h: &ValidatedHierarchy, samples: usize, seed: u64) -> Result<SuiteResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = TrainConfig::default();
    let mut failures = 0;
    let mut checked = 0;
    for i in 0..samples {
        let cfg = SyntheticConfig { seed: seed.wrapping_add(i as u64), figures_per_image: rng.gen_range(0..=2), ..SyntheticConfig::default() };
        let s = generate_sample(&cfg, cfg.sample_seed(i), h)?;
        let p = crate::training::draw_augment(&mut rng, s.image.width, s.image.height, &train);
        let aug = apply_augment(&s, p, train.crop_size, h)?;
        let flipped = apply_augment(&s, AugmentParams { flip: true, ..AugmentParams::identity() }, s.image.width, h)?;
        for x in [&s, &aug, &flipped] {
            checked += 1;
            if !pyramid_is_consistent(&x.pyramid, h) {
                failures += 1;
            }
        }
    }
    let detail = format!("{samples} generated samples with one random and one mirrored augmentation each");
    Ok(finish("pyramid consistency", started, checked, failures, failures == 0, detail))
}

/// Config for the short training runs of the determinism suites.
pub fn short_run_config(total_iters: usize, seed: u64) -> TrainConfig {
    TrainConfig { total_iters, batch_size: 2, crop_size: 32, deterministic: true, seed, base_lr: 0.01, ..TrainConfig::default() }
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| crate::Error::io(format!("listing {}", d.display()), e))? {
            let e = e.map_err(|e| crate::Error::io("listing checkpoint", e))?;
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("inside dir").to_string_lossy().to_string();
                out.insert(rel, fs::read(&path).map_err(|e| crate::Error::io(format!("reading {}", path.display()), e))?);
            }
        }
    }
    Ok(out)
}

/// Two identical deterministic runs write byte-identical checkpoints.
pub fn determinism(h: &ValidatedHierarchy, steps: usize, seed: u64, scratch: &Path) -> Result<SuiteResult> {
    let started = Instant::now();
    let data = generate_dataset(&SyntheticConfig { image_size: 32, seed, ..SyntheticConfig::default() }, 16, h)?;
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let dir = scratch.join(format!("determinism-{run}"));
        let _ = fs::remove_dir_all(&dir);
        let mut t = Trainer::<f32>::new(short_run_config(steps, seed), h.clone(), &data, Some(dir.clone()))?;
        t.run(|_| {})?;
        dirs.push(dir_bytes(&dir.join("final"))?);
    }
    let differing: Vec<&String> = dirs[0].iter().filter(|(k, v)| dirs[1].get(*k) != Some(v)).map(|(k, _)| k).collect();
    let same = differing.is_empty() && dirs[0].len() == dirs[1].len();
    let detail = format!("{steps} steps twice; {} checkpoint files, {} differ", dirs[0].len(), differing.len());
    Ok(finish("determinism", started, dirs[0].len(), differing.len(), same, detail))
}

/// Save, load and continue equals an uninterrupted run bit for bit.
pub fn checkpoint_roundtrip(h: &ValidatedHierarchy, first: usize, more: usize, seed: u64, scratch: &Path) -> Result<SuiteResult> {
    let started = Instant::now();
    let data = generate_dataset(&SyntheticConfig { image_size: 32, seed, ..SyntheticConfig::default() }, 16, h)?;
    let cfg = short_run_config(first + more, seed);
    let mut straight = Trainer::<f32>::new(cfg.clone(), h.clone(), &data, None)?;
    straight.run(|_| {})?;

    let mut part = Trainer::<f32>::new(cfg, h.clone(), &data, None)?;
    part.run_until(first, |_| {})?;
    let dir = scratch.join("roundtrip");
    part.checkpoint().save(&dir)?;
    let loaded = Checkpoint::<f32>::load(&dir)?;
    loaded.check_hierarchy(h)?;
    let mut resumed = Trainer::resume(loaded, h.clone(), &data, None)?;
    resumed.run(|_| {})?;

    let mut failures = 0;
    let mut checked = 0;
    for (name, p) in straight.state.params.iter() {
        checked += 2;
        let q = resumed.state.params.value(name);
        if p.value.data().iter().zip(q.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures += 1;
        }
        let (va, vb) = (&straight.state.optimizer.velocity[name], &resumed.state.optimizer.velocity[name]);
        if va.data().iter().zip(vb.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures += 1;
        }
    }
    let ok = failures == 0 && straight.state.step == resumed.state.step;
    let detail = format!("{first} steps, save, load, {more} more vs {} straight; {failures} tensors differ", first + more);
    Ok(finish("checkpoint round-trip", started, checked, failures, ok, detail))
}

/// The training-independent suites run by the command-line `verify`.
pub fn structural_suites(h: &ValidatedHierarchy, seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        gradient_fidelity(h, 500, seed)?,
        attention_normalization(h, 100, seed)?,
        degeneracy(h, seed)?,
        metric_oracle(1000, seed)?,
        pyramid_consistency(h, 1000, seed)?,
    ])
}
