use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use hparse_core::data::{
    generate_dataset, read_dataset, read_label_png, read_rgb_png, write_dataset, write_gray_png, write_label_png, write_rgb_png,
    Dataset, RgbImage, SyntheticConfig, PALETTE,
};
use hparse_core::evaluation::{
    ablate, argmax_channels, confusion, level1_names, metrics, multiscale_infer, AblationSuite, ConfusionMatrix, InferOptions,
    MetricOptions, MetricReport, Variant,
};
use hparse_core::hierarchy::{LabelMap, ValidatedHierarchy};
use hparse_core::inference::{Emit, ParserModel};
use hparse_core::params::{ParamStore, Session};
use hparse_core::training::{deterministic_from_env, Checkpoint, Precision, StepRecord, TrainConfig, Trainer};
use hparse_core::verify;
use hparse_tensor::{Scalar, Tensor};
use log::info;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{AblateArgs, Cli, Command, EvalArgs, GenDataArgs, InferArgs, InferFlags, TrainArgs, VerifyArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configs or inputs.
    Usage(String),
    Runtime(hparse_core::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl From<hparse_core::Error> for CliError {
    fn from(e: hparse_core::Error) -> Self {
        use hparse_core::Error as E;
        match e {
            E::Config(m) => CliError::Usage(m),
            E::Range(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

fn io(context: String) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::Runtime(hparse_core::Error::io(context, e))
}

type CliResult<T> = Result<T, CliError>;

pub fn run(cli: &Cli) -> CliResult<ExitCode> {
    let h = match &cli.hierarchy {
        Some(p) => ValidatedHierarchy::load(p).map_err(|e| CliError::Usage(format!("hierarchy {}: {e}", p.display())))?,
        None => ValidatedHierarchy::pascal6(),
    };
    match &cli.command {
        Command::GenData(a) => gen_data(a, &h),
        Command::Train(a) => train(a, &h),
        Command::Eval(a) => eval(a, &h),
        Command::Infer(a) => infer(a, &h),
        Command::Ablate(a) => ablate_cmd(a, &h),
        Command::Verify(a) => verify_cmd(a, &h),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(v).expect("serializes")).map_err(io(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(io(format!("renaming to {}", path.display())))
}

/// Runs `work` between a "running" and a final manifest in `out`.
fn with_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    work: impl FnOnce(&mut RunManifest) -> CliResult<ExitCode>,
) -> CliResult<ExitCode> {
    let det = deterministic_from_env();
    let mut m = RunManifest::begin(command, config, seed, det);
    m.write(out).map_err(io(format!("writing manifest in {}", out.display())))?;
    let result = work(&mut m);
    let status = match &result {
        Ok(code) if *code == ExitCode::SUCCESS => "ok",
        Ok(_) => "failed",
        Err(_) => "error",
    };
    m.complete(out, status, det).map_err(io(format!("writing manifest in {}", out.display())))?;
    result
}

fn gen_data(a: &GenDataArgs, h: &ValidatedHierarchy) -> CliResult<ExitCode> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SyntheticConfig::default(),
    };
    cfg.image_size = a.size;
    cfg.seed = a.seed;
    if cfg.image_size == 0 {
        return Err(CliError::Usage("--size must be positive".into()));
    }
    with_manifest(&a.out, "gen-data", to_json(&cfg), Some(a.seed), |m| {
        let samples = generate_dataset(&cfg, a.n, h)?;
        write_dataset(&samples, &a.out, h, Some(cfg.clone()))?;
        m.outputs.push(a.out.join("manifest.json"));
        println!("wrote {} samples to {}", samples.len(), a.out.display());
        Ok(ExitCode::SUCCESS)
    })
}

fn load_data(dir: &Path, h: &ValidatedHierarchy) -> CliResult<Dataset> {
    read_dataset(dir, h).map_err(|e| match e {
        hparse_core::Error::Io { .. } | hparse_core::Error::CorruptManifest { .. } => {
            CliError::Usage(format!("cannot read dataset {}: {e}", dir.display()))
        }
        other => other.into(),
    })
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.total_iters = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.crop {
        cfg.crop_size = v;
    }
    if let Some(v) = a.iterations {
        cfg.model.iterations = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(p) = &a.precision {
        cfg.precision = match p.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(CliError::Usage(format!("unknown precision {other}"))),
        };
    }
    cfg.deterministic |= deterministic_from_env();
    cfg.validate()?;
    Ok(cfg)
}

fn log_step(every: usize) -> impl FnMut(&StepRecord) {
    move |r| {
        if r.step % every == 0 {
            info!("step {} lr {:.5} loss {:.4}", r.step, r.lr, r.loss.get("total").copied().unwrap_or(f64::NAN));
        }
    }
}

fn train_run<T: Scalar>(
    cfg: TrainConfig,
    resume: Option<&Path>,
    h: &ValidatedHierarchy,
    data: &Dataset,
    out: &Path,
) -> CliResult<f64> {
    let mut trainer = match resume {
        Some(dir) => {
            let ckpt = Checkpoint::<T>::load(dir)?;
            ckpt.check_hierarchy(h)?;
            Trainer::resume(ckpt, h.clone(), &data.samples, Some(out.to_path_buf()))?
        }
        None => Trainer::<T>::new(cfg, h.clone(), &data.samples, Some(out.to_path_buf()))?,
    };
    let mut last = f64::NAN;
    let mut log = log_step(50);
    trainer.run(|r| {
        last = r.loss["total"];
        log(r);
    })?;
    Ok(last)
}

fn train(a: &TrainArgs, h: &ValidatedHierarchy) -> CliResult<ExitCode> {
    let resume = a.resume.as_deref().map(checkpoint_dir);
    let cfg = match &resume {
        Some(dir) => Checkpoint::<f64>::load(dir)?.config,
        None => train_config(a)?,
    };
    let data = load_data(&a.data, h)?;
    if data.is_empty() {
        return Err(CliError::Usage(format!("dataset {} is empty", a.data.display())));
    }
    with_manifest(&a.out, "train", to_json(&cfg), Some(cfg.seed), |m| {
        let last = match cfg.precision {
            Precision::F32 => train_run::<f32>(cfg.clone(), resume.as_deref(), h, &data, &a.out)?,
            Precision::F64 => train_run::<f64>(cfg.clone(), resume.as_deref(), h, &data, &a.out)?,
        };
        m.outputs.push(a.out.join("final"));
        m.outputs.push(a.out.join("train.jsonl"));
        println!("trained {} steps, final loss {last:.4}; checkpoint {}", cfg.total_iters, a.out.join("final").display());
        Ok(ExitCode::SUCCESS)
    })
}

/// Accepts a checkpoint directory or a training output directory holding `final/`.
fn checkpoint_dir(p: &Path) -> PathBuf {
    let fin = p.join("final");
    if !p.join("manifest.json").exists() && fin.join("manifest.json").exists() {
        fin
    } else {
        p.to_path_buf()
    }
}

struct Loaded {
    model: ParserModel,
    params: ParamStore<f32>,
    config: TrainConfig,
}

fn load_model(path: &Path, h: &ValidatedHierarchy) -> CliResult<Loaded> {
    let dir = checkpoint_dir(path);
    let ckpt = Checkpoint::<f32>::load(&dir).map_err(|e| match e {
        hparse_core::Error::Io { .. } => CliError::Usage(format!("cannot read checkpoint {}: {e}", dir.display())),
        other => other.into(),
    })?;
    ckpt.check_hierarchy(h)?;
    let model = ParserModel::new(h.clone(), ckpt.config.model.clone());
    Ok(Loaded { model, params: ckpt.state.params, config: ckpt.config })
}

fn infer_options(f: &InferFlags, default_iterations: usize) -> InferOptions {
    InferOptions { scales: f.scales.clone(), flip: !f.no_flip, iterations: f.iterations.unwrap_or(default_iterations) }
}

/// Level-1 class index of every pixel of a dataset label map.
fn label_classes(labels: &LabelMap, h: &ValidatedHierarchy) -> CliResult<Vec<usize>> {
    let nodes = h.level_nodes(1);
    let bg = h.background_index();
    labels
        .data
        .iter()
        .map(|&l| {
            if l == bg {
                return Ok(0);
            }
            h.leaf_for_label(l)
                .and_then(|v| nodes.iter().position(|&n| n == v))
                .map(|k| k + 1)
                .ok_or_else(|| CliError::Usage(format!("prediction label {l} is not in the hierarchy")))
        })
        .collect()
}

#[derive(Serialize)]
struct EvalOutput {
    samples: usize,
    options: Option<InferOptions>,
    report: MetricReport,
}

fn eval(a: &EvalArgs, h: &ValidatedHierarchy) -> CliResult<ExitCode> {
    let data = load_data(&a.data, h)?;
    let metric = MetricOptions { include_background: a.include_background, ..MetricOptions::default() };
    let k = h.level_nodes(1).len() + 1;
    let config = serde_json::json!({
        "data": a.data, "checkpoint": a.checkpoint, "predictions": a.predictions,
        "scales": a.infer.scales, "flip": !a.infer.no_flip, "include_background": a.include_background,
    });
    with_manifest(&a.out, "eval", config, None, |m| {
        let mut total = ConfusionMatrix::new(k);
        let mut options = None;
        if let Some(dir) = &a.predictions {
            for (s, e) in data.samples.iter().zip(&data.manifest.samples) {
                let name = Path::new(&e.label).file_name().expect("label entries name a file");
                let path = dir.join(name);
                let pred = read_label_png(&path).map_err(|err| CliError::Usage(format!("{}: {err}", path.display())))?;
                if (pred.width, pred.height) != (s.labels.width, s.labels.height) {
                    return Err(CliError::Usage(format!("{} does not match the ground-truth size", path.display())));
                }
                total.merge(&confusion(&label_classes(&pred, h)?, &s.pyramid.level_classes(h, 1), k)?)?;
            }
        } else {
            let loaded = load_model(a.checkpoint.as_deref().expect("clap requires one source"), h)?;
            let opts = infer_options(&a.infer, loaded.model.config.iterations);
            for (i, s) in data.samples.iter().enumerate() {
                let probs = multiscale_infer(&loaded.model, &loaded.params, &s.image, &opts)?;
                total.merge(&confusion(&argmax_channels(&probs[0]), &s.pyramid.level_classes(h, 1), k)?)?;
                if (i + 1) % 50 == 0 {
                    info!("evaluated {}/{}", i + 1, data.len());
                }
            }
            options = Some(opts);
        }
        let report = metrics(&total, metric)?;
        println!("{}", report.table(&level1_names(h)));
        fs::create_dir_all(&a.out).map_err(io(format!("creating {}", a.out.display())))?;
        let path = a.out.join("metrics.json");
        write_json(&path, &EvalOutput { samples: data.len(), options, report })?;
        m.outputs.push(path);
        Ok(ExitCode::SUCCESS)
    })
}

fn input_images(p: &Path) -> CliResult<Vec<PathBuf>> {
    if p.is_file() {
        return Ok(vec![p.to_path_buf()]);
    }
    let rd = fs::read_dir(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|q| q.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn class_map(classes: &[usize], width: usize, height: usize, level: u8, h: &ValidatedHierarchy) -> LabelMap {
    let nodes = h.level_nodes(level);
    let data = classes
        .iter()
        .map(|&c| match c {
            0 => h.background_index(),
            c if level == 1 => h.label_of_leaf(nodes[c - 1]).unwrap_or(c as u32),
            c => c as u32,
        })
        .collect();
    LabelMap::new(width, height, data)
}

fn overlay(image: &RgbImage, labels: &LabelMap, bg: u32) -> RgbImage {
    let mut data = image.data.clone();
    for (i, &l) in labels.data.iter().enumerate() {
        if l == bg {
            continue;
        }
        let c = PALETTE[l as usize % PALETTE.len()];
        for ch in 0..3 {
            let p = &mut data[3 * i + ch];
            *p = ((*p as u16 + c[ch] as u16) / 2) as u8;
        }
    }
    RgbImage::new(image.width, image.height, data)
}

fn to_gray(plane: &[f32]) -> Vec<u8> {
    plane.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

#[derive(Serialize)]
struct ProbFile {
    level: u8,
    file: String,
    dtype: &'static str,
    shape: Vec<usize>,
    classes: Vec<String>,
}

#[derive(Serialize)]
struct InferRecord {
    input: PathBuf,
    iterations: usize,
    options: InferOptions,
    labels: Vec<String>,
    probabilities: Vec<ProbFile>,
    attention: Vec<String>,
    overlay: String,
}

/// Attention maps of the last iteration at native scale, one grey PNG per channel.
fn write_attention(loaded: &Loaded, image: &RgbImage, iterations: usize, out: &Path, stem: &str) -> CliResult<Vec<String>> {
    const STRIDE: usize = 8;
    let h = &loaded.model.hierarchy;
    let side = |n: usize| ((n as f64 / STRIDE as f64).round() as usize).max(1) * STRIDE;
    let (w, hh) = (side(image.width), side(image.height));
    let planar = image.to_planar::<f32>();
    let planar =
        if (w, hh) == (image.width, image.height) { planar } else { hparse_tensor::kernels::bilinear_resize(&planar, 3, image.height, image.width, hh, w) };
    let mut s = Session::new(&loaded.params, false);
    let img = s.constant(Tensor::new(&[1, 3, hh, w], planar));
    let fwd = loaded.model.forward(&mut s, img, iterations, Emit::Last)?;
    let att = &fwd.last().attention;
    let mut files = Vec::new();
    for (kind, maps) in [("decomposition", &att.decomposition), ("composition", &att.composition), ("dependency", &att.dependency)] {
        for (node, map) in maps.iter() {
            let t = s.tape.value(map.weights);
            let (_, c, ph, pw) = t.dims4();
            for ch in 0..c {
                let name = format!("{stem}_att_{kind}_{}_{ch}.png", h.id(*node));
                write_gray_png(&out.join(&name), pw, ph, &to_gray(&t.data()[ch * ph * pw..(ch + 1) * ph * pw]))?;
                files.push(name);
            }
        }
    }
    Ok(files)
}

fn infer(a: &InferArgs, h: &ValidatedHierarchy) -> CliResult<ExitCode> {
    let loaded = load_model(&a.checkpoint, h)?;
    let opts = infer_options(&a.infer, loaded.model.config.iterations);
    let inputs = input_images(&a.input)?;
    if inputs.is_empty() {
        return Err(CliError::Usage(format!("no PNG images in {}", a.input.display())));
    }
    let config = serde_json::json!({ "checkpoint": a.checkpoint, "input": a.input, "options": opts, "train": loaded.config });
    with_manifest(&a.out, "infer", config, None, |m| {
        let levels = loaded.model.levels();
        for path in &inputs {
            let image = read_rgb_png(path).map_err(|e| CliError::Usage(e.to_string()))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            let probs = multiscale_infer(&loaded.model, &loaded.params, &image, &opts)?;
            let mut record = InferRecord {
                input: path.clone(),
                iterations: opts.iterations,
                options: opts.clone(),
                labels: Vec::new(),
                probabilities: Vec::new(),
                attention: Vec::new(),
                overlay: format!("{stem}_overlay.png"),
            };
            let mut level1 = None;
            for (p, &level) in probs.iter().zip(&levels) {
                let labels = class_map(&argmax_channels(p), image.width, image.height, level, h);
                let name = format!("{stem}_level{level}.png");
                write_label_png(&a.out.join(&name), &labels)?;
                record.labels.push(name);
                let raw = format!("{stem}_level{level}_probs.f32");
                let mut bytes = Vec::with_capacity(p.len() * 4);
                for &v in p.data() {
                    v.write_le(&mut bytes);
                }
                fs::write(a.out.join(&raw), bytes).map_err(io(format!("writing {raw}")))?;
                let classes = std::iter::once("background".to_string())
                    .chain(h.level_nodes(level).into_iter().map(|v| h.id(v).to_string()))
                    .collect();
                record.probabilities.push(ProbFile { level, file: raw, dtype: "f32", shape: p.shape().to_vec(), classes });
                if level == 1 {
                    level1 = Some(labels);
                }
            }
            if let Some(l1) = &level1 {
                write_rgb_png(&a.out.join(&record.overlay), &overlay(&image, l1, h.background_index()))?;
            }
            record.attention = write_attention(&loaded, &image, opts.iterations, &a.out, &stem)?;
            let json = a.out.join(format!("{stem}.json"));
            write_json(&json, &record)?;
            m.outputs.push(json);
            println!("{} -> {}", path.display(), a.out.display());
        }
        Ok(ExitCode::SUCCESS)
    })
}

fn ablate_cmd(a: &AblateArgs, h: &ValidatedHierarchy) -> CliResult<ExitCode> {
    let mut train: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        train.total_iters = s;
    }
    train.deterministic |= deterministic_from_env();
    train.validate()?;
    let variants = match &a.variants {
        Some(names) => names.iter().map(|n| Variant::parse(n)).collect::<hparse_core::Result<Vec<_>>>()?,
        None => Variant::table_rows(),
    };
    if a.seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let suite = AblationSuite {
        variants,
        seeds: a.seeds.clone(),
        train,
        scales: a.scales.clone(),
        flip: a.flip,
        metric: MetricOptions { include_background: a.include_background, ..MetricOptions::default() },
    };
    let train_data = load_data(&a.train, h)?;
    let test_data = load_data(&a.test, h)?;
    if train_data.is_empty() || test_data.is_empty() {
        return Err(CliError::Usage("train and test datasets must be non-empty".into()));
    }
    with_manifest(&a.out, "ablate", to_json(&suite), None, |m| {
        let table = ablate(&suite, h, &train_data.samples, &test_data.samples, Some(&a.out.join("runs")), |r| {
            println!("{:<20} seed {} mIoU {:.2}", r.name, r.seed, 100.0 * r.miou);
        })?;
        let text = table.text();
        println!("{text}");
        let json = a.out.join("ablation.json");
        write_json(&json, &table)?;
        fs::write(a.out.join("ablation.txt"), &text).map_err(io("writing ablation.txt".into()))?;
        m.outputs.push(json);
        m.outputs.push(a.out.join("ablation.txt"));
        Ok(ExitCode::SUCCESS)
    })
}

fn verify_cmd(a: &VerifyArgs, h: &ValidatedHierarchy) -> CliResult<ExitCode> {
    let scratch = std::env::temp_dir().join(format!("hparse-verify-{}", std::process::id()));
    let mut results = verify::structural_suites(h, a.seed)?;
    results.push(verify::determinism(h, 3, a.seed, &scratch)?);
    results.push(verify::checkpoint_roundtrip(h, 2, 2, a.seed, &scratch)?);
    let _ = fs::remove_dir_all(&scratch);
    for r in &results {
        println!("{r}");
    }
    if let Some(path) = &a.out {
        write_json(path, &results)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        println!("{failed} of {} suites failed", results.len());
        return Ok(ExitCode::from(3));
    }
    println!("all {} suites passed", results.len());
    Ok(ExitCode::SUCCESS)
}
