//! End-to-end acceptance checks, one `[PASS]`/`[FAIL]` line per check. Runs
//! without the libtest harness so the lines are printed even on success.
//!
//! The ablation checks train 6 variants × 3 seeds for 2000 steps on 64×64
//! synthetic data, which takes about an hour on one core.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use hparse_core::data::{generate_dataset, Sample, SyntheticConfig};
use hparse_core::evaluation::{ablate, AblationSuite, AblationTable, MetricOptions, Variant};
use hparse_core::hierarchy::ValidatedHierarchy;
use hparse_core::training::TrainConfig;
use hparse_core::verify::{self, SuiteResult};

fn h() -> ValidatedHierarchy {
    ValidatedHierarchy::pascal6()
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn report(r: SuiteResult, limit_seconds: f64) -> bool {
    let in_time = r.seconds <= limit_seconds;
    println!("{r} (limit {limit_seconds:.0}s{})", if in_time { "" } else { ", EXCEEDED" });
    r.passed && in_time
}

fn attention_normalization() -> bool {
    report(verify::attention_normalization(&h(), 100, 11).unwrap(), 60.0)
}

fn gradient_fidelity() -> bool {
    report(verify::gradient_fidelity(&h(), 500, 12).unwrap(), 600.0)
}

fn zero_iterations_match_baseline() -> bool {
    report(verify::degeneracy(&h(), 13).unwrap(), 60.0)
}

fn metric_oracle() -> bool {
    report(verify::metric_oracle(1000, 14).unwrap(), 60.0)
}

fn pyramid_consistency() -> bool {
    report(verify::pyramid_consistency(&h(), 1000, 15).unwrap(), 120.0)
}

fn deterministic_training() -> bool {
    report(verify::determinism(&h(), 40, 16, &scratch("determinism")).unwrap(), 600.0)
}

fn checkpoint_round_trip() -> bool {
    report(verify::checkpoint_roundtrip(&h(), 10, 10, 17, &scratch("roundtrip")).unwrap(), 300.0)
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Full-model recipe shared by every ablation variant.
fn ablation_train_config() -> TrainConfig {
    TrainConfig { base_lr: 0.02, scale_range: (1.0, 1.0), total_iters: 2000, deterministic: true, ..TrainConfig::default() }
}

fn benchmark(n: usize, seed: u64, h: &ValidatedHierarchy) -> Vec<Sample> {
    generate_dataset(&SyntheticConfig { image_size: 64, seed, ..SyntheticConfig::default() }, n, h).unwrap()
}

/// Relation rows plus the iteration sweep, trained once and shared.
fn ablation() -> &'static AblationTable {
    static TABLE: OnceLock<AblationTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let h = h();
        let started = Instant::now();
        let train = benchmark(2000, 101, &h);
        let test = benchmark(500, 202, &h);
        let suite = AblationSuite {
            variants: vec![
                Variant::FULL,
                Variant::TypedNoAdapt,
                Variant::TypeAgnostic,
                Variant::Baseline,
                Variant::Iterations(1),
                Variant::Iterations(3),
            ],
            seeds: SEEDS.to_vec(),
            train: ablation_train_config(),
            scales: vec![1.0],
            flip: false,
            metric: MetricOptions::default(),
        };
        let out = scratch("ablation");
        let table = ablate(&suite, &h, &train, &test, Some(&out), |r| {
            println!("  {:<16} seed {} mIoU {:6.2}  loss {:.3}", r.name, r.seed, 100.0 * r.miou, r.final_loss);
        })
        .unwrap();
        std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table).unwrap()).unwrap();
        println!("{}", table.text());
        println!("ablation finished in {:.0}s", started.elapsed().as_secs_f64());
        table
    })
}

fn median(t: &AblationTable, v: Variant) -> f64 {
    100.0 * t.median_miou(v).expect("variant was trained")
}

fn ablation_ordering() -> bool {
    let t = ablation();
    let full = median(t, Variant::FULL);
    let no_adapt = median(t, Variant::TypedNoAdapt);
    let agnostic = median(t, Variant::TypeAgnostic);
    let base = median(t, Variant::Baseline);
    let ordered = full > no_adapt && no_adapt > agnostic && agnostic > base;
    let gap = full - base;
    let passed = ordered && gap >= 2.0;
    println!(
        "[{}] ablation ordering: median mIoU full {full:.2} > no-adapt {no_adapt:.2} > agnostic {agnostic:.2} > baseline {base:.2} is {ordered}; full - baseline = {gap:.2} (need >= 2.00)",
        if passed { "PASS" } else { "FAIL" }
    );
    passed
}

fn iteration_sweep() -> bool {
    let t = ablation();
    let m0 = median(t, Variant::Baseline);
    let m1 = median(t, Variant::Iterations(1));
    let m2 = median(t, Variant::FULL);
    let m3 = median(t, Variant::Iterations(3));
    let rising = m2 > m1 && m1 > m0;
    let diminishing = m3 - m2 < m2 - m1;
    let passed = rising && diminishing;
    println!(
        "[{}] iteration sweep: median mIoU T0 {m0:.2}, T1 {m1:.2}, T2 {m2:.2}, T3 {m3:.2}; T2 > T1 > T0 is {rising}; T3 - T2 = {:.2} < T2 - T1 = {:.2} is {diminishing}",
        if passed { "PASS" } else { "FAIL" },
        m3 - m2,
        m2 - m1
    );
    passed
}

/// Ablation checks compare trained models and depend on the seeds; their
/// failures are reported but only abort the run under `ACCEPTANCE_STRICT=1`.
fn main() {
    let checks: [(&str, fn() -> bool, bool); 9] = [
        ("attention normalization", attention_normalization, true),
        ("gradient fidelity", gradient_fidelity, true),
        ("T=0 degeneracy", zero_iterations_match_baseline, true),
        ("metric oracle", metric_oracle, true),
        ("pyramid consistency", pyramid_consistency, true),
        ("ablation ordering", ablation_ordering, false),
        ("iteration sweep", iteration_sweep, false),
        ("determinism", deterministic_training, true),
        ("checkpoint round-trip", checkpoint_round_trip, true),
    ];
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut failed, mut fatal) = (Vec::new(), false);
    for (name, check, required) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        if !check() {
            failed.push(name);
            fatal |= required || strict;
        }
    }
    if failed.is_empty() {
        println!("acceptance: all checks passed");
    } else {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        if fatal {
            std::process::exit(1);
        }
        println!("acceptance: only seed-dependent ablation checks failed (set ACCEPTANCE_STRICT=1 to make them fatal)");
    }
}
