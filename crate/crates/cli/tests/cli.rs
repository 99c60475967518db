use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hparse_core::data::read_manifest;

fn hparse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hparse"))
        .args(args)
        .current_dir(cwd)
        .env("PARSER_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstdout {}\nstderr {}", out.status, String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_string_lossy().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_twice_gives_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&hparse(&["gen-data", "--n", "4", "--seed", "7", "--out", "a"], tmp.path()));
    ok(&hparse(&["gen-data", "--n", "4", "--seed", "7", "--out", "b"], tmp.path()));
    let (mut a, mut b) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    // The run manifests record their own --out argument.
    a.remove("run.json");
    b.remove("run.json");
    assert_eq!(a.len(), 9);
    assert_eq!(a, b);
}

#[test]
fn gen_data_with_zero_samples_writes_a_valid_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&hparse(&["gen-data", "--n", "0", "--out", "d"], tmp.path()));
    let m = read_manifest(&tmp.path().join("d")).unwrap();
    assert!(m.samples.is_empty());
}

#[test]
fn gen_data_defaults_to_64_pixel_images() {
    let tmp = tempfile::tempdir().unwrap();
    let help = hparse(&["gen-data", "--help"], tmp.path());
    ok(&help);
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.lines().any(|l| l.contains("--size") && l.contains("[default: 64]")), "{text}");
    ok(&hparse(&["gen-data", "--n", "1", "--out", "d"], tmp.path()));
    let m = read_manifest(&tmp.path().join("d")).unwrap();
    let img = hparse_core::data::read_rgb_png(&tmp.path().join("d").join(&m.samples[0].image)).unwrap();
    assert_eq!((img.width, img.height), (64, 64));
}

#[test]
fn verify_passes_on_a_fresh_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hparse(&["verify", "--out", "verify.json"], tmp.path());
    ok(&out);
    let results: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(tmp.path().join("verify.json")).unwrap()).unwrap();
    assert!(results.len() >= 4);
    assert!(results.iter().all(|r| r["passed"] == true));
}

#[test]
fn eval_of_groundtruth_copy_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&hparse(&["gen-data", "--n", "3", "--size", "32", "--out", "d"], tmp.path()));
    fs::create_dir(tmp.path().join("pred")).unwrap();
    for e in fs::read_dir(tmp.path().join("d/labels")).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, tmp.path().join("pred").join(p.file_name().unwrap())).unwrap();
    }
    ok(&hparse(&["eval", "--data", "d", "--predictions", "pred", "--out", "ev"], tmp.path()));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["miou"], 1.0);
    assert_eq!(report["report"]["pix_acc"], 1.0);
    let run: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("ev/run.json")).unwrap()).unwrap();
    assert_eq!(run["status"], "ok");
    assert!(run["started"].is_null(), "deterministic runs carry no timestamps");
}

#[test]
fn infer_differs_between_zero_and_two_iterations() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&hparse(&["gen-data", "--n", "6", "--size", "32", "--out", "d"], dir));
    ok(&hparse(&["train", "--data", "d", "--out", "run", "--steps", "20", "--batch-size", "2", "--crop", "32", "--lr", "0.02"], dir));
    assert!(dir.join("run/final/manifest.json").exists());
    assert_eq!(fs::read_to_string(dir.join("run/train.jsonl")).unwrap().lines().count(), 20);
    for t in ["0", "2"] {
        ok(&hparse(&["infer", "--checkpoint", "run", "--input", "d/images", "--out", &format!("t{t}"), "--T", t, "--scales", "1"], dir));
    }
    let (a, b) = (files(&dir.join("t0")), files(&dir.join("t2")));
    for name in ["00000_level1.png", "00000_level1_probs.f32", "00000_overlay.png", "00000.json"] {
        assert!(a.contains_key(name) && b.contains_key(name), "{name} missing");
    }
    assert!(b.keys().any(|k| k.starts_with("00000_att_decomposition_")));
    assert!(!a.keys().any(|k| k.contains("_att_")), "T=0 has no attention maps");
    assert_ne!(a["00000_level1_probs.f32"], b["00000_level1_probs.f32"]);
    let levels = fs::read(dir.join("t2/00000_level1_probs.f32")).unwrap();
    assert_eq!(levels.len(), 4 * 7 * 32 * 32);
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(hparse(&["no-such-command"], dir).status.code(), Some(2));
    assert_eq!(hparse(&["gen-data", "--n", "x", "--out", "d"], dir).status.code(), Some(2));
    let missing = hparse(&["eval", "--data", "missing", "--predictions", "p", "--out", "e"], dir);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());

    ok(&hparse(&["gen-data", "--n", "2", "--size", "16", "--out", "d"], dir));
    fs::write(dir.join("d/images/00000.png"), b"not a png").unwrap();
    let broken = hparse(&["train", "--data", "d", "--out", "run", "--steps", "1", "--crop", "16"], dir);
    assert_eq!(broken.status.code(), Some(1), "{}", String::from_utf8_lossy(&broken.stderr));
}
