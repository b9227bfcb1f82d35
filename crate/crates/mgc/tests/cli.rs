//! End-to-end behaviour of the `mgc` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mgc::jsonl::{CorrLine, LocalizeLine, MatchLine};
use rand::{Rng, SeedableRng};
use serde::de::DeserializeOwned;

fn mgc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgc")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn parse_lines<T: DeserializeOwned>(text: &str) -> Vec<T> {
    text.lines().map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("invalid JSON line {l:?}: {e}"))).collect()
}

/// A model small enough to train in well under a second per step.
const TINY: &str = "\
vit.image_side = 32
vit.patch_size = 8
vit.embed_dim = 16
vit.depth = 1
vit.num_heads = 2
heads.projector = 32,16
heads.predictor = 32,16
augment.output_side = 32
loss.granularities = 1,2,4
loss.counts = 4,2,1
data.count = 6
data.side = 64
batch_size = 2
epochs = 3
warmup_epochs = 1
log_every = 2
checkpoint_every = 3
";

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn identical_crops_give_196_singletons() {
    let o = mgc(&["dump-corr", "--crop1", "0,0,224,224", "--crop2", "0,0,224,224", "--granularities", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<CorrLine> = parse_lines(&String::from_utf8(o.stdout).unwrap());
    assert_eq!(lines.len(), 196);
    for l in &lines {
        assert_eq!(l.keys, vec![(l.k, l.l, 1.0)]);
    }
}

#[test]
fn disjoint_crops_warn_and_emit_nothing() {
    let o = mgc(&["dump-corr", "--crop1", "0,0,50,50", "--crop2", "100,100,50,50"]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
}

#[test]
fn malformed_specs_exit_2() {
    assert_eq!(code(&mgc(&["dump-corr", "--crop1", "0,0,50", "--crop2", "0,0,50,50"])), 2);
    assert_eq!(code(&mgc(&["dump-corr", "--crop1", "0,0,50,50", "--crop2", "0,0,50,50", "--granularities", "3"])), 2);
    assert_eq!(code(&mgc(&["localize", "--crop1", "0,0,50,50", "--crop2", "0,0,50,50", "--key", "0"])), 2);
    assert_eq!(code(&mgc(&["no-such-command"])), 2);
}

#[test]
fn oracle_dump_matches_fast_dump_on_random_pairs() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let spec = |rng: &mut rand_chacha::ChaCha8Rng| {
            let w: f64 = rng.random_range(40.0..256.0);
            let h: f64 = rng.random_range(40.0..256.0);
            let x = rng.random_range(0.0..256.0 - w);
            let y = rng.random_range(0.0..256.0 - h);
            format!("{x},{y},{w},{h},{}", rng.random_bool(0.5) as u8)
        };
        let (a, b) = (spec(&mut rng), spec(&mut rng));
        let fast = mgc(&["dump-corr", "--crop1", &a, "--crop2", &b]);
        let slow = mgc(&["dump-corr", "--crop1", &a, "--crop2", &b, "--oracle"]);
        let fast: Vec<CorrLine> = parse_lines(&String::from_utf8(fast.stdout).unwrap());
        let slow: Vec<CorrLine> = parse_lines(&String::from_utf8(slow.stdout).unwrap());
        let table = |lines: &[CorrLine]| {
            let mut m = std::collections::BTreeMap::new();
            for q in lines {
                for &(s, t, w) in &q.keys {
                    m.insert((q.c, q.k, q.l, s, t), w);
                }
            }
            m
        };
        let (f, s) = (table(&fast), table(&slow));
        for key in f.keys().chain(s.keys()) {
            let d = (f.get(key).unwrap_or(&0.0) - s.get(key).unwrap_or(&0.0)).abs();
            if d > 1e-12 && !(f.contains_key(key) && s.contains_key(key)) {
                eprintln!("{a} {b} {key:?} fast {:?} oracle {:?}", f.get(key), s.get(key));
            }
            worst = worst.max(d);
        }
    }
    println!("max abs diff over 100 pairs: {worst:.3e}");
    assert!(worst <= 1e-9);
}

#[test]
fn localize_examples() {
    let o = mgc(&["localize", "--crop1", "0,0,224,224", "--crop2", "0,0,224,224", "--key", "0,0"]);
    assert_eq!(code(&o), 0);
    let lines: Vec<LocalizeLine> = parse_lines(&String::from_utf8(o.stdout).unwrap());
    assert_eq!(lines.len(), 1);
    assert_eq!((lines[0].x, lines[0].error_x, lines[0].valid_x), (0.0, 0.0, true));

    let o = mgc(&["localize", "--crop1", "0,0,224,224", "--crop2", "8,0,224,224", "--key", "0,0", "--c", "1"]);
    let lines: Vec<LocalizeLine> = parse_lines(&String::from_utf8(o.stdout).unwrap());
    let j0 = lines.iter().find(|l| l.l == 0).unwrap();
    let j1 = lines.iter().find(|l| l.l == 1).unwrap();
    assert_eq!((j0.x, j0.error_x, j0.valid_x), (-8.0, 0.0, true));
    assert!(!j1.valid_x);

    let o = mgc(&["localize", "--crop1", "0,0,50,50", "--crop2", "100,100,50,50", "--key", "0,0"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no overlap"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let o = mgc(&["pretrain", "--config", "/nonexistent/run.cfg", "--out", out]);
    assert_eq!(code(&o), 2);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 1\nvit.embed = 3\n").unwrap();
    let o = mgc(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("line 2") && err.contains("vit.embed_dim"), "{err}");
    let o = mgc(&["pretrain", "--out", out, "--set", "epochs=1", "--set", "warmup_epochs=1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = mgc(&["pretrain", "--config", &cfg, "--set", "epochs=0", "--set", "warmup_epochs=0", "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut ckpts: Vec<String> =
        fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).filter(|n| n.ends_with(".mgc")).collect();
    ckpts.sort();
    assert_eq!(ckpts, vec!["ckpt-000000.mgc"]);
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn unwritable_output_is_reported_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"").unwrap();
    let cfg = write_config(dir.path(), "");
    let o = mgc(&["pretrain", "--config", &cfg, "--out", blocker.join("out").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("output directory"), "{}", stderr(&o));
}

fn metrics(dir: &Path) -> Vec<serde_json::Value> {
    let mut v: Vec<serde_json::Value> = parse_lines(&fs::read_to_string(dir.join("metrics.jsonl")).unwrap());
    for m in &mut v {
        m.as_object_mut().unwrap().remove("wall_time");
    }
    v
}

#[test]
fn pretrain_logs_and_resumes_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let full = dir.path().join("full");
    let o = mgc(&["pretrain", "--config", &cfg, "--out", full.to_str().unwrap(), "--seed", "3", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // 6 images, batch 2, 3 epochs: 9 updates, logged every 2
    let full_metrics = metrics(&full);
    assert_eq!(full_metrics.len(), 5);
    assert!(full_metrics.iter().all(|m| m["loss"].as_f64().unwrap().is_finite() && m["per_granularity"].is_object()));
    assert!(fs::read_to_string(full.join("config.txt")).unwrap().contains("seed = 3"));

    let part = dir.path().join("part");
    let o = mgc(&["pretrain", "--config", &cfg, "--out", part.to_str().unwrap(), "--seed", "3", "--quiet", "--stop-after", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resume = part.join("ckpt-000003.mgc");
    let o = mgc(&["pretrain", "--resume", resume.to_str().unwrap(), "--out", part.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(metrics(&part), full_metrics);
    let a = fs::read(full.join("last.mgc")).unwrap();
    let b = fs::read(part.join("last.mgc")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_gradient() {
    // The tiny config has strong curvature near its batch norms; the default desk model is used here.
    let o = mgc(&["gradcheck", "--samples", "40"]);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(code(&o), 0, "{text}{}", stderr(&o));
    assert!(text.contains("PASS"), "{text}");
    let o = mgc(&["gradcheck", "--samples", "40", "--corrupt-gradient"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert!(stderr(&o).contains("worst parameter"), "{}", stderr(&o));
}

#[test]
fn seed_override_changes_the_gradcheck_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let loss = |seed: &str| {
        let o = mgc(&["gradcheck", "--config", &cfg, "--samples", "1", "--seed", seed]);
        String::from_utf8_lossy(&o.stdout).lines().next().unwrap().to_string()
    };
    assert_eq!(loss("1"), loss("1"));
    assert_ne!(loss("1"), loss("2"));
}

#[test]
fn image_matches_itself_under_any_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = mgc(&["pretrain", "--out", out.to_str().unwrap(), "--set", "epochs=0", "--set", "warmup_epochs=0", "--set", "data.count=2", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = out.join("ckpt-000000.mgc");
    let img = mgc_core::synthetic::synthetic_image(&Default::default(), 9, 0);
    let path = dir.path().join("a.ppm");
    mgc::ppm::write_image(&path, &img).unwrap();
    for attention in [false, true] {
        let mut args = vec!["match", "--checkpoint", ckpt.to_str().unwrap(), "--image-a", path.to_str().unwrap(), "--image-b", path.to_str().unwrap()];
        if attention {
            args.push("--attention");
        }
        let o = mgc(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let lines: Vec<MatchLine> = parse_lines(&String::from_utf8(o.stdout).unwrap());
        assert_eq!(lines.len(), 196);
        if !attention {
            assert!(lines.iter().all(|m| m.a == m.b && m.similarity == 1.0));
        }
    }
    let o = mgc(&[
        "match", "--checkpoint", ckpt.to_str().unwrap(), "--image-a", path.to_str().unwrap(), "--image-b", path.to_str().unwrap(), "--set", "vit.depth=2",
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
