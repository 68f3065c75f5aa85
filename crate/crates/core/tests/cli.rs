use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fenceguide::imagecore::save_image;
use fenceguide::synth::{sample_scene, SynthConfig};

fn fenceguide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fenceguide")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("synth.cfg");
    fs::write(&p, "# tiny scenes\nwidth = 64\nheight = 64\nfg_shift_max = 10\ncell_max = 20\n").unwrap();
    p.display().to_string()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = fenceguide(&["bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in ["edges", "guidance", "dcl", "dcl-gradcheck", "synth", "train", "predict", "eval"] {
        let o = fenceguide(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
    }
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.png");
    let o = fenceguide(&["edges", "--in", "/nonexistent/x.png", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "tau = 90\nflux_capacitor = 1\n").unwrap();
    let o = fenceguide(&["dcl-gradcheck", "--config", cfg.to_str().unwrap(), "--masks", "1", "--size", "6"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("flux_capacitor"));
}

#[test]
fn guidance_writes_fm_and_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { width: 128, height: 128, fg_shift_max: 12, ..Default::default() };
    let scene = sample_scene(&cfg, 3).unwrap();
    let (l, r) = (dir.path().join("l.png"), dir.path().join("r.png"));
    save_image(&scene.left, &l).unwrap();
    save_image(&scene.right, &r).unwrap();
    let fm = dir.path().join("fm.png");
    let curve = dir.path().join("curve.csv");
    let o = fenceguide(&[
        "guidance",
        "--left",
        l.to_str().unwrap(),
        "--right",
        r.to_str().unwrap(),
        "--out",
        fm.to_str().unwrap(),
        "--max-shift",
        "14",
        "--dump-curve",
        curve.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("tau=100"), "effective config is logged: {text}");
    assert!(text.contains("event=guidance best_shift="));
    assert!(fm.exists());
    assert_eq!(fs::read_to_string(&curve).unwrap().lines().count(), 16);
}

#[test]
fn json_mode_prints_objects() {
    let o = fenceguide(&["--json", "dcl-gradcheck", "--masks", "2", "--size", "8"]);
    assert_eq!(o.status.code(), Some(0));
    for line in stdout(&o).lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("each line is JSON");
        assert!(v.get("event").is_some());
    }
}

#[test]
fn synth_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = fenceguide(&[
            "synth", "--config", &cfg, "--train", "4", "--test", "1", "--seed", "42", "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert_eq!(ta.len(), 21, "20 images plus the manifest");
    assert_eq!(ta, tb);
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    let manifest = data.join("manifest.jsonl");
    let model = dir.path().join("model.bin");
    let preds = dir.path().join("preds");
    let report = dir.path().join("report.csv");
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--config", &cfg, "--train", "6", "--test", "2", "--out", d],
        vec![
            "train", "--manifest", manifest.to_str().unwrap(), "--out", model.to_str().unwrap(), "--epochs", "2",
            "--lr", "0.01",
        ],
        vec![
            "predict", "--model", model.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(), "--out-dir",
            preds.to_str().unwrap(),
        ],
    ];
    for s in &steps {
        let o = fenceguide(s);
        assert_eq!(o.status.code(), Some(0), "{s:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let gt_dir = data.join("test");
    let o = fenceguide(&[
        "eval", "--pred-dir", preds.to_str().unwrap(), "--gt-dir", gt_dir.to_str().unwrap(), "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 2);
    assert!(dir.path().join("checkpoints/history.csv").exists());
    assert!(dir.path().join("checkpoints/checkpoint_002.bin").exists());
}
