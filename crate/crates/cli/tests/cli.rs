use std::path::Path;
use std::process::{Command, Output};

use pcno_core::{read_dataset, Checkpoint};

fn pcno(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcno")).args(args).current_dir(cwd).output().expect("spawn pcno")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_TRAIN: &str = r#"{
  "train": {
    "model": { "width": 4, "layers": 1, "z_t": 2, "z_x": 2, "z_e": 2, "proj_hidden": 8 },
    "epochs": 2, "batch_size": 2, "n_data": 3, "n_pde": 2,
    "data_grid": null, "pde_grid": null, "val_fraction": 0.34
  }
}"#;

/// Coarse datasets: 16 time rows and {7, 6, 5} grid points.
fn coarse_sets(dir: &Path) {
    for (n, seed, extra) in [("4", "1", None), ("2", "50", Some("--physics-only"))] {
        let out = if extra.is_some() { "pde.pcno" } else { "data.pcno" };
        let mut a = vec!["gen-data", "--n", n, "--seed", seed, "--dt", "5400", "--dx", "10000", "--out", out];
        a.extend(extra);
        let o = pcno(&a, dir);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
}

#[test]
fn simulate_constant_boundaries_is_steady_with_paper_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcno(&["simulate", "--dt", "640", "--dx", "400", "--out", "sim"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sim/manifest.json")).unwrap()).unwrap();
    let shapes: Vec<(u64, u64)> =
        m["shapes"].as_array().unwrap().iter().map(|s| (s["nt"].as_u64().unwrap(), s["nx"].as_u64().unwrap())).collect();
    assert_eq!(shapes, vec![(136, 151), (136, 126), (136, 101)]);
    for p in ["pipe1.csv", "pipe2.csv", "pipe3.csv"] {
        assert!(dir.path().join("sim").join(p).exists());
    }
    let (_, s) = read_dataset(&dir.path().join("sim/simulation.pcno")).unwrap();
    let f = s[0].target.as_ref().unwrap();
    for field in f.flow.iter().chain(&f.pressure) {
        for t in 1..field.nt {
            for x in 0..field.nx {
                let (a, b) = (field.get(0, x), field.get(t, x));
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "t={t} x={x}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn missing_network_exits_1_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcno(&["simulate", "--network", "absent.json", "--out", "sim"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("absent.json"));
    assert!(!dir.path().join("sim").exists());
}

#[test]
fn bad_usage_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&pcno(&["gen-data", "--n", "many"], dir.path())), 1);
    assert_eq!(code(&pcno(&["no-such-command"], dir.path())), 1);
    std::fs::write(dir.path().join("c.json"), r#"{"seeed": 3}"#).unwrap();
    let o = pcno(&["gen-data", "--config", "c.json", "--n", "1", "--out", "x.pcno"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("seeed"));
}

#[test]
fn gen_data_is_reproducible_and_rejects_empty() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.pcno", "b.pcno"] {
        let o = pcno(&["gen-data", "--n", "1", "--seed", "7", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a.pcno")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.pcno")).unwrap());
    let (m, s) = read_dataset(&dir.path().join("a.pcno")).unwrap();
    assert_eq!(s[0].seed, 7);
    assert_eq!(m.generation["config"]["seed"], 7);
    assert_eq!(m.generation["config"]["grid"]["dt"], 640.0);

    let o = pcno(&["gen-data", "--n", "0", "--out", "c.pcno"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("c.pcno").exists());
}

#[test]
fn non_converging_generation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"solver": {"max_iters": 1, "newton_tol": 1e-300}}"#).unwrap();
    let o = pcno(&["gen-data", "--config", "c.json", "--n", "3", "--dt", "5400", "--dx", "10000", "--out", "x.pcno"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("time index"), "{}", stderr(&o));
    assert!(!dir.path().join("x.pcno").exists());
}

#[test]
fn export_of_identical_fields_has_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcno(&["gen-data", "--n", "1", "--seed", "3", "--dt", "5400", "--dx", "10000", "--out", "d.pcno"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = pcno(&["export-plots", "--data", "d.pcno", "--prediction", "d.pcno", "--out", "plots"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plots = dir.path().join("plots");
    for pipe in [1, 2, 3] {
        for q in ["M", "P"] {
            let stem = plots.join(format!("sample3_pipe{pipe}_{q}_error"));
            let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
            assert!(csv.split([',', '\n']).filter(|v| !v.is_empty()).all(|v| v.parse::<f64>().unwrap() == 0.0));
            let dec = png::Decoder::new(std::fs::File::open(stem.with_extension("png")).unwrap());
            let mut r = dec.read_info().unwrap();
            let mut buf = vec![0; r.output_buffer_size()];
            r.next_frame(&mut buf).unwrap();
            assert!(buf.iter().all(|&b| b == 0));
            assert!(plots.join(format!("sample3_pipe{pipe}_{q}_pred.png")).exists());
        }
    }
}

#[test]
fn train_eval_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    coarse_sets(dir.path());
    std::fs::write(dir.path().join("t.json"), TINY_TRAIN).unwrap();
    for out in ["r1", "r2"] {
        let o = pcno(
            &["train", "--config", "t.json", "--data", "data.pcno", "--pde", "pde.pcno", "--out", out, "--seed", "4"],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["final.pcno", "best.pcno", "train_log.csv", "manifest.json"] {
        let a = std::fs::read(dir.path().join("r1").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("r2").join(f)).unwrap(), "{f}");
    }
    let ck = Checkpoint::load(&dir.path().join("r1/final.pcno")).unwrap();
    assert_eq!(ck.config.width, 4);
    assert_eq!(ck.meta["train_config"]["seed"], 4);

    let mut reports = Vec::new();
    for out in ["e1.json", "e2.json"] {
        let o = pcno(
            &["eval", "--checkpoint", "mix=r1/final.pcno", "--test", "seen=data.pcno", "--out", out],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let table = String::from_utf8_lossy(&o.stdout).into_owned();
        assert!(table.lines().count() == 2 && table.contains("seen (5400s×10000m)") && table.contains("mix [PCNO]"));
        reports.push(std::fs::read(dir.path().join(out)).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn unreadable_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    coarse_sets(dir.path());
    std::fs::write(dir.path().join("bad.pcno"), b"not a checkpoint").unwrap();
    let o = pcno(&["eval", "--checkpoint", "bad.pcno", "--test", "data.pcno"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.pcno"));
}
