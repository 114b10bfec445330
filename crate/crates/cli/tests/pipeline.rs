use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use roadfuse::evalkit::{attack_eval, AttackReport};
use roadfuse::geodata::io::{read_ftz, read_image, read_trajectories};
use roadfuse::geodata::{project, segment_distance, RoadPolyline};
use roadfuse::{DualMapper, GeoRegion, Level, LossWeights, ModelConfig, RegionRasters, TrainConfig, Trainer, Widths};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_roadfuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii_end()).expect("stderr is one JSON record")
}

const REGION: (f64, f64, usize) = (41.15, -8.62, 64);

fn region() -> GeoRegion {
    GeoRegion::new(REGION.0, REGION.1, REGION.2, REGION.2, 1.0).unwrap()
}

/// Config for a 64 x 64 region with 32-pixel tiles and a quarter-width model.
fn write_config(dir: &Path, data: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "seed": 5,
        "region": region(),
        "split": { "test": [{ "x0": 32, "y0": 32, "w": 32, "h": 32 }] },
        "paths": {
            "trajectories": data.join("trajectories.csv"),
            "trajectories_header": true,
            "roads": data.join("roads.ndjson"),
            "image": data.join("image.png"),
            "traj_raster": data.join("traj_scaled.ftz"),
            "label_raster": data.join("label.ftz"),
        },
        "width_base": 4,
        "tile_size": 32,
        "train": { "batch_size": 2, "epochs": 4, "max_steps": 3 },
        "synth": { "height": 64, "width": 64 },
        "sweep": { "blur_factors": [1, 2], "noise_sigmas_m": [0.0, 4.0], "resolution": 1.0, "traj_cap": 256 },
    });
    merge(&mut cfg, extra);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

/// Synthetic data plus rasters and labels under `dir`.
fn prepared(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, dir, json!({}));
    let c = cfg.to_str().unwrap();
    let d = dir.to_str().unwrap();
    ok(&["synth", "--config", c, "--out", d]);
    ok(&["rasterize", "--config", c, "--out", d]);
    ok(&["render-gt", "--config", c, "--out", d]);
    cfg
}

#[test]
fn help_lists_flags_with_defaults() {
    let out = ok(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--config", "--seed", "--out", "[default: roadfuse-out]"] {
        assert!(text.contains(flag), "{flag} missing from\n{text}");
    }
    for cmd in ["rasterize", "render-gt", "train", "eval", "attack", "sweep", "gates", "predict"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    let sub = String::from_utf8(ok(&["render-gt", "--help"]).stdout).unwrap();
    assert!(sub.contains("--road-width") && sub.contains("default"));
}

#[test]
fn unknown_flags_fail_with_a_json_record() {
    let out = run(&["train", "--learning-rate", "3"]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert_eq!(err["error"], "usage");
    assert!(err["message"].as_str().unwrap().contains("--learning-rate"));
}

#[test]
fn missing_seed_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["rasterize", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert!(err["message"].as_str().unwrap().contains("seed"), "{err}");
}

#[test]
fn missing_input_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("nowhere"), json!({}));
    let out = run(&["rasterize", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("does not exist"));
}

#[test]
fn empty_trajectory_file_gives_a_zero_raster() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("trajectories.csv"), "").unwrap();
    let cfg = write_config(dir.path(), dir.path(), json!({ "paths": { "trajectories_header": false } }));
    ok(&["rasterize", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let counts = read_ftz(&dir.path().join("traj_count.ftz")).unwrap();
    assert_eq!((counts.height, counts.width), (64, 64));
    assert!(counts.values.iter().all(|&v| v == 0.0));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("rasterize_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["read"], 0);
}

#[test]
fn rasterize_counts_match_a_direct_tally_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let counts = read_ftz(&dir.path().join("traj_count.ftz")).unwrap();
    let mut oracle = vec![0.0f32; 64 * 64];
    let pts = read_trajectories(&dir.path().join("trajectories.csv"), true).unwrap();
    for p in pts.iter().flatten() {
        let (r, c) = project(p.lat, p.lon, &region());
        if (0.0..64.0).contains(&r) && (0.0..64.0).contains(&c) {
            oracle[r as usize * 64 + c as usize] += 1.0;
        }
    }
    assert_eq!(counts.values, oracle);

    let first = std::fs::read(dir.path().join("traj_scaled.ftz")).unwrap();
    let cfg = dir.path().join("config.json");
    ok(&["rasterize", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(std::fs::read(dir.path().join("traj_scaled.ftz")).unwrap(), first);
}

fn label_oracle(roads: &[RoadPolyline], width: f64) -> Vec<f32> {
    let mut out = vec![0.0; 64 * 64];
    for r in 0..64 {
        for c in 0..64 {
            let p = (r as f64 + 0.5, c as f64 + 0.5);
            let hit = roads.iter().any(|road| {
                road.vertices.windows(2).any(|w| {
                    let a = project(w[0][0], w[0][1], &region());
                    let b = project(w[1][0], w[1][1], &region());
                    segment_distance(p, a, b) <= width / 2.0
                })
            });
            out[r * 64 + c] = hit as u8 as f32;
        }
    }
    out
}

#[test]
fn render_gt_follows_the_distance_rule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let (roads, _) = roadfuse::geodata::io::read_roads(&dir.path().join("roads.ndjson")).unwrap();
    let wide = read_ftz(&dir.path().join("label.ftz")).unwrap();
    assert_eq!(wide.values, label_oracle(&roads, 10.0));
    ok(&["render-gt", "--road-width", "6", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let thin = read_ftz(&dir.path().join("label.ftz")).unwrap();
    assert_eq!(thin.values, label_oracle(&roads, 6.0));
    let sum = |v: &[f32]| v.iter().sum::<f32>();
    assert!(sum(&thin.values) < sum(&wide.values));
}

#[test]
fn training_twice_writes_identical_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let c = cfg.to_str().unwrap();
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for r in &runs {
        ok(&["train", "--config", c, "--out", r.to_str().unwrap(), "--seed", "9"]);
    }
    for f in ["train_log.ndjson", "checkpoints/last.json", "checkpoints/last.bin", "train_summary.json"] {
        let a = std::fs::read(runs[0].join(f)).unwrap();
        assert_eq!(a, std::fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(runs[0].join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn resumed_training_continues_the_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path());
    let more = write_config(dir.path(), dir.path(), json!({ "train": { "max_steps": 5 } }));
    let run_dir = dir.path().join("run");
    let r = run_dir.to_str().unwrap();
    ok(&["train", "--config", cfg.to_str().unwrap(), "--out", r]);
    let stem = run_dir.join("checkpoints/last");
    ok(&["train", "--config", more.to_str().unwrap(), "--out", r, "--resume", stem.to_str().unwrap()]);
    let steps: Vec<u64> = std::fs::read_to_string(run_dir.join("train_log.ndjson"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4]);
}

/// A checkpoint whose every predictor says "road" regardless of input.
fn road_everywhere_checkpoint(stem: &Path) {
    let mut m = DualMapper::new(ModelConfig {
        widths: Widths::QUARTER,
        init_seed: 1,
    });
    for l in Level::ALL {
        let conv = m.predictor_at(l).conv.clone();
        conv.zero(&mut m.store);
        m.store.value_mut(conv.bias).data_mut().copy_from_slice(&[-40.0, 40.0]);
    }
    Trainer::new(m, TrainConfig::default(), LossWeights::default()).unwrap().save(stem).unwrap();
}

#[test]
fn eval_of_a_perfect_prediction_has_unit_iou() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let stem = dir.path().join("perfect");
    road_everywhere_checkpoint(&stem);
    // Roads wide enough to cover the whole region make the constant map exact.
    let cfg = write_config(dir.path(), dir.path(), json!({ "paths": { "checkpoint": stem } }));
    let c = cfg.to_str().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&["render-gt", "--road-width", "400", "--config", c, "--out", d]);
    ok(&["eval", "--config", c, "--out", d]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["iou"], 1.0);
    assert_eq!(report["overall"]["tp"], 32 * 32);
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = prepared(dir);
    ok(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    cfg
}

#[test]
fn attack_matches_the_library_call() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    ok(&["attack", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let report: AttackReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("attack.json")).unwrap()).unwrap();

    let (mut model, _) = DualMapper::from_checkpoint(&dir.path().join("checkpoints/last")).unwrap();
    let (image, _) = read_image(&dir.path().join("image.png")).unwrap();
    let rasters = RegionRasters {
        image,
        traj: read_ftz(&dir.path().join("traj_scaled.ftz")).unwrap(),
        label: Some(read_ftz(&dir.path().join("label.ftz")).unwrap()),
    };
    let tile = rasters.crop(32, 32, 32);
    let direct = attack_eval(&mut model, &[tile], 5).unwrap();
    assert_eq!(report, direct);
}

#[test]
fn predict_gates_and_sweep_write_their_artefacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let extra = write_config(dir.path(), dir.path(), json!({ "split": { "test": [{ "x0": 8, "y0": 20, "w": 50, "h": 30 }] } }));
    let d = dir.path().to_str().unwrap();
    ok(&["predict", "--config", extra.to_str().unwrap(), "--out", d]);
    let dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(dir.path().join("prediction_0.png")).unwrap()));
    let info = dec.read_info().unwrap().info().clone();
    assert_eq!((info.width, info.height), (50, 30));

    ok(&["gates", "--config", cfg.to_str().unwrap(), "--out", d]);
    for l in 1..=5 {
        for m in ["image", "traj"] {
            assert!(dir.path().join(format!("gates/gate_{m}_l{l}.png")).exists());
        }
    }

    ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", d]);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("blur=1;sigma_m=0,"));
}
