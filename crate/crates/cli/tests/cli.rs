//! End-to-end runs of the `pmf` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pmf_core::checkpoint::Checkpoint;
use pmf_core::data::load_dataset;
use pmf_core::scm::{build_scm, read_grid, Skeleton};
use pmf_core::training::init_model;
use pmf_core::TrainConfig;
use serde_json::Value;
use tempfile::TempDir;

const SMALL_MODEL: &str = "\
[model]
scm_size = 16
holistic_resolution = 3
part_resolution = 2
feature_dim = 4
backbone_channels = [2, 4]
holistic_dim = 8
local_dim = 8
attention_hidden = 8
fusion_hidden = 8

[train]
iterations = 3
lr_drop_iteration = 2
batch_size = 4
";

const SMALL_SPEC: &str = "num_images = 4\nseed = 5\n";

fn pmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmf"))
        .args(args)
        .env_remove("PMF_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("spec.toml"), SMALL_SPEC).unwrap();
        std::fs::write(ws.path("model.toml"), SMALL_MODEL).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn gen_data(&self, out: &str) {
        ok(&pmf(&[
            "gen-data",
            "--spec",
            &self.s("spec.toml"),
            "--out",
            &self.s(out),
        ]));
    }

    fn train(&self, data: &str, out: &str, extra: &[&str]) -> Output {
        let (cfg, data, out) = (self.s("model.toml"), self.s(data), self.s(out));
        let mut args = vec!["train", "--config", &cfg, "--data", &data, "--out", &out];
        args.extend_from_slice(extra);
        pmf(&args)
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_seed_overridable() {
    let ws = Workspace::new();
    ws.gen_data("a.json");
    ws.gen_data("b.json");
    let a = std::fs::read(ws.path("a.json")).unwrap();
    assert_eq!(a, std::fs::read(ws.path("b.json")).unwrap());

    let with_env = Command::new(env!("CARGO_BIN_EXE_pmf"))
        .args([
            "gen-data",
            "--spec",
            &ws.s("spec.toml"),
            "--out",
            &ws.s("c.json"),
        ])
        .env("PMF_SEED", "6")
        .output()
        .unwrap();
    ok(&with_env);
    ok(&pmf(&[
        "gen-data",
        "--spec",
        &ws.s("spec.toml"),
        "--out",
        &ws.s("d.json"),
        "--seed",
        "6",
    ]));
    let c = std::fs::read(ws.path("c.json")).unwrap();
    assert_ne!(a, c);
    assert_eq!(c, std::fs::read(ws.path("d.json")).unwrap());
}

#[test]
fn input_errors_exit_with_code_two() {
    let ws = Workspace::new();
    let missing = pmf(&[
        "gen-data",
        "--spec",
        &ws.s("nope.toml"),
        "--out",
        &ws.s("x.json"),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));

    assert_eq!(pmf(&["train", "--bogus"]).status.code(), Some(2));

    ws.gen_data("data.json");
    let bad_flag = ws.train("data.json", "m.ckpt", &["--flag", "XYZ=true"]);
    assert_eq!(bad_flag.status.code(), Some(2));

    std::fs::write(ws.path("broken.toml"), "[train]\nlearning_rate = -1.0\n").unwrap();
    let bad_cfg = pmf(&[
        "train",
        "--config",
        &ws.s("broken.toml"),
        "--data",
        &ws.s("data.json"),
        "--out",
        &ws.s("m.ckpt"),
    ]);
    assert_eq!(bad_cfg.status.code(), Some(2));
}

#[test]
fn zero_iterations_saves_the_initial_model() {
    let ws = Workspace::new();
    ws.gen_data("data.json");
    ok(&ws.train(
        "data.json",
        "m.ckpt",
        &["--iterations", "0", "--seed", "11"],
    ));
    let ck = Checkpoint::load(&ws.path("m.ckpt")).unwrap();
    let mut cfg = TrainConfig::from_toml_str(SMALL_MODEL).unwrap();
    cfg.train.seed = 11;
    let init = init_model(&cfg).unwrap();
    let fresh = Checkpoint::from_model(&init, None);
    let weights: Vec<_> = ck
        .tensors
        .iter()
        .filter(|t| !t.name.starts_with("momentum/"))
        .collect();
    assert_eq!(weights.len(), fresh.tensors.len());
    for (a, b) in weights.iter().zip(&fresh.tensors) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.data, b.data, "{}", a.name);
    }
}

#[test]
fn part_crop_flag_removes_the_local_branch() {
    let ws = Workspace::new();
    ws.gen_data("data.json");
    ok(&ws.train("data.json", "full.ckpt", &["--iterations", "1"]));
    ok(&ws.train(
        "data.json",
        "nopc.ckpt",
        &["--iterations", "1", "--flag", "PC=false"],
    ));
    let names = |p: &str| -> Vec<String> {
        Checkpoint::load(&ws.path(p))
            .unwrap()
            .tensors
            .into_iter()
            .map(|t| t.name)
            .collect()
    };
    assert!(names("full.ckpt").iter().any(|n| n.starts_with("zoom.")));
    let nopc = names("nopc.ckpt");
    assert!(!nopc.iter().any(|n| n.contains("zoom.")), "{nopc:?}");
    assert!(
        !Checkpoint::load(&ws.path("nopc.ckpt"))
            .unwrap()
            .meta
            .flags
            .part_crop
    );
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let ws = Workspace::new();
    ws.gen_data("data.json");
    ok(&ws.train("data.json", "straight.ckpt", &["--iterations", "4"]));
    ok(&ws.train("data.json", "split.ckpt", &["--iterations", "2"]));
    ok(&ws.train(
        "data.json",
        "split.ckpt",
        &["--iterations", "4", "--resume", &ws.s("split.ckpt")],
    ));
    assert_eq!(
        std::fs::read(ws.path("straight.ckpt")).unwrap(),
        std::fs::read(ws.path("split.ckpt")).unwrap()
    );
    let rows = |p: &str| std::fs::read_to_string(ws.path(p)).unwrap();
    assert_eq!(rows("straight.csv"), rows("split.csv"));
    assert_eq!(rows("split.csv").lines().count(), 5);
}

#[test]
fn evaluate_writes_report_and_tolerates_empty_ground_truth() {
    let ws = Workspace::new();
    ws.gen_data("data.json");
    ok(&ws.train("data.json", "m.ckpt", &[]));
    let out = pmf(&[
        "evaluate",
        "--ckpt",
        &ws.s("m.ckpt"),
        "--data",
        &ws.s("data.json"),
        "--report",
        &ws.s("report.json"),
        "--detections",
        &ws.s("dets.jsonl"),
    ]);
    ok(&out);
    let report = read_json(&ws.path("report.json"));
    assert_eq!(report["actions"].as_array().unwrap().len(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mAP"));
    assert!(!jsonl(&ws.path("dets.jsonl")).is_empty());

    let mut ds = load_dataset(&ws.path("data.json")).unwrap();
    ds.interactions.clear();
    std::fs::write(ws.path("empty.json"), ds.to_json()).unwrap();
    let out = pmf(&[
        "evaluate",
        "--ckpt",
        &ws.s("m.ckpt"),
        "--data",
        &ws.s("empty.json"),
        "--report",
        &ws.s("empty_report.json"),
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("no action has ground truth"));
    assert!(read_json(&ws.path("empty_report.json"))["map"].is_null());
}

#[test]
fn mismatched_checkpoint_is_an_input_error() {
    let ws = Workspace::new();
    ws.gen_data("data.json");
    ok(&ws.train("data.json", "m.ckpt", &["--iterations", "0"]));
    std::fs::write(
        ws.path("three.toml"),
        "num_images = 2\n[[bindings]]\naction = \"hold\"\njoint = \"right_wrist\"\n\
         [[bindings]]\naction = \"kick\"\njoint = \"left_ankle\"\n\
         [[bindings]]\naction = \"look\"\njoint = \"nose\"\n",
    )
    .unwrap();
    ok(&pmf(&[
        "gen-data",
        "--spec",
        &ws.s("three.toml"),
        "--out",
        &ws.s("three.json"),
    ]));
    let out = pmf(&[
        "evaluate",
        "--ckpt",
        &ws.s("m.ckpt"),
        "--data",
        &ws.s("three.json"),
        "--report",
        &ws.s("r.json"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("actions"));
}

#[test]
fn visualize_matches_predictions_and_spatial_maps() {
    let ws = Workspace::new();
    ws.gen_data("data.json");
    ok(&ws.train("data.json", "m.ckpt", &[]));
    ok(&pmf(&[
        "predict",
        "--ckpt",
        &ws.s("m.ckpt"),
        "--data",
        &ws.s("data.json"),
        "--out",
        &ws.s("preds.jsonl"),
    ]));
    let preds = jsonl(&ws.path("preds.jsonl"));
    let image = preds[0]["image_id"].as_u64().unwrap();
    ok(&pmf(&[
        "visualize",
        "--ckpt",
        &ws.s("m.ckpt"),
        "--data",
        &ws.s("data.json"),
        "--image",
        &image.to_string(),
        "--out",
        &ws.s("vis"),
    ]));

    let legend = read_json(&ws.path("vis/legend.json"));
    let ds = load_dataset(&ws.path("data.json")).unwrap();
    let pairs = ds.pair_proposals(image).unwrap();
    let entries = legend["proposals"].as_array().unwrap();
    assert_eq!(entries.len(), pairs.len());
    let skeleton = Skeleton::coco();
    for (entry, pair) in entries.iter().zip(&pairs) {
        assert_eq!(entry["human_id"].as_u64(), Some(pair.human_id));
        assert!(ws
            .path("vis")
            .join(entry["overlay"].as_str().unwrap())
            .exists());

        let joints = entry["joints"].as_array().unwrap();
        assert_eq!(joints.len(), 17);
        let pred = preds
            .iter()
            .find(|p| p["human_id"] == entry["human_id"] && p["object_id"] == entry["object_id"])
            .unwrap();
        for (j, b) in joints.iter().zip(pred["beta"].as_array().unwrap()) {
            let (x, y) = (j["beta"].as_f64().unwrap(), b.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-6);
            assert_eq!(j["highlighted"].as_bool(), Some(x > 0.7));
        }

        let grid_path = ws.path("vis").join(entry["scm_grid"].as_str().unwrap());
        let (grid, names) = read_grid(&mut std::fs::File::open(grid_path).unwrap()).unwrap();
        let expected = build_scm(&pair.proposal, 16, &skeleton, 3.0).unwrap();
        assert_eq!(names.len(), 3);
        // the file stores single precision
        assert_eq!(grid, expected.grid.mapv(|v| v as f32 as f64));
    }

    let unknown = pmf(&[
        "visualize",
        "--ckpt",
        &ws.s("m.ckpt"),
        "--data",
        &ws.s("data.json"),
        "--image",
        "999999",
        "--out",
        &ws.s("vis2"),
    ]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn init_config_round_trips_to_defaults() {
    let ws = Workspace::new();
    let printed = pmf(&["init-config"]);
    ok(&printed);
    let text = String::from_utf8(printed.stdout).unwrap();
    assert_eq!(
        TrainConfig::from_toml_str(&text).unwrap(),
        TrainConfig::default()
    );
    ok(&pmf(&["init-config", "--out", &ws.s("c.toml")]));
    assert_eq!(std::fs::read_to_string(ws.path("c.toml")).unwrap(), text);
}
