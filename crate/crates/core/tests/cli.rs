use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use selfcomp::config::TrainConfig;
use selfcomp::network::{build_cifar_net, checkpoint, param_key, ParamRole};
use selfcomp::trainer::read_csv;

fn selfcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfcomp"))
        .args(args)
        .env_remove("SELFCOMP_DATA")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
    "main_steps": 4,
    "width_scale": 0.125,
    "batch_size": 8,
    "synthetic_train_size": 64,
    "synthetic_test_size": 32,
    "train_subset": null,
    "eval_subset": null,
    "eval_interval": 2,
    "eval_batch_size": 32,
    "prune_warmup": 2,
    "prune_interval": 2,
    "record_step_time": false
}"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    let extra: serde_json::Value = serde_json::from_str(extra).unwrap();
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    let p = dir.join("config.json");
    fs::write(&p, v.to_string()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "{}");
    let out = tmp.path().join("run");
    let o = selfcomp(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["run.json", "metrics.csv", "metrics.jsonl", "size_report.json", "prune_events.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(out.join("checkpoint/manifest.json").is_file());
    let manifest = json(&out.join("run.json"));
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["seed"], 7);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    let rows = read_csv(&fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].eval_acc.is_some() && rows[4].eval_acc.is_some());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["steps"], 4);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "{}");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = selfcomp(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn missing_dataset_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-cifar");
    let extra = format!(r#"{{"dataset": "cifar10", "data_dir": "{}"}}"#, s(&missing));
    let cfg = write_config(tmp.path(), &extra);
    let o = selfcomp(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no-such-cifar"), "{}", stderr(&o));
}

#[test]
fn negative_gamma_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"gamma": -0.5}"#);
    let o = selfcomp(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gamma"));
}

#[test]
fn unknown_flag_exits_1() {
    assert_eq!(code(&selfcomp(&["train", "--bogus"])), 1);
    assert_eq!(code(&selfcomp(&["--help"])), 0);
}

#[test]
fn sweep_rows_match_each_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "{}");
    let out = tmp.path().join("sweep");
    let o = selfcomp(&["sweep", "--config", s(&cfg), "--gammas", "0.01,0.1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let locus = fs::read_to_string(out.join("locus.csv")).unwrap();
    let lines: Vec<&str> = locus.lines().collect();
    assert_eq!(lines[0], "gamma,bits_fraction,weights_fraction,accuracy");
    assert_eq!(lines.len(), 3);
    for (i, line) in lines[1..].iter().enumerate() {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let run = out.join(format!("run_{i:02}"));
        let rows = read_csv(&fs::read_to_string(run.join("metrics.csv")).unwrap()).unwrap();
        let last = rows.last().unwrap();
        let size = json(&run.join("size_report.json"));
        let n = size["N"].as_f64().unwrap();
        assert_eq!(f[0], [0.01, 0.1][i]);
        assert_eq!(f[1], last.total_bits / (32.0 * n));
        assert_eq!(f[2], size["live_weights"].as_f64().unwrap() / n);
        assert_eq!(Some(f[3]), last.eval_acc);
    }
}

#[test]
fn sweep_records_a_diverging_run_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "{}");
    let out = tmp.path().join("sweep");
    let o = selfcomp(&["sweep", "--config", s(&cfg), "--gammas", "0.05,1e300", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let locus = fs::read_to_string(out.join("locus.csv")).unwrap();
    let lines: Vec<&str> = locus.lines().collect();
    assert!(!lines[1].contains("failed"));
    assert!(lines[2].ends_with(",failed,failed,failed"), "{}", lines[2]);
    assert_eq!(json(&out.join("run_01/run.json"))["status"], "failed");

    let o = selfcomp(&["sweep", "--config", s(&cfg), "--gammas", "1e300", "--out", s(&tmp.path().join("all"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bad_gamma_spec_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = selfcomp(&["sweep", "--gammas", "log:1:2", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 1);
}

fn fresh_checkpoint(dir: &Path) -> PathBuf {
    let cfg = TrainConfig {
        width_scale: 0.125,
        ..TrainConfig::desk()
    };
    let net = build_cifar_net(&cfg.widths(), &cfg.build_options()).unwrap();
    let p = dir.join("ck");
    checkpoint::save(&net, &p).unwrap();
    p
}

#[test]
fn size_report_of_fresh_network() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(tmp.path());
    let o = selfcomp(&["size-report", "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("layer"));
    assert!(text.contains("res3b"));
    let report = json(&ck.join("size_report.json"));
    let layers = report["layers"].as_array().unwrap();
    let net = checkpoint::load(&ck).unwrap();
    let mut z = 0.0;
    for l in layers {
        assert_eq!(l["live_channels"], l["initial_channels"]);
        let name = l["layer"].as_str().unwrap();
        assert_eq!(l["initial_channels"].as_u64().unwrap() as usize, net.initial_widths()[name]);
        z += l["z_bits"].as_f64().unwrap();
    }
    let n = report["N"].as_f64().unwrap();
    assert_eq!(n as usize, net.initial_weight_count());
    assert!((report["Q"].as_f64().unwrap() - z / n).abs() <= 1e-12 * z / n);
}

#[test]
fn size_report_of_malformed_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(tmp.path());
    fs::write(ck.join("manifest.json"), "{").unwrap();
    assert_eq!(code(&selfcomp(&["size-report", "--checkpoint", s(&ck)])), 2);
}

#[test]
fn prune_without_zero_bit_channels_copies_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(tmp.path());
    let out = tmp.path().join("out");
    let o = selfcomp(&["prune", "--in", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["manifest.json", "tensors.bin"] {
        assert_eq!(fs::read(ck.join(f)).unwrap(), fs::read(out.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(json(&out.join("prune_report.json"))["weights_removed"], 0);
}

#[test]
fn prune_removes_drained_channels() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(tmp.path());
    let mut net = checkpoint::load(&ck).unwrap();
    for c in [1usize, 4, 6] {
        for role in [ParamRole::Bits, ParamRole::NormShift, ParamRole::RunningMean] {
            net.params.get_mut(&param_key("layer2", role)).unwrap().data_mut()[c] = 0.0;
        }
    }
    checkpoint::save(&net, &ck).unwrap();
    let out = tmp.path().join("out");
    let o = selfcomp(&["prune", "--in", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&out.join("prune_report.json"));
    assert_eq!(report["channels_removed"]["layer2"], 3);
    let pruned = checkpoint::load(&out).unwrap();
    let w = pruned.params.get("layer2.weight").unwrap();
    assert_eq!(w.dim(0), 32 - 3);
    assert_eq!(pruned.params.get("layer3.weight").unwrap().dim(1), 29);
    assert!(fs::metadata(out.join("tensors.bin")).unwrap().len() < fs::metadata(ck.join("tensors.bin")).unwrap().len());
}

#[test]
fn prune_refuses_when_output_would_change() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(tmp.path());
    let mut net = checkpoint::load(&ck).unwrap();
    // Zero bits but a large running mean: the channel still emits a constant
    // in evaluation, which the loose tolerance lets through as a candidate.
    net.params.get_mut("layer2.bits").unwrap().data_mut()[0] = 0.0;
    net.params.get_mut("layer2.running_mean").unwrap().data_mut()[0] = -0.5;
    checkpoint::save(&net, &ck).unwrap();
    let out = tmp.path().join("out");
    let o = selfcomp(&["prune", "--in", s(&ck), "--out", s(&out), "--bias-tol", "10"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn prune_of_corrupted_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(tmp.path());
    let mut bytes = fs::read(ck.join("tensors.bin")).unwrap();
    bytes.truncate(bytes.len() - 8);
    fs::write(ck.join("tensors.bin"), bytes).unwrap();
    let o = selfcomp(&["prune", "--in", s(&ck), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_on_synthetic_and_missing_data() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(tmp.path());
    let o = selfcomp(&["evaluate", "--checkpoint", s(&ck), "--data", "synthetic:striped-patterns:40:1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["examples"], 40);
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let o = selfcomp(&["evaluate", "--checkpoint", s(&ck), "--data", s(&tmp.path().join("nothing.bin"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nothing.bin"));
    let o = selfcomp(&["evaluate", "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_round_trips_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    for profile in ["paper", "desk"] {
        let o = selfcomp(&["config", "--profile", profile]);
        assert_eq!(code(&o), 0);
        let p = tmp.path().join(format!("{profile}.json"));
        fs::write(&p, &o.stdout).unwrap();
        let again = selfcomp(&["config", "--config", s(&p), "--profile", "desk"]);
        assert_eq!(again.stdout, o.stdout);
    }
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper.json");
    let o = selfcomp(&["config", "--profile", "paper"]);
    assert_eq!(fs::read(shipped).unwrap(), o.stdout);
}
