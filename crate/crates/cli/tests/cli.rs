use std::path::Path;
use std::process::{Command, Output};

use snnreg::metrics::{read_pair_csv, write_pair_csv, PairResult};
use snnreg::stats::{compare, PairedSample};

const CONFIG: &str = "\
[run]
seed = 7

[ann]
epochs = 1
lr = 3e-3

[snn]
epochs = 1
lr = 1e-3

[convert]
calibration_pairs = 1

[data]
train_pairs = 2
";

fn snnreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snnreg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = snnreg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().find(|l| l.starts_with("error ")).expect("error line");
    serde_json::from_str(&line["error ".len()..]).unwrap()
}

fn rows(path: &Path) -> Vec<PairResult> {
    read_pair_csv(std::fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn smoke_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    ok(d, &["gen-data", "--out", "data", "--shape", "16", "--pairs", "4", "--seed", "42"]);
    let common = ["--config", "run.toml", "--data", "data"];
    let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(&common).map(|s| s.to_string()).collect() };
    let run = |cmd: &[&str]| {
        let args = with(cmd);
        ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run(&["train-ann", "--out", "ann.ck"]);
    assert!(d.join("ann.ck.log.jsonl").exists());
    let log = std::fs::read_to_string(d.join("ann.ck.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    run(&["evaluate", "--model", "ann.ck", "--out", "ann.csv"]);
    let r = rows(&d.join("ann.csv"));
    assert_eq!(r.len(), 2);
    let head = std::fs::read_to_string(d.join("ann.csv")).unwrap();
    assert!(head.starts_with("# config_hash=") && head.lines().next().unwrap().contains("seed=7"));

    let cal = run(&["calibrate", "--teacher", "ann.ck", "--percentile", "75"]);
    assert!(cal.contains("enc1"));
    run(&["convert", "--teacher", "ann.ck", "--out", "raw.ck", "--timesteps", "2"]);
    run(&["finetune", "--student", "raw.ck", "--out", "ft.ck"]);
    run(&["finetune", "--student", "raw.ck", "--teacher", "ann.ck", "--lambda-distill", "0.5", "--out", "kd.ck"]);
    run(&["train-scratch", "--out", "scratch.ck", "--epochs", "1"]);
    run(&["evaluate", "--model", "ft.ck", "--out", "ft.csv"]);
    assert!(rows(&d.join("ft.csv")).iter().all(|r| r.mean_spike_rate().is_some()));

    let energy = run(&["energy-report", "--model", "ft.ck"]);
    assert!(energy.contains("proxy, not hardware measurement"));
    run(&["energy-report", "--model", "ft.ck", "--out", "energy.txt"]);
    assert!(d.join("energy.txt.json").exists());

    run(&["sweep", "--teacher", "ann.ck", "--out", "sweep.csv", "--timesteps", "2,4", "--percentiles", "50,90"]);
    let sweep = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 2 + 4);
    assert!(sweep.lines().nth(1).unwrap().starts_with("timesteps,percentile"));

    ok(d, &[
        "register", "--model", "ft.ck",
        "--fixed", "data/pair_003/fixed", "--moving", "data/pair_003/moving",
        "--fixed-seg", "data/pair_003/fixed_seg", "--moving-seg", "data/pair_003/moving_seg",
        "--out", "reg",
    ]);
    for f in ["field_z.raw", "field_y.toml", "warped.raw", "warped_seg.raw", "pair.csv"] {
        assert!(d.join("reg").join(f).exists(), "{f}");
    }
    let single = rows(&d.join("reg/pair.csv"));
    let from_eval = &rows(&d.join("ft.csv"))[1];
    assert_eq!(single[0].dice_mean, from_eval.dice_mean);
}

#[test]
fn identity_on_identical_volumes_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "same", "--shape", "8", "--pairs", "2", "--amplitude", "0"]);
    ok(d, &["evaluate", "--identity", "--data", "same", "--train-pairs", "0", "--out", "id.csv"]);
    let r = rows(&d.join("id.csv"));
    assert_eq!(r.len(), 2);
    assert!(r.iter().all(|x| x.dice_mean == 1.0 && x.fold_percent == 0.0));
}

fn fixture(ids: &[&str], dice: &[f64]) -> Vec<PairResult> {
    ids.iter()
        .zip(dice)
        .map(|(id, &d)| PairResult {
            pair_id: id.to_string(),
            dice_mean: d,
            dice: vec![(1, Some(d))],
            hd95_mean: 1.0,
            hd95: vec![(1, Some(1.0))],
            ncc: 0.5,
            fold_percent: 0.0,
            sdlogj: 0.1,
            disp_mean: 0.5,
            disp_max: 1.0,
            spike_rates: Vec::new(),
        })
        .collect()
}

#[test]
fn stats_compare_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ids = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let xa = [0.71, 0.74, 0.69, 0.80, 0.77, 0.72, 0.75, 0.70];
    let xb = [0.66, 0.70, 0.70, 0.71, 0.73, 0.65, 0.69, 0.68];
    for (name, x) in [("a.csv", xa), ("b.csv", xb)] {
        let f = std::fs::File::create(d.join(name)).unwrap();
        write_pair_csv(f, &fixture(&ids, &x), &Default::default()).unwrap();
    }
    let out = ok(d, &["stats-compare", "a.csv", "b.csv", "--k-tests", "3", "--seed", "11"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let pa: Vec<(String, f64)> = ids.iter().map(|s| s.to_string()).zip(xa).collect();
    let pb: Vec<(String, f64)> = ids.iter().map(|s| s.to_string()).zip(xb).collect();
    let lib = compare("x", &PairedSample::align(&pa, &pb).unwrap(), 3, 0.05, 11).unwrap();
    let c = &v["comparison"];
    assert_eq!(c["p_signflip"].as_f64().unwrap(), lib.p_signflip);
    assert_eq!(c["p_wilcoxon"].as_f64().unwrap(), lib.p_wilcoxon);
    assert_eq!(c["ci_lo"].as_f64().unwrap(), lib.ci_lo);
    assert_eq!(c["significant"].as_bool().unwrap(), lib.significant);
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = snnreg(d, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "usage");

    std::fs::write(d.join("bad.toml"), "[run]\nsed = 3\n").unwrap();
    let out = snnreg(d, &["train-ann", "--config", "bad.toml", "--out", "x.ck"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "config");

    ok(d, &["gen-data", "--out", "data", "--shape", "8", "--pairs", "2"]);
    let out = snnreg(d, &["evaluate", "--model", "nope.ck", "--data", "data", "--train-pairs", "0", "--out", "e.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_line(&out);
    assert_eq!(e["kind"], "checkpoint");
    assert!(e["message"].as_str().unwrap().contains("nope.ck"));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().filter(|l| l.starts_with("error ")).count(), 1);
}
