use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use snnreg::conversion::{calibrate_thresholds, calibration_report, calibration_report_text, record_activations, RESERVOIR_CAP};
use snnreg::deform::{warp_nearest, warp_trilinear, DisplacementField, Volume};
use snnreg::energy::{energy_report, EnergyConstants};
use snnreg::io::{
    generate_pair, load_dataset, provenance, read_volume, save_dataset, write_native, Dtype, GeneratorConfig,
    SourceFormat, VolumeFile,
};
use snnreg::metrics::{evaluate_pair, read_pair_csv, summarize, write_pair_csv, PairResult};
use snnreg::stats::{compare, PairedSample};
use snnreg::trainer::{convert, run_phase, Pair, Phase, PhasePlan, TrainConfig};
use snnreg::unet::{Checkpoint, Flavor, Network, NetworkSpec};
use snnreg::{Precision, Tensor};

use crate::{CliError, Cmd, Common};

type Res<T = ()> = Result<T, CliError>;

pub fn run(cmd: Cmd) -> Res {
    match cmd {
        Cmd::GenData {
            out,
            shape,
            pairs,
            seed,
            classes,
            amplitude,
            smoothness,
            divisor,
        } => gen_data(&out, &shape, pairs, seed, classes, amplitude, smoothness, divisor),
        Cmd::TrainAnn { common, out, epochs } => train(&common, Phase::AnnWarmstart, &out, epochs, None, None, None),
        Cmd::Calibrate {
            common,
            teacher,
            percentile,
            out,
        } => calibrate(&common, &teacher, percentile, out.as_deref()),
        Cmd::Convert {
            common,
            teacher,
            out,
            percentile,
            timesteps,
        } => convert_cmd(&common, &teacher, &out, percentile, timesteps),
        Cmd::Finetune {
            common,
            student,
            out,
            teacher,
            lambda_distill,
            epochs,
        } => train(
            &common,
            Phase::SnnFinetune,
            &out,
            epochs,
            Some(&student),
            teacher.as_deref(),
            lambda_distill,
        ),
        Cmd::TrainScratch { common, out, epochs } => train(&common, Phase::SnnScratch, &out, epochs, None, None, None),
        Cmd::Register {
            model,
            fixed,
            moving,
            fixed_seg,
            moving_seg,
            out,
        } => register(&model, &fixed, &moving, fixed_seg.as_deref(), moving_seg.as_deref(), &out),
        Cmd::Evaluate {
            common,
            model,
            identity,
            all,
            out,
        } => evaluate(&common, model.as_deref(), identity, all, &out),
        Cmd::EnergyReport { common, model, out } => energy(&common, &model, out.as_deref()),
        Cmd::StatsCompare {
            a,
            b,
            metric,
            k_tests,
            alpha,
            seed,
            out,
        } => stats_compare(&a, &b, &metric, k_tests, alpha, seed, out.as_deref()),
        Cmd::Sweep {
            common,
            teacher,
            out,
            timesteps,
            percentiles,
            finetune_epochs,
            workers,
        } => sweep(&common, &teacher, &out, &timesteps, &percentiles, finetune_epochs, workers),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::user("io", format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Res {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Config with command-line overrides applied.
fn load_config(c: &Common) -> Res<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(d) = &c.data {
        cfg.data.dir = d.display().to_string();
    }
    if let Some(s) = c.seed {
        cfg.run.seed = s;
        cfg.ann.seed = s;
        cfg.snn.seed = s;
    }
    if let Some(n) = c.train_pairs {
        cfg.data.train_pairs = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(cfg: &TrainConfig) -> Res<(Vec<Pair>, Vec<Pair>)> {
    let (_, mut pairs) = load_dataset(&cfg.data.dir)?;
    if cfg.data.train_pairs > pairs.len() {
        return Err(CliError::user(
            "config",
            format!(
                "data.train_pairs = {} but {} holds {} pairs",
                cfg.data.train_pairs,
                cfg.data.dir,
                pairs.len()
            ),
        ));
    }
    let test = pairs.split_off(cfg.data.train_pairs);
    Ok((pairs, test))
}

fn load_net(path: &Path) -> Res<(Network, Checkpoint)> {
    if !path.exists() {
        return Err(CliError::user("checkpoint", format!("missing checkpoint {}", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_network()?, ck))
}

fn save_net(net: &Network, phase: &str, seed: u64, extra: BTreeMap<String, serde_json::Value>, out: &Path) -> Res {
    let mut ck = Checkpoint::from_network(net, phase, seed);
    ck.meta.extra = extra;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    ck.save(out)?;
    Ok(())
}

/// Applies `f` to every item on up to `workers` threads; output order
/// matches input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Res<R> + Sync) -> Res<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    let mut slots: Vec<Option<Res<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: &Path,
    shape: &str,
    pairs: usize,
    seed: u64,
    classes: usize,
    amplitude: f64,
    smoothness: f64,
    divisor: usize,
) -> Res {
    let sides: Vec<usize> = shape
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::user("usage", format!("bad --shape `{shape}`")))?;
    let shape = match sides[..] {
        [n] => [n; 3],
        [d, h, w] => [d, h, w],
        _ => return Err(CliError::user("usage", "--shape takes one or three sides")),
    };
    let cfg = GeneratorConfig {
        shape,
        classes,
        amplitude,
        smoothness,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..pairs).map(|_| rng.random()).collect();
    let generated = parallel_map(&seeds, default_workers(), |&s| Ok(generate_pair(&cfg, divisor, s)?))?;
    let manifest = save_dataset(out, &generated, &cfg, seed)?;
    println!("{}", serde_json::to_string(&json!({"pairs": manifest.pairs.len(), "dir": out}))?);
    Ok(())
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError {
            code: 2,
            kind: "json",
            message: e.to_string(),
        }
    }
}

fn train(
    common: &Common,
    phase: Phase,
    out: &Path,
    epochs: Option<usize>,
    student: Option<&Path>,
    teacher: Option<&Path>,
    lambda_distill: Option<f64>,
) -> Res {
    let mut cfg = load_config(common)?;
    if let Some(l) = lambda_distill {
        cfg.loss.lambda_distill = l;
    }
    let (train, _) = load_split(&cfg)?;
    let mut optim = if phase == Phase::AnnWarmstart { cfg.ann.clone() } else { cfg.snn.clone() };
    if let Some(e) = epochs {
        optim.epochs = e;
    }
    let net = match (phase, student) {
        (Phase::SnnFinetune, Some(p)) => load_net(p)?.0,
        (Phase::SnnFinetune, None) => return Err(CliError::user("usage", "finetune needs --student")),
        _ => Network::build(&cfg.network, phase.flavor(), cfg.run.seed)?,
    };
    let teacher = teacher.map(load_net).transpose()?.map(|t| t.0);
    let plan = PhasePlan::new(phase, cfg.loss.clone(), optim.clone());
    let mut log = create(&sibling(out, ".log.jsonl"))?;
    let (net, summary) = run_phase(&plan, net, &train, teacher.as_ref(), &mut log)?;
    log.flush().map_err(|e| io_err(out, e))?;
    let extra = BTreeMap::from([
        ("config_hash".to_string(), json!(cfg.hash())),
        ("epochs".to_string(), json!(optim.epochs)),
        ("lambda_distill".to_string(), json!(cfg.loss.lambda_distill)),
        ("summary".to_string(), serde_json::to_value(&summary)?),
    ]);
    save_net(&net, phase.as_str(), optim.seed, extra, out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn calibration_pairs(cfg: &TrainConfig, train: &[Pair]) -> Res<Vec<(Volume, Volume)>> {
    let n = cfg.convert.calibration_pairs.min(train.len());
    if n == 0 {
        return Err(CliError::user("config", "calibration needs at least one training pair"));
    }
    Ok(train[..n].iter().map(|p| (p.fixed.clone(), p.moving.clone())).collect())
}

fn calibrate(common: &Common, teacher: &Path, percentile: Option<f64>, out: Option<&Path>) -> Res {
    let cfg = load_config(common)?;
    let (train, _) = load_split(&cfg)?;
    let (t, _) = load_net(teacher)?;
    let p = percentile.unwrap_or(cfg.convert.percentile);
    let vols = calibration_pairs(&cfg, &train)?;
    let cal = record_activations(&t, &vols, RESERVOIR_CAP, cfg.run.seed)?;
    let th = calibrate_thresholds(&cal, p)?;
    let text = calibration_report_text(&calibration_report(&cal, &th), p, vols.len());
    let text = format!("# config_hash={} seed={}\n{text}", cfg.hash(), cfg.run.seed);
    match out {
        Some(o) => write_text(o, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn student_spec(teacher: &NetworkSpec, timesteps: Option<usize>) -> NetworkSpec {
    NetworkSpec {
        timesteps: timesteps.unwrap_or(teacher.timesteps),
        ..teacher.clone()
    }
}

fn convert_cmd(common: &Common, teacher: &Path, out: &Path, percentile: Option<f64>, timesteps: Option<usize>) -> Res {
    let cfg = load_config(common)?;
    let (train, _) = load_split(&cfg)?;
    let (t, _) = load_net(teacher)?;
    let p = percentile.unwrap_or(cfg.convert.percentile);
    let n = cfg.convert.calibration_pairs.min(train.len());
    let student = convert(&t, &student_spec(t.spec(), timesteps), &train[..n], p, cfg.run.seed)?;
    let extra = BTreeMap::from([
        ("config_hash".to_string(), json!(cfg.hash())),
        ("percentile".to_string(), json!(p)),
        ("calibration_pairs".to_string(), json!(n)),
    ]);
    save_net(&student, Phase::Convert.as_str(), cfg.run.seed, extra, out)?;
    let thetas: BTreeMap<String, f64> = student
        .spec()
        .spiking_layers()
        .into_iter()
        .filter_map(|l| student.theta(&l).map(|v| (l, v)))
        .collect();
    println!("{}", serde_json::to_string(&json!({"percentile": p, "thresholds": thetas}))?);
    Ok(())
}

fn write_volume(stem: &Path, vol: &Volume, dtype: Dtype) -> Res {
    write_native(stem, &VolumeFile::from_volume(vol, [1.0; 3], dtype, SourceFormat::Native))?;
    Ok(())
}

fn register(model: &Path, fixed: &Path, moving: &Path, fseg: Option<&Path>, mseg: Option<&Path>, out: &Path) -> Res {
    let (net, ck) = load_net(model)?;
    let f = read_volume(fixed)?;
    let m = read_volume(moving)?;
    let (u, stats) = net.register(&f, &m, Precision::Single)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (c, axis) in ["z", "y", "x"].iter().enumerate() {
        let comp = Volume::new(Tensor::new(
            [&[1][..], &u.tensor().shape()[1..]].concat(),
            u.tensor().channel(c).to_vec(),
        )?)?;
        write_volume(&out.join(format!("field_{axis}")), &comp, Dtype::F64)?;
    }
    write_volume(&out.join("warped"), &warp_trilinear(&m, &u)?, Dtype::F64)?;
    let rates: Vec<(String, f64)> = stats.iter().filter_map(|s| s.rate.map(|r| (s.name.clone(), r))).collect();
    if let (Some(fs_), Some(ms)) = (fseg, mseg) {
        let fs_ = read_volume(fs_)?;
        let ms = read_volume(ms)?;
        write_volume(&out.join("warped_seg"), &warp_nearest(&ms, &u)?, Dtype::U8)?;
        let pair = Pair {
            id: "pair".into(),
            fixed: f.clone(),
            moving: m.clone(),
            fixed_seg: Some(fs_.clone()),
            moving_seg: Some(ms.clone()),
        };
        let row = evaluate_pair("pair", &f, &m, &fs_, &ms, &u, &pair.labels(), rates)?;
        let prov = provenance(&ck.meta.spec_hash, ck.meta.seed, &[("model", model.display().to_string())]);
        write_pair_csv(create(&out.join("pair.csv"))?, &[row], &prov)?;
    }
    Ok(())
}

fn evaluate_pairs(net: Option<&Network>, pairs: &[Pair]) -> Res<Vec<PairResult>> {
    parallel_map(pairs, default_workers(), |p| {
        let (Some(fs_), Some(ms)) = (&p.fixed_seg, &p.moving_seg) else {
            return Err(CliError::user("data", format!("pair `{}` has no label maps", p.id)));
        };
        let (u, rates) = match net {
            Some(n) => {
                let (u, stats) = n.register(&p.fixed, &p.moving, Precision::Single)?;
                let rates = stats.iter().filter_map(|s| s.rate.map(|r| (s.name.clone(), r))).collect();
                (u, rates)
            }
            None => (DisplacementField::zeros(p.fixed.dims()), Vec::new()),
        };
        Ok(evaluate_pair(&p.id, &p.fixed, &p.moving, fs_, ms, &u, &p.labels(), rates)?)
    })
}

fn evaluate(common: &Common, model: Option<&Path>, identity: bool, all: bool, out: &Path) -> Res {
    let cfg = load_config(common)?;
    let (train, test) = load_split(&cfg)?;
    let pairs: Vec<Pair> = if all { train.into_iter().chain(test).collect() } else { test };
    if pairs.is_empty() {
        return Err(CliError::user("data", "no pairs to evaluate (all pairs are in the training split)"));
    }
    let (net, label) = match (model, identity) {
        (Some(m), false) => (Some(load_net(m)?.0), m.display().to_string()),
        (None, true) => (None, "identity".to_string()),
        _ => return Err(CliError::user("usage", "give exactly one of --model or --identity")),
    };
    let rows = evaluate_pairs(net.as_ref(), &pairs)?;
    let prov = provenance(
        &cfg.hash(),
        cfg.run.seed,
        &[("model", label), ("split", if all { "all" } else { "test" }.to_string())],
    );
    write_pair_csv(create(out)?, &rows, &prov)?;
    let summary = summarize(&rows);
    write_text(&sibling(out, ".summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn energy_text(net: &Network, pairs: &[Pair], workers: usize) -> Res<snnreg::energy::EnergyReport> {
    if net.flavor() != Flavor::Snn {
        return Err(CliError::user("usage", "energy report needs a spiking model"));
    }
    let dims = pairs
        .first()
        .map(|p| p.fixed.dims())
        .ok_or_else(|| CliError::user("data", "no pairs"))?;
    if pairs.iter().any(|p| p.fixed.dims() != dims) {
        return Err(CliError::user("data", "energy report needs pairs of one shape"));
    }
    let per_pair = parallel_map(pairs, workers, |p| Ok(net.register(&p.fixed, &p.moving, Precision::Single)?.1))?;
    Ok(energy_report(net.spec(), dims, &per_pair, &EnergyConstants::default())?)
}

fn energy(common: &Common, model: &Path, out: Option<&Path>) -> Res {
    let cfg = load_config(common)?;
    let (_, test) = load_split(&cfg)?;
    let (net, _) = load_net(model)?;
    let rep = energy_text(&net, &test, default_workers())?;
    let text = format!("# config_hash={} seed={}\n{}", cfg.hash(), cfg.run.seed, rep.to_text());
    match out {
        Some(o) => {
            write_text(o, &text)?;
            write_text(&sibling(o, ".json"), &serde_json::to_string_pretty(&rep)?)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn metric(r: &PairResult, name: &str) -> Res<f64> {
    Ok(match name {
        "dice_mean" => r.dice_mean,
        "hd95_mean" => r.hd95_mean,
        "ncc" => r.ncc,
        "fold_percent" => r.fold_percent,
        "sdlogj" => r.sdlogj,
        "disp_mean" => r.disp_mean,
        "mean_spike_rate" => r.mean_spike_rate().unwrap_or(f64::NAN),
        other => return Err(CliError::user("usage", format!("unknown metric `{other}`"))),
    })
}

fn read_rows(path: &Path) -> Res<Vec<PairResult>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(read_pair_csv(f)?)
}

#[allow(clippy::too_many_arguments)]
fn stats_compare(a: &Path, b: &Path, name: &str, k: usize, alpha: f64, seed: u64, out: Option<&Path>) -> Res {
    let col = |rows: Vec<PairResult>| -> Res<Vec<(String, f64)>> {
        rows.iter().map(|r| Ok((r.pair_id.clone(), metric(r, name)?))).collect()
    };
    let sample = PairedSample::align(&col(read_rows(a)?)?, &col(read_rows(b)?)?)?;
    let label = format!("{} vs {} ({name})", a.display(), b.display());
    let c = compare(&label, &sample, k, alpha, seed)?;
    let text = serde_json::to_string_pretty(&json!({"seed": seed, "comparison": c}))?;
    if let Some(o) = out {
        write_text(o, &text)?;
    }
    println!("{text}");
    Ok(())
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "timesteps",
    "percentile",
    "finetune_epochs",
    "dice_mean",
    "hd95_mean",
    "fold_percent",
    "mean_spike_rate",
    "snn_synops",
    "ann_macs",
    "op_reduction",
    "projected_reduction",
    "analytical_reduction",
];

fn sweep(
    common: &Common,
    teacher: &Path,
    out: &Path,
    timesteps: &[usize],
    percentiles: &[f64],
    finetune_epochs: usize,
    workers: Option<usize>,
) -> Res {
    let cfg = load_config(common)?;
    let (train, test) = load_split(&cfg)?;
    if test.is_empty() {
        return Err(CliError::user("data", "sweep needs held-out pairs"));
    }
    let (t, _) = load_net(teacher)?;
    let grid: Vec<(usize, f64)> = timesteps
        .iter()
        .flat_map(|&ts| percentiles.iter().map(move |&p| (ts, p)))
        .collect();
    let n = cfg.convert.calibration_pairs.min(train.len());
    let workers = workers.unwrap_or_else(default_workers);
    let rows = parallel_map(&grid, workers, |&(ts, p)| {
        let mut student = convert(&t, &student_spec(t.spec(), Some(ts)), &train[..n], p, cfg.run.seed)?;
        if finetune_epochs > 0 {
            let optim = snnreg::trainer::OptimConfig {
                epochs: finetune_epochs,
                ..cfg.snn.clone()
            };
            let plan = PhasePlan::new(Phase::SnnFinetune, cfg.loss.clone(), optim);
            student = run_phase(&plan, student, &train, None, &mut std::io::sink())?.0;
        }
        let res = evaluate_pairs(Some(&student), &test)?;
        let s = summarize(&res);
        let e = energy_text(&student, &test, 1)?;
        Ok(vec![
            ts as f64,
            p,
            finetune_epochs as f64,
            s["dice_mean"],
            s["hd95_mean"],
            s["fold_percent"],
            s["mean_spike_rate"],
            e.snn_synops,
            e.ann_macs as f64,
            e.op_reduction,
            e.projected.reduction,
            e.analytical.reduction,
        ])
    })?;
    let mut w = create(out)?;
    let io = |e| io_err(out, e);
    writeln!(w, "# config_hash={} seed={} teacher={}", cfg.hash(), cfg.run.seed, teacher.display()).map_err(io)?;
    writeln!(w, "{}", SWEEP_COLUMNS.join(",")).map_err(io)?;
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..23).collect();
        for w in [1, 3, 8] {
            let out = parallel_map(&items, w, |&x| Ok(x * 2)).unwrap();
            assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sibling_appends() {
        assert_eq!(sibling(Path::new("a/b.csv"), ".summary.json"), PathBuf::from("a/b.csv.summary.json"));
    }

}
