//! Optimisation and the training phases.
//!
//! Phases: analog warm-start, conversion (calibration plus weight transfer),
//! surrogate fine-tuning of the converted student, and spiking training from
//! random initialisation. Every phase is single-threaded and deterministic
//! for a fixed seed.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conversion::{calibrate_thresholds, record_activations, transfer_weights, RESERVOIR_CAP};
use crate::deform::Volume;
use crate::error::{Error, Result};
use crate::lif::{TAU_MIN, THETA_MIN};
use crate::losses::{total_loss, LossBreakdown, LossPhase, LossTerms, LossWeights};
use crate::metrics::{evaluate_pair, PairResult};
use crate::tensor::{BnMode, Precision, Tape, Tensor};
use crate::unet::{Flavor, ForwardConfig, Network, NetworkSpec};
use crate::lif::SpikeMode;

/// Consecutive non-finite steps that abort a phase.
pub const MAX_NAN_STEPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub eta_min: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::ann()
    }
}

impl OptimConfig {
    /// Desk-scale analog defaults.
    pub fn ann() -> Self {
        OptimConfig {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            eta_min: 1e-6,
            epochs: 60,
            clip_norm: 1.0,
            batch_size: 1,
            seed: 42,
        }
    }

    /// Desk-scale spiking defaults.
    pub fn snn() -> Self {
        OptimConfig {
            eta_min: 1e-5,
            epochs: 40,
            ..OptimConfig::ann()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > self.eta_min && self.eta_min >= 0.0) {
            return Err(Error::Config(format!(
                "need lr > eta_min >= 0 (lr {}, eta_min {})",
                self.lr, self.eta_min
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config("only batch_size = 1 is supported".into()));
        }
        Ok(())
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// Bias-corrected Adam at learning rate `lr`. Only parameters present in
/// `grads` move. A non-finite gradient skips the whole step without
/// advancing the counter; the return value says whether the step ran.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<bool> {
    if grads.values().any(|g| !g.is_finite()) {
        log::warn!("non-finite gradient at step {}; update skipped", state.step + 1);
        return Ok(false);
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("`{name}`: {:?} vs {:?}", p.shape(), g.shape())));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
    }
    Ok(true)
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, eta_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond {total_steps}")));
    }
    let t = step as f64 / total_steps as f64;
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Scales all gradients so their joint l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Keeps leaks in `[TAU_MIN, 1]` and thresholds at or above `THETA_MIN`.
pub fn clamp_lif_params(net: &mut Network) {
    for layer in net.spec().spiking_layers() {
        if let Some(t) = net.param_mut(&format!("{layer}.tau")) {
            t.data_mut().iter_mut().for_each(|v| *v = v.clamp(TAU_MIN, 1.0));
        }
        if let Some(t) = net.param_mut(&format!("{layer}.theta")) {
            t.data_mut().iter_mut().for_each(|v| *v = v.max(THETA_MIN));
        }
    }
}

/// One registration pair with optional label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_seg: Option<Volume>,
    pub moving_seg: Option<Volume>,
}

impl Pair {
    /// Positive labels of the fixed map, ascending.
    pub fn labels(&self) -> Vec<i64> {
        let mut l: Vec<i64> = self
            .fixed_seg
            .iter()
            .flat_map(|s| s.data().iter().map(|&v| v.round() as i64))
            .filter(|&v| v > 0)
            .collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

fn one_hot(seg: &Volume, labels: &[i64]) -> Tensor {
    let dims = seg.dims();
    Tensor::from_voxels(labels.len(), dims, |c, z, y, x| {
        let v = seg.data()[(z * dims[1] + y) * dims[2] + x].round() as i64;
        if v == labels[c] {
            1.0
        } else {
            0.0
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AnnWarmstart,
    Convert,
    SnnFinetune,
    SnnScratch,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::AnnWarmstart => "ann_warmstart",
            Phase::Convert => "convert",
            Phase::SnnFinetune => "snn_finetune",
            Phase::SnnScratch => "snn_scratch",
        }
    }

    pub fn flavor(self) -> Flavor {
        match self {
            Phase::AnnWarmstart => Flavor::Ann,
            _ => Flavor::Snn,
        }
    }

    fn bn_mode(self) -> BnMode {
        match self {
            Phase::SnnFinetune => BnMode::Frozen,
            _ => BnMode::Train,
        }
    }
}

/// What a training phase optimises and what it leaves alone.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePlan {
    pub phase: Phase,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    /// Parameter-name suffixes that receive no updates.
    pub frozen: Vec<String>,
}

impl PhasePlan {
    /// Default plan: fine-tuning freezes BN affines (and, through the frozen
    /// BN mode, the running statistics); other phases train everything.
    pub fn new(phase: Phase, weights: LossWeights, optim: OptimConfig) -> Self {
        let frozen = match phase {
            Phase::SnnFinetune => vec![".gamma".into(), ".beta".into()],
            _ => Vec::new(),
        };
        PhasePlan {
            phase,
            weights,
            optim,
            frozen,
        }
    }

    pub fn trainable(&self, name: &str) -> bool {
        !self.frozen.iter().any(|s| name.ends_with(s.as_str()))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub pair: String,
    pub lr: f64,
    pub grad_norm: Option<f64>,
    pub skipped: bool,
    pub loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rates: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub phase: String,
    pub steps: usize,
    pub skipped: usize,
    pub first_loss: Option<f64>,
    pub last_epoch_loss: Option<f64>,
}

/// Runs a gradient phase starting from `net`. `teacher` supplies the
/// distillation target when `lambda_distill > 0`. One JSON record per step
/// goes to `log`.
pub fn run_phase(
    plan: &PhasePlan,
    mut net: Network,
    data: &[Pair],
    teacher: Option<&Network>,
    log: &mut dyn Write,
) -> Result<(Network, PhaseSummary)> {
    if plan.phase == Phase::Convert {
        return Err(Error::invalid("conversion is not a gradient phase; use `convert`"));
    }
    plan.optim.validate()?;
    plan.weights.validate()?;
    if net.flavor() != plan.phase.flavor() {
        return Err(Error::invalid(format!(
            "phase {} expects a {:?} network",
            plan.phase.as_str(),
            plan.phase.flavor()
        )));
    }
    if data.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    let kd = plan.weights.lambda_distill > 0.0 && plan.phase.flavor() == Flavor::Snn;
    if kd && teacher.is_none() {
        return Err(Error::invalid("lambda_distill > 0 needs a teacher network"));
    }
    // teacher fields are fixed, compute once
    let teacher_fields: Vec<Option<Tensor>> = data
        .iter()
        .map(|p| match (kd, teacher) {
            (true, Some(t)) => t
                .register(&p.fixed, &p.moving, Precision::Single)
                .map(|(u, _)| Some(u.into_tensor())),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;

    let total_steps = plan.optim.epochs * data.len();
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.optim.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut summary = PhaseSummary {
        phase: plan.phase.as_str().into(),
        steps: 0,
        skipped: 0,
        first_loss: None,
        last_epoch_loss: None,
    };
    let mut nan_run = 0;
    let mut step = 0;
    for epoch in 0..plan.optim.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let lr = cosine_lr(step, total_steps.max(1), plan.optim.lr, plan.optim.eta_min)?;
            let outcome = train_step(plan, &mut net, &data[i], teacher_fields[i].as_ref(), &mut adam, lr);
            let record = match outcome {
                Ok(r) => r,
                Err(Error::NonFinite { op }) => StepRecord {
                    phase: plan.phase.as_str().into(),
                    epoch,
                    step,
                    pair: data[i].id.clone(),
                    lr,
                    grad_norm: None,
                    skipped: true,
                    loss: LossBreakdown {
                        total: f64::NAN,
                        ..Default::default()
                    },
                    rates: BTreeMap::from([(format!("non_finite:{op}"), 0.0)]),
                },
                Err(e) => return Err(e),
            };
            let record = StepRecord { epoch, step, ..record };
            if record.skipped {
                nan_run += 1;
                summary.skipped += 1;
                if nan_run >= MAX_NAN_STEPS {
                    return Err(Error::Training(format!(
                        "{MAX_NAN_STEPS} consecutive non-finite steps; last record: {}",
                        serde_json::to_string(&record)?
                    )));
                }
            } else {
                nan_run = 0;
                summary.first_loss.get_or_insert(record.loss.total);
                epoch_loss += record.loss.total;
            }
            serde_json::to_writer(&mut *log, &record)?;
            writeln!(log).map_err(|e| Error::io("training log", e))?;
            step += 1;
            summary.steps += 1;
        }
        let mean = epoch_loss / data.len() as f64;
        summary.last_epoch_loss = Some(mean);
        log::info!(
            "{} epoch {}/{}: mean loss {mean:.5}, {} skipped so far",
            plan.phase.as_str(),
            epoch + 1,
            plan.optim.epochs,
            summary.skipped
        );
    }
    Ok((net, summary))
}

fn train_step(
    plan: &PhasePlan,
    net: &mut Network,
    pair: &Pair,
    teacher_field: Option<&Tensor>,
    adam: &mut AdamState,
    lr: f64,
) -> Result<StepRecord> {
    let w = &plan.weights;
    let snn = plan.phase.flavor() == Flavor::Snn;
    let mut tape = Tape::new(Precision::Single);
    let bound = net.bind(&mut tape, |n| plan.trainable(n));
    let f = tape.constant(pair.fixed.tensor().clone());
    let m = tape.constant(pair.moving.tensor().clone());
    let cfg = ForwardConfig {
        bn: plan.phase.bn_mode(),
        spike_mode: SpikeMode::Binary,
        keep_activations: false,
    };
    let out = net.forward(&mut tape, &bound, f, m, &cfg)?;
    let warped = tape.warp_trilinear(m, out.field)?;
    let mut terms = LossTerms {
        sim: Some(tape.ncc_local(f, warped, w.ncc_window, w.ncc_eps)?),
        // the raw head output: displacement, or velocity in SVF mode
        reg: Some(tape.diffusion_reg(out.head)?),
        ..Default::default()
    };
    if snn {
        terms.spk = Some(tape.spike_reg(&out.rates, w.rho_star, w.beta)?);
    }
    if let Some(t) = teacher_field {
        let t = tape.constant(t.clone());
        terms.distill = Some(tape.kd_distill(out.field, t)?);
    }
    if w.lambda_seg > 0.0 {
        let (Some(fs), Some(ms)) = (&pair.fixed_seg, &pair.moving_seg) else {
            return Err(Error::invalid(format!("lambda_seg > 0 but pair `{}` has no labels", pair.id)));
        };
        let labels = pair.labels();
        let fo = tape.constant(one_hot(fs, &labels));
        let mo = tape.constant(one_hot(ms, &labels));
        let score = tape.soft_dice(fo, mo, out.field, w.dice_eps)?;
        let neg = tape.scale(score, -1.0)?;
        terms.seg = Some(tape.add_scalar(neg, 1.0)?);
    }
    let phase = if snn { LossPhase::Snn } else { LossPhase::Ann };
    let (loss, breakdown) = total_loss(&mut tape, phase, terms, w)?;
    let mut record = StepRecord {
        phase: plan.phase.as_str().into(),
        epoch: 0,
        step: 0,
        pair: pair.id.clone(),
        lr,
        grad_norm: None,
        skipped: false,
        loss: breakdown,
        rates: out
            .layers
            .iter()
            .filter_map(|s| s.rate.map(|r| (s.name.clone(), r)))
            .collect(),
    };
    let mut g = tape.backward(loss)?;
    let mut grads: BTreeMap<String, Tensor> = bound
        .vars
        .iter()
        .filter(|(n, _)| plan.trainable(n))
        .filter_map(|(n, &v)| g.take(v).map(|t| (n.clone(), t)))
        .collect();
    if grads.values().any(|t| !t.is_finite()) {
        record.skipped = true;
        return Ok(record);
    }
    record.grad_norm = Some(clip_global_norm(&mut grads, plan.optim.clip_norm));
    let mut params = net.params().clone();
    record.skipped = !adam_step(&mut params, &grads, adam, &plan.optim, lr)?;
    for (n, t) in params {
        *net.param_mut(&n).expect("known parameter") = t;
    }
    clamp_lif_params(net);
    if plan.phase.bn_mode() == BnMode::Train {
        net.set_bn_stats(out.bn_updates);
    }
    Ok(record)
}

/// Calibrates thresholds at percentile `p` on `pairs` and builds the
/// spiking student from the analog teacher.
pub fn convert(teacher: &Network, student: &NetworkSpec, pairs: &[Pair], p: f64, seed: u64) -> Result<Network> {
    let vols: Vec<(Volume, Volume)> = pairs.iter().map(|q| (q.fixed.clone(), q.moving.clone())).collect();
    let cal = record_activations(teacher, &vols, RESERVOIR_CAP, seed)?;
    let th = calibrate_thresholds(&cal, p)?;
    transfer_weights(teacher, student, &th)
}

/// Registers and scores every labelled pair.
pub fn evaluate_network(net: &Network, pairs: &[Pair]) -> Result<Vec<PairResult>> {
    pairs
        .iter()
        .map(|p| {
            let (Some(fs), Some(ms)) = (&p.fixed_seg, &p.moving_seg) else {
                return Err(Error::invalid(format!("pair `{}` has no label maps", p.id)));
            };
            let (u, stats) = net.register(&p.fixed, &p.moving, Precision::Single)?;
            let rates = stats.iter().filter_map(|s| s.rate.map(|r| (s.name.clone(), r))).collect();
            evaluate_pair(&p.id, &p.fixed, &p.moving, fs, ms, &u, &p.labels(), rates)
        })
        .collect()
}

/// Sectioned run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrainConfig")]
pub struct TrainConfig {
    pub run: RunConfig,
    pub network: NetworkSpec,
    pub ann: OptimConfig,
    pub snn: OptimConfig,
    pub loss: LossWeights,
    pub convert: ConvertConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvertConfig {
    pub percentile: f64,
    /// Pairs used for calibration, taken from the start of the train split.
    pub calibration_pairs: usize,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        ConvertConfig {
            percentile: crate::conversion::CANONICAL_PERCENTILE,
            calibration_pairs: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: String,
    /// Leading pairs used for training; the rest are held out.
    pub train_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: "data".into(),
            train_pairs: 6,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            run: RunConfig::default(),
            network: NetworkSpec::desk(),
            ann: OptimConfig::ann(),
            snn: OptimConfig::snn(),
            loss: LossWeights::default(),
            convert: ConvertConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Optimiser section as written; missing keys fall back to the flavour's
/// defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OptimOverrides {
    lr: Option<f64>,
    betas: Option<(f64, f64)>,
    eps: Option<f64>,
    eta_min: Option<f64>,
    epochs: Option<usize>,
    clip_norm: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
}

impl OptimOverrides {
    fn over(self, base: OptimConfig) -> OptimConfig {
        OptimConfig {
            lr: self.lr.unwrap_or(base.lr),
            betas: self.betas.unwrap_or(base.betas),
            eps: self.eps.unwrap_or(base.eps),
            eta_min: self.eta_min.unwrap_or(base.eta_min),
            epochs: self.epochs.unwrap_or(base.epochs),
            clip_norm: self.clip_norm.unwrap_or(base.clip_norm),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrainConfig {
    #[serde(default)]
    run: RunConfig,
    #[serde(default = "NetworkSpec::desk")]
    network: NetworkSpec,
    #[serde(default)]
    ann: OptimOverrides,
    #[serde(default)]
    snn: OptimOverrides,
    #[serde(default)]
    loss: LossWeights,
    #[serde(default)]
    convert: ConvertConfig,
    #[serde(default)]
    data: DataConfig,
}

impl TryFrom<RawTrainConfig> for TrainConfig {
    type Error = Error;

    fn try_from(r: RawTrainConfig) -> Result<Self> {
        let cfg = TrainConfig {
            run: r.run,
            network: r.network,
            ann: r.ann.over(OptimConfig::ann()),
            snn: r.snn.over(OptimConfig::snn()),
            loss: r.loss,
            convert: r.convert,
            data: r.data,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.ann.validate()?;
        self.snn.validate()?;
        self.loss.validate()?;
        if !(0.0..=100.0).contains(&self.convert.percentile) {
            return Err(Error::Config("convert.percentile must lie in [0, 100]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}
