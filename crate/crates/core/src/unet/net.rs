use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::spec::{Flavor, LayerInfo, LayerKind, NetworkSpec, OutputMode};
use crate::deform::{DisplacementField, FieldRole, Volume};
use crate::error::{Error, Result};
use crate::lif::{leak_schedule, SpikeMode};
use crate::stats::percentile_sorted;
use crate::tensor::{BnMode, Precision, RunningStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Threshold given to freshly initialised (unconverted) spiking layers.
pub const DEFAULT_THETA: f64 = 1.0;

/// U-Net weights plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    flavor: Flavor,
    params: BTreeMap<String, Tensor>,
    bn: BTreeMap<String, RunningStats>,
}

/// Per-layer record from one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerStat {
    pub name: String,
    pub channels: usize,
    /// Neurons `N_l` = channels x output voxels.
    pub neurons: usize,
    pub timesteps: usize,
    /// Binary spikes over all neurons and timesteps (spiking flavour).
    pub spike_count: Option<u64>,
    /// `spike_count / (T N_l)` (spiking flavour).
    pub rate: Option<f64>,
    /// Post-ReLU percentiles (p50, p90, p99, max) of positive activations
    /// and the positive fraction (analog flavour).
    pub activation_summary: Option<ActivationSummary>,
    /// Strictly positive post-ReLU activations, when requested.
    #[serde(skip)]
    pub positive: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ActivationSummary {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
    pub positive_fraction: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardConfig {
    pub bn: BnMode,
    pub spike_mode: SpikeMode,
    /// Keep every positive activation in the hooks (analog flavour).
    pub keep_activations: bool,
}

impl ForwardConfig {
    pub fn inference() -> Self {
        ForwardConfig {
            bn: BnMode::Frozen,
            spike_mode: SpikeMode::Binary,
            keep_activations: false,
        }
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound")))
    }
}

pub struct ForwardOutput {
    /// Displacement field `[3, D, H, W]`.
    pub field: Var,
    /// Raw head output (the velocity in velocity mode, else equal to `field`).
    pub head: Var,
    pub layers: Vec<LayerStat>,
    /// Post-activation output of every block, in layer order.
    pub block_outputs: Vec<Var>,
    /// Scalar mean rate per spiking layer, differentiable.
    pub rates: Vec<Var>,
    /// Updated running statistics (train-mode BN only).
    pub bn_updates: BTreeMap<String, RunningStats>,
}

fn conv_shape(l: &LayerInfo) -> Vec<usize> {
    vec![l.cout, l.cin, l.kernel, l.kernel, l.kernel]
}

impl Network {
    /// Randomly initialised network. Convs use He-normal weights and zero
    /// bias; the head uses `head_init_std`. Spiking layers start from the
    /// leak schedule and a unit threshold.
    pub fn build(spec: &NetworkSpec, flavor: Flavor, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut bn = BTreeMap::new();
        let taus = layer_taus(spec)?;
        for l in spec.layers(flavor) {
            match l.kind {
                LayerKind::Smoothing => {
                    params.insert("smooth.weight".into(), uniform_kernel(l.cout, l.kernel));
                }
                LayerKind::Head => {
                    let normal = Normal::new(0.0, spec.head_init_std).map_err(|e| Error::invalid(e.to_string()))?;
                    let shape = conv_shape(&l);
                    params.insert("head.weight".into(), Tensor::from_fn(&shape, |_| normal.sample(&mut rng)));
                    params.insert("head.bias".into(), Tensor::zeros(&[l.cout]));
                }
                _ => {
                    let fan_in = (l.cin * l.kernel.pow(3)) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                    let shape = conv_shape(&l);
                    let n = &l.name;
                    params.insert(format!("{n}.weight"), Tensor::from_fn(&shape, |_| normal.sample(&mut rng)));
                    params.insert(format!("{n}.bias"), Tensor::zeros(&[l.cout]));
                    params.insert(format!("{n}.gamma"), Tensor::full(&[l.cout], 1.0));
                    params.insert(format!("{n}.beta"), Tensor::zeros(&[l.cout]));
                    bn.insert(n.clone(), RunningStats::new(l.cout));
                    if flavor == Flavor::Snn {
                        params.insert(format!("{n}.tau"), Tensor::full(&[l.cout], taus[n]));
                        params.insert(format!("{n}.theta"), Tensor::scalar(DEFAULT_THETA));
                    }
                }
            }
        }
        Ok(Network {
            spec: spec.clone(),
            flavor,
            params,
            bn,
        })
    }

    /// Assembles a network from named tensors, checking every shape against
    /// the spec.
    pub fn from_parts(
        spec: &NetworkSpec,
        flavor: Flavor,
        params: BTreeMap<String, Tensor>,
        bn: BTreeMap<String, RunningStats>,
    ) -> Result<Self> {
        let template = Network::build(spec, flavor, 0)?;
        if params.len() != template.params.len() || bn.len() != template.bn.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors and {} BN layers, found {} and {}",
                template.params.len(),
                template.bn.len(),
                params.len(),
                bn.len()
            )));
        }
        for (name, t) in &template.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, spec needs {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        for (name, s) in &template.bn {
            match bn.get(name) {
                Some(b) if b.mean.shape() == s.mean.shape() && b.var.shape() == s.var.shape() => {}
                _ => return Err(Error::Checkpoint(format!("bad BN statistics for `{name}`"))),
            }
        }
        Ok(Network {
            spec: spec.clone(),
            flavor,
            params,
            bn,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn bn_stats(&self) -> &BTreeMap<String, RunningStats> {
        &self.bn
    }

    pub fn set_bn_stats(&mut self, updates: BTreeMap<String, RunningStats>) {
        for (k, v) in updates {
            self.bn.insert(k, v);
        }
    }

    /// Number of learnable scalars.
    pub fn num_params(&self) -> u64 {
        self.params.values().map(|t| t.len() as u64).sum()
    }

    /// Scalar threshold of a spiking layer.
    pub fn theta(&self, layer: &str) -> Option<f64> {
        self.params.get(&format!("{layer}.theta")).map(|t| t.item())
    }

    /// Places every parameter on the tape; `trainable` selects which receive
    /// gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }

    /// Records a forward pass. `fixed` and `moving` are `[1, D, H, W]` vars.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        fixed: Var,
        moving: Var,
        cfg: &ForwardConfig,
    ) -> Result<ForwardOutput> {
        let (fs, ms) = (tape.value(fixed).shape().to_vec(), tape.value(moving).shape().to_vec());
        if fs != ms || fs.len() != 4 || fs[0] != 1 {
            return Err(Error::shape("forward", format!("fixed {fs:?} vs moving {ms:?}")));
        }
        let div = self.spec.divisor();
        if fs[1..].iter().any(|&d| d % div != 0 || d == 0) {
            return Err(Error::invalid(format!(
                "spatial dims {:?} are not divisible by {div}",
                &fs[1..]
            )));
        }
        let input = tape.concat_channels(fixed, moving)?;
        let mut outputs: BTreeMap<String, Var> = BTreeMap::new();
        outputs.insert("input".into(), input);
        let mut out = ForwardOutput {
            field: input,
            head: input,
            layers: Vec::new(),
            block_outputs: Vec::new(),
            rates: Vec::new(),
            bn_updates: BTreeMap::new(),
        };
        let snn = self.flavor == Flavor::Snn;
        for l in self.spec.layers(self.flavor) {
            let mut parts = l.inputs.iter().map(|n| outputs[n]);
            let first = parts.next().expect("layer has an input");
            let mut x = if l.upsample_first {
                tape.upsample_nearest2(first)?
            } else {
                first
            };
            for p in parts {
                x = tape.concat_channels(x, p)?;
            }
            let y = match l.kind {
                LayerKind::Head => {
                    let w = bound.get("head.weight")?;
                    let b = bound.get("head.bias")?;
                    tape.conv3d(x, w, Some(b), 1, 0)?
                }
                LayerKind::Smoothing => {
                    let w = bound.get("smooth.weight")?;
                    tape.depthwise_conv3d_replicate(x, w)?
                }
                _ => self.block(tape, bound, &l, x, cfg, snn, &mut out)?,
            };
            outputs.insert(l.name.clone(), y);
        }
        let last = self.spec.layers(self.flavor).last().expect("non-empty").name.clone();
        let head = outputs[&last];
        out.head = head;
        out.field = match self.spec.output_mode {
            OutputMode::Displacement => head,
            OutputMode::Velocity => tape.svf_integrate(head, self.spec.squaring_steps)?,
        };
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        l: &LayerInfo,
        x: Var,
        cfg: &ForwardConfig,
        snn: bool,
        out: &mut ForwardOutput,
    ) -> Result<Var> {
        let n = &l.name;
        let w = bound.get(&format!("{n}.weight"))?;
        let b = bound.get(&format!("{n}.bias"))?;
        let conv = tape.conv3d(x, w, Some(b), l.stride, l.kernel / 2)?;
        let gamma = bound.get(&format!("{n}.gamma"))?;
        let beta = bound.get(&format!("{n}.beta"))?;
        let mut stats = self.bn[n].clone();
        let normed = tape.batchnorm3d(conv, gamma, beta, &mut stats, cfg.bn, BN_EPS, BN_MOMENTUM)?;
        if cfg.bn == BnMode::Train {
            out.bn_updates.insert(n.clone(), stats);
        }
        let neurons = tape.value(normed).len();
        let mut stat = LayerStat {
            name: n.clone(),
            channels: l.cout,
            neurons,
            timesteps: if snn { self.spec.timesteps } else { 1 },
            ..Default::default()
        };
        let y = if snn {
            let tau = bound.get(&format!("{n}.tau"))?;
            let theta = bound.get(&format!("{n}.theta"))?;
            let lif = tape.lif_rate(normed, tau, theta, self.spec.timesteps, self.spec.alpha, cfg.spike_mode)?;
            stat.spike_count = Some(lif.spike_count);
            stat.rate = Some(lif.mean_rate());
            let r = tape.mean(lif.rate)?;
            out.rates.push(r);
            lif.rate
        } else {
            let y = tape.relu(normed)?;
            let mut pos: Vec<f64> = tape.value(y).data().iter().copied().filter(|&v| v > 0.0).collect();
            pos.sort_by(f64::total_cmp);
            if !pos.is_empty() {
                stat.activation_summary = Some(ActivationSummary {
                    p50: percentile_sorted(&pos, 50.0),
                    p90: percentile_sorted(&pos, 90.0),
                    p99: percentile_sorted(&pos, 99.0),
                    max: *pos.last().expect("non-empty"),
                    positive_fraction: pos.len() as f64 / neurons as f64,
                });
            }
            if cfg.keep_activations {
                stat.positive = pos;
            }
            y
        };
        out.layers.push(stat);
        out.block_outputs.push(y);
        Ok(y)
    }

    /// Inference on a volume pair: frozen BN, binary spikes, no gradients.
    pub fn register(
        &self,
        fixed: &Volume,
        moving: &Volume,
        precision: Precision,
    ) -> Result<(DisplacementField, Vec<LayerStat>)> {
        self.run_inference(fixed, moving, precision, &ForwardConfig::inference())
    }

    pub fn run_inference(
        &self,
        fixed: &Volume,
        moving: &Volume,
        precision: Precision,
        cfg: &ForwardConfig,
    ) -> Result<(DisplacementField, Vec<LayerStat>)> {
        let mut tape = Tape::inference(precision);
        let bound = self.bind(&mut tape, |_| false);
        let f = tape.constant(fixed.tensor().clone());
        let m = tape.constant(moving.tensor().clone());
        let out = self.forward(&mut tape, &bound, f, m, cfg)?;
        let u = tape.value(out.field).clone();
        if !u.is_finite() {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok((DisplacementField::new(u, FieldRole::Displacement)?, out.layers))
    }
}

/// Leak per spiking layer from the U-shaped schedule; the stem shares the
/// first encoder value.
pub fn layer_taus(spec: &NetworkSpec) -> Result<BTreeMap<String, f64>> {
    let lv = spec.levels();
    let sched = leak_schedule(lv, lv, spec.tau_hi, spec.tau_lo)?;
    let mut out = BTreeMap::new();
    out.insert("stem".to_string(), sched.encoder[0]);
    for i in 0..lv {
        out.insert(format!("enc{}", i + 1), sched.encoder[i]);
        out.insert(format!("dec{}", i + 1), sched.decoder[i]);
    }
    for j in 0..spec.bottleneck_convs {
        out.insert(format!("bott{}", j + 1), sched.bottleneck);
    }
    Ok(out)
}

/// Averaging kernel `[C, 1, k, k, k]` with entries `1 / k^3`.
pub fn uniform_kernel(channels: usize, k: usize) -> Tensor {
    Tensor::full(&[channels, 1, k, k, k], 1.0 / k.pow(3) as f64)
}

/// Depthwise edge-replicated smoothing of a `[3, D, H, W]` field. `None` leaves
/// the field unchanged.
pub fn head_smoothing(field: &Tensor, kernel: Option<&Tensor>) -> Result<DisplacementField> {
    let Some(k) = kernel else {
        return DisplacementField::new(field.clone(), FieldRole::Displacement);
    };
    let ks = k.shape();
    if ks.len() != 5 || ks[2] % 2 == 0 {
        return Err(Error::invalid(format!("smoothing kernel {ks:?} must be odd-sized")));
    }
    let mut tape = Tape::inference(Precision::Double);
    let x = tape.constant(field.clone());
    let w = tape.constant(k.clone());
    let y = tape.depthwise_conv3d_replicate(x, w)?;
    DisplacementField::new(tape.value(y).clone(), FieldRole::Displacement)
}
