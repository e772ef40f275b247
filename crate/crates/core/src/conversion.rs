//! Analog-to-spiking conversion: record teacher activations, set each
//! spiking threshold to a percentile of the positive activations, and copy
//! the weights into a spiking student.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::deform::Volume;
use crate::error::{Error, Result};
use crate::lif::THETA_MIN;
use crate::stats::percentile_sorted;
use crate::tensor::{Precision, Tensor};
use crate::unet::{layer_taus, uniform_kernel, Flavor, ForwardConfig, Network, NetworkSpec};

pub const RESERVOIR_CAP: usize = 1_000_000;
pub const CANONICAL_PERCENTILE: f64 = 50.0;

/// Uniform sample of a stream (Vitter's algorithm R).
#[derive(Clone, Debug)]
pub struct Reservoir {
    cap: usize,
    seen: u64,
    samples: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(cap: usize, seed: u64) -> Self {
        Reservoir {
            cap,
            seen: 0,
            samples: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn offer(&mut self, x: f64) {
        self.seen += 1;
        if self.samples.len() < self.cap {
            self.samples.push(x);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.cap {
                self.samples[j as usize] = x;
            }
        }
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

/// Positive teacher activations per spiking site, in layer order.
#[derive(Clone, Debug)]
pub struct CalibrationSet {
    pub layers: Vec<(String, Reservoir)>,
    pub pairs: usize,
}

impl CalibrationSet {
    pub fn new(layer_names: &[String], cap: usize, seed: u64) -> Self {
        let layers = layer_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), Reservoir::new(cap, seed.wrapping_add(i as u64))))
            .collect();
        CalibrationSet { layers, pairs: 0 }
    }

    /// Adds activations for one layer; only strictly positive values are kept.
    pub fn add(&mut self, layer: &str, values: &[f64]) -> Result<()> {
        let (_, res) = self
            .layers
            .iter_mut()
            .find(|(n, _)| n == layer)
            .ok_or_else(|| Error::invalid(format!("unknown calibration layer `{layer}`")))?;
        for &v in values {
            if v > 0.0 {
                res.offer(v);
            }
        }
        Ok(())
    }

    pub fn samples(&self, layer: &str) -> Option<&[f64]> {
        self.layers.iter().find(|(n, _)| n == layer).map(|(_, r)| r.samples())
    }
}

/// Runs the frozen teacher over `pairs` and collects post-ReLU activations
/// at every block.
pub fn record_activations(
    teacher: &Network,
    pairs: &[(Volume, Volume)],
    cap: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if pairs.is_empty() {
        return Err(Error::invalid("calibration needs at least one pair"));
    }
    if teacher.flavor() != Flavor::Ann {
        return Err(Error::invalid("calibration records an analog teacher"));
    }
    let mut cal = CalibrationSet::new(&teacher.spec().spiking_layers(), cap, seed);
    let cfg = ForwardConfig {
        keep_activations: true,
        ..ForwardConfig::inference()
    };
    for (fixed, moving) in pairs {
        let (_, stats) = teacher.run_inference(fixed, moving, Precision::Double, &cfg)?;
        for s in stats {
            cal.add(&s.name, &s.positive)?;
        }
        cal.pairs += 1;
    }
    Ok(cal)
}

/// `theta_l = Q_p` of the positive samples of each layer (linear
/// interpolation), floored at the minimum threshold.
pub fn calibrate_thresholds(cal: &CalibrationSet, p: f64) -> Result<BTreeMap<String, f64>> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let mut out = BTreeMap::new();
    for (name, res) in &cal.layers {
        if res.samples().is_empty() {
            return Err(Error::SilentLayer { layer: name.clone() });
        }
        let mut s = res.samples().to_vec();
        s.sort_by(f64::total_cmp);
        out.insert(name.clone(), percentile_sorted(&s, p).max(THETA_MIN));
    }
    Ok(out)
}

/// Builds the spiking student: conv, BN and head tensors are copied
/// bitwise, leaks follow the U-shaped schedule, thresholds come from
/// calibration and the smoothing kernel starts as a uniform average.
/// `student` may differ from the teacher spec only in spiking settings
/// (timesteps, leak range, surrogate steepness, smoothing).
pub fn transfer_weights(
    teacher: &Network,
    student: &NetworkSpec,
    thresholds: &BTreeMap<String, f64>,
) -> Result<Network> {
    if teacher.flavor() != Flavor::Ann {
        return Err(Error::invalid("transfer expects an analog teacher"));
    }
    let mut net = Network::build(student, Flavor::Snn, 0)?;
    for (name, t) in teacher.params() {
        let slot = net
            .param_mut(name)
            .ok_or_else(|| Error::shape("transfer_weights", format!("student has no `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape(
                "transfer_weights",
                format!("`{name}`: teacher {:?} vs student {:?}", t.shape(), slot.shape()),
            ));
        }
        *slot = t.clone();
    }
    if teacher.bn_stats().keys().ne(net.bn_stats().keys()) {
        return Err(Error::shape("transfer_weights", "batch-norm layers differ"));
    }
    net.set_bn_stats(teacher.bn_stats().clone());
    let taus = layer_taus(student)?;
    for layer in student.spiking_layers() {
        let theta = *thresholds
            .get(&layer)
            .ok_or_else(|| Error::invalid(format!("no threshold for `{layer}`")))?;
        let c = net.param(&format!("{layer}.tau")).expect("spiking layer").len();
        *net.param_mut(&format!("{layer}.tau")).expect("tau") = Tensor::full(&[c], taus[&layer]);
        *net.param_mut(&format!("{layer}.theta")).expect("theta") = Tensor::scalar(theta);
    }
    if let Some(k) = net.param_mut("smooth.weight") {
        let s = k.shape().to_vec();
        *k = uniform_kernel(s[0], s[2]);
    }
    Ok(net)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub layer: String,
    pub samples: usize,
    pub seen: u64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub theta: f64,
}

pub fn calibration_report(cal: &CalibrationSet, thresholds: &BTreeMap<String, f64>) -> Vec<CalibrationRow> {
    cal.layers
        .iter()
        .map(|(name, res)| {
            let mut s = res.samples().to_vec();
            s.sort_by(f64::total_cmp);
            let (min, median, max) = if s.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                (s[0], percentile_sorted(&s, 50.0), s[s.len() - 1])
            };
            CalibrationRow {
                layer: name.clone(),
                samples: s.len(),
                seen: res.seen(),
                min,
                median,
                max,
                theta: thresholds.get(name).copied().unwrap_or(f64::NAN),
            }
        })
        .collect()
}

/// Tab-separated rendering of the calibration report.
pub fn calibration_report_text(rows: &[CalibrationRow], percentile: f64, pairs: usize) -> String {
    let mut out = format!("# percentile={percentile} pairs={pairs}\nlayer\tsamples\tseen\tmin\tmedian\tmax\ttheta\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.layer, r.samples, r.seen, r.min, r.median, r.max, r.theta
        );
    }
    out
}
