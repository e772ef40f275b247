//! Operation counts and the arithmetic-energy proxy.
//!
//! The analog cost is the dense MAC count. The spiking cost is accumulates
//! triggered by spikes: each output spike of a layer costs one accumulate per
//! downstream connection (its fan-in). Layers that consume analog values
//! (the stem reads the image; head and smoothing read rates) stay at MAC
//! cost.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unet::{Flavor, LayerKind, LayerStat, NetworkSpec};

pub const DISCLAIMER: &str = "proxy, not hardware measurement";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConstants {
    /// Accumulate energy in pJ.
    pub e_ac: f64,
    /// Multiply-accumulate energy in pJ.
    pub e_mac: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants { e_ac: 0.9, e_mac: 4.6 }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_ac > 0.0 && self.e_mac > 0.0) {
            return Err(Error::invalid("energy constants must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacCount {
    pub layers: Vec<(String, u64)>,
    pub total: u64,
}

/// Dense MACs per layer, `Cout Cin k^3` per output voxel, stem included.
pub fn count_macs(spec: &NetworkSpec, flavor: Flavor, dims: [usize; 3]) -> MacCount {
    let layers: Vec<(String, u64)> = spec.layers(flavor).iter().map(|l| (l.name.clone(), l.macs(dims))).collect();
    let total = layers.iter().map(|l| l.1).sum();
    MacCount { layers, total }
}

/// Accumulates triggered by one output spike of each spiking layer.
///
/// A consumer at the producer's resolution contributes `Cout k^3`; a stride-2
/// consumer sees each input in an eighth as many outputs, and a consumer that
/// upsamples x2 first sees it eight times as often. Head and smoothing are
/// excluded because they are charged at MAC cost.
pub fn fan_ins(spec: &NetworkSpec) -> BTreeMap<String, f64> {
    let layers = spec.layers(Flavor::Snn);
    let scale: BTreeMap<&str, usize> = layers.iter().map(|l| (l.name.as_str(), l.scale)).collect();
    let mut out: BTreeMap<String, f64> = layers.iter().filter(|l| l.block).map(|l| (l.name.clone(), 0.0)).collect();
    for c in layers.iter().filter(|l| l.block) {
        for p in &c.inputs {
            let Some(&ps) = scale.get(p.as_str()) else { continue };
            let per_out = (c.cout * c.kernel.pow(3)) as f64;
            // output voxels of the consumer per producer voxel
            let ratio = (ps as f64 / c.scale as f64).powi(3);
            *out.get_mut(p).expect("spiking producer") += per_out * ratio;
        }
    }
    out
}

/// Spike activity of one layer, averaged over pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerActivity {
    pub name: String,
    pub spikes: f64,
    pub fan_in: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynopsCount {
    pub layers: Vec<(String, f64)>,
    pub total: f64,
}

/// `SynOps_l = spikes_l x fan_in_l`.
pub fn project_synops(layers: &[LayerActivity]) -> Result<SynopsCount> {
    let mut rows = Vec::with_capacity(layers.len());
    for l in layers {
        let f = l
            .fan_in
            .ok_or_else(|| Error::invalid(format!("layer `{}` has no fan-in", l.name)))?;
        rows.push((l.name.clone(), l.spikes * f));
    }
    let total = rows.iter().map(|r| r.1).sum();
    Ok(SynopsCount { layers: rows, total })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyRatio {
    /// SNN energy over ANN energy.
    pub r: f64,
    /// `1 / r`.
    pub reduction: f64,
}

/// `R = (e_ac SynOps) / (e_mac MACs)`.
pub fn projected_ratio(ann_macs: f64, snn_synops: f64, c: &EnergyConstants) -> Result<EnergyRatio> {
    c.validate()?;
    if !(ann_macs > 0.0) {
        return Err(Error::invalid("ANN MAC count must be positive"));
    }
    let r = c.e_ac * snn_synops / (c.e_mac * ann_macs);
    Ok(EnergyRatio { r, reduction: 1.0 / r })
}

/// `R = (e_ac / e_mac) T rho_bar`.
pub fn analytical_ratio(timesteps: usize, rho_bar: f64, c: &EnergyConstants) -> Result<EnergyRatio> {
    c.validate()?;
    if timesteps == 0 || !(0.0..=1.0).contains(&rho_bar) {
        return Err(Error::invalid("need T >= 1 and rho_bar in [0, 1]"));
    }
    let r = c.e_ac / c.e_mac * timesteps as f64 * rho_bar;
    Ok(EnergyRatio { r, reduction: 1.0 / r })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyRow {
    pub layer: String,
    pub macs: u64,
    pub neurons: f64,
    pub spikes: f64,
    pub rate: f64,
    pub fan_in: f64,
    pub synops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub disclaimer: &'static str,
    pub pairs: usize,
    pub timesteps: usize,
    pub rows: Vec<EnergyRow>,
    pub ann_macs: u64,
    /// Spike-driven accumulates (spiking layers only).
    pub snn_synops: f64,
    /// Stem conv, read from the analog input.
    pub stem_macs: u64,
    /// 1x1 head plus smoothing, read from rates.
    pub head_macs: u64,
    /// `snn_synops + stem_macs + head_macs`.
    pub snn_ops: f64,
    /// `ann_macs / snn_ops`.
    pub op_reduction: f64,
    pub mean_rate: f64,
    pub projected: EnergyRatio,
    /// Projected ratio with the stem and head left out of the spiking cost.
    pub projected_spiking_only: EnergyRatio,
    pub analytical: EnergyRatio,
}

/// Builds the report from per-pair hook records of the spiking network.
/// The network-wide rate is the unweighted mean of the per-layer rates.
pub fn energy_report(
    spec: &NetworkSpec,
    dims: [usize; 3],
    per_pair: &[Vec<LayerStat>],
    c: &EnergyConstants,
) -> Result<EnergyReport> {
    if per_pair.is_empty() {
        return Err(Error::invalid("energy report needs at least one evaluated pair"));
    }
    let fan = fan_ins(spec);
    let layers = spec.layers(Flavor::Snn);
    let n = per_pair.len() as f64;
    let mut rows = Vec::new();
    let mut stem_macs = 0;
    let mut head_macs = 0;
    for l in &layers {
        let macs = l.macs(dims);
        match l.kind {
            LayerKind::Head | LayerKind::Smoothing => {
                head_macs += macs;
                continue;
            }
            LayerKind::Stem => stem_macs += macs,
            _ => {}
        }
        let (mut spikes, mut neurons) = (0.0, 0.0);
        for stats in per_pair {
            let s = stats
                .iter()
                .find(|s| s.name == l.name)
                .ok_or_else(|| Error::invalid(format!("no hook record for `{}`", l.name)))?;
            let count = s
                .spike_count
                .ok_or_else(|| Error::invalid(format!("`{}` has no spike count", l.name)))?;
            spikes += count as f64;
            neurons += s.neurons as f64;
        }
        spikes /= n;
        neurons /= n;
        let fan_in = fan[&l.name];
        rows.push(EnergyRow {
            layer: l.name.clone(),
            macs,
            neurons,
            spikes,
            rate: spikes / (spec.timesteps as f64 * neurons),
            fan_in,
            synops: spikes * fan_in,
        });
    }
    let ann_macs = count_macs(spec, Flavor::Ann, dims).total;
    let snn_synops: f64 = rows.iter().map(|r| r.synops).sum();
    let snn_ops = snn_synops + (stem_macs + head_macs) as f64;
    let mean_rate = rows.iter().map(|r| r.rate).sum::<f64>() / rows.len() as f64;
    // MAC-cost layers are charged at e_mac, spikes at e_ac
    let snn_energy_as_ac = snn_synops + (stem_macs + head_macs) as f64 * c.e_mac / c.e_ac;
    Ok(EnergyReport {
        disclaimer: DISCLAIMER,
        pairs: per_pair.len(),
        timesteps: spec.timesteps,
        rows,
        ann_macs,
        snn_synops,
        stem_macs,
        head_macs,
        snn_ops,
        op_reduction: ann_macs as f64 / snn_ops,
        mean_rate,
        projected: projected_ratio(ann_macs as f64, snn_energy_as_ac, c)?,
        projected_spiking_only: projected_ratio(ann_macs as f64, snn_synops, c)?,
        analytical: analytical_ratio(spec.timesteps, mean_rate.clamp(0.0, 1.0), c)?,
    })
}

impl EnergyReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# energy report ({})", self.disclaimer);
        let _ = writeln!(s, "# pairs={} T={}", self.pairs, self.timesteps);
        let _ = writeln!(s, "layer\tmacs\tneurons\tspikes\trate\tfan_in\tsynops");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.0}\t{:.0}\t{:.6}\t{:.3}\t{:.0}",
                r.layer, r.macs, r.neurons, r.spikes, r.rate, r.fan_in, r.synops
            );
        }
        let _ = writeln!(s, "stem_macs\t{}", self.stem_macs);
        let _ = writeln!(s, "head_macs\t{}", self.head_macs);
        let _ = writeln!(s, "ann_macs\t{}", self.ann_macs);
        let _ = writeln!(s, "snn_synops\t{:.0}", self.snn_synops);
        let _ = writeln!(s, "snn_ops\t{:.0}", self.snn_ops);
        let _ = writeln!(s, "op_reduction\t{:.4}", self.op_reduction);
        let _ = writeln!(s, "mean_rate\t{:.6}", self.mean_rate);
        let _ = writeln!(s, "projected_reduction\t{:.4}", self.projected.reduction);
        let _ = writeln!(s, "projected_reduction_spiking_only\t{:.4}", self.projected_spiking_only.reduction);
        let _ = writeln!(s, "analytical_reduction\t{:.4}", self.analytical.reduction);
        s
    }
}
