//! Leaky integrate-and-fire dynamics with reset-to-zero and a fast-sigmoid
//! surrogate gradient.
//!
//! One step is `v <- tau * v + I`, `s = [v >= theta]`, `v <- v * (1 - s)`.
//! The membrane starts at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const TAU_MIN: f64 = 0.01;
pub const THETA_MIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Leak per channel, in `(0, 1]`.
    pub tau: Vec<f64>,
    pub theta: f64,
    pub alpha: f64,
    pub learn_tau: bool,
    pub learn_theta: bool,
}

impl LifParams {
    pub fn new(tau: Vec<f64>, theta: f64) -> Result<Self> {
        let p = LifParams {
            tau,
            theta,
            alpha: DEFAULT_ALPHA,
            learn_tau: true,
            learn_theta: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_empty() || self.tau.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::invalid("tau must lie in (0, 1]"));
        }
        if !(self.theta > 0.0) {
            return Err(Error::invalid("theta must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        Ok(())
    }

    fn tau_for(&self, channel: usize) -> f64 {
        if self.tau.len() == 1 {
            self.tau[0]
        } else {
            self.tau[channel]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub v: Tensor,
    pub t: usize,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        LifState {
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// Advances one timestep. Returns the binary spike tensor and the new state.
pub fn lif_step(state: &LifState, input: &Tensor, params: &LifParams) -> Result<(Tensor, LifState)> {
    if state.v.shape() != input.shape() {
        return Err(Error::shape(
            "lif_step",
            format!("membrane {:?} vs input {:?}", state.v.shape(), input.shape()),
        ));
    }
    let channels = if input.shape().len() == 4 { input.channels() } else { 1 };
    if params.tau.len() != 1 && params.tau.len() != channels {
        return Err(Error::shape("lif_step", "tau length must be 1 or the channel count"));
    }
    let per_channel = input.len() / channels.max(1);
    let mut v = state.v.clone();
    let mut spikes = Tensor::zeros(input.shape());
    for (i, (vm, cur)) in v.data_mut().iter_mut().zip(input.data()).enumerate() {
        let tau = params.tau_for(i / per_channel.max(1));
        *vm = tau * *vm + cur;
        if *vm >= params.theta {
            spikes.data_mut()[i] = 1.0;
            *vm = 0.0;
        }
    }
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "lif_step" });
    }
    Ok((
        spikes,
        LifState {
            v,
            t: state.t + 1,
        },
    ))
}

/// Fast-sigmoid surrogate `alpha * sig(alpha (v - theta)) * (1 - sig(...))`.
pub fn surrogate_grad(v: f64, theta: f64, alpha: f64) -> f64 {
    // sig(x) * sig(-x) == sig(x) * (1 - sig(x)) without cancellation
    let x = alpha * (v - theta);
    alpha * sigmoid(x) * sigmoid(-x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean of a spike sequence over time.
pub fn rate_readout(spikes: &[Tensor]) -> Result<Tensor> {
    let first = spikes
        .first()
        .ok_or_else(|| Error::invalid("rate readout of an empty spike sequence"))?;
    let mut acc = Tensor::zeros(first.shape());
    for s in spikes {
        if s.shape() != first.shape() {
            return Err(Error::shape("rate_readout", "spike tensors differ in shape"));
        }
        acc.add_assign(s);
    }
    let t = spikes.len() as f64;
    Ok(acc.map(|v| v / t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakSchedule {
    pub encoder: Vec<f64>,
    pub bottleneck: f64,
    pub decoder: Vec<f64>,
}

/// U-shaped leak initialisation: linear from `tau_hi` down to `tau_lo`
/// through the encoder, `tau_lo` at the bottleneck, and back up to `tau_hi`
/// at the shallowest decoder stage.
pub fn leak_schedule(
    encoder_levels: usize,
    decoder_levels: usize,
    tau_hi: f64,
    tau_lo: f64,
) -> Result<LeakSchedule> {
    if encoder_levels == 0 || decoder_levels == 0 {
        return Err(Error::invalid("leak schedule needs at least one level"));
    }
    if tau_hi <= tau_lo {
        return Err(Error::invalid("tau_hi must exceed tau_lo"));
    }
    let ramp = |n: usize, i: usize| {
        if n == 1 {
            0.0
        } else {
            i as f64 / (n - 1) as f64
        }
    };
    let encoder = (0..encoder_levels)
        .map(|i| tau_hi + (tau_lo - tau_hi) * ramp(encoder_levels, i))
        .collect();
    let decoder = (0..decoder_levels)
        .map(|j| {
            if decoder_levels == 1 {
                tau_hi
            } else {
                tau_lo + (tau_hi - tau_lo) * ramp(decoder_levels, j)
            }
        })
        .collect();
    Ok(LeakSchedule {
        encoder,
        bottleneck: tau_lo,
        decoder,
    })
}

/// Forward spike nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    /// Binary Heaviside forward, surrogate backward.
    Binary,
    /// `sig(alpha (v - theta))` forward; its exact derivative backward.
    Relaxed,
}

/// Output of a multi-step LIF layer recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LifOutput {
    /// Mean spike rate per neuron, same shape as the input current.
    pub rate: Var,
    /// Total binary spikes over all neurons and timesteps.
    pub spike_count: u64,
    pub neurons: usize,
    pub timesteps: usize,
}

impl LifOutput {
    pub fn mean_rate(&self) -> f64 {
        self.spike_count as f64 / (self.timesteps * self.neurons) as f64
    }
}

impl Tape {
    /// Runs `timesteps` LIF steps driven by a constant `current` and records
    /// the resulting rate tensor. `tau` has one entry per channel and `theta`
    /// a single entry. Backward is surrogate BPTT; the reset factor receives
    /// the surrogate through a straight-through spike.
    pub fn lif_rate(
        &mut self,
        current: Var,
        tau: Var,
        theta: Var,
        timesteps: usize,
        alpha: f64,
        mode: SpikeMode,
    ) -> Result<LifOutput> {
        if timesteps == 0 {
            return Err(Error::invalid("LIF needs at least one timestep"));
        }
        let cur = self.value(current);
        if cur.shape().len() != 4 {
            return Err(Error::shape("lif_rate", format!("{:?}", cur.shape())));
        }
        let c = cur.channels();
        let n = cur.voxels();
        if self.value(tau).len() != c || self.value(theta).len() != 1 {
            return Err(Error::shape(
                "lif_rate",
                format!(
                    "tau {} entries / theta {} entries for {c} channels",
                    self.value(tau).len(),
                    self.value(theta).len()
                ),
            ));
        }
        let taus = self.value(tau).data().to_vec();
        let th = self.value(theta).item();
        let total = c * n;
        let mut membrane = vec![0.0; total];
        let mut rate = vec![0.0; total];
        let mut trace = vec![0.0; timesteps * total];
        let mut count = 0_u64;
        for t in 0..timesteps {
            for ch in 0..c {
                let tau_c = taus[ch];
                for i in ch * n..(ch + 1) * n {
                    let v = tau_c * membrane[i] + cur.data()[i];
                    trace[t * total + i] = v;
                    let s = match mode {
                        SpikeMode::Binary => {
                            if v >= th {
                                count += 1;
                                1.0
                            } else {
                                0.0
                            }
                        }
                        SpikeMode::Relaxed => sigmoid(alpha * (v - th)),
                    };
                    rate[i] += s;
                    membrane[i] = v * (1.0 - s);
                }
            }
        }
        if membrane.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "lif_rate" });
        }
        let inv_t = 1.0 / timesteps as f64;
        for r in &mut rate {
            *r *= inv_t;
        }
        let out = Tensor::new(cur.shape().to_vec(), rate)?;
        let shape = cur.shape().to_vec();
        let rate_var = self.push_op("lif_rate", out, &[current, tau, theta], move |g, _| {
            let mut g_cur = vec![0.0; total];
            let mut g_tau = vec![0.0; c];
            let mut g_theta = 0.0;
            for ch in 0..c {
                let tau_c = taus[ch];
                for i in ch * n..(ch + 1) * n {
                    let g_direct = g.data()[i] * inv_t;
                    let mut g_h = 0.0;
                    for t in (0..timesteps).rev() {
                        let v = trace[t * total + i];
                        let sig = sigmoid(alpha * (v - th));
                        let sg = surrogate_grad(v, th, alpha);
                        let s = match mode {
                            SpikeMode::Binary => {
                                if v >= th {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            SpikeMode::Relaxed => sig,
                        };
                        let g_s = g_direct - g_h * v;
                        let g_v = g_s * sg + g_h * (1.0 - s);
                        g_theta -= g_s * sg;
                        g_cur[i] += g_v;
                        if t > 0 {
                            let v_prev = trace[(t - 1) * total + i];
                            let s_prev = match mode {
                                SpikeMode::Binary => {
                                    if v_prev >= th {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                SpikeMode::Relaxed => sigmoid(alpha * (v_prev - th)),
                            };
                            g_tau[ch] += g_v * v_prev * (1.0 - s_prev);
                        }
                        g_h = g_v * tau_c;
                    }
                }
            }
            vec![
                (current, Tensor::new(shape.clone(), g_cur).expect("shape")),
                (tau, Tensor::new(vec![c], g_tau).expect("shape")),
                (theta, Tensor::scalar(g_theta)),
            ]
        })?;
        Ok(LifOutput {
            rate: rate_var,
            spike_count: count,
            neurons: total,
            timesteps,
        })
    }
}
