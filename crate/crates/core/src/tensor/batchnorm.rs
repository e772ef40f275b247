use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and update the running statistics.
    Train,
    /// Normalise with running statistics; affine parameters still learn.
    Eval,
    /// Normalise with running statistics; affine parameters receive no gradient.
    Frozen,
}

impl Tape {
    /// Batch normalisation over the spatial axes of a `[C, D, H, W]` tensor.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm3d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: BnMode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(Error::shape("batchnorm3d", format!("{:?}", x.shape())));
        }
        let c = x.channels();
        let n = x.voxels();
        for (name, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running mean", running.mean.len()),
            ("running var", running.var.len()),
        ] {
            if len != c {
                return Err(Error::shape(
                    "batchnorm3d",
                    format!("{name} has {len} entries for {c} channels"),
                ));
            }
        }
        let (mean, var) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::invalid("batchnorm3d training needs >= 2 voxels"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let xs = x.channel(ch);
                    let m = xs.iter().sum::<f64>() / n as f64;
                    let v = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var)
            }
            BnMode::Eval | BnMode::Frozen => {
                (running.mean.data().to_vec(), running.var.data().to_vec())
            }
        };
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let d = var[ch] + eps;
            if d <= 0.0 {
                return Err(Error::invalid(format!(
                    "batchnorm3d channel {ch} has zero variance and eps {eps}"
                )));
            }
            inv_std[ch] = 1.0 / d.sqrt();
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = Vec::with_capacity(x.len());
        for ch in 0..c {
            let (m, is) = (mean[ch], inv_std[ch]);
            out.extend(x.channel(ch).iter().map(|v| g[ch] * (v - m) * is + b[ch]));
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        if mode == BnMode::Train {
            let unbiased = n as f64 / (n as f64 - 1.0);
            for ch in 0..c {
                let rm = &mut running.mean.data_mut()[ch];
                *rm = (1.0 - momentum) * *rm + momentum * mean[ch];
                let rv = &mut running.var.data_mut()[ch];
                *rv = (1.0 - momentum) * *rv + momentum * var[ch] * unbiased;
            }
        }
        let inputs: Vec<Var> = if mode == BnMode::Frozen {
            vec![input]
        } else {
            vec![input, gamma, beta]
        };
        self.push_op("batchnorm3d", out, &inputs, move |gout, vals| {
            let x = vals.get(input);
            let gam = vals.get(gamma).data();
            let mut gx = Vec::with_capacity(x.len());
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let xs = x.channel(ch);
                let gs = gout.channel(ch);
                let (m, is) = (mean[ch], inv_std[ch]);
                let sum_g: f64 = gs.iter().sum();
                let sum_gx: f64 = gs.iter().zip(xs).map(|(gv, xv)| gv * (xv - m) * is).sum();
                ggamma[ch] = sum_gx;
                gbeta[ch] = sum_g;
                match mode {
                    BnMode::Train => {
                        let nf = n as f64;
                        let k = gam[ch] * is / nf;
                        gx.extend(gs.iter().zip(xs).map(|(gv, xv)| {
                            let xh = (xv - m) * is;
                            k * (nf * gv - sum_g - xh * sum_gx)
                        }));
                    }
                    BnMode::Eval | BnMode::Frozen => {
                        gx.extend(gs.iter().map(|gv| gv * gam[ch] * is));
                    }
                }
            }
            let mut grads = vec![(input, Tensor::new(x.shape().to_vec(), gx).expect("shape"))];
            if mode != BnMode::Frozen {
                grads.push((gamma, Tensor::new(vec![c], ggamma).expect("shape")));
                grads.push((beta, Tensor::new(vec![c], gbeta).expect("shape")));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn identity_normalisation() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.param(Tensor::from_voxels(1, [2, 2, 2], |_, z, y, x| (z + 2 * y + 4 * x) as f64));
        let g = tape.param(Tensor::full(&[1], 1.0));
        let b = tape.param(Tensor::zeros(&[1]));
        let mut rs = RunningStats::new(1);
        let y = tape.batchnorm3d(x, g, b, &mut rs, BnMode::Frozen, 0.0, 0.1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn frozen_stats_hand_computed() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut rs = RunningStats {
            mean: Tensor::full(&[1], 2.0),
            var: Tensor::full(&[1], 1.0),
        };
        let y = tape.batchnorm3d(x, g, b, &mut rs, BnMode::Frozen, 1e-5, 0.1).unwrap();
        let expect = 1.0 / (1.0_f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] + expect).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - expect).abs() < 1e-15);
        assert!((expect - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn frozen_mode_leaves_running_stats_untouched() {
        let mut rs = RunningStats {
            mean: Tensor::new(vec![2], vec![0.3, -0.1]).unwrap(),
            var: Tensor::new(vec![2], vec![1.7, 0.4]).unwrap(),
        };
        let before = rs.clone();
        for step in 0..5 {
            let mut tape = Tape::new(Precision::Double);
            let x = tape.param(Tensor::from_voxels(2, [3, 3, 3], |c, z, y, x| {
                (c + z * y + x + step) as f64
            }));
            let g = tape.param(Tensor::full(&[2], 1.5));
            let b = tape.param(Tensor::full(&[2], 0.5));
            let y = tape.batchnorm3d(x, g, b, &mut rs, BnMode::Frozen, 1e-5, 0.1).unwrap();
            let s = tape.sum(y).unwrap();
            let grads = tape.backward(s).unwrap();
            assert!(grads.get(g).is_none());
            assert!(grads.get(b).is_none());
            assert!(grads.get(x).is_some());
        }
        assert_eq!(rs, before);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut rs = RunningStats::new(1);
        let mut tape = Tape::new(Precision::Double);
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        tape.batchnorm3d(x, g, b, &mut rs, BnMode::Train, 1e-5, 0.1).unwrap();
        assert!((rs.mean.data()[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((rs.var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_with_zero_eps_is_an_error() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.constant(Tensor::full(&[1, 2, 2, 2], 4.0));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut rs = RunningStats::new(1);
        assert!(tape.batchnorm3d(x, g, b, &mut rs, BnMode::Train, 0.0, 0.1).is_err());
    }
}
