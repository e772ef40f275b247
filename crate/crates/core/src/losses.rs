//! Training objectives: local NCC, diffusion regularisation, the spike-rate
//! regulariser, displacement distillation and soft label Dice.

use serde::{Deserialize, Serialize};

use crate::deform::Volume;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Windows whose per-voxel variance falls below this are treated as constant.
const CONSTANT_WINDOW_VAR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_sim: f64,
    pub lambda_reg: f64,
    pub lambda_spk: f64,
    pub beta: f64,
    pub rho_star: f64,
    pub lambda_distill: f64,
    pub lambda_seg: f64,
    pub ncc_window: usize,
    pub ncc_eps: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sim: 1.0,
            lambda_reg: 0.1,
            lambda_spk: 1e-4,
            beta: 1e-2,
            rho_star: 0.1,
            lambda_distill: 0.0,
            lambda_seg: 0.0,
            ncc_window: 9,
            ncc_eps: 1e-8,
            dice_eps: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_sim", self.lambda_sim),
            ("lambda_reg", self.lambda_reg),
            ("lambda_spk", self.lambda_spk),
            ("beta", self.beta),
            ("lambda_distill", self.lambda_distill),
            ("lambda_seg", self.lambda_seg),
            ("ncc_eps", self.ncc_eps),
            ("dice_eps", self.dice_eps),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0")));
            }
        }
        if self.ncc_window.is_multiple_of(2) {
            return Err(Error::invalid("ncc_window must be odd"));
        }
        if !(0.0..=1.0).contains(&self.rho_star) {
            return Err(Error::invalid("rho_star must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Sums over the clipped cubic window of radius `r` around every voxel,
/// computed with one running-sum pass per axis.
pub fn box_sum(data: &[f64], dims: [usize; 3], r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let s = strides[axis];
        let mut next = vec![0.0; cur.len()];
        let total = cur.len();
        for start in 0..total {
            // visit each line once, from its first element
            if !(start / s).is_multiple_of(n) {
                continue;
            }
            prefix.clear();
            prefix.push(0.0);
            let mut acc = 0.0;
            for i in 0..n {
                acc += cur[start + i * s];
                prefix.push(acc);
            }
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(n - 1);
                next[start + i * s] = prefix[hi + 1] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

fn window_counts(dims: [usize; 3], r: usize) -> Vec<f64> {
    let axis_count = |n: usize, i: usize| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as f64;
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let cz = axis_count(d, z);
        for y in 0..h {
            let cy = axis_count(h, y);
            for x in 0..w {
                out.push(cz * cy * axis_count(w, x));
            }
        }
    }
    out
}

struct NccParts {
    ncc: Vec<f64>,
    // coefficients of dNCC_x with respect to the five window sums
    d_sf: Vec<f64>,
    d_sm: Vec<f64>,
    d_sff: Vec<f64>,
    d_smm: Vec<f64>,
    d_sfm: Vec<f64>,
}

fn ncc_parts(f: &[f64], m: &[f64], dims: [usize; 3], window: usize, eps: f64, with_grad: bool) -> NccParts {
    let r = window / 2;
    let ff: Vec<f64> = f.iter().map(|v| v * v).collect();
    let mm: Vec<f64> = m.iter().map(|v| v * v).collect();
    let fm: Vec<f64> = f.iter().zip(m).map(|(a, b)| a * b).collect();
    let s_f = box_sum(f, dims, r);
    let s_m = box_sum(m, dims, r);
    let s_ff = box_sum(&ff, dims, r);
    let s_mm = box_sum(&mm, dims, r);
    let s_fm = box_sum(&fm, dims, r);
    let counts = window_counts(dims, r);
    let n = f.len();
    let mut parts = NccParts {
        ncc: vec![0.0; n],
        d_sf: Vec::new(),
        d_sm: Vec::new(),
        d_sff: Vec::new(),
        d_smm: Vec::new(),
        d_sfm: Vec::new(),
    };
    if with_grad {
        for v in [
            &mut parts.d_sf,
            &mut parts.d_sm,
            &mut parts.d_sff,
            &mut parts.d_smm,
            &mut parts.d_sfm,
        ] {
            *v = vec![0.0; n];
        }
    }
    for i in 0..n {
        let cnt = counts[i];
        let var_f = s_ff[i] - s_f[i] * s_f[i] / cnt;
        let var_m = s_mm[i] - s_m[i] * s_m[i] / cnt;
        let guard = CONSTANT_WINDOW_VAR * cnt;
        if var_f <= guard || var_m <= guard {
            // constant window: no similarity credit and no gradient
            continue;
        }
        let cross = s_fm[i] - s_f[i] * s_m[i] / cnt;
        let (a, b) = (var_f.sqrt(), var_m.sqrt());
        let den = a * b + eps;
        parts.ncc[i] = cross / den;
        if with_grad {
            let d_cross = 1.0 / den;
            let d_a = -cross * b / (den * den);
            let d_b = -cross * a / (den * den);
            let d_varf = d_a / (2.0 * a);
            let d_varm = d_b / (2.0 * b);
            parts.d_sfm[i] = d_cross;
            parts.d_sff[i] = d_varf;
            parts.d_smm[i] = d_varm;
            parts.d_sf[i] = -d_cross * s_m[i] / cnt - 2.0 * d_varf * s_f[i] / cnt;
            parts.d_sm[i] = -d_cross * s_f[i] / cnt - 2.0 * d_varm * s_m[i] / cnt;
        }
    }
    parts
}

fn check_ncc_args(fixed: &Tensor, warped: &Tensor, window: usize) -> Result<[usize; 3]> {
    if fixed.shape() != warped.shape() || fixed.shape().len() != 4 || fixed.channels() != 1 {
        return Err(Error::shape(
            "ncc_local",
            format!("{:?} vs {:?}", fixed.shape(), warped.shape()),
        ));
    }
    let dims = fixed.spatial();
    if window.is_multiple_of(2) {
        return Err(Error::invalid("NCC window must be odd"));
    }
    if window > *dims.iter().min().expect("3 dims") {
        return Err(Error::invalid(format!(
            "NCC window {window} exceeds the volume {dims:?}"
        )));
    }
    Ok(dims)
}

/// Per-voxel local NCC map (no gradient).
pub fn ncc_map(fixed: &Volume, warped: &Volume, window: usize, eps: f64) -> Result<Vec<f64>> {
    let dims = check_ncc_args(fixed.tensor(), warped.tensor(), window)?;
    Ok(ncc_parts(fixed.data(), warped.data(), dims, window, eps, false).ncc)
}

impl Tape {
    /// `-mean_x NCC_x(fixed, warped)` over clipped cubic windows.
    pub fn ncc_local(&mut self, fixed: Var, warped: Var, window: usize, eps: f64) -> Result<Var> {
        let dims = check_ncc_args(self.value(fixed), self.value(warped), window)?;
        let need_grad = self.grad_enabled();
        let parts = ncc_parts(
            self.value(fixed).data(),
            self.value(warped).data(),
            dims,
            window,
            eps,
            need_grad,
        );
        let n = parts.ncc.len() as f64;
        let loss = -parts.ncc.iter().sum::<f64>() / n;
        let r = window / 2;
        self.push_op("ncc_local", Tensor::scalar(loss), &[fixed, warped], move |g, vals| {
            let q = -g.item() / n;
            let scaled = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * q).collect() };
            let b_sf = box_sum(&scaled(&parts.d_sf), dims, r);
            let b_sm = box_sum(&scaled(&parts.d_sm), dims, r);
            let b_sff = box_sum(&scaled(&parts.d_sff), dims, r);
            let b_smm = box_sum(&scaled(&parts.d_smm), dims, r);
            let b_sfm = box_sum(&scaled(&parts.d_sfm), dims, r);
            let f = vals.get(fixed);
            let m = vals.get(warped);
            let gf: Vec<f64> = (0..f.len())
                .map(|i| b_sf[i] + 2.0 * f.data()[i] * b_sff[i] + m.data()[i] * b_sfm[i])
                .collect();
            let gm: Vec<f64> = (0..m.len())
                .map(|i| b_sm[i] + 2.0 * m.data()[i] * b_smm[i] + f.data()[i] * b_sfm[i])
                .collect();
            vec![
                (fixed, Tensor::new(f.shape().to_vec(), gf).expect("shape")),
                (warped, Tensor::new(m.shape().to_vec(), gm).expect("shape")),
            ]
        })
    }

    /// Mean squared forward-difference gradient of a `[3, D, H, W]` field.
    /// Each axis is averaged over its own valid difference positions and the
    /// three axis terms are summed.
    pub fn diffusion_reg(&mut self, field: Var) -> Result<Var> {
        let u = self.value(field);
        if u.shape().len() != 4 {
            return Err(Error::shape("diffusion_reg", format!("{:?}", u.shape())));
        }
        let c = u.channels();
        let dims = u.spatial();
        let strides = [dims[1] * dims[2], dims[2], 1];
        let nvox = u.voxels();
        let mut total = 0.0;
        let mut norms = [0.0; 3];
        for axis in 0..3 {
            if dims[axis] < 2 {
                continue;
            }
            let valid = nvox / dims[axis] * (dims[axis] - 1);
            norms[axis] = 1.0 / valid as f64;
            let mut acc = 0.0;
            for ch in 0..c {
                let data = u.channel(ch);
                for i in 0..nvox {
                    if (i / strides[axis]) % dims[axis] + 1 < dims[axis] {
                        let d = data[i + strides[axis]] - data[i];
                        acc += d * d;
                    }
                }
            }
            total += acc * norms[axis];
        }
        let shape = u.shape().to_vec();
        self.push_op("diffusion_reg", Tensor::scalar(total), &[field], move |g, vals| {
            let u = vals.get(field);
            let mut gu = vec![0.0; u.len()];
            for axis in 0..3 {
                if dims[axis] < 2 {
                    continue;
                }
                let k = 2.0 * g.item() * norms[axis];
                for ch in 0..c {
                    let base = ch * nvox;
                    for i in 0..nvox {
                        if (i / strides[axis]) % dims[axis] + 1 < dims[axis] {
                            let j = i + strides[axis];
                            let d = u.data()[base + j] - u.data()[base + i];
                            gu[base + j] += k * d;
                            gu[base + i] -= k * d;
                        }
                    }
                }
            }
            vec![(field, Tensor::new(shape.clone(), gu).expect("shape"))]
        })
    }

    /// `sum_l rho_l + beta * sum_l (rho_l - rho_star)^2` over scalar rates.
    pub fn spike_reg(&mut self, rates: &[Var], rho_star: f64, beta: f64) -> Result<Var> {
        if rates.is_empty() {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        let mut total: Option<Var> = None;
        for &rho in rates {
            if self.value(rho).len() != 1 {
                return Err(Error::shape("spike_reg", "rates must be scalars"));
            }
            let dev = self.add_scalar(rho, -rho_star)?;
            let sq = self.square(dev)?;
            let bal = self.scale(sq, beta)?;
            let term = self.add(rho, bal)?;
            total = Some(match total {
                Some(t) => self.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("non-empty"))
    }

    /// Mean squared difference to a teacher field; the teacher gets no gradient.
    pub fn kd_distill(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let teacher = self.detach(teacher);
        let d = self.sub(student, teacher)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// `1 - mean_c (2 sum F_c W_c + eps) / (sum F_c + sum W_c + eps)`.
    pub fn soft_dice_score(&mut self, fixed: Var, warped: Var, eps: f64) -> Result<Var> {
        let (f, w) = (self.value(fixed), self.value(warped));
        if f.shape() != w.shape() || f.shape().len() != 4 {
            return Err(Error::shape(
                "soft_dice",
                format!("channel layout {:?} vs {:?}", f.shape(), w.shape()),
            ));
        }
        let c = f.channels();
        let mut inter = vec![0.0; c];
        let mut denom = vec![0.0; c];
        for ch in 0..c {
            let (fc, wc) = (f.channel(ch), w.channel(ch));
            inter[ch] = fc.iter().zip(wc).map(|(a, b)| a * b).sum();
            denom[ch] = fc.iter().sum::<f64>() + wc.iter().sum::<f64>() + eps;
        }
        let mean_dice: f64 = (0..c)
            .map(|ch| (2.0 * inter[ch] + eps) / denom[ch])
            .sum::<f64>()
            / c as f64;
        let shape = f.shape().to_vec();
        self.push_op("soft_dice", Tensor::scalar(1.0 - mean_dice), &[fixed, warped], move |g, vals| {
            let (f, w) = (vals.get(fixed), vals.get(warped));
            let k = -g.item() / c as f64;
            let mut gf = Tensor::zeros(&shape);
            let mut gw = Tensor::zeros(&shape);
            for ch in 0..c {
                let num = 2.0 * inter[ch] + eps;
                let den = denom[ch];
                let (fc, wc) = (f.channel(ch), w.channel(ch));
                for (o, &fv) in gw.channel_mut(ch).iter_mut().zip(fc) {
                    *o = k * (2.0 * fv * den - num) / (den * den);
                }
                for (o, &wv) in gf.channel_mut(ch).iter_mut().zip(wc) {
                    *o = k * (2.0 * wv * den - num) / (den * den);
                }
            }
            vec![(fixed, gf), (warped, gw)]
        })
    }

    /// Soft label Dice after trilinear warping of the one-hot moving labels.
    pub fn soft_dice(&mut self, fixed_onehot: Var, moving_onehot: Var, field: Var, eps: f64) -> Result<Var> {
        let (f, m) = (self.value(fixed_onehot), self.value(moving_onehot));
        if f.shape().len() != 4 || m.shape().len() != 4 || f.channels() != m.channels() {
            return Err(Error::shape(
                "soft_dice",
                format!("{:?} vs {:?}", f.shape(), m.shape()),
            ));
        }
        for t in [f, m] {
            if t.data().iter().any(|&v| v.min((v - 1.0).abs()).abs() > 1e-6) {
                return Err(Error::invalid("soft_dice expects one-hot label channels"));
            }
        }
        let warped = self.warp_trilinear(moving_onehot, field)?;
        self.soft_dice_score(fixed_onehot, warped, eps)
    }
}

/// Loss terms available to a phase. Absent terms must have zero weight.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub sim: Option<Var>,
    pub reg: Option<Var>,
    pub spk: Option<Var>,
    pub distill: Option<Var>,
    pub seg: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossPhase {
    Ann,
    Snn,
}

/// Raw component values and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sim: Option<f64>,
    pub reg: Option<f64>,
    pub spk: Option<f64>,
    pub distill: Option<f64>,
    pub seg: Option<f64>,
}

/// Weighted phase objective. The spike and distillation terms only apply to
/// the spiking phase.
pub fn total_loss(
    tape: &mut Tape,
    phase: LossPhase,
    terms: LossTerms,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let snn = phase == LossPhase::Snn;
    let plan = [
        ("sim", terms.sim, weights.lambda_sim, true),
        ("reg", terms.reg, weights.lambda_reg, true),
        ("spk", terms.spk, weights.lambda_spk, snn),
        ("distill", terms.distill, weights.lambda_distill, snn),
        ("seg", terms.seg, weights.lambda_seg, true),
    ];
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    for (name, term, weight, applies) in plan {
        let value = term.map(|v| tape.value(v).item());
        match name {
            "sim" => breakdown.sim = value,
            "reg" => breakdown.reg = value,
            "spk" => breakdown.spk = value,
            "distill" => breakdown.distill = value,
            _ => breakdown.seg = value,
        }
        if !applies || weight == 0.0 {
            continue;
        }
        let Some(v) = term else {
            return Err(Error::invalid(format!(
                "loss term `{name}` has weight {weight} but was not computed"
            )));
        };
        let weighted = tape.scale(v, weight)?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}

/// Mean local NCC with positive orientation (higher is better).
pub fn mean_local_ncc(fixed: &Volume, warped: &Volume, window: usize, eps: f64) -> Result<f64> {
    let mut tape = Tape::inference(Precision::Double);
    let f = tape.constant(fixed.tensor().clone());
    let w = tape.constant(warped.tensor().clone());
    let l = tape.ncc_local(f, w, window, eps)?;
    Ok(-tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn self_similarity_and_anticorrelation() {
        let f = noise([10, 10, 10], 1);
        let neg = Volume::from_fn([10, 10, 10], |z, y, x| -f.data()[(z * 10 + y) * 10 + x]);
        assert!((mean_local_ncc(&f, &f, 9, 1e-8).unwrap() - 1.0).abs() < 1e-6);
        assert!((mean_local_ncc(&f, &neg, 9, 1e-8).unwrap() + 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_windows_get_no_credit() {
        let c = Volume::from_fn([6, 6, 6], |_, _, _| 0.4);
        let d = Volume::from_fn([6, 6, 6], |_, _, _| 0.7);
        assert_eq!(mean_local_ncc(&c, &d, 3, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn window_larger_than_volume_is_an_error() {
        let f = noise([5, 5, 5], 2);
        assert!(mean_local_ncc(&f, &f, 7, 1e-8).is_err());
        assert!(mean_local_ncc(&f, &f, 4, 1e-8).is_err());
    }

    #[test]
    fn ncc_gradient() {
        let f = noise([6, 5, 6], 3);
        let m = noise([6, 5, 6], 4);
        let err = grad_check(
            move |t, mv| {
                let fv = t.constant(f.tensor().clone());
                t.ncc_local(fv, mv, 3, 1e-8)
            },
            m.tensor(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn diffusion_examples() {
        let mut tape = Tape::new(Precision::Double);
        let zero = tape.constant(Tensor::zeros(&[3, 4, 4, 4]));
        let z = tape.diffusion_reg(zero).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);
        let cst = tape.constant(Tensor::full(&[3, 4, 4, 4], 2.5));
        let c = tape.diffusion_reg(cst).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
        let ramp = tape.constant(Tensor::from_voxels(3, [4, 4, 4], |c, _, y, _| if c == 1 { y as f64 } else { 0.0 }));
        let r = tape.diffusion_reg(ramp).unwrap();
        assert_eq!(tape.value(r).item(), 1.0);
    }

    #[test]
    fn diffusion_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Tensor::from_fn(&[3, 4, 3, 5], |_| rng.random_range(-1.0..1.0));
        let err = grad_check(|t, v| t.diffusion_reg(v), &u, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn spike_reg_examples() {
        let mut tape = Tape::new(Precision::Double);
        let rates: Vec<Var> = (0..5).map(|_| tape.param(Tensor::scalar(0.1))).collect();
        let l = tape.spike_reg(&rates, 0.1, 0.01).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-15);
        let r = tape.param(Tensor::scalar(0.2));
        let l = tape.spike_reg(&[r], 0.1, 0.01).unwrap();
        assert!((tape.value(l).item() - 0.2001).abs() < 1e-15);
        let zeros: Vec<Var> = (0..3).map(|_| tape.param(Tensor::scalar(0.0))).collect();
        let l = tape.spike_reg(&zeros, 0.1, 0.01).unwrap();
        assert!((tape.value(l).item() - 3.0 * 0.01 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn kd_examples() {
        let mut tape = Tape::new(Precision::Double);
        let s = tape.param(Tensor::full(&[3, 2, 2, 2], 1.0));
        let t = tape.param(Tensor::full(&[3, 2, 2, 2], 1.0));
        let same = tape.kd_distill(s, t).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let t2 = tape.param(Tensor::full(&[3, 2, 2, 2], 2.0));
        let off = tape.kd_distill(s, t2).unwrap();
        assert_eq!(tape.value(off).item(), 1.0);
        let g = tape.backward(off).unwrap();
        assert!(g.get(s).is_some());
        assert!(g.get(t2).is_none());
        let bad = tape.param(Tensor::zeros(&[3, 2, 2, 3]));
        assert!(tape.kd_distill(s, bad).is_err());
    }

    fn mask(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Tensor {
        Tensor::from_voxels(1, dims, |_, z, y, x| if f(z, y, x) { 1.0 } else { 0.0 })
    }

    #[test]
    fn soft_dice_examples() {
        let dims = [4, 4, 4];
        let eps = 1e-5;
        let mut tape = Tape::new(Precision::Double);
        let zero = tape.constant(Tensor::zeros(&[3, 4, 4, 4]));
        let a = tape.constant(mask(dims, |z, _, _| z < 2));
        let l = tape.soft_dice(a, a, zero, eps).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let b = tape.constant(mask(dims, |z, _, _| z >= 2));
        let l = tape.soft_dice(a, b, zero, eps).unwrap();
        let expect = 1.0 - eps / (32.0 + 32.0 + eps);
        assert!((tape.value(l).item() - expect).abs() < 1e-12);

        let half = tape.constant(mask(dims, |z, y, _| (1..3).contains(&z) && y < 4));
        let l = tape.soft_dice(a, half, zero, eps).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-6);

        let two = tape.constant(Tensor::zeros(&[2, 4, 4, 4]));
        assert!(tape.soft_dice(a, two, zero, eps).is_err());
    }

    #[test]
    fn soft_dice_gradient_wrt_field() {
        let dims = [5, 5, 5];
        let a = Tensor::from_voxels(2, dims, |c, z, y, x| {
            let inside = (z as f64 - 2.0).powi(2) + (y as f64 - 2.0).powi(2) + (x as f64 - 2.0).powi(2) < 3.0;
            if inside == (c == 0) { 1.0 } else { 0.0 }
        });
        let b = Tensor::from_voxels(2, dims, |c, z, y, x| {
            let inside = (z as f64 - 2.5).powi(2) + (y as f64 - 1.5).powi(2) + (x as f64 - 2.0).powi(2) < 3.0;
            if inside == (c == 0) { 1.0 } else { 0.0 }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Tensor::from_fn(&[3, 5, 5, 5], |_| rng.random_range(-0.7..0.7));
        let err = grad_check(
            move |t, field| {
                let f = t.constant(a.clone());
                let m = t.constant(b.clone());
                t.soft_dice(f, m, field, 1e-5)
            },
            &u,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new(Precision::Double);
        let sim = tape.constant(Tensor::scalar(-0.9));
        let reg = tape.constant(Tensor::scalar(0.2));
        let spk = tape.constant(Tensor::scalar(1.3));
        let w = LossWeights::default();
        let terms = LossTerms {
            sim: Some(sim),
            reg: Some(reg),
            spk: Some(spk),
            ..Default::default()
        };
        let (t, b) = total_loss(&mut tape, LossPhase::Snn, terms, &w).unwrap();
        assert!((tape.value(t).item() + 0.87987).abs() < 1e-12);
        assert_eq!(b.spk, Some(1.3));

        let only_sim = LossWeights {
            lambda_reg: 0.0,
            lambda_spk: 0.0,
            ..w.clone()
        };
        let (t, _) = total_loss(&mut tape, LossPhase::Snn, terms, &only_sim).unwrap();
        assert_eq!(tape.value(t).item(), -0.9);

        let missing = LossTerms { sim: Some(sim), ..Default::default() };
        assert!(total_loss(&mut tape, LossPhase::Ann, missing, &w).is_err());
        let kd = LossWeights { lambda_distill: 0.5, ..w };
        assert!(total_loss(&mut tape, LossPhase::Snn, terms, &kd).is_err());
    }

    #[test]
    fn canonical_weights_parse_from_toml() {
        let w: LossWeights = toml::from_str(
            "lambda_sim = 1.0\nlambda_reg = 0.1\nlambda_spk = 1e-4\nbeta = 1e-2\nrho_star = 0.1\nncc_window = 9\n",
        )
        .unwrap();
        assert_eq!(w, LossWeights::default());
        assert!(toml::from_str::<LossWeights>("lambda_smim = 1.0").is_err());
    }
}
