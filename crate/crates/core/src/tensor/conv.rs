//! 3D cross-correlation with exact backward rules.
//!
//! All three kernels (forward, input gradient, weight gradient) walk the same
//! `(co, ci, kd, kh, kw, od, oh)` loop nest with clipped index ranges, so no
//! padded copy of the input is ever materialised. The innermost loop runs
//! along the contiguous `W` axis.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub fn conv_output_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl Conv3dGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("input {input:?}, weight {weight:?}"),
            ));
        }
        let (cout, cin, k) = (weight[0], weight[1], weight[2]);
        if weight[3] != k || weight[4] != k {
            return Err(Error::shape("conv3d", "kernel must be cubic"));
        }
        if input[0] != cin {
            return Err(Error::shape(
                "conv3d",
                format!("input has {} channels, weight expects {cin}", input[0]),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::invalid("conv3d kernel size must be odd"));
        }
        if stride == 0 || stride > 2 {
            return Err(Error::invalid("conv3d stride must be 1 or 2"));
        }
        let in_dims = [input[1], input[2], input[3]];
        if in_dims.iter().any(|&n| n + 2 * pad < k) {
            return Err(Error::shape("conv3d", "input smaller than kernel"));
        }
        let out_dims = in_dims.map(|n| conv_output_dim(n, k, stride, pad));
        Ok(Conv3dGeom {
            cin,
            cout,
            k,
            stride,
            pad,
            in_dims,
            out_dims,
        })
    }

    pub fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_voxels(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn macs(&self) -> u64 {
        (self.cout * self.cin * self.k.pow(3)) as u64 * self.out_voxels() as u64
    }

    /// Output index range `[lo, hi)` along one axis for kernel tap `kk`.
    #[inline]
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let n = self.in_dims[axis] as isize;
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // need 0 <= o*s + off <= n-1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_incl = (n - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, self.out_dims[axis] as isize);
        (lo.max(0) as usize, hi.max(lo) as usize)
    }

    /// Visits every (weight index, output row, input row, row span) tuple.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let [_, ih_n, iw_n] = self.in_dims;
        let [od_n, oh_n, ow_n] = self.out_dims;
        let k = self.k;
        let s = self.stride;
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for kd in 0..k {
                    let (d_lo, d_hi) = self.valid(0, kd);
                    for kh in 0..k {
                        let (h_lo, h_hi) = self.valid(1, kh);
                        for kw in 0..k {
                            let (w_lo, w_hi) = self.valid(2, kw);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let widx = (((co * self.cin + ci) * k + kd) * k + kh) * k + kw;
                            for od in d_lo..d_hi {
                                let id = od * s + kd - self.pad;
                                for oh in h_lo..h_hi {
                                    let ih = oh * s + kh - self.pad;
                                    let orow = ((co * od_n + od) * oh_n + oh) * ow_n;
                                    let irow = ((ci * self.in_dims[0] + id) * ih_n + ih) * iw_n;
                                    let icol = w_lo * s + kw - self.pad;
                                    f(widx, orow + w_lo, irow + icol, w_hi - w_lo, co, ci);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense forward pass (no tape).
pub fn conv3d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let geom = Conv3dGeom::new(input.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != geom.cout {
            return Err(Error::shape("conv3d", "bias length differs from Cout"));
        }
    }
    Ok(forward_kernel(&geom, input.data(), weight.data(), bias.map(|b| b.data())))
}

fn forward_kernel(geom: &Conv3dGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Tensor {
    let nout = geom.out_voxels();
    let mut out = vec![0.0; geom.cout * nout];
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(nout).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let s = geom.stride;
    geom.for_each_row(|widx, o, i, len, _, _| {
        let wv = w[widx];
        if wv == 0.0 {
            return;
        }
        let orow = &mut out[o..o + len];
        if s == 1 {
            for (ov, iv) in orow.iter_mut().zip(&x[i..i + len]) {
                *ov += wv * iv;
            }
        } else {
            for (j, ov) in orow.iter_mut().enumerate() {
                *ov += wv * x[i + j * s];
            }
        }
    });
    let [d, h, wd] = geom.out_dims;
    Tensor::new(vec![geom.cout, d, h, wd], out).expect("conv output shape")
}

fn input_grad_kernel(geom: &Conv3dGeom, g: &[f64], w: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; geom.cin * geom.in_voxels()];
    let s = geom.stride;
    geom.for_each_row(|widx, o, i, len, _, _| {
        let wv = w[widx];
        if wv == 0.0 {
            return;
        }
        let grow = &g[o..o + len];
        if s == 1 {
            for (xv, gv) in gx[i..i + len].iter_mut().zip(grow) {
                *xv += wv * gv;
            }
        } else {
            for (j, gv) in grow.iter().enumerate() {
                gx[i + j * s] += wv * gv;
            }
        }
    });
    gx
}

fn weight_grad_kernel(geom: &Conv3dGeom, g: &[f64], x: &[f64]) -> Vec<f64> {
    let mut gw = vec![0.0; geom.cout * geom.cin * geom.k.pow(3)];
    let s = geom.stride;
    geom.for_each_row(|widx, o, i, len, _, _| {
        let grow = &g[o..o + len];
        let acc: f64 = if s == 1 {
            grow.iter().zip(&x[i..i + len]).map(|(a, b)| a * b).sum()
        } else {
            grow.iter().enumerate().map(|(j, a)| a * x[i + j * s]).sum()
        };
        gw[widx] += acc;
    });
    gw
}

/// Six-nested-loop reference used by tests and oracles.
pub fn conv3d_naive(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let geom = Conv3dGeom::new(input.shape(), weight.shape(), stride, pad)?;
    let [id, ih, iw] = geom.in_dims;
    let [od, oh, ow] = geom.out_dims;
    let k = geom.k;
    let mut out = Tensor::zeros(&[geom.cout, od, oh, ow]);
    for co in 0..geom.cout {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..geom.cin {
                        for a in 0..k {
                            for b in 0..k {
                                for c in 0..k {
                                    let zz = (z * stride + a) as isize - pad as isize;
                                    let yy = (y * stride + b) as isize - pad as isize;
                                    let xx = (x * stride + c) as isize - pad as isize;
                                    if zz < 0
                                        || yy < 0
                                        || xx < 0
                                        || zz >= id as isize
                                        || yy >= ih as isize
                                        || xx >= iw as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ci * id + zz as usize) * ih + yy as usize) * iw
                                        + xx as usize;
                                    let wi = (((co * geom.cin + ci) * k + a) * k + b) * k + c;
                                    acc += weight.data()[wi] * input.data()[xi];
                                }
                            }
                        }
                    }
                    out.data_mut()[((co * od + z) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    Ok(out)
}

impl Tape {
    /// Records a 3D convolution. `bias` may be omitted.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = Conv3dGeom::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            pad,
        )?;
        if let Some(b) = bias {
            if self.value(b).len() != geom.cout {
                return Err(Error::shape("conv3d", "bias length differs from Cout"));
            }
        }
        let out = forward_kernel(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let (need_x, need_w) = (self.requires_grad(input), self.requires_grad(weight));
        self.push_op("conv3d", out, &inputs, move |g, vals| {
            let mut grads = Vec::with_capacity(3);
            if need_x {
                let gx = input_grad_kernel(&geom, g.data(), vals.get(weight).data());
                let shape = vals.get(input).shape().to_vec();
                grads.push((input, Tensor::new(shape, gx).expect("shape")));
            }
            if need_w {
                let gw = weight_grad_kernel(&geom, g.data(), vals.get(input).data());
                let shape = vals.get(weight).shape().to_vec();
                grads.push((weight, Tensor::new(shape, gw).expect("shape")));
            }
            if let Some(b) = bias {
                let n = geom.out_voxels();
                let gb: Vec<f64> = g.data().chunks(n).map(|c| c.iter().sum()).collect();
                grads.push((b, Tensor::new(vec![geom.cout], gb).expect("shape")));
            }
            grads
        })
    }

    /// Per-channel convolution with one `[C, 1, k, k, k]` kernel per channel.
    pub fn depthwise_conv3d(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var> {
        let c = self.value(input).channels();
        let wshape = self.value(weight).shape().to_vec();
        if wshape.len() != 5 || wshape[0] != c || wshape[1] != 1 {
            return Err(Error::shape(
                "depthwise_conv3d",
                format!("weight {wshape:?} for {c} channels"),
            ));
        }
        let k = wshape[2];
        let dims = self.value(input).spatial();
        let geom = Conv3dGeom::new(&[1, dims[0], dims[1], dims[2]], &[1, 1, k, k, k], 1, pad)?;
        let kk = k * k * k;
        let nin = geom.in_voxels();
        let nout = geom.out_voxels();
        let mut out = Vec::with_capacity(c * nout);
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            for ch in 0..c {
                let t = forward_kernel(&geom, &x[ch * nin..(ch + 1) * nin], &w[ch * kk..(ch + 1) * kk], None);
                out.extend_from_slice(t.data());
            }
        }
        let [d, h, wd] = geom.out_dims;
        let out = Tensor::new(vec![c, d, h, wd], out)?;
        let (need_x, need_w) = (self.requires_grad(input), self.requires_grad(weight));
        self.push_op("depthwise_conv3d", out, &[input, weight], move |g, vals| {
            let x = vals.get(input);
            let w = vals.get(weight);
            let mut gx = Vec::with_capacity(x.len());
            let mut gw = Vec::with_capacity(w.len());
            for ch in 0..c {
                let gc = &g.data()[ch * nout..(ch + 1) * nout];
                if need_x {
                    gx.extend(input_grad_kernel(&geom, gc, &w.data()[ch * kk..(ch + 1) * kk]));
                }
                if need_w {
                    gw.extend(weight_grad_kernel(&geom, gc, &x.data()[ch * nin..(ch + 1) * nin]));
                }
            }
            let mut grads = Vec::new();
            if need_x {
                grads.push((input, Tensor::new(x.shape().to_vec(), gx).expect("shape")));
            }
            if need_w {
                grads.push((weight, Tensor::new(w.shape().to_vec(), gw).expect("shape")));
            }
            grads
        })
    }

    /// Depthwise same-size convolution with edge-replicated borders, so a
    /// kernel summing to one preserves constant inputs.
    pub fn depthwise_conv3d_replicate(&mut self, input: Var, weight: Var) -> Result<Var> {
        let x = self.value(input);
        let wshape = self.value(weight).shape().to_vec();
        if x.shape().len() != 4 || wshape.len() != 5 || wshape[0] != x.channels() || wshape[1] != 1 {
            return Err(Error::shape(
                "depthwise_conv3d_replicate",
                format!("weight {wshape:?} for input {:?}", x.shape()),
            ));
        }
        let k = wshape[2];
        if k.is_multiple_of(2) || wshape[3] != k || wshape[4] != k {
            return Err(Error::shape("depthwise_conv3d_replicate", "kernel must be an odd cube"));
        }
        let c = x.channels();
        let dims = x.spatial();
        let taps = replicate_taps(dims, k);
        let n = x.voxels();
        let kk = k * k * k;
        let w = self.value(weight).data();
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let xc = x.channel(ch);
            let wc = &w[ch * kk..(ch + 1) * kk];
            for (i, o) in out[ch * n..(ch + 1) * n].iter_mut().enumerate() {
                *o = taps[i * kk..(i + 1) * kk].iter().zip(wc).map(|(&j, &wv)| wv * xc[j]).sum();
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push_op("depthwise_conv3d_replicate", out, &[input, weight], move |g, vals| {
            let x = vals.get(input);
            let w = vals.get(weight);
            let mut gx = Tensor::zeros(x.shape());
            let mut gw = Tensor::zeros(w.shape());
            for ch in 0..c {
                let xc = x.channel(ch);
                let gc = &g.data()[ch * n..(ch + 1) * n];
                let wc = &w.data()[ch * kk..(ch + 1) * kk];
                let gxc = gx.channel_mut(ch);
                let mut gwc = vec![0.0; kk];
                for i in 0..n {
                    for (t, &j) in taps[i * kk..(i + 1) * kk].iter().enumerate() {
                        gxc[j] += wc[t] * gc[i];
                        gwc[t] += xc[j] * gc[i];
                    }
                }
                gw.data_mut()[ch * kk..(ch + 1) * kk].copy_from_slice(&gwc);
            }
            vec![(input, gx), (weight, gw)]
        })
    }
}

/// Source voxel index of every (voxel, tap) pair with clamped coordinates.
fn replicate_taps(dims: [usize; 3], k: usize) -> Vec<usize> {
    let r = (k / 2) as isize;
    let [d, h, w] = dims;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut taps = Vec::with_capacity(d * h * w * k * k * k);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                for dz in -r..=r {
                    let sz = clamp(z as isize + dz, d);
                    for dy in -r..=r {
                        let sy = clamp(y as isize + dy, h);
                        for dx in -r..=r {
                            taps.push((sz * h + sy) * w + clamp(x as isize + dx, w));
                        }
                    }
                }
            }
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 3, 4, 5], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let y = conv3d_forward(&x, &w, Some(&Tensor::zeros(&[1])), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_ones_cube() {
        let x = Tensor::full(&[1, 2, 2, 2], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d_forward(&x, &w, None, 1, 1).unwrap();
        // every output voxel of a 2^3 cube sees all 8 inputs
        assert!(y.data().iter().all(|&v| v == 8.0));
        assert_eq!(y, conv3d_naive(&x, &w, None, 1, 1).unwrap());
    }

    #[test]
    fn matches_naive_loops_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 2, 5), (1, 0, 1)] {
            let x = random(&[3, 7, 6, 5], &mut rng);
            let w = random(&[4, 3, k, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let fast = conv3d_forward(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = conv3d_naive(&x, &w, Some(&b), stride, pad).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn rejects_even_kernels_and_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4, 4]);
        assert!(conv3d_forward(&x, &Tensor::zeros(&[1, 2, 2, 2, 2]), None, 1, 0).is_err());
        assert!(conv3d_forward(&x, &Tensor::zeros(&[1, 3, 3, 3, 3]), None, 1, 1).is_err());
        assert!(conv3d_forward(&x, &Tensor::zeros(&[1, 2, 3, 3, 3]), None, 3, 1).is_err());
    }

    #[test]
    fn mac_count_formula() {
        let g = Conv3dGeom::new(&[1, 2, 2, 2], &[1, 1, 1, 1, 1], 1, 0).unwrap();
        assert_eq!(g.macs(), 8);
        let g = Conv3dGeom::new(&[4, 8, 8, 8], &[6, 4, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.out_dims, [4, 4, 4]);
        assert_eq!(g.macs(), 6 * 4 * 27 * 64);
    }

    #[test]
    fn depthwise_matches_per_channel_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 5, 5, 5], &mut rng);
        let w = random(&[3, 1, 3, 3, 3], &mut rng);
        let mut tape = Tape::new(Precision::Double);
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.depthwise_conv3d(xv, wv, 1).unwrap();
        for c in 0..3 {
            let xc = Tensor::new(vec![1, 5, 5, 5], x.channel(c).to_vec()).unwrap();
            let wc = Tensor::new(vec![1, 1, 3, 3, 3], w.data()[c * 27..(c + 1) * 27].to_vec()).unwrap();
            let yc = conv3d_naive(&xc, &wc, None, 1, 1).unwrap();
            let got = &tape.value(y).data()[c * 125..(c + 1) * 125];
            for (a, b) in got.iter().zip(yc.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn replicate_smoothing_keeps_constants() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.param(Tensor::full(&[3, 4, 5, 3], 2.5));
        let w = tape.param(Tensor::full(&[3, 1, 3, 3, 3], 1.0 / 27.0));
        let y = tape.depthwise_conv3d_replicate(x, w).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn replicate_smoothing_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 4, 3, 5], &mut rng);
        let w = random(&[2, 1, 3, 3, 3], &mut rng);
        let wc = w.clone();
        let ex = crate::tensor::grad_check(
            move |t, v| {
                let wv = t.constant(wc.clone());
                let y = t.depthwise_conv3d_replicate(v, wv)?;
                let sq = t.square(y)?;
                t.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        let xc = x.clone();
        let ew = crate::tensor::grad_check(
            move |t, v| {
                let xv = t.constant(xc.clone());
                let y = t.depthwise_conv3d_replicate(xv, v)?;
                let sq = t.square(y)?;
                t.sum(sq)
            },
            &w,
            1e-6,
        )
        .unwrap();
        assert!(ex < 1e-6 && ew < 1e-6, "{ex} {ew}");
    }
}
