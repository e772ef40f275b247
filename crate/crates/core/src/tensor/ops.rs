//! Elementwise, reduction and layout ops.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let out = ta.zip_map(tb, |x, y| x + y);
        self.push_op("add", out, &[a, b], move |g, _| {
            vec![(a, g.clone()), (b, g.clone())]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let out = ta.zip_map(tb, |x, y| x - y);
        self.push_op("sub", out, &[a, b], move |g, _| {
            vec![(a, g.clone()), (b, g.map(|v| -v))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out = ta.zip_map(tb, |x, y| x * y);
        self.push_op("mul", out, &[a, b], move |g, vals| {
            vec![
                (a, g.zip_map(vals.get(b), |gv, y| gv * y)),
                (b, g.zip_map(vals.get(a), |gv, x| gv * x)),
            ]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("div", ta, tb)?;
        let out = ta.zip_map(tb, |x, y| x / y);
        self.push_op("div", out, &[a, b], move |g, vals| {
            let (x, y) = (vals.get(a), vals.get(b));
            let ga = g.zip_map(y, |gv, yv| gv / yv);
            let mut gb = g.zip_map(x, |gv, xv| -gv * xv);
            for (v, yv) in gb.data_mut().iter_mut().zip(y.data()) {
                *v /= yv * yv;
            }
            vec![(a, ga), (b, gb)]
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push_op("scale", out, &[a], move |g, _| vec![(a, g.map(|v| c * v))])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push_op("add_scalar", out, &[a], move |g, _| vec![(a, g.clone())])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_op("relu", out, &[a], move |g, vals| {
            vec![(a, g.zip_map(vals.get(a), |gv, x| if x > 0.0 { gv } else { 0.0 }))]
        })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push_op("square", out, &[a], move |g, vals| {
            vec![(a, g.zip_map(vals.get(a), |gv, x| 2.0 * x * gv))]
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        let out = self.value(a).map(f64::sqrt);
        let id = self.len();
        self.push_op("sqrt", out, &[a], move |g, vals| {
            let y = vals.get(Var(id));
            vec![(a, g.zip_map(y, |gv, yv| gv / (2.0 * yv)))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let id = self.len();
        self.push_op("sigmoid", out, &[a], move |g, vals| {
            let y = vals.get(Var(id));
            vec![(a, g.zip_map(y, |gv, s| gv * s * (1.0 - s)))]
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::invalid("sum over an empty tensor"));
        }
        let shape = t.shape().to_vec();
        let out = Tensor::scalar(t.sum());
        self.push_op("sum", out, &[a], move |g, _| {
            vec![(a, Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::invalid("mean over an empty tensor"));
        }
        let n = t.len() as f64;
        let shape = t.shape().to_vec();
        let out = Tensor::scalar(t.sum() / n);
        self.push_op("mean", out, &[a], move |g, _| {
            vec![(a, Tensor::full(&shape, g.item() / n))]
        })
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("axis {axis} out of range")));
        }
        if shape[axis] == 0 {
            return Err(Error::invalid("sum over an empty reduction axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(out_shape, out)?;
        self.push_op("sum_axis", out, &[a], move |g, _| {
            let mut ga = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    ga[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![(a, Tensor::new(shape.clone(), ga).expect("shape"))]
        })
    }

    /// Value copy with no gradient path back to `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// Concatenates `[C1, ...]` and `[C2, ...]` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 4 || tb.shape().len() != 4 || ta.spatial() != tb.spatial() {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (ca, cb) = (ta.channels(), tb.channels());
        let dims = ta.spatial();
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let out = Tensor::new(vec![ca + cb, dims[0], dims[1], dims[2]], data)?;
        let split = ta.len();
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        self.push_op("concat_channels", out, &[a, b], move |g, _| {
            vec![
                (a, Tensor::new(sa.clone(), g.data()[..split].to_vec()).expect("shape")),
                (b, Tensor::new(sb.clone(), g.data()[split..].to_vec()).expect("shape")),
            ]
        })
    }

    /// Selects one channel of a `[C, D, H, W]` tensor as `[1, D, H, W]`.
    pub fn select_channel(&mut self, a: Var, c: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 4 || c >= t.channels() {
            return Err(Error::shape("select_channel", format!("channel {c} of {:?}", t.shape())));
        }
        let dims = t.spatial();
        let full = t.shape().to_vec();
        let out = Tensor::new(vec![1, dims[0], dims[1], dims[2]], t.channel(c).to_vec())?;
        self.push_op("select_channel", out, &[a], move |g, _| {
            let mut ga = Tensor::zeros(&full);
            ga.channel_mut(c).copy_from_slice(g.data());
            vec![(a, ga)]
        })
    }

    /// Nearest-neighbour x2 upsampling of a `[C, D, H, W]` tensor.
    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 4 {
            return Err(Error::shape("upsample_nearest2", format!("{:?}", t.shape())));
        }
        let c = t.channels();
        let [d, h, w] = t.spatial();
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![0.0; c * d2 * h2 * w2];
        for ch in 0..c {
            for z in 0..d2 {
                for y in 0..h2 {
                    let src = ((ch * d + z / 2) * h + y / 2) * w;
                    let dst = ((ch * d2 + z) * h2 + y) * w2;
                    for x in 0..w2 {
                        out[dst + x] = t.data()[src + x / 2];
                    }
                }
            }
        }
        let shape = t.shape().to_vec();
        let out = Tensor::new(vec![c, d2, h2, w2], out)?;
        self.push_op("upsample_nearest2", out, &[a], move |g, _| {
            let mut ga = vec![0.0; c * d * h * w];
            for ch in 0..c {
                for z in 0..d2 {
                    for y in 0..h2 {
                        let dst = ((ch * d + z / 2) * h + y / 2) * w;
                        let src = ((ch * d2 + z) * h2 + y) * w2;
                        for x in 0..w2 {
                            ga[dst + x / 2] += g.data()[src + x];
                        }
                    }
                }
            }
            vec![(a, Tensor::new(shape.clone(), ga).expect("shape"))]
        })
    }
}
