//! Spatial transforms: trilinear and nearest warping, scaling-and-squaring
//! integration of stationary velocity fields, and Jacobian analysis.
//!
//! Field channel `a` displaces spatial axis `a` (0 = depth, 1 = height,
//! 2 = width), in voxel units. Sample coordinates are voxel centres and are
//! clamped per axis to `[0, dim - 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tape, Tensor, Var};

pub const DEFAULT_SQUARING_STEPS: usize = 7;

/// Single-channel scalar volume `[1, D, H, W]` (an image or a label map).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume(Tensor);

impl Volume {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::shape("volume", format!("expected [1, D, H, W], got {s:?}")));
        }
        Ok(Volume(tensor))
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        Volume(Tensor::from_voxels(1, dims, |_, z, y, x| f(z, y, x)))
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume(Tensor::zeros(&[1, dims[0], dims[1], dims[2]]))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.spatial()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_integer_valued(&self) -> bool {
        self.0.data().iter().all(|v| v.fract() == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldRole {
    Displacement,
    Velocity,
}

/// Dense 3-channel vector field in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    u: Tensor,
    role: FieldRole,
}

impl DisplacementField {
    pub fn new(u: Tensor, role: FieldRole) -> Result<Self> {
        if u.shape().len() != 4 || u.channels() != 3 {
            return Err(Error::shape("field", format!("expected [3, D, H, W], got {:?}", u.shape())));
        }
        if !u.is_finite() {
            return Err(Error::NonFinite { op: "field" });
        }
        Ok(DisplacementField { u, role })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        DisplacementField {
            u: Tensor::zeros(&[3, dims[0], dims[1], dims[2]]),
            role: FieldRole::Displacement,
        }
    }

    /// Field whose value at every voxel is `f(z, y, x)`.
    pub fn from_fn(dims: [usize; 3], role: FieldRole, f: impl Fn(usize, usize, usize) -> [f64; 3]) -> Self {
        DisplacementField {
            u: Tensor::from_voxels(3, dims, |c, z, y, x| f(z, y, x)[c]),
            role,
        }
    }

    pub fn role(&self) -> FieldRole {
        self.role
    }

    pub fn dims(&self) -> [usize; 3] {
        self.u.spatial()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.u
    }

    pub fn into_tensor(self) -> Tensor {
        self.u
    }

    fn expect_role(&self, role: FieldRole, op: &str) -> Result<()> {
        if self.role != role {
            return Err(Error::invalid(format!("{op} expects a {role:?} field, got {:?}", self.role)));
        }
        Ok(())
    }
}

/// Per-axis interpolation stencil for one sample coordinate.
#[derive(Clone, Copy)]
struct Axis {
    i0: usize,
    i1: usize,
    f: f64,
    clamped: bool,
}

#[inline]
fn axis_stencil(p: f64, n: usize) -> Axis {
    let hi = (n - 1) as f64;
    let clamped = !(0.0..=hi).contains(&p);
    let p = p.clamp(0.0, hi);
    let i0 = (p.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    Axis {
        i0,
        i1,
        f: p - i0 as f64,
        clamped,
    }
}

#[inline]
fn stencils(field: &[f64], nvox: usize, idx: usize, pos: [usize; 3], dims: [usize; 3]) -> [Axis; 3] {
    [0, 1, 2].map(|a| axis_stencil(pos[a] as f64 + field[a * nvox + idx], dims[a]))
}

fn check_warp_shapes(op: &'static str, moving: &Tensor, field: &Tensor) -> Result<()> {
    if moving.shape().len() != 4 || field.shape().len() != 4 || field.channels() != 3 {
        return Err(Error::shape(op, format!("moving {:?}, field {:?}", moving.shape(), field.shape())));
    }
    if moving.spatial() != field.spatial() {
        return Err(Error::shape(
            op,
            format!("moving {:?} vs field {:?}", moving.spatial(), field.spatial()),
        ));
    }
    Ok(())
}

fn trilinear_kernel(moving: &Tensor, field: &Tensor) -> Tensor {
    let dims = moving.spatial();
    let [d, h, w] = dims;
    let nvox = d * h * w;
    let c = moving.channels();
    let m = moving.data();
    let u = field.data();
    let mut out = vec![0.0; c * nvox];
    let mut idx = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let [az, ay, ax] = stencils(u, nvox, idx, [z, y, x], dims);
                for ch in 0..c {
                    let base = ch * nvox;
                    let at = |iz: usize, iy: usize, ix: usize| m[base + (iz * h + iy) * w + ix];
                    let c00 = at(az.i0, ay.i0, ax.i0) * (1.0 - ax.f) + at(az.i0, ay.i0, ax.i1) * ax.f;
                    let c01 = at(az.i0, ay.i1, ax.i0) * (1.0 - ax.f) + at(az.i0, ay.i1, ax.i1) * ax.f;
                    let c10 = at(az.i1, ay.i0, ax.i0) * (1.0 - ax.f) + at(az.i1, ay.i0, ax.i1) * ax.f;
                    let c11 = at(az.i1, ay.i1, ax.i0) * (1.0 - ax.f) + at(az.i1, ay.i1, ax.i1) * ax.f;
                    let c0 = c00 * (1.0 - ay.f) + c01 * ay.f;
                    let c1 = c10 * (1.0 - ay.f) + c11 * ay.f;
                    out[base + idx] = c0 * (1.0 - az.f) + c1 * az.f;
                }
                idx += 1;
            }
        }
    }
    Tensor::new(moving.shape().to_vec(), out).expect("warp output shape")
}

impl Tape {
    /// Trilinear warp `out(x) = moving(x + u(x))`, differentiable with
    /// respect to both the moving tensor (any channel count) and the field.
    pub fn warp_trilinear(&mut self, moving: Var, field: Var) -> Result<Var> {
        check_warp_shapes("warp_trilinear", self.value(moving), self.value(field))?;
        let out = trilinear_kernel(self.value(moving), self.value(field));
        self.push_op("warp_trilinear", out, &[moving, field], move |g, vals| {
            let mt = vals.get(moving);
            let ut = vals.get(field);
            let dims = mt.spatial();
            let [d, h, w] = dims;
            let nvox = d * h * w;
            let c = mt.channels();
            let m = mt.data();
            let u = ut.data();
            let mut gm = vec![0.0; m.len()];
            let mut gu = vec![0.0; u.len()];
            let mut idx = 0;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let [az, ay, ax] = stencils(u, nvox, idx, [z, y, x], dims);
                        let wz = [1.0 - az.f, az.f];
                        let wy = [1.0 - ay.f, ay.f];
                        let wx = [1.0 - ax.f, ax.f];
                        let iz = [az.i0, az.i1];
                        let iy = [ay.i0, ay.i1];
                        let ix = [ax.i0, ax.i1];
                        let mut du = [0.0; 3];
                        for ch in 0..c {
                            let base = ch * nvox;
                            let gv = g.data()[base + idx];
                            if gv == 0.0 {
                                continue;
                            }
                            for a in 0..2 {
                                for b in 0..2 {
                                    for e in 0..2 {
                                        let j = base + (iz[a] * h + iy[b]) * w + ix[e];
                                        gm[j] += gv * wz[a] * wy[b] * wx[e];
                                        let mv = m[j];
                                        let sz = if a == 0 { -1.0 } else { 1.0 };
                                        let sy = if b == 0 { -1.0 } else { 1.0 };
                                        let sx = if e == 0 { -1.0 } else { 1.0 };
                                        du[0] += gv * mv * sz * wy[b] * wx[e];
                                        du[1] += gv * mv * wz[a] * sy * wx[e];
                                        du[2] += gv * mv * wz[a] * wy[b] * sx;
                                    }
                                }
                            }
                        }
                        for (axis, st) in [az, ay, ax].iter().enumerate() {
                            if !st.clamped && st.i0 != st.i1 {
                                gu[axis * nvox + idx] = du[axis];
                            }
                        }
                        idx += 1;
                    }
                }
            }
            vec![
                (moving, Tensor::new(mt.shape().to_vec(), gm).expect("shape")),
                (field, Tensor::new(ut.shape().to_vec(), gu).expect("shape")),
            ]
        })
    }

    /// Scaling and squaring: `u = v / 2^K`, then `K` times `u <- u + u o (id + u)`.
    pub fn svf_integrate(&mut self, velocity: Var, steps: usize) -> Result<Var> {
        if steps == 0 {
            return Err(Error::invalid("scaling and squaring needs at least one step"));
        }
        let mut u = self.scale(velocity, 1.0 / (1u64 << steps) as f64)?;
        for _ in 0..steps {
            let composed = self.warp_trilinear(u, u)?;
            u = self.add(u, composed)?;
        }
        Ok(u)
    }
}

/// Trilinear warp of a volume (no gradient).
pub fn warp_trilinear(moving: &Volume, field: &DisplacementField) -> Result<Volume> {
    field.expect_role(FieldRole::Displacement, "warp_trilinear")?;
    check_warp_shapes("warp_trilinear", moving.tensor(), field.tensor())?;
    Volume::new(trilinear_kernel(moving.tensor(), field.tensor()))
}

/// Trilinear warp of a multi-channel tensor (no gradient).
pub fn warp_tensor(moving: &Tensor, field: &DisplacementField) -> Result<Tensor> {
    check_warp_shapes("warp_tensor", moving, field.tensor())?;
    Ok(trilinear_kernel(moving, field.tensor()))
}

/// Nearest-neighbour warp of an integer label map. Sample coordinates are
/// rounded half away from zero, then clamped.
pub fn warp_nearest(labels: &Volume, field: &DisplacementField) -> Result<Volume> {
    field.expect_role(FieldRole::Displacement, "warp_nearest")?;
    check_warp_shapes("warp_nearest", labels.tensor(), field.tensor())?;
    if !labels.is_integer_valued() {
        return Err(Error::invalid("warp_nearest needs an integer-valued label volume"));
    }
    let dims = labels.dims();
    let [d, h, w] = dims;
    let nvox = d * h * w;
    let u = field.tensor().data();
    let m = labels.data();
    let mut out = vec![0.0; nvox];
    let mut idx = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pos = [z, y, x];
                let s = [0, 1, 2].map(|a| {
                    let p = (pos[a] as f64 + u[a * nvox + idx]).round();
                    p.clamp(0.0, (dims[a] - 1) as f64) as usize
                });
                out[idx] = m[(s[0] * h + s[1]) * w + s[2]];
                idx += 1;
            }
        }
    }
    Volume::new(Tensor::new(labels.tensor().shape().to_vec(), out)?)
}

/// Exponential of a stationary velocity field by scaling and squaring.
pub fn svf_integrate(velocity: &DisplacementField, steps: usize) -> Result<DisplacementField> {
    velocity.expect_role(FieldRole::Velocity, "svf_integrate")?;
    let mut tape = Tape::inference(Precision::Double);
    let v = tape.constant(velocity.tensor().clone());
    let u = tape.svf_integrate(v, steps)?;
    DisplacementField::new(tape.value(u).clone(), FieldRole::Displacement)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianReport {
    pub det: Volume,
    pub fold_percent: f64,
    pub sdlogj: f64,
}

/// Jacobian determinant of `phi = id + u` by central differences in the
/// interior and one-sided differences at the faces. `fold_percent` counts all
/// voxels, faces included; `sdlogj` is the population standard deviation of
/// `ln det` over voxels with a positive determinant.
pub fn jacobian_analysis(field: &DisplacementField) -> Result<JacobianReport> {
    field.expect_role(FieldRole::Displacement, "jacobian_analysis")?;
    let dims = field.dims();
    let [d, h, w] = dims;
    let nvox = d * h * w;
    let u = field.tensor().data();
    let stride = [h * w, w, 1];
    let deriv = |c: usize, idx: usize, pos: [usize; 3], axis: usize| -> f64 {
        let n = dims[axis];
        if n < 2 {
            return 0.0;
        }
        let at = |i: usize| u[c * nvox + i];
        let p = pos[axis];
        let s = stride[axis];
        if p == 0 {
            at(idx + s) - at(idx)
        } else if p == n - 1 {
            at(idx) - at(idx - s)
        } else {
            0.5 * (at(idx + s) - at(idx - s))
        }
    };
    let mut det = vec![0.0; nvox];
    let mut folds = 0usize;
    let mut logs = Vec::with_capacity(nvox);
    let mut idx = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pos = [z, y, x];
                let mut j = [[0.0; 3]; 3];
                for (c, row) in j.iter_mut().enumerate() {
                    for (a, v) in row.iter_mut().enumerate() {
                        *v = deriv(c, idx, pos, a) + if a == c { 1.0 } else { 0.0 };
                    }
                }
                let dv = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                det[idx] = dv;
                if dv <= 0.0 {
                    folds += 1;
                } else {
                    logs.push(dv.ln());
                }
                idx += 1;
            }
        }
    }
    let sdlogj = if logs.is_empty() {
        0.0
    } else {
        let m = logs.iter().sum::<f64>() / logs.len() as f64;
        (logs.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / logs.len() as f64).sqrt()
    };
    Ok(JacobianReport {
        det: Volume::new(Tensor::new(vec![1, d, h, w], det)?)?,
        fold_percent: 100.0 * folds as f64 / nvox as f64,
        sdlogj,
    })
}
