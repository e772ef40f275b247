//! Volume files, intensity preprocessing and synthetic registration pairs.
//!
//! Two on-disk formats are supported: uncompressed single-file NIfTI-1 and a
//! native format made of a flat payload (`<stem>.raw`) plus a TOML sidecar
//! (`<stem>.toml`) describing dims, dtype, spacing and byte order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::deform::{jacobian_analysis, svf_integrate, warp_nearest, warp_trilinear, DisplacementField, FieldRole, Volume};
use crate::deform::DEFAULT_SQUARING_STEPS;
use crate::error::{Error, Result};
use crate::stats::percentile_sorted;
use crate::trainer::Pair;

pub const NIFTI_HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const NIFTI_VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    I16,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn nifti_code(self) -> i16 {
        match self {
            Dtype::U8 => 2,
            Dtype::I16 => 4,
            Dtype::F32 => 16,
            Dtype::F64 => 64,
        }
    }

    pub fn from_nifti_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Dtype::U8),
            4 => Some(Dtype::I16),
            16 => Some(Dtype::F32),
            64 => Some(Dtype::F64),
            _ => None,
        }
    }

    /// One element from its stored bytes.
    pub fn decode(self, b: &[u8], big: bool) -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let a = b.try_into().expect("element width");
                (if big { <$t>::from_be_bytes(a) } else { <$t>::from_le_bytes(a) }) as f64
            }};
        }
        match self {
            Dtype::U8 => b[0] as f64,
            Dtype::I16 => num!(i16),
            Dtype::F32 => num!(f32),
            Dtype::F64 => num!(f64),
        }
    }

    /// Appends one element; integer types round and saturate.
    pub fn encode(self, v: f64, big: bool, out: &mut Vec<u8>) {
        macro_rules! num {
            ($x:expr) => {{
                let x = $x;
                out.extend_from_slice(&if big { x.to_be_bytes() } else { x.to_le_bytes() })
            }};
        }
        match self {
            Dtype::U8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            Dtype::I16 => num!(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16),
            Dtype::F32 => num!(v as f32),
            Dtype::F64 => num!(v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceFormat {
    Nifti1,
    Native,
}

#[derive(Debug, ThisError, PartialEq)]
pub enum NiftiError {
    #[error("header truncated: {len} bytes, need {NIFTI_HEADER_SIZE}")]
    ShortHeader { len: usize },
    #[error("sizeof_hdr at byte 0 is {found}, expected 348")]
    HeaderSize { found: i32 },
    #[error("magic at byte 344 is {found:?}, expected \"n+1\" or \"ni1\"")]
    BadMagic { found: String },
    #[error("dim at byte 40: {detail}")]
    BadDim { detail: String },
    #[error("datatype {code} at byte 70 is not supported (u8, i16, f32, f64)")]
    UnsupportedDtype { code: i16 },
    #[error("payload truncated: need {needed} bytes from offset {offset}, file has {available}")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("paired .img files are not supported (magic \"ni1\")")]
    PairedFile,
}

impl From<NiftiError> for Error {
    fn from(e: NiftiError) -> Self {
        Error::Nifti(e.to_string())
    }
}

/// A decoded volume file.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    pub endianness: Endianness,
    /// Raw payload bytes as stored in the file.
    pub payload: Vec<u8>,
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub format: SourceFormat,
}

impl VolumeFile {
    pub fn from_volume(vol: &Volume, spacing: [f64; 3], dtype: Dtype, format: SourceFormat) -> Self {
        let mut payload = Vec::with_capacity(vol.len() * dtype.size());
        for &v in vol.data() {
            dtype.encode(v, false, &mut payload);
        }
        VolumeFile {
            dims: vol.dims(),
            spacing,
            dtype,
            endianness: Endianness::Little,
            payload,
            scl_slope: 1.0,
            scl_inter: 0.0,
            format,
        }
    }

    /// Stored values with intensity scaling applied (slope 0 means none).
    pub fn values(&self) -> Vec<f64> {
        let big = self.endianness == Endianness::Big;
        let (a, b) = if self.scl_slope == 0.0 {
            (1.0, 0.0)
        } else {
            (self.scl_slope, self.scl_inter)
        };
        self.payload
            .chunks_exact(self.dtype.size())
            .map(|c| a * self.dtype.decode(c, big) + b)
            .collect()
    }

    /// Canonical single-precision volume.
    pub fn to_volume(&self) -> Result<Volume> {
        let data = self.values().into_iter().map(|v| v as f32 as f64).collect();
        self.volume_from(data)
    }

    /// Values at full precision (native f64 payloads round-trip exactly).
    pub fn to_volume_exact(&self) -> Result<Volume> {
        self.volume_from(self.values())
    }

    fn volume_from(&self, data: Vec<f64>) -> Result<Volume> {
        let [d, h, w] = self.dims;
        Volume::new(crate::tensor::Tensor::new(vec![1, d, h, w], data)?)
    }
}

/// Serialises a little- or big-endian single-file NIfTI-1 image.
pub fn nifti1_bytes(file: &VolumeFile) -> Vec<u8> {
    let big = file.endianness == Endianness::Big;
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put = |h: &mut Vec<u8>, off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);
    let i32b = |v: i32| if big { v.to_be_bytes() } else { v.to_le_bytes() };
    let i16b = |v: i16| if big { v.to_be_bytes() } else { v.to_le_bytes() };
    let f32b = |v: f32| if big { v.to_be_bytes() } else { v.to_le_bytes() };
    put(&mut h, 0, &i32b(NIFTI_HEADER_SIZE as i32));
    let dims = [3, file.dims[0], file.dims[1], file.dims[2], 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &i16b(*d as i16));
    }
    put(&mut h, 70, &i16b(file.dtype.nifti_code()));
    put(&mut h, 72, &i16b(8 * file.dtype.size() as i16));
    let pix = [1.0, file.spacing[0], file.spacing[1], file.spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pix.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &f32b(*p as f32));
    }
    put(&mut h, 108, &f32b(NIFTI_VOX_OFFSET as f32));
    put(&mut h, 112, &f32b(file.scl_slope as f32));
    put(&mut h, 116, &f32b(file.scl_inter as f32));
    put(&mut h, 344, b"n+1\0");
    h.extend_from_slice(&file.payload);
    h
}

/// Parses a single-file NIfTI-1 image held in memory.
pub fn parse_nifti1(bytes: &[u8]) -> std::result::Result<VolumeFile, NiftiError> {
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(NiftiError::ShortHeader { len: bytes.len() });
    }
    let le_dim0 = i16::from_le_bytes([bytes[40], bytes[41]]);
    let big = !(1..=7).contains(&le_dim0);
    let i16_at = |o: usize| {
        let a = [bytes[o], bytes[o + 1]];
        if big { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }
    };
    let i32_at = |o: usize| {
        let a = bytes[o..o + 4].try_into().expect("4 bytes");
        if big { i32::from_be_bytes(a) } else { i32::from_le_bytes(a) }
    };
    let f32_at = |o: usize| {
        let a = bytes[o..o + 4].try_into().expect("4 bytes");
        if big { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }
    };
    let size = i32_at(0);
    if size != NIFTI_HEADER_SIZE as i32 {
        return Err(NiftiError::HeaderSize { found: size });
    }
    let magic = &bytes[344..348];
    match magic {
        b"n+1\0" => {}
        b"ni1\0" => return Err(NiftiError::PairedFile),
        _ => {
            return Err(NiftiError::BadMagic {
                found: String::from_utf8_lossy(magic).trim_end_matches('\0').to_string(),
            })
        }
    }
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::BadDim {
            detail: format!("dim[0] = {ndim}"),
        });
    }
    let mut dims = [1usize; 3];
    for (i, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = i16_at(42 + 2 * i);
        if v < 1 {
            return Err(NiftiError::BadDim {
                detail: format!("dim[{}] = {v}", i + 1),
            });
        }
        *d = v as usize;
    }
    for i in 4..=ndim as usize {
        if i16_at(40 + 2 * i) > 1 {
            return Err(NiftiError::BadDim {
                detail: format!("dim[{i}] > 1: only single 3-D volumes are supported"),
            });
        }
    }
    let code = i16_at(70);
    let dtype = Dtype::from_nifti_code(code).ok_or(NiftiError::UnsupportedDtype { code })?;
    let spacing = [1, 2, 3].map(|i| f32_at(76 + 4 * i) as f64);
    let offset = (f32_at(108) as usize).max(NIFTI_HEADER_SIZE);
    let needed = dims.iter().product::<usize>() * dtype.size();
    if bytes.len() < offset + needed {
        return Err(NiftiError::Truncated {
            offset,
            needed,
            available: bytes.len(),
        });
    }
    Ok(VolumeFile {
        dims,
        spacing,
        dtype,
        endianness: if big { Endianness::Big } else { Endianness::Little },
        payload: bytes[offset..offset + needed].to_vec(),
        scl_slope: f32_at(112) as f64,
        scl_inter: f32_at(116) as f64,
        format: SourceFormat::Nifti1,
    })
}

pub fn read_nifti1(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti1(&bytes).map_err(|e| Error::Nifti(format!("{}: {e}", path.display())))
}

pub fn write_nifti1(path: impl AsRef<Path>, file: &VolumeFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, nifti1_bytes(file)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeHeader {
    dims: [usize; 3],
    dtype: Dtype,
    spacing: [f64; 3],
    endianness: Endianness,
}

fn native_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("raw"), stem.with_extension("toml"))
}

/// Writes `<stem>.raw` and `<stem>.toml`.
pub fn write_native(stem: impl AsRef<Path>, file: &VolumeFile) -> Result<()> {
    let (raw, hdr) = native_paths(stem.as_ref());
    let header = NativeHeader {
        dims: file.dims,
        dtype: file.dtype,
        spacing: file.spacing,
        endianness: file.endianness,
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&hdr, text).map_err(|e| Error::io(&hdr, e))?;
    fs::write(&raw, &file.payload).map_err(|e| Error::io(&raw, e))
}

pub fn read_native(stem: impl AsRef<Path>) -> Result<VolumeFile> {
    let (raw, hdr) = native_paths(stem.as_ref());
    let text = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
    let header: NativeHeader =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", hdr.display())))?;
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let needed = header.dims.iter().product::<usize>() * header.dtype.size();
    if payload.len() != needed {
        return Err(Error::invalid(format!(
            "{}: payload is {} bytes, header implies {needed}",
            raw.display(),
            payload.len()
        )));
    }
    Ok(VolumeFile {
        dims: header.dims,
        spacing: header.spacing,
        dtype: header.dtype,
        endianness: header.endianness,
        payload,
        scl_slope: 1.0,
        scl_inter: 0.0,
        format: SourceFormat::Native,
    })
}

/// Reads either format, chosen by extension (`.nii` or a native stem).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_nifti1(path)?.to_volume(),
        Some("gz") => Err(Error::invalid("compressed NIfTI is not supported")),
        _ => read_native(path)?.to_volume_exact(),
    }
}

/// Clips to the `[lo_pct, hi_pct]` percentiles and rescales to `[0, 1]`.
/// A constant volume maps to zeros.
pub fn preprocess(vol: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if vol.is_empty() {
        return Err(Error::invalid("cannot preprocess an empty volume"));
    }
    if !(0.0..=100.0).contains(&lo_pct) || !(lo_pct..=100.0).contains(&hi_pct) {
        return Err(Error::invalid("need 0 <= lo_pct <= hi_pct <= 100"));
    }
    let mut s = vol.data().to_vec();
    s.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile_sorted(&s, lo_pct), percentile_sorted(&s, hi_pct));
    let mut out = vol.clone();
    if !(hi > lo) {
        log::warn!("constant volume after percentile clipping; returning zeros");
        out.data_mut().iter_mut().for_each(|v| *v = 0.0);
        return Ok(out);
    }
    for v in out.data_mut() {
        *v = (v.clamp(lo, hi) - lo) / (hi - lo);
    }
    Ok(out)
}

/// Separable Gaussian blur, in place. Near the borders the kernel is cut to
/// the in-bounds taps and renormalised.
pub fn gaussian_smooth(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let st = strides[axis];
        let others: Vec<usize> = (0..data.len()).filter(|i| (i / st).is_multiple_of(dims[axis])).collect();
        for base in others {
            line.clear();
            line.extend((0..n as usize).map(|i| data[base + i * st]));
            for i in 0..n {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, kv) in k.iter().enumerate() {
                    let t = i + j as isize - r;
                    if (0..n).contains(&t) {
                        acc += kv * line[t as usize];
                        norm += kv;
                    }
                }
                data[base + i as usize * st] = acc / norm;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub shape: [usize; 3],
    pub classes: usize,
    /// Maximum velocity magnitude in voxels.
    pub amplitude: f64,
    /// Gaussian width of the velocity smoothing in voxels.
    pub smoothness: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            shape: [32, 32, 32],
            classes: 4,
            amplitude: 2.0,
            smoothness: 4.0,
        }
    }
}

/// A generated pair. The generating field maps `moving` onto `fixed`:
/// `fixed = warp(moving, exp(velocity))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_seg: Volume,
    pub moving_seg: Volume,
    pub velocity: DisplacementField,
    pub field: DisplacementField,
    pub seed: u64,
    /// Amplitude actually used after any fold-driven reductions.
    pub amplitude: f64,
}

impl SyntheticPair {
    pub fn into_pair(self, id: impl Into<String>) -> Pair {
        Pair {
            id: id.into(),
            fixed: self.fixed,
            moving: self.moving,
            fixed_seg: Some(self.fixed_seg),
            moving_seg: Some(self.moving_seg),
        }
    }
}

/// Ellipsoid blobs with labels `1..=classes` over a zero background; each
/// label gets its own intensity plus a smooth texture.
pub fn phantom(shape: [usize; 3], classes: usize, rng: &mut ChaCha8Rng) -> (Volume, Volume) {
    let [d, h, w] = shape;
    let n = d * h * w;
    loop {
        let mut labels = vec![0.0; n];
        let blobs: Vec<([f64; 3], [f64; 3])> = (0..classes)
            .map(|_| {
                let c = shape.map(|s| rng.random_range(0.25..0.75) * s as f64);
                let r = shape.map(|s| rng.random_range(0.12..0.3) * s as f64);
                (c, r)
            })
            .collect();
        for (lab, (c, r)) in blobs.iter().enumerate() {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let q = [z, y, x];
                        let e: f64 = (0..3).map(|a| ((q[a] as f64 - c[a]) / r[a]).powi(2)).sum();
                        if e <= 1.0 {
                            labels[(z * h + y) * w + x] = (lab + 1) as f64;
                        }
                    }
                }
            }
        }
        let present = (1..=classes).all(|l| labels.contains(&(l as f64)));
        if !present {
            continue;
        }
        let levels: Vec<f64> = (0..=classes)
            .map(|l| if l == 0 { 0.05 } else { rng.random_range(0.25..1.0) })
            .collect();
        let mut texture: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        gaussian_smooth(&mut texture, shape, 1.5);
        let tmax = texture.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let img: Vec<f64> = labels
            .iter()
            .zip(&texture)
            .map(|(&l, t)| (levels[l as usize] + 0.1 * t / tmax).clamp(0.0, 1.0))
            .collect();
        let from = |v: Vec<f64>| Volume::new(crate::tensor::Tensor::new(vec![1, d, h, w], v).expect("dims")).expect("one channel");
        return (from(img), from(labels));
    }
}

/// Smooth random velocity with maximum magnitude `amplitude`.
pub fn random_velocity(shape: [usize; 3], amplitude: f64, smoothness: f64, rng: &mut ChaCha8Rng) -> DisplacementField {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..3 * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for c in v.chunks_mut(n) {
        gaussian_smooth(c, shape, smoothness);
    }
    let max = (0..n)
        .map(|i| (v[i].powi(2) + v[n + i].powi(2) + v[2 * n + i].powi(2)).sqrt())
        .fold(0.0, f64::max);
    let s = if max > 0.0 { amplitude / max } else { 0.0 };
    v.iter_mut().for_each(|x| *x *= s);
    let [d, h, w] = shape;
    DisplacementField::new(
        crate::tensor::Tensor::new(vec![3, d, h, w], v).expect("dims"),
        FieldRole::Velocity,
    )
    .expect("three channels")
}

/// Deterministic synthetic pair. Folding fields are regenerated at half the
/// amplitude.
pub fn generate_pair(cfg: &GeneratorConfig, divisor: usize, seed: u64) -> Result<SyntheticPair> {
    if cfg.shape.iter().any(|&s| s == 0 || s % divisor != 0) {
        return Err(Error::invalid(format!("shape {:?} is not divisible by {divisor}", cfg.shape)));
    }
    if !(cfg.amplitude >= 0.0) || cfg.classes == 0 || !(cfg.smoothness > 0.0) {
        return Err(Error::invalid("need amplitude >= 0, smoothness > 0 and at least one class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (img, labels) = phantom(cfg.shape, cfg.classes, &mut rng);
    let mut amplitude = cfg.amplitude;
    let noise_state = rng.clone();
    loop {
        let mut vr = noise_state.clone();
        let velocity = random_velocity(cfg.shape, amplitude, cfg.smoothness, &mut vr);
        let field = svf_integrate(&velocity, DEFAULT_SQUARING_STEPS)?;
        let folds = jacobian_analysis(&field)?.fold_percent;
        if folds > 0.0 {
            log::warn!("generated field folds ({folds:.4}%) at amplitude {amplitude}; halving");
            amplitude *= 0.5;
            continue;
        }
        return Ok(SyntheticPair {
            fixed: warp_trilinear(&img, &field)?,
            fixed_seg: warp_nearest(&labels, &field)?,
            moving: img,
            moving_seg: labels,
            velocity,
            field,
            seed,
            amplitude,
        });
    }
}

/// Generation record stored next to a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub pairs: Vec<String>,
    pub amplitudes: Vec<f64>,
}

const PAIR_FILES: [&str; 4] = ["fixed", "moving", "fixed_seg", "moving_seg"];

/// Writes `pairs` under `dir/<id>/` in the native format plus a manifest.
pub fn save_dataset(dir: impl AsRef<Path>, pairs: &[SyntheticPair], cfg: &GeneratorConfig, seed: u64) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let mut manifest = DatasetManifest {
        generator: cfg.clone(),
        seed,
        pairs: Vec::new(),
        amplitudes: Vec::new(),
    };
    for (i, p) in pairs.iter().enumerate() {
        let id = format!("pair_{i:03}");
        let pd = dir.join(&id);
        fs::create_dir_all(&pd).map_err(|e| Error::io(&pd, e))?;
        for (name, vol) in PAIR_FILES.iter().zip([&p.fixed, &p.moving, &p.fixed_seg, &p.moving_seg]) {
            let dtype = if name.ends_with("seg") { Dtype::U8 } else { Dtype::F64 };
            write_native(pd.join(name), &VolumeFile::from_volume(vol, [1.0; 3], dtype, SourceFormat::Native))?;
        }
        manifest.pairs.push(id);
        manifest.amplitudes.push(p.amplitude);
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every pair listed in `dir/manifest.json`, in order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<Pair>)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&text)?;
    let mut pairs = Vec::new();
    for id in &manifest.pairs {
        let pd = dir.join(id);
        let mut v: Vec<Volume> = PAIR_FILES
            .iter()
            .map(|n| read_native(pd.join(n))?.to_volume_exact())
            .collect::<Result<_>>()?;
        let ms = v.pop();
        let fs_ = v.pop();
        let moving = v.pop().expect("moving");
        let fixed = v.pop().expect("fixed");
        pairs.push(Pair {
            id: id.clone(),
            fixed,
            moving,
            fixed_seg: fs_,
            moving_seg: ms,
        });
    }
    Ok((manifest, pairs))
}

/// Provenance keys every report carries.
pub fn provenance(config_hash: &str, seed: u64, extra: &[(&str, String)]) -> BTreeMap<String, String> {
    let mut p = BTreeMap::from([
        ("config_hash".to_string(), config_hash.to_string()),
        ("seed".to_string(), seed.to_string()),
    ]);
    for (k, v) in extra {
        p.insert(k.to_string(), v.clone());
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice_per_label;

    fn ramp(dims: [usize; 3]) -> Volume {
        let [_, h, w] = dims;
        Volume::from_fn(dims, |z, y, x| ((z * h + y) * w + x) as f64 * 0.5)
    }

    #[test]
    fn handcrafted_nifti_header() {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (i, d) in [3i16, 4, 4, 4, 1, 1, 1, 1].iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&16i16.to_le_bytes());
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        for i in 0..64 {
            h.extend_from_slice(&(i as f32).to_le_bytes());
        }
        assert_eq!(h.len() - 352, 256);
        let f = parse_nifti1(&h).unwrap();
        assert_eq!(f.dims, [4, 4, 4]);
        let v = f.to_volume().unwrap();
        assert_eq!(v.data()[63], 63.0);

        let mut bad = h.clone();
        bad[344..348].copy_from_slice(b"abc\0");
        let e = parse_nifti1(&bad).unwrap_err();
        assert!(matches!(e, NiftiError::BadMagic { .. }));
        assert!(e.to_string().contains("magic"));
        let mut dt = h.clone();
        dt[70..72].copy_from_slice(&8i16.to_le_bytes());
        assert_eq!(parse_nifti1(&dt).unwrap_err(), NiftiError::UnsupportedDtype { code: 8 });
        assert!(matches!(
            parse_nifti1(&h[..400]).unwrap_err(),
            NiftiError::Truncated { offset: 352, needed: 256, .. }
        ));
    }

    #[test]
    fn byte_swapped_twin_parses_identically() {
        for dtype in [Dtype::U8, Dtype::I16, Dtype::F32, Dtype::F64] {
            let mut f = VolumeFile::from_volume(&ramp([2, 3, 4]), [1.0, 1.5, 2.0], dtype, SourceFormat::Nifti1);
            f.scl_slope = 2.0;
            f.scl_inter = -1.0;
            let le = parse_nifti1(&nifti1_bytes(&f)).unwrap();
            let mut big = f.clone();
            big.endianness = Endianness::Big;
            big.payload = Vec::new();
            for v in f.values().iter().map(|v| (v + 1.0) / 2.0) {
                dtype.encode(v, true, &mut big.payload);
            }
            let be = parse_nifti1(&nifti1_bytes(&big)).unwrap();
            assert_eq!(be.endianness, Endianness::Big);
            assert_eq!(le.values(), be.values(), "{dtype:?}");
            assert_eq!(le.spacing, [1.0, 1.5, 2.0]);
        }
    }

    #[test]
    fn nifti_and_native_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp([3, 4, 5]);
        let f = VolumeFile::from_volume(&v, [1.0; 3], Dtype::F32, SourceFormat::Nifti1);
        write_nifti1(dir.path().join("a.nii"), &f).unwrap();
        let back = read_nifti1(dir.path().join("a.nii")).unwrap();
        assert_eq!(back.payload, f.payload);
        assert_eq!((back.dims, back.dtype, back.spacing), (f.dims, f.dtype, f.spacing));
        assert_eq!(read_volume(dir.path().join("a.nii")).unwrap(), v);

        let g = VolumeFile::from_volume(&v, [0.5; 3], Dtype::F64, SourceFormat::Native);
        write_native(dir.path().join("b"), &g).unwrap();
        assert_eq!(read_native(dir.path().join("b")).unwrap(), g);
        assert_eq!(read_volume(dir.path().join("b")).unwrap(), v);
    }

    #[test]
    fn preprocess_examples() {
        let v = Volume::from_fn([4, 4, 4], |z, y, x| if (z, y, x) == (0, 0, 0) { 1e6 } else { (x + y + z) as f64 });
        let p = preprocess(&v, 0.5, 99.5).unwrap();
        assert_eq!(p.data()[0], 1.0);
        let (lo, hi) = p.data().iter().fold((f64::MAX, f64::MIN), |a, &b| (a.0.min(b), a.1.max(b)));
        assert_eq!((lo, hi), (0.0, 1.0));
        let c = preprocess(&Volume::from_fn([2, 2, 2], |_, _, _| 3.0), 0.5, 99.5).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.0));
        let unit = Volume::from_fn([4, 4, 4], |z, y, x| (z * 16 + y * 4 + x) as f64 / 63.0);
        let q = preprocess(&unit, 0.0, 100.0).unwrap();
        assert!(q.tensor().max_abs_diff(unit.tensor()) < 1e-15);
    }

    #[test]
    fn gaussian_keeps_constants() {
        let mut d = vec![2.5; 5 * 6 * 7];
        gaussian_smooth(&mut d, [5, 6, 7], 1.3);
        assert!(d.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn generator_examples() {
        let cfg = GeneratorConfig {
            shape: [16, 16, 16],
            amplitude: 0.0,
            ..GeneratorConfig::default()
        };
        let p = generate_pair(&cfg, 8, 1).unwrap();
        assert_eq!(p.fixed, p.moving);
        let labels: Vec<i64> = (1..=cfg.classes as i64).collect();
        assert_eq!(dice_per_label(&p.fixed_seg, &p.moving_seg, &labels).unwrap().mean, 1.0);

        let cfg = GeneratorConfig {
            shape: [32, 32, 32],
            amplitude: 2.0,
            ..GeneratorConfig::default()
        };
        let a = generate_pair(&cfg, 8, 7).unwrap();
        assert_eq!(a, generate_pair(&cfg, 8, 7).unwrap());
        let initial = dice_per_label(&a.fixed_seg, &a.moving_seg, &labels).unwrap().mean;
        assert!(initial < 0.99, "initial dice {initial}");
        let recovered = warp_nearest(&a.moving_seg, &a.field).unwrap();
        assert_eq!(dice_per_label(&a.fixed_seg, &recovered, &labels).unwrap().mean, 1.0);
        assert!(generate_pair(&cfg, 5, 1).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig {
            shape: [8, 8, 8],
            ..GeneratorConfig::default()
        };
        let pairs: Vec<SyntheticPair> = (0..2).map(|s| generate_pair(&cfg, 8, s).unwrap()).collect();
        save_dataset(dir.path(), &pairs, &cfg, 0).unwrap();
        let (m, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m.pairs, vec!["pair_000", "pair_001"]);
        for (p, b) in pairs.into_iter().zip(back) {
            assert_eq!(p.into_pair(b.id.clone()), b);
        }
    }
}
