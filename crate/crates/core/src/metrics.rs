//! Registration quality metrics.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::deform::{jacobian_analysis, warp_nearest, warp_trilinear, DisplacementField, FieldRole, Volume};
use crate::error::{Error, Result};
use crate::losses::mean_local_ncc;
use crate::stats::percentile_sorted;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    /// `None` for labels absent from both volumes.
    pub per_label: Vec<(i64, Option<f64>)>,
    pub mean: f64,
}

fn label_of(v: f64) -> i64 {
    v.round() as i64
}

fn check_labels(a: &Volume, b: &Volume, labels: &[i64]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid("label list is empty"));
    }
    if a.dims() != b.dims() {
        return Err(Error::shape("dice", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if !a.is_integer_valued() || !b.is_integer_valued() {
        return Err(Error::invalid("label volumes must be integer-valued"));
    }
    Ok(())
}

fn mean_present(scores: &[(i64, Option<f64>)]) -> f64 {
    let present: Vec<f64> = scores.iter().filter_map(|s| s.1).collect();
    if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Dice per label. Labels present in only one volume score 0.
pub fn dice_per_label(fixed: &Volume, warped: &Volume, labels: &[i64]) -> Result<LabelScores> {
    check_labels(fixed, warped, labels)?;
    let per_label: Vec<(i64, Option<f64>)> = labels
        .iter()
        .map(|&l| {
            let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in fixed.data().iter().zip(warped.data()) {
                let (ia, ib) = (label_of(x) == l, label_of(y) == l);
                a += ia as usize;
                b += ib as usize;
                both += (ia && ib) as usize;
            }
            let score = (a + b > 0).then(|| 2.0 * both as f64 / (a + b) as f64);
            (l, score)
        })
        .collect();
    let mean = mean_present(&per_label);
    Ok(LabelScores { per_label, mean })
}

/// Surface voxels: in the mask with at least one 6-neighbour outside it
/// (the outside of the grid counts as background).
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let bg = |zz: isize, yy: isize, xx: isize| {
                    if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                        return true;
                    }
                    !mask[(zz as usize * h + yy as usize) * w + xx as usize]
                };
                let (z, y, x) = (z as isize, y as isize, x as isize);
                out[i] = bg(z - 1, y, x)
                    || bg(z + 1, y, x)
                    || bg(z, y - 1, x)
                    || bg(z, y + 1, x)
                    || bg(z, y, x - 1)
                    || bg(z, y, x + 1);
            }
        }
    }
    out
}

/// One-dimensional squared distance transform of sampled function `f`
/// (Felzenszwalb and Huttenlocher). Infinite entries are not sites.
fn dt1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest `true` voxel.
pub fn squared_edt(sites: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let s = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..g.len() {
            if !(start / s).is_multiple_of(n) {
                continue;
            }
            for i in 0..n {
                line[i] = g[start + i * s];
            }
            dt1d(&line, &mut out, &mut v, &mut z);
            for i in 0..n {
                g[start + i * s] = out[i];
            }
        }
    }
    g
}

/// Symmetric HD95 in voxels over the pooled surface distances of both
/// directions. `None` when either mask is empty.
pub fn hd95(a: &[bool], b: &[bool], dims: [usize; 3]) -> Option<f64> {
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        log::warn!("hd95: empty mask, label skipped");
        return None;
    }
    let sa = surface(a, dims);
    let sb = surface(b, dims);
    let da = squared_edt(&sa, dims);
    let db = squared_edt(&sb, dims);
    let mut dists: Vec<f64> = sa
        .iter()
        .zip(&db)
        .filter(|(s, _)| **s)
        .map(|(_, d)| d.sqrt())
        .chain(sb.iter().zip(&da).filter(|(s, _)| **s).map(|(_, d)| d.sqrt()))
        .collect();
    dists.sort_by(f64::total_cmp);
    Some(percentile_sorted(&dists, 95.0))
}

/// HD95 per label; labels missing from either volume are skipped.
pub fn hd95_per_label(fixed: &Volume, warped: &Volume, labels: &[i64]) -> Result<LabelScores> {
    check_labels(fixed, warped, labels)?;
    let dims = fixed.dims();
    let per_label: Vec<(i64, Option<f64>)> = labels
        .iter()
        .map(|&l| {
            let a: Vec<bool> = fixed.data().iter().map(|&v| label_of(v) == l).collect();
            let b: Vec<bool> = warped.data().iter().map(|&v| label_of(v) == l).collect();
            (l, hd95(&a, &b, dims))
        })
        .collect();
    let mean = mean_present(&per_label);
    Ok(LabelScores { per_label, mean })
}

pub const NCC_WINDOW: usize = 9;
pub const NCC_EPS: f64 = 1e-8;

/// Mean local NCC, higher is better. Uses the loss window clipped to the
/// smallest volume side (rounded down to odd).
pub fn image_ncc(fixed: &Volume, warped: &Volume) -> Result<f64> {
    let min_side = *fixed.dims().iter().min().expect("3 dims");
    let mut window = NCC_WINDOW.min(min_side);
    if window.is_multiple_of(2) {
        window -= 1;
    }
    mean_local_ncc(fixed, warped, window, NCC_EPS)
}

/// Mean and max of the per-voxel displacement norm.
pub fn displacement_stats(field: &DisplacementField) -> (f64, f64) {
    let t = field.tensor();
    let n = t.voxels();
    let (mut sum, mut max) = (0.0, 0.0f64);
    for i in 0..n {
        let norm = (0..3).map(|c| t.channel(c)[i].powi(2)).sum::<f64>().sqrt();
        sum += norm;
        max = max.max(norm);
    }
    (sum / n as f64, max)
}

/// `(Dice_SNN - Dice_ANN, Dice_SNN / Dice_ANN)`.
pub fn retention(snn_dice: f64, ann_dice: f64) -> Result<(f64, f64)> {
    if !(ann_dice > 0.0 && ann_dice <= 1.0) || !(0.0..=1.0).contains(&snn_dice) {
        return Err(Error::invalid("retention needs Dice values in [0, 1] and a positive teacher Dice"));
    }
    Ok((snn_dice - ann_dice, snn_dice / ann_dice))
}

/// One evaluated registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: String,
    pub dice_mean: f64,
    pub dice: Vec<(i64, Option<f64>)>,
    pub hd95_mean: f64,
    pub hd95: Vec<(i64, Option<f64>)>,
    pub ncc: f64,
    pub fold_percent: f64,
    pub sdlogj: f64,
    pub disp_mean: f64,
    pub disp_max: f64,
    pub spike_rates: Vec<(String, f64)>,
}

impl PairResult {
    pub fn mean_spike_rate(&self) -> Option<f64> {
        (!self.spike_rates.is_empty())
            .then(|| self.spike_rates.iter().map(|r| r.1).sum::<f64>() / self.spike_rates.len() as f64)
    }
}

/// Full evaluation of one pair under `field`: trilinear image warp, nearest
/// label warp, Dice, HD95, NCC, Jacobian statistics and displacement norms.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pair(
    pair_id: &str,
    fixed: &Volume,
    moving: &Volume,
    fixed_seg: &Volume,
    moving_seg: &Volume,
    field: &DisplacementField,
    labels: &[i64],
    spike_rates: Vec<(String, f64)>,
) -> Result<PairResult> {
    if field.role() != FieldRole::Displacement {
        return Err(Error::invalid("evaluation needs a displacement field"));
    }
    let warped = warp_trilinear(moving, field)?;
    let warped_seg = warp_nearest(moving_seg, field)?;
    let dice = dice_per_label(fixed_seg, &warped_seg, labels)?;
    let hd = hd95_per_label(fixed_seg, &warped_seg, labels)?;
    let jac = jacobian_analysis(field)?;
    let (disp_mean, disp_max) = displacement_stats(field);
    Ok(PairResult {
        pair_id: pair_id.to_string(),
        dice_mean: dice.mean,
        dice: dice.per_label,
        hd95_mean: hd.mean,
        hd95: hd.per_label,
        ncc: image_ncc(fixed, &warped)?,
        fold_percent: jac.fold_percent,
        sdlogj: jac.sdlogj,
        disp_mean,
        disp_max,
        spike_rates,
    })
}

/// Column order of pair-result CSV files. List-valued columns hold
/// `key:value` items joined by `;` (`nan` for absent labels).
pub const PAIR_COLUMNS: [&str; 12] = [
    "pair_id",
    "dice_mean",
    "hd95_mean",
    "ncc",
    "fold_percent",
    "sdlogj",
    "disp_mean",
    "disp_max",
    "mean_spike_rate",
    "dice_labels",
    "hd95_labels",
    "spike_rates",
];

fn join_labels(v: &[(i64, Option<f64>)]) -> String {
    v.iter()
        .map(|(l, s)| match s {
            Some(x) => format!("{l}:{x}"),
            None => format!("{l}:nan"),
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn split_labels(s: &str) -> Result<Vec<(i64, Option<f64>)>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|item| {
            let (l, v) = item
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("bad label item `{item}`")))?;
            let l = l.parse().map_err(|_| Error::invalid(format!("bad label `{l}`")))?;
            let v: f64 = v.parse().map_err(|_| Error::invalid(format!("bad value `{v}`")))?;
            Ok((l, (!v.is_nan()).then_some(v)))
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Writes pair results with a leading `# key=value` provenance line.
pub fn write_pair_csv<W: Write>(mut w: W, rows: &[PairResult], provenance: &BTreeMap<String, String>) -> Result<()> {
    let prov: Vec<String> = provenance.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(w, "# {}", prov.join(" ")).map_err(|e| Error::io("<csv>", e))?;
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(PAIR_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let rates = r
            .spike_rates
            .iter()
            .map(|(n, v)| format!("{n}:{v}"))
            .collect::<Vec<_>>()
            .join(";");
        wr.write_record([
            r.pair_id.clone(),
            r.dice_mean.to_string(),
            r.hd95_mean.to_string(),
            r.ncc.to_string(),
            r.fold_percent.to_string(),
            r.sdlogj.to_string(),
            r.disp_mean.to_string(),
            r.disp_max.to_string(),
            r.mean_spike_rate().map_or("nan".to_string(), |v| v.to_string()),
            join_labels(&r.dice),
            join_labels(&r.hd95),
            rates,
        ])
        .map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_pair_csv<R: Read>(r: R) -> Result<Vec<PairResult>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = rd.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(PAIR_COLUMNS.iter().copied()) {
        return Err(Error::invalid(format!("unexpected pair-result columns {headers:?}")));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::invalid(format!("bad number `{s}`"))) };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let spike_rates = if rec[11].is_empty() {
            Vec::new()
        } else {
            rec[11]
                .split(';')
                .map(|it| {
                    let (n, v) = it.split_once(':').ok_or_else(|| Error::invalid(format!("bad rate `{it}`")))?;
                    Ok((n.to_string(), num(v)?))
                })
                .collect::<Result<Vec<_>>>()?
        };
        out.push(PairResult {
            pair_id: rec[0].to_string(),
            dice_mean: num(&rec[1])?,
            hd95_mean: num(&rec[2])?,
            ncc: num(&rec[3])?,
            fold_percent: num(&rec[4])?,
            sdlogj: num(&rec[5])?,
            disp_mean: num(&rec[6])?,
            disp_max: num(&rec[7])?,
            dice: split_labels(&rec[9])?,
            hd95: split_labels(&rec[10])?,
            spike_rates,
        });
    }
    Ok(out)
}

/// Mean of a metric over pairs (NaN entries skipped).
pub fn summarize(rows: &[PairResult]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let avg = |f: &dyn Fn(&PairResult) -> f64| {
        let v: Vec<f64> = rows.iter().map(f).filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    out.insert("dice_mean".into(), avg(&|r| r.dice_mean));
    out.insert("hd95_mean".into(), avg(&|r| r.hd95_mean));
    out.insert("ncc".into(), avg(&|r| r.ncc));
    out.insert("fold_percent".into(), avg(&|r| r.fold_percent));
    out.insert("sdlogj".into(), avg(&|r| r.sdlogj));
    out.insert("disp_mean".into(), avg(&|r| r.disp_mean));
    out.insert("mean_spike_rate".into(), avg(&|r| r.mean_spike_rate().unwrap_or(f64::NAN)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Volume {
        Volume::from_fn(dims, f)
    }

    #[test]
    fn dice_examples() {
        let a = labels([4, 5, 5], |z, _, _| if z < 2 { 1.0 } else { 2.0 });
        let d = dice_per_label(&a, &a, &[1, 2, 3]).unwrap();
        assert_eq!(d.per_label, vec![(1, Some(1.0)), (2, Some(1.0)), (3, None)]);
        assert_eq!(d.mean, 1.0);
        let b = labels([4, 5, 5], |z, _, _| if z < 2 { 2.0 } else { 1.0 });
        assert_eq!(dice_per_label(&a, &b, &[1]).unwrap().mean, 0.0);
        // |A| = |B| = 100 with 50 shared
        let x = labels([1, 10, 20], |_, y, x| if x < 10 && y < 10 { 1.0 } else { 0.0 });
        let y = labels([1, 10, 20], |_, y, x| if (5..15).contains(&x) && y < 10 { 1.0 } else { 0.0 });
        assert_eq!(dice_per_label(&x, &y, &[1]).unwrap().mean, 0.5);
        assert_eq!(dice_per_label(&y, &x, &[1]).unwrap().mean, 0.5);
        // one-sided label counts as zero
        let only = labels([1, 10, 20], |_, _, _| 0.0);
        assert_eq!(dice_per_label(&x, &only, &[1]).unwrap().per_label[0].1, Some(0.0));
        assert!(dice_per_label(&x, &y, &[]).is_err());
    }

    fn brute_hd95(a: &[bool], b: &[bool], dims: [usize; 3]) -> f64 {
        let pts = |m: &[bool]| -> Vec<[f64; 3]> {
            let s = surface(m, dims);
            let mut out = Vec::new();
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        if s[(z * dims[1] + y) * dims[2] + x] {
                            out.push([z as f64, y as f64, x as f64]);
                        }
                    }
                }
            }
            out
        };
        let (pa, pb) = (pts(a), pts(b));
        let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
            set.iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let mut d: Vec<f64> = pa.iter().map(|p| nearest(p, &pb)).chain(pb.iter().map(|p| nearest(p, &pa))).collect();
        d.sort_by(f64::total_cmp);
        percentile_sorted(&d, 95.0)
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = [5, 6, 7];
        let sites: Vec<bool> = (0..210).map(|_| rng.random_bool(0.05)).collect();
        let g = squared_edt(&sites, dims);
        for (i, &gv) in g.iter().enumerate() {
            let (z, y, x) = (i / 42, (i / 7) % 6, i % 7);
            let best = sites
                .iter()
                .enumerate()
                .filter(|(_, s)| **s)
                .map(|(j, _)| {
                    let (a, b, c) = (j / 42, (j / 7) % 6, j % 7);
                    (z as f64 - a as f64).powi(2) + (y as f64 - b as f64).powi(2) + (x as f64 - c as f64).powi(2)
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(gv, best);
        }
    }

    #[test]
    fn hd95_examples_and_oracle() {
        let dims = [4, 4, 4];
        let one = |p: usize| (0..64).map(|i| i == p).collect::<Vec<bool>>();
        assert_eq!(hd95(&one(21), &one(21), dims), Some(0.0));
        assert_eq!(hd95(&one(21), &one(22), dims), Some(1.0));
        assert_eq!(hd95(&one(21), &[false; 64], dims), None);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let dims = [rng.random_range(2..11), rng.random_range(2..11), rng.random_range(2..11)];
            let n = dims.iter().product();
            let blob = |rng: &mut ChaCha8Rng| -> Vec<bool> {
                let c = [rng.random_range(0.0..dims[0] as f64), rng.random_range(0.0..dims[1] as f64), rng.random_range(0.0..dims[2] as f64)];
                let r = rng.random_range(1.0..4.0);
                (0..n)
                    .map(|i| {
                        let (z, y, x) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
                        (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2) <= r * r
                    })
                    .collect()
            };
            let (a, b) = (blob(&mut rng), blob(&mut rng));
            if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
                continue;
            }
            let fast = hd95(&a, &b, dims).unwrap();
            assert_eq!(fast, brute_hd95(&a, &b, dims));
            assert_eq!(fast, hd95(&b, &a, dims).unwrap());
        }
    }

    #[test]
    fn ncc_metric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = Volume::from_fn([12, 12, 12], |_, _, _| rng.random_range(0.0..1.0));
        let g = Volume::from_fn([12, 12, 12], |_, _, _| rng.random_range(0.0..1.0));
        assert!((image_ncc(&f, &f).unwrap() - 1.0).abs() < 1e-6);
        let affine = Volume::new(f.tensor().map(|v| 3.0 * v + 2.0)).unwrap();
        assert!((image_ncc(&f, &affine).unwrap() - 1.0).abs() < 1e-6);
        // window of 729 voxels: sd of local NCC ~ 1/27
        assert!(image_ncc(&f, &g).unwrap().abs() < 0.05);
    }

    #[test]
    fn displacement_examples() {
        let z = DisplacementField::zeros([3, 3, 3]);
        assert_eq!(displacement_stats(&z), (0.0, 0.0));
        let c = DisplacementField::from_fn([3, 3, 3], FieldRole::Displacement, |_, _, _| [3.0, 4.0, 0.0]);
        let (m, x) = displacement_stats(&c);
        assert!((m - 5.0).abs() < 1e-15 && x == 5.0);
        let spike = DisplacementField::from_fn([2, 2, 5], FieldRole::Displacement, |z, y, x| {
            if (z, y, x) == (1, 1, 3) {
                [0.0, 6.0, 8.0]
            } else {
                [0.0; 3]
            }
        });
        assert_eq!(displacement_stats(&spike), (0.5, 10.0));
    }

    #[test]
    fn retention_examples() {
        let (d, r) = retention(0.7474, 0.7480).unwrap();
        assert!((d + 0.0006).abs() < 1e-12);
        assert!((r - 0.99920).abs() < 1e-5);
        assert_eq!(retention(0.6, 0.6).unwrap(), (0.0, 1.0));
        assert_eq!(retention(0.5, 1.0).unwrap(), (-0.5, 0.5));
        assert!(retention(0.5, 0.0).is_err());
    }

    #[test]
    fn evaluate_identity_and_csv_round_trip() {
        let img = Volume::from_fn([8, 8, 8], |z, y, x| ((z * 7 + y * 3 + x) % 11) as f64 / 10.0);
        let seg = Volume::from_fn([8, 8, 8], |z, y, _| if z < 4 { 1.0 } else if y < 4 { 2.0 } else { 0.0 });
        let r = evaluate_pair(
            "p0",
            &img,
            &img,
            &seg,
            &seg,
            &DisplacementField::zeros([8, 8, 8]),
            &[1, 2],
            vec![("enc1".into(), 0.25)],
        )
        .unwrap();
        assert_eq!(r.dice_mean, 1.0);
        assert_eq!(r.hd95_mean, 0.0);
        assert_eq!(r.fold_percent, 0.0);
        let mut buf = Vec::new();
        let prov = BTreeMap::from([("seed".to_string(), "42".to_string())]);
        write_pair_csv(&mut buf, std::slice::from_ref(&r), &prov).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed=42\npair_id,dice_mean"));
        let back = read_pair_csv(&buf[..]).unwrap();
        assert_eq!(back, vec![r]);
    }
}
