//! Paired comparisons between two methods evaluated on the same pairs.
//!
//! All randomised procedures draw from `ChaCha8Rng` seeded with the caller's
//! seed, so results are reproducible across platforms.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FLIPS: usize = 20_000;
pub const DEFAULT_BOOTSTRAP: usize = 10_000;
/// Largest sample size evaluated with the exact Wilcoxon distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(percentile_sorted(&sorted, p))
}

/// Same as [`percentile`] for an already ascending, non-empty slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-pair values of two methods aligned by pair id.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub ids: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    /// Aligns two `(id, value)` lists. Both must cover the same ids.
    pub fn align(a: &[(String, f64)], b: &[(String, f64)]) -> Result<Self> {
        let bmap: BTreeMap<&str, f64> = b.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        if bmap.len() != b.len() || a.len() != b.len() {
            return Err(Error::invalid("paired samples need the same unique pair ids"));
        }
        let mut sample = PairedSample {
            ids: Vec::new(),
            a: Vec::new(),
            b: Vec::new(),
        };
        let mut amap: Vec<&(String, f64)> = a.iter().collect();
        amap.sort_by(|x, y| x.0.cmp(&y.0));
        for (id, va) in amap {
            let vb = bmap
                .get(id.as_str())
                .ok_or_else(|| Error::invalid(format!("pair `{id}` missing from the second sample")))?;
            sample.ids.push(id.clone());
            sample.a.push(*va);
            sample.b.push(*vb);
        }
        sample.check()?;
        Ok(sample)
    }

    pub fn from_vectors(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::invalid("paired samples differ in length"));
        }
        let ids = (0..a.len()).map(|i| format!("{i:04}")).collect();
        let s = PairedSample { ids, a, b };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.a.len() < 2 {
            return Err(Error::invalid("paired analysis needs at least two pairs"));
        }
        Ok(())
    }

    /// `A_i - B_i`.
    pub fn differences(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(x, y)| x - y).collect()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn tie_tolerant_ge(stat: f64, observed: f64) -> bool {
    stat >= observed - 1e-12 * observed.abs().max(1e-300)
}

/// Two-sided sign-flip permutation test on `|mean(d)|` with `(k+1)/(n+1)`
/// smoothing.
pub fn sign_flip_test(diffs: &[f64], n_flips: usize, seed: u64) -> f64 {
    let observed = mean(diffs).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k = 0usize;
    for _ in 0..n_flips {
        let s: f64 = diffs
            .iter()
            .map(|&d| if rng.random::<bool>() { d } else { -d })
            .sum();
        if tie_tolerant_ge((s / diffs.len() as f64).abs(), observed) {
            k += 1;
        }
    }
    (k + 1) as f64 / (n_flips + 1) as f64
}

/// Exact sign-flip p-value over all `2^N` patterns (no smoothing).
pub fn sign_flip_exact(diffs: &[f64]) -> Result<f64> {
    let n = diffs.len();
    if n > 24 {
        return Err(Error::invalid("exhaustive sign-flip limited to 24 pairs"));
    }
    let observed = mean(diffs).abs();
    let mut k = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = diffs
            .iter()
            .enumerate()
            .map(|(i, &d)| if mask >> i & 1 == 1 { -d } else { d })
            .sum();
        if tie_tolerant_ge((s / n as f64).abs(), observed) {
            k += 1;
        }
    }
    Ok(k as f64 / (1u64 << n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub w: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub p: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks of `|d|` (1-based), with ties sharing their mean rank.
pub fn signed_ranks(diffs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            w_minus: 0.0,
            w: 0.0,
            n: 0,
            p: 1.0,
            method: WilcoxonMethod::Degenerate,
        });
    }
    if n < 2 && diffs.len() < 2 {
        return Err(Error::invalid("Wilcoxon test needs at least two pairs"));
    }
    let ranks = signed_ranks(&nz);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    let (p, method) = if n <= WILCOXON_EXACT_MAX {
        // doubled average ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut ways = vec![0f64; max + 1];
        ways[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                ways[s] += ways[s - r];
            }
        }
        let w2 = (2.0 * w).round() as usize;
        let tail: f64 = ways[..=w2].iter().sum::<f64>() / 2f64.powi(n as i32);
        ((2.0 * tail).min(1.0), WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mut ties = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
            let t = j as f64;
            ties += t * t * t - t;
            i += j;
        }
        let mu = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = (w - mu) / var.sqrt();
        ((libm::erfc(-z / std::f64::consts::SQRT_2)).min(1.0), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        w,
        n,
        p,
        method,
    })
}

/// Percentile bootstrap interval for `mean(d)`.
pub fn bootstrap_ci(diffs: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if diffs.len() < 2 || n_boot == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("bootstrap needs N >= 2, n_boot >= 1 and level in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = diffs.len();
    let mut means: Vec<f64> = (0..n_boot)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0 * 100.0;
    Ok((
        percentile_sorted(&means, tail),
        percentile_sorted(&means, 100.0 - tail),
    ))
}

/// Matched-pair effect size `mean(d) / sd(d)` (sample sd). `None` when the
/// differences have no spread.
pub fn effect_size_dz(diffs: &[f64]) -> Option<f64> {
    if diffs.len() < 2 {
        return None;
    }
    let m = mean(diffs);
    let var = diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (diffs.len() - 1) as f64;
    if var <= 0.0 {
        return None;
    }
    Some(m / var.sqrt())
}

/// Significance flags at `alpha / K`.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> (f64, Vec<bool>) {
    let threshold = alpha / p_values.len().max(1) as f64;
    (threshold, p_values.iter().map(|&p| p < threshold).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_delta: f64,
    pub p_signflip: f64,
    pub p_wilcoxon: f64,
    pub wilcoxon_w: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub d_z: Option<f64>,
    pub bonferroni_alpha: f64,
    pub significant: bool,
}

/// Runs the full protocol on one comparison. `k_tests` is the family size
/// for the Bonferroni correction.
pub fn compare(name: &str, sample: &PairedSample, k_tests: usize, alpha: f64, seed: u64) -> Result<Comparison> {
    let d = sample.differences();
    let p_signflip = sign_flip_test(&d, DEFAULT_FLIPS, seed);
    let wil = wilcoxon_signed_rank(&d)?;
    let (ci_lo, ci_hi) = bootstrap_ci(&d, DEFAULT_BOOTSTRAP, 0.95, seed)?;
    let threshold = alpha / k_tests.max(1) as f64;
    Ok(Comparison {
        name: name.to_string(),
        n: d.len(),
        mean_a: mean(&sample.a),
        mean_b: mean(&sample.b),
        mean_delta: mean(&d),
        p_signflip,
        p_wilcoxon: wil.p,
        wilcoxon_w: wil.w,
        ci_lo,
        ci_hi,
        d_z: effect_size_dz(&d),
        bonferroni_alpha: threshold,
        significant: p_signflip < threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 50.0), Some(2.5));
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 100.0), Some(4.0));
        assert_eq!(percentile(&[5.0], 37.0), Some(5.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn sign_flip_all_zero_is_one() {
        assert_eq!(sign_flip_test(&[0.0; 7], 1000, 1), 1.0);
    }

    #[test]
    fn sign_flip_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..=10 {
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.5)).collect();
            let exact = sign_flip_exact(&d).unwrap();
            let flips = 20_000;
            let mc = sign_flip_test(&d, flips, 42);
            let se = (exact * (1.0 - exact) / flips as f64).sqrt().max(1.0 / flips as f64);
            assert!((mc - exact).abs() <= 3.0 * se + 1.0 / flips as f64, "n={n} {mc} vs {exact}");
        }
    }

    #[test]
    fn sign_flip_same_sign_nineteen() {
        let p = sign_flip_test(&[0.1; 19], 20_000, 42);
        // only the all-positive and all-negative patterns reach the observed mean
        assert!(p < 10.0 / 20_001.0, "{p}");
        assert!(p >= 1.0 / 20_001.0);
    }

    #[test]
    fn sign_flip_is_seeded() {
        let d = [0.3, -0.1, 0.2, 0.05, -0.02];
        assert_eq!(sign_flip_test(&d, 5000, 9), sign_flip_test(&d, 5000, 9));
    }

    fn wilcoxon_oracle(d: &[f64]) -> f64 {
        let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
        let r = signed_ranks(&nz);
        let total: f64 = r.iter().sum();
        let wp: f64 = nz.iter().zip(&r).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let w = wp.min(total - wp);
        let n = nz.len();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
            if s <= w + 1e-9 {
                hits += 1;
            }
        }
        (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.w_plus, r.w_minus), (6.0, 0.0));
        assert!((r.p - 0.25).abs() < 1e-15);
        let r = wilcoxon_signed_rank(&[1.0, -1.0]).unwrap();
        assert_eq!(r.w_plus, r.w_minus);
        assert_eq!(r.p, 1.0);
        let r = wilcoxon_signed_rank(&[1.0, 1.0, -1.0]).unwrap();
        assert_eq!(signed_ranks(&[1.0, 1.0, -1.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(r.w, 2.0);
        assert!((r.p - wilcoxon_oracle(&[1.0, 1.0, -1.0])).abs() < 1e-15);
        let r = wilcoxon_signed_rank(&[0.0, 0.0]).unwrap();
        assert_eq!((r.p, r.method), (1.0, WilcoxonMethod::Degenerate));
    }

    #[test]
    fn wilcoxon_matches_enumeration_up_to_ten() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=10 {
            for _ in 0..5 {
                // coarse values force ties and zeros
                let d: Vec<f64> = (0..n).map(|_| rng.random_range(-3i32..4) as f64).collect();
                if d.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let got = wilcoxon_signed_rank(&d).unwrap();
                assert!((got.p - wilcoxon_oracle(&d)).abs() < 1e-12, "{d:?}");
            }
        }
    }

    #[test]
    fn wilcoxon_normal_approximation_is_close_to_exact() {
        let d: Vec<f64> = (1..=30).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        let r = wilcoxon_signed_rank(&d).unwrap();
        assert_eq!(r.method, WilcoxonMethod::Normal);
        // exact DP on the same ranks for comparison
        let ranks = signed_ranks(&d);
        let max: usize = ranks.iter().map(|&r| r as usize).sum();
        let mut ways = vec![0f64; max + 1];
        ways[0] = 1.0;
        for &r in &ranks {
            for s in (r as usize..=max).rev() {
                ways[s] += ways[s - r as usize];
            }
        }
        let exact = (2.0 * ways[..=r.w as usize].iter().sum::<f64>() / 2f64.powi(30)).min(1.0);
        assert!((r.p - exact).abs() < 0.01, "{} vs {exact}", r.p);
    }

    #[test]
    fn bootstrap_constant_and_coverage() {
        let (lo, hi) = bootstrap_ci(&[0.2; 6], 500, 0.95, 1).unwrap();
        assert!((lo - 0.2).abs() < 1e-15 && (hi - 0.2).abs() < 1e-15);
        let normal = Normal::new(0.3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 500;
        let mut hits = 0;
        for t in 0..trials {
            let d: Vec<f64> = (0..50).map(|_| normal.sample(&mut rng)).collect();
            let (lo, hi) = bootstrap_ci(&d, 1000, 0.95, t).unwrap();
            if lo <= 0.3 && 0.3 <= hi {
                hits += 1;
            }
        }
        let cov = hits as f64 / trials as f64;
        assert!((cov - 0.95).abs() <= 0.03, "coverage {cov}");
    }

    #[test]
    fn dz_examples() {
        assert!((effect_size_dz(&[0.1, 0.2, 0.3]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(effect_size_dz(&[-0.5, 0.5, -1.0, 1.0]), Some(0.0));
        assert_eq!(effect_size_dz(&[0.1, 0.1]), None);
        let a = [0.7, 0.8, 0.75, 0.6];
        let b = [0.65, 0.7, 0.76, 0.5];
        let s1 = PairedSample::from_vectors(a.to_vec(), b.to_vec()).unwrap();
        let s2 = PairedSample::from_vectors(a.iter().map(|x| x + 3.0).collect(), b.iter().map(|x| x + 3.0).collect())
            .unwrap();
        let (d1, d2) = (effect_size_dz(&s1.differences()).unwrap(), effect_size_dz(&s2.differences()).unwrap());
        assert!((d1 - d2).abs() < 1e-9);
    }

    #[test]
    fn bonferroni_examples() {
        let (t, flags) = bonferroni(&[5e-5; 10], 0.05);
        assert!((t - 0.005).abs() < 1e-18);
        assert!(flags.iter().all(|&f| f));
        assert_eq!(bonferroni(&[0.04], 0.05), (0.05, vec![true]));
    }

    #[test]
    fn alignment_is_by_id() {
        let a = vec![("p2".to_string(), 2.0), ("p1".to_string(), 1.0)];
        let b = vec![("p1".to_string(), 0.5), ("p2".to_string(), 1.0)];
        let s = PairedSample::align(&a, &b).unwrap();
        assert_eq!(s.differences(), vec![0.5, 1.0]);
        let c = vec![("p1".to_string(), 0.5), ("p3".to_string(), 1.0)];
        assert!(PairedSample::align(&a, &c).is_err());
        assert!(PairedSample::from_vectors(vec![1.0], vec![1.0]).is_err());
    }
}
