use proptest::prelude::*;

use snnreg::deform::{jacobian_analysis, warp_nearest, warp_trilinear, DisplacementField, FieldRole, Volume};
use snnreg::io::{nifti1_bytes, parse_nifti1, Dtype, Endianness, SourceFormat, VolumeFile};
use snnreg::losses::box_sum;
use snnreg::metrics::dice_per_label;
use snnreg::stats::{bootstrap_ci, sign_flip_test, wilcoxon_signed_rank};

fn volume(dims: [usize; 3], values: &[f64]) -> Volume {
    let mut i = 0;
    Volume::from_fn(dims, |_, _, _| {
        i += 1;
        values[(i - 1) % values.len()]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nifti_round_trip(
        d in 1usize..6, h in 1usize..6, w in 1usize..6,
        values in prop::collection::vec(-1000i16..1000, 1..64),
        big in any::<bool>(),
        dtype in prop_oneof![Just(Dtype::I16), Just(Dtype::F32), Just(Dtype::F64)],
    ) {
        let vol = volume([d, h, w], &values.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let mut file = VolumeFile::from_volume(&vol, [1.0, 1.5, 2.0], dtype, SourceFormat::Nifti1);
        if big {
            // re-encode the payload big-endian
            file.payload.clear();
            for &v in vol.data() {
                dtype.encode(v, true, &mut file.payload);
            }
            file.endianness = Endianness::Big;
        }
        let parsed = parse_nifti1(&nifti1_bytes(&file)).unwrap();
        prop_assert_eq!(parsed.dims, [d, h, w]);
        prop_assert_eq!(parsed.endianness, file.endianness);
        prop_assert_eq!(parsed.to_volume_exact().unwrap(), vol);
    }

    #[test]
    fn truncated_nifti_is_rejected(cut in 0usize..400) {
        let vol = volume([3, 4, 5], &[1.0, 2.0, 3.0]);
        let bytes = nifti1_bytes(&VolumeFile::from_volume(&vol, [1.0; 3], Dtype::F32, SourceFormat::Nifti1));
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(parse_nifti1(&bytes[..cut]).is_err());
    }

    #[test]
    fn box_sum_matches_direct_sum(
        d in 1usize..6, h in 1usize..6, w in 1usize..6, r in 0usize..3,
        values in prop::collection::vec(-5.0f64..5.0, 1..32),
    ) {
        let vol = volume([d, h, w], &values);
        let fast = box_sum(vol.data(), [d, h, w], r);
        let at = |z: usize, y: usize, x: usize| vol.data()[(z * h + y) * w + x];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for zz in z.saturating_sub(r)..=(z + r).min(d - 1) {
                        for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                                s += at(zz, yy, xx);
                            }
                        }
                    }
                    prop_assert!((fast[(z * h + y) * w + x] - s).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn integer_translation_shifts_the_interior(
        shift in prop::array::uniform3(-2i32..=2),
        values in prop::collection::vec(0u8..6, 8..64),
    ) {
        let dims = [7, 6, 8];
        let vol = volume(dims, &values.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let s = shift.map(|v| v as f64);
        let field = DisplacementField::from_fn(dims, FieldRole::Displacement, move |_, _, _| s);
        let lin = warp_trilinear(&vol, &field).unwrap();
        let near = warp_nearest(&vol, &field).unwrap();
        let at = |v: &Volume, z: usize, y: usize, x: usize| v.data()[(z * 6 + y) * 8 + x];
        for z in 2..5 {
            for y in 2..4 {
                for x in 2..6 {
                    let src = [z as i32 + shift[0], y as i32 + shift[1], x as i32 + shift[2]];
                    let expect = at(&vol, src[0] as usize, src[1] as usize, src[2] as usize);
                    prop_assert!((at(&lin, z, y, x) - expect).abs() < 1e-12);
                    prop_assert_eq!(at(&near, z, y, x), expect);
                }
            }
        }
        let jac = jacobian_analysis(&field).unwrap();
        prop_assert_eq!(jac.fold_percent, 0.0);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(
        a in prop::collection::vec(0u8..3, 60),
        b in prop::collection::vec(0u8..3, 60),
    ) {
        let dims = [3, 4, 5];
        let va = volume(dims, &a.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let vb = volume(dims, &b.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let ab = dice_per_label(&va, &vb, &[1, 2]).unwrap();
        let ba = dice_per_label(&vb, &va, &[1, 2]).unwrap();
        prop_assert_eq!(&ab, &ba);
        for (_, s) in &ab.per_label {
            if let Some(s) = s {
                prop_assert!((0.0..=1.0).contains(s));
            }
        }
        let self_score = dice_per_label(&va, &va, &[1, 2]).unwrap();
        prop_assert!(self_score.per_label.iter().all(|(_, s)| s.is_none_or(|v| v == 1.0)));
    }

    #[test]
    fn paired_tests_are_valid_probabilities(
        diffs in prop::collection::vec(-1.0f64..1.0, 2..30),
        seed in any::<u64>(),
    ) {
        let p = sign_flip_test(&diffs, 500, seed);
        prop_assert!(p > 0.0 && p <= 1.0);
        let negated: Vec<f64> = diffs.iter().map(|d| -d).collect();
        prop_assert_eq!(wilcoxon_signed_rank(&diffs).unwrap().p, wilcoxon_signed_rank(&negated).unwrap().p);
        let (lo, hi) = bootstrap_ci(&diffs, 200, 0.95, seed).unwrap();
        let min = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // resample means of equal values may round one ulp outside
        prop_assert!(min - 1e-12 <= lo && lo <= hi && hi <= max + 1e-12);
    }
}
