//! Property tests for the geometry, loss and training invariants.

use mgc_core::contrast::{aggregate, sample_sparse, similarity};
use mgc_core::geometry::{correspondence_weights, correspondence_weights_relative, localize, overlap_index_ranges, patch_rect};
use mgc_core::model::{ema_update, FeatureMap, ParamStore, ViewTag};
use mgc_core::oracle::{brute_correspondences, exact_overlap_area};
use mgc_core::tensor::Matrix;
use mgc_core::trainer::lr_at;
use mgc_core::{CropBox, PatchGrid};
use proptest::prelude::*;
use rand::SeedableRng;

const SIDE: f64 = 256.0;

fn crop() -> impl Strategy<Value = CropBox> {
    (24.0..SIDE, 24.0..SIDE, 0.0..1.0f64, 0.0..1.0f64, any::<bool>())
        .prop_map(|(w, h, fx, fy, flip)| CropBox::with_flip(fx * (SIDE - w), fy * (SIDE - h), w, h, flip).unwrap())
}

fn granularity() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 7, 14])
}

fn grid() -> PatchGrid {
    PatchGrid::square(14)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_distributions(a in crop(), b in crop(), c in granularity()) {
        let t = correspondence_weights(&a, &b, grid(), c).unwrap();
        for q in t.overlapping() {
            prop_assert!((q.weight_sum() - 1.0).abs() <= 1e-9);
            prop_assert!(q.keys.iter().all(|k| k.weight > 0.0 && k.weight <= 1.0));
        }
    }

    #[test]
    fn fast_table_matches_brute_force(a in crop(), b in crop(), c in granularity()) {
        let fast = correspondence_weights(&a, &b, grid(), c).unwrap();
        let brute = brute_correspondences(&a, &b, grid(), c);
        prop_assert!(fast.max_abs_diff(&brute) <= 1e-9);
        prop_assert_eq!(fast.overlapping_count(), brute.overlapping_count());
    }

    #[test]
    fn relative_scores_normalize_to_area_shares(a in crop(), b in crop(), c in granularity()) {
        let area = correspondence_weights(&a, &b, grid(), c).unwrap();
        let rel = correspondence_weights_relative(&a, &b, grid(), c).unwrap();
        prop_assert!(area.max_abs_diff(&rel) <= 1e-9);
    }

    #[test]
    fn flipping_both_views_mirrors_columns(a in crop(), b in crop(), c in granularity()) {
        let t = correspondence_weights(&a, &b, grid(), c).unwrap();
        let f = correspondence_weights(&a.flipped(), &b.flipped(), grid(), c).unwrap();
        let cols = t.cols;
        for q in &t.queries {
            let m = f.query(q.k, cols - 1 - q.l);
            let mut mirrored: Vec<_> = m.keys.iter().map(|e| (e.s, cols - 1 - e.t, e.weight)).collect();
            mirrored.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
            let mut own: Vec<_> = q.keys.iter().map(|e| (e.s, e.t, e.weight)).collect();
            own.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
            prop_assert_eq!(own, mirrored);
        }
    }

    #[test]
    fn index_ranges_cover_every_positive_key(a in crop(), b in crop(), c in granularity()) {
        let t = correspondence_weights(&a, &b, grid(), c).unwrap();
        let ranges = overlap_index_ranges(&a, &b, grid(), c).unwrap();
        for q in t.overlapping() {
            prop_assert!(ranges.rows.unwrap().contains(q.k));
            prop_assert!(ranges.cols.unwrap().contains(q.l));
            let (s, tr) = ranges.keys_for(q.k, q.l).unwrap();
            prop_assert!(q.keys.iter().all(|e| s.contains(e.s) && tr.contains(e.t)));
        }
    }

    #[test]
    fn valid_localizations_are_exact(a in crop(), b in crop(), c in granularity(), pick in 0usize..196) {
        let t = correspondence_weights(&b, &a, grid(), c).unwrap();
        let keys: Vec<(usize, usize)> = t.overlapping().map(|q| (q.k, q.l)).collect();
        prop_assume!(!keys.is_empty());
        let key = keys[pick % keys.len()];
        for cell in localize(&a, &b, grid(), c, key).unwrap() {
            if cell.valid_x {
                prop_assert!(cell.error_x() <= 1e-6, "{:?}", cell);
            }
            if cell.valid_y {
                prop_assert!(cell.error_y() <= 1e-6, "{:?}", cell);
            }
        }
    }

    #[test]
    fn pooled_targets_equal_merged_fine_areas(a in crop(), b in crop()) {
        let coarse = correspondence_weights(&a, &b, grid(), 2).unwrap();
        for q in &coarse.queries {
            let mut areas = [[0.0f64; 7]; 7];
            for k in 2 * q.k..2 * q.k + 2 {
                for l in 2 * q.l..2 * q.l + 2 {
                    let r1 = patch_rect(&a, grid(), 1, k, l).unwrap();
                    for s in 0..14 {
                        for t in 0..14 {
                            areas[s / 2][t / 2] += exact_overlap_area(&r1, &patch_rect(&b, grid(), 1, s, t).unwrap());
                        }
                    }
                }
            }
            let total: f64 = areas.iter().flatten().sum();
            for s in 0..7 {
                for t in 0..7 {
                    let expected = if total > 0.0 { areas[s][t] / total } else { 0.0 };
                    prop_assert!((coarse.weight(q.k, q.l, s, t) - expected).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn sampling_respects_counts_and_support(a in crop(), b in crop(), seed in any::<u64>()) {
        let counts = [(1usize, 10usize), (2, 10), (7, 2), (14, 1)];
        let tables: Vec<_> = counts.iter().map(|&(c, _)| correspondence_weights(&a, &b, grid(), c).unwrap()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let sample = sample_sparse(&tables, &counts, &mut rng).unwrap();
        for (t, &(c, n)) in tables.iter().zip(&counts) {
            let g = sample.get(c).unwrap();
            prop_assert_eq!(g.queries.len(), n.min(t.overlapping_count()));
            for &(k, l) in &g.queries {
                for e in &t.query(k, l).keys {
                    prop_assert!(g.keys.binary_search(&(e.s, e.t)).is_ok());
                }
            }
        }
    }

    #[test]
    fn similarity_ignores_power_of_two_scale(q in prop::collection::vec(-10.0..10.0f64, 8), z in prop::collection::vec(-10.0..10.0f64, 8), e in -20i32..20) {
        prop_assume!(q.iter().any(|v| *v != 0.0) && z.iter().any(|v| *v != 0.0));
        let s = 2f64.powi(e);
        let scaled: Vec<f64> = q.iter().map(|v| v * s).collect();
        prop_assert_eq!(similarity(&scaled, &z).unwrap(), similarity(&q, &z).unwrap());
    }

    #[test]
    fn similarity_ignores_positive_scale(q in prop::collection::vec(-10.0..10.0f64, 8), z in prop::collection::vec(-10.0..10.0f64, 8), s in 1e-3..1e3f64) {
        prop_assume!(q.iter().any(|v| v.abs() > 1e-3) && z.iter().any(|v| v.abs() > 1e-3));
        let scaled: Vec<f64> = q.iter().map(|v| v * s).collect();
        prop_assert!((similarity(&scaled, &z).unwrap() - similarity(&q, &z).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn coarsest_granularity_is_the_global_mean(data in prop::collection::vec(-5.0..5.0f64, 196 * 3)) {
        let fm = FeatureMap { grid: grid(), data: Matrix::from_vec(196, 3, data.clone()), view: ViewTag::First };
        let pooled = aggregate(&fm, 14).unwrap();
        for d in 0..3 {
            let mean = (0..196).map(|r| data[r * 3 + d]).sum::<f64>() / 196.0;
            prop_assert!((pooled.data.get(0, d) - mean).abs() <= 1e-6);
        }
    }

    #[test]
    fn schedule_stays_between_zero_and_peak(total in 1u64..5000, warm_frac in 0.0..1.0f64, step in 0u64..6000) {
        let warmup = (total as f64 * warm_frac) as u64;
        let lr = lr_at(step, total, warmup, 1e-3, 1e-6);
        prop_assert!((0.0..=1e-3).contains(&lr));
        if step >= total {
            prop_assert_eq!(lr, 1e-6);
        }
    }

    #[test]
    fn ema_matches_closed_form(base in prop::collection::vec(-1.0..1.0f64, 6), start in prop::collection::vec(-1.0..1.0f64, 6), k in 0i32..=100) {
        let m = 0.996;
        let theta = ParamStore { names: vec!["w".into()], values: vec![Matrix::from_vec(2, 3, base.clone())] };
        let mut xi = ParamStore { names: vec!["w".into()], values: vec![Matrix::from_vec(2, 3, start.clone())] };
        for _ in 0..k {
            ema_update(&mut xi, &theta, m).unwrap();
        }
        let mk = m.powi(k);
        for i in 0..6 {
            let expected = mk * start[i] + (1.0 - mk) * base[i];
            prop_assert!((xi.values[0].data[i] - expected).abs() <= 1e-12);
        }
    }
}
