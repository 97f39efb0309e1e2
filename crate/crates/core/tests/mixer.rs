use dispel_core::mixer::*;
use dispel_core::synthdata::*;
use dispel_core::Dataset;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn sets(n: usize, seed: u64) -> (Dataset, Dataset) {
    let spec = DistSpec::new(0.9, 0.5, 0.2, 2.0, 4);
    (sample_dataset(&spec, n, seed).unwrap(), sample_balanced(&spec, 16, seed ^ 1).unwrap())
}

#[test]
fn full_weight_copies_same_label_partner() {
    let (ft, bal) = sets(300, 4);
    let (out, trace) = mix(&ft, &bal, &MixConfig::new(1.0, 1.0, 9)).unwrap();
    for (i, t) in trace.rows.iter().enumerate() {
        let p = t.partner.unwrap();
        assert!(!t.cross_class);
        assert_eq!(bal.label(p), ft.label(i));
        assert_eq!(out.row(i), bal.row(p));
    }
}

#[test]
fn mix_rate_concentrates() {
    let (alpha, n, seeds) = (0.3, 2000, 200);
    let (ft, bal) = sets(n, 0);
    let band = 4.0 * (alpha * (1.0 - alpha) / n as f64).sqrt();
    let ok = (0..seeds)
        .filter(|&seed| {
            let (_, trace) = mix(&ft, &bal, &MixConfig::new(alpha, 0.5, seed)).unwrap();
            let rate = trace.mixed_count() as f64 / n as f64;
            (rate - alpha).abs() <= band
        })
        .count();
    assert!(ok as f64 >= 0.99 * seeds as f64, "{ok} of {seeds}");
}

#[test]
fn partners_are_uniform_within_pool() {
    let (ft, bal) = sets(20_000, 3);
    let pools = build_class_pools(&bal).unwrap();
    let (_, trace) = mix(&ft, &bal, &MixConfig::new(1.0, 0.5, 77)).unwrap();
    for y in [1i8, -1] {
        let pool = pools.pool(y);
        let mut counts = vec![0f64; pool.len()];
        let mut draws = 0.0;
        for (i, t) in trace.rows.iter().enumerate() {
            if ft.label(i) == y {
                let k = pool.iter().position(|&p| Some(p) == t.partner).unwrap();
                counts[k] += 1.0;
                draws += 1.0;
            }
        }
        assert!(draws >= 9_000.0);
        let expected = draws / pool.len() as f64;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let critical = ChiSquared::new((pool.len() - 1) as f64).unwrap().inverse_cdf(0.999);
        assert!(stat < critical, "label {y}: chi2 {stat} >= {critical}");
    }
}

#[test]
fn cross_class_iff_pool_empty() {
    let spec = DistSpec::new(0.9, 0.5, 0.2, 2.0, 4);
    let ft = sample_dataset(&spec, 500, 1).unwrap();
    let bal = sample_single_group(&spec, -1, 1, 6, 2).unwrap();
    let pools = build_class_pools(&bal).unwrap();
    let (out, trace) = mix(&ft, &bal, &MixConfig::new(0.6, 0.3, 5)).unwrap();
    for (i, t) in trace.rows.iter().enumerate() {
        assert_eq!(t.cross_class, t.mixed && pools.pool(ft.label(i)).is_empty());
        assert_eq!(t.mixed, t.partner.is_some());
        if t.cross_class {
            let p = t.partner.unwrap();
            let want = (0.7 * ft.row(i)[0] as f64 + 0.3 * bal.row(p)[0] as f64) as f32;
            assert_eq!(out.row(i)[0], want);
        }
    }
}

#[test]
fn empty_balanced_set_is_rejected() {
    let (ft, _) = sets(10, 0);
    let empty = Dataset::new(4, vec![], vec![], vec![]).unwrap();
    assert!(mix(&ft, &empty, &MixConfig::new(0.5, 0.5, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_preserved_and_rows_convex(alpha in 0.0f64..=1.0, s in 0.0f64..=1.0, seed in any::<u64>(), n in 1usize..120) {
        let (ft, bal) = sets(n, seed);
        let (out, trace) = mix(&ft, &bal, &MixConfig::new(alpha, s, seed)).unwrap();
        prop_assert_eq!(out.len(), ft.len());
        prop_assert_eq!(out.labels(), ft.labels());
        prop_assert_eq!(out.attributes(), ft.attributes());
        for (i, t) in trace.rows.iter().enumerate() {
            match t.partner {
                None => prop_assert_eq!(out.row(i), ft.row(i)),
                Some(p) => {
                    for j in 0..ft.dim() {
                        let (a, b) = (ft.row(i)[j], bal.row(p)[j]);
                        let v = out.row(i)[j];
                        prop_assert!(v >= a.min(b) && v <= a.max(b));
                    }
                }
            }
        }
    }

    #[test]
    fn mixing_is_deterministic(alpha in 0.0f64..=1.0, s in 0.0f64..=1.0, seed in any::<u64>()) {
        let (ft, bal) = sets(40, 1);
        prop_assert_eq!(mix(&ft, &bal, &MixConfig::new(alpha, s, seed)).unwrap(),
                        mix(&ft, &bal, &MixConfig::new(alpha, s, seed)).unwrap());
    }
}
