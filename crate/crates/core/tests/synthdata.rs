use dispel_core::synthdata::*;
use dispel_core::{Error, GroupId};
use proptest::prelude::*;

#[test]
fn balanced_mu_splits_agreement_evenly() {
    let spec = DistSpec::new(0.5, 1.0, 1.0, 1.0, 3);
    let n = 1_000_000;
    let d = sample_dataset(&spec, n, 2024).unwrap();
    let agree = (0..n).filter(|&i| d.attribute(i) == d.label(i)).count();
    let frac = agree as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.002, "fraction {frac}");
}

#[test]
fn absent_mode_centers_spurious_coordinate() {
    let spec = DistSpec::new(0.9, 0.5, 1.0, 2.0, 5).without_spurious();
    let n = 20_000;
    let d = sample_dataset(&spec, n, 1).unwrap();
    assert!(d.attributes().iter().all(|&a| a == 0));
    let mean = d.rows().map(|r| r[1] as f64).sum::<f64>() / n as f64;
    assert!(mean.abs() < 5.0 / (n as f64).sqrt());
}

#[test]
fn figure1_configuration_is_valid() {
    let m = 128;
    let spec = DistSpec::new(0.9, 0.5, 0.0, (4.0 * m as f64).sqrt(), 8000);
    spec.validate().unwrap();
    assert!((spec.tail_variance() - 512.0 / 7998.0).abs() < 1e-15);
    let head = sample_dataset(&spec, 4, 0).unwrap();
    assert_eq!(head.dim(), 8000);
    assert!(head.rows().all(|r| r[1] == 1.0 || r[1] == -1.0));
    assert_eq!(sample_balanced(&spec, m, 0).unwrap().len(), m);
}

#[test]
fn balanced_divisibility_error_names_divisor() {
    let spec = DistSpec::new(0.5, 1.0, 0.0, 1.0, 3);
    match sample_balanced(&spec, 2, 0) {
        Err(e @ Error::Divisibility { .. }) => assert!(e.to_string().contains("divisible by 4")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn single_group_rows_share_group() {
    let spec = DistSpec::new(0.5, 1.0, 0.0, 1.0, 4);
    let d = sample_single_group(&spec, 1, 1, 5, 3).unwrap();
    assert!((0..5).all(|i| d.group(i) == GroupId::new(1, 1)));
}

/// Fraction of seeds on which `||(1/n) X^T y - [1, 2p-1, 0, ...]||_inf` is
/// within `5 max(1, sigma1, sigma_xi / sqrt(d - 2)) / sqrt(n)`.
fn label_moment_pass_rate(p: f64, n: usize, d: usize, seeds: u64) -> f64 {
    let spec = DistSpec::new(p, 0.5, 0.0, 3.0, d);
    let bound = 5.0 * 1f64.max(spec.sigma1).max(spec.tail_variance().sqrt()) / (n as f64).sqrt();
    let passes = (0..seeds)
        .filter(|&seed| {
            let data = sample_dataset(&spec, n, seed).unwrap();
            let h = label_moment(&data);
            let mut target = vec![0.0; d];
            target[0] = 1.0;
            target[1] = 2.0 * p - 1.0;
            h.iter().zip(&target).all(|(a, b)| (a - b).abs() <= bound)
        })
        .count();
    passes as f64 / seeds as f64
}

#[test]
fn label_moment_identity_small() {
    assert!(label_moment_pass_rate(0.8, 20_000, 20, 40) >= 0.95);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn group_index_is_consistent(mu in 0.0f64..=1.0, n in 1usize..200, d in 3usize..8, seed in any::<u64>()) {
        let data = sample_dataset(&DistSpec::new(mu, 0.3, 0.2, 1.0, d), n, seed).unwrap();
        let mut total = 0;
        for (g, rows) in data.group_index() {
            for &i in rows {
                prop_assert_eq!(data.group(i), *g);
            }
            total += rows.len();
        }
        prop_assert_eq!(total, n);
        prop_assert!(data.rows().all(|r| r.len() == d));
    }

    #[test]
    fn generation_is_deterministic(n in 1usize..50, seed in any::<u64>()) {
        let spec = DistSpec::new(0.7, 0.5, 0.1, 2.0, 6);
        let a = sample_dataset(&spec, n, seed).unwrap();
        let b = sample_dataset(&spec, n, seed).unwrap();
        prop_assert_eq!(a.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.labels(), b.labels());
    }
}
