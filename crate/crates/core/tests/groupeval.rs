use dispel_core::groupeval::*;
use dispel_core::linmodel::ModelWeights;
use dispel_core::{Dataset, GroupId};
use proptest::prelude::*;

fn dataset_strategy() -> impl Strategy<Value = (Dataset, Vec<i8>)> {
    (1usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::bool::ANY, n),
            prop::collection::vec(prop::bool::ANY, n),
            prop::collection::vec(prop::bool::ANY, n),
        )
            .prop_map(|(y, a, p)| {
                let pm = |b: &bool| if *b { 1i8 } else { -1 };
                let y: Vec<i8> = y.iter().map(pm).collect();
                let a: Vec<i8> = a.iter().map(pm).collect();
                let x = vec![0f32; y.len()];
                let preds = p.iter().map(pm).collect();
                (Dataset::new(1, x, y, a).unwrap(), preds)
            })
    })
}

/// Worst-group accuracy by direct enumeration over the four binary groups.
fn brute_force(data: &Dataset, preds: &[i8]) -> f64 {
    let mut worst = f64::INFINITY;
    for g in GroupId::BINARY {
        let (mut hit, mut n) = (0usize, 0usize);
        for i in 0..data.len() {
            if data.label(i) == g.y && data.attribute(i) == g.a {
                n += 1;
                hit += (preds[i] == data.label(i)) as usize;
            }
        }
        if n > 0 {
            worst = worst.min(hit as f64 / n as f64);
        }
    }
    worst
}

#[test]
fn worst_group_matches_hand_count() {
    let y = vec![1, 1, -1, -1, 1, -1];
    let a = vec![1, 1, -1, 1, -1, -1];
    let data = Dataset::new(1, vec![0.0; 6], y, a).unwrap();
    let preds = [1, -1, -1, -1, -1, 1];
    let rep = evaluate_predictions(&preds, &data, &GroupUniverse::from_dataset(&data)).unwrap();
    assert_eq!(rep.group(GroupId::new(1, 1)).unwrap().value, 0.5);
    assert_eq!(rep.group(GroupId::new(-1, -1)).unwrap().value, 0.5);
    assert_eq!(rep.worst_value(), 0.0);
    assert_eq!(rep.worst.0, GroupId::new(-1, 1));
    assert!((rep.average - 0.5).abs() < 1e-15);
}

#[test]
fn restriction_to_missing_group_is_rejected() {
    let data = Dataset::new(1, vec![0.0; 2], vec![1, 1], vec![1, 1]).unwrap();
    let err = GroupUniverse::from_dataset(&data).with_restriction([GroupId::new(-1, 1)]);
    assert!(err.is_err());
}

#[test]
fn threshold_ties_go_positive() {
    let data = Dataset::new(1, vec![0.0, 1.0], vec![1, 1], vec![1, 1]).unwrap();
    let w = ModelWeights { w: vec![1.0], b: None };
    let u = GroupUniverse::from_dataset(&data);
    assert_eq!(evaluate_accuracy(&w, &data, &u, Decision::Sign).unwrap().worst_value(), 1.0);
    let rep = evaluate_accuracy(&w, &data, &u, Decision::Threshold(0.5)).unwrap();
    assert_eq!(rep.worst_value(), 0.5);
}

#[test]
fn mse_report_counts_squared_residuals() {
    let data = Dataset::new(1, vec![1.0, 2.0], vec![1, -1], vec![1, -1]).unwrap();
    let w = ModelWeights { w: vec![1.0], b: Some(0.0) };
    let rep = evaluate_mse(&w, &data, &GroupUniverse::from_dataset(&data)).unwrap();
    assert_eq!(rep.group(GroupId::new(1, 1)).unwrap().value, 0.0);
    assert_eq!(rep.group(GroupId::new(-1, -1)).unwrap().value, 9.0);
    assert_eq!(rep.worst_value(), 9.0);
}

proptest! {
    #[test]
    fn worst_matches_enumeration((data, preds) in dataset_strategy()) {
        let rep = evaluate_predictions(&preds, &data, &GroupUniverse::from_dataset(&data)).unwrap();
        prop_assert_eq!(rep.worst_value(), brute_force(&data, &preds));
        prop_assert!(rep.worst_value() <= rep.average + 1e-12);
        let total: usize = rep.per_group.iter().map(|(_, s)| s.count).sum();
        prop_assert_eq!(total, data.len());
    }

    #[test]
    fn permutation_invariant((data, preds) in dataset_strategy(), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..data.len()).collect();
        dispel_core::rng::Stream::new(seed, 0, 0).shuffle(&mut order);
        let permuted = data.select(&order).unwrap();
        let p2: Vec<i8> = order.iter().map(|&i| preds[i]).collect();
        let u = GroupUniverse::from_dataset(&data);
        let a = evaluate_predictions(&preds, &data, &u).unwrap();
        let b = evaluate_predictions(&p2, &permuted, &u).unwrap();
        prop_assert_eq!(a.worst_value().to_bits(), b.worst_value().to_bits());
        prop_assert_eq!(a.average.to_bits(), b.average.to_bits());
    }

    #[test]
    fn restricting_groups_never_lowers_worst((data, preds) in dataset_strategy(), keep in 0usize..4) {
        let u = GroupUniverse::from_dataset(&data);
        let full = evaluate_predictions(&preds, &data, &u).unwrap().worst_value();
        let present: Vec<GroupId> = u.groups().to_vec();
        let kept = present[keep % present.len()];
        let coarse = evaluate_predictions(&preds, &data, &u.clone().with_restriction([kept]).unwrap()).unwrap();
        prop_assert!(coarse.worst_value() >= full);
    }
}
