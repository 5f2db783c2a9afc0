use fedorch::tensor::{aggregate, Tensor, TensorMap, WeightedUpdate};
use proptest::prelude::*;

fn shapes() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(1usize..5, 1..3), 1..4)
}

fn map_for(shapes: &[Vec<usize>], values: &[f32]) -> TensorMap {
    let mut at = 0;
    let entries = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let len: usize = s.iter().product();
            let t = Tensor::new(format!("t{i}"), s.clone(), values[at..at + len].to_vec()).unwrap();
            at += len;
            t
        })
        .collect();
    TensorMap::from_entries(entries).unwrap()
}

/// Between one and eight updates sharing one random structure.
fn updates() -> impl Strategy<Value = Vec<WeightedUpdate>> {
    (shapes(), 1usize..9).prop_flat_map(|(shapes, n)| {
        let len: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let one = (prop::collection::vec(-1.0e3f32..1.0e3, len), 1u64..100_000);
        prop::collection::vec(one, n).prop_map(move |raw| {
            raw.into_iter()
                .enumerate()
                .map(|(i, (vals, count))| {
                    WeightedUpdate::new(format!("node-{i:02}"), count, map_for(&shapes, &vals)).unwrap()
                })
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn single_update_is_returned_unchanged(mut ups in updates()) {
        ups.truncate(1);
        prop_assert!(aggregate(&ups).unwrap().bit_eq(&ups[0].weights));
    }

    #[test]
    fn input_order_does_not_matter(ups in updates(), rot in 0usize..8) {
        let mut shuffled = ups.clone();
        shuffled.reverse();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        prop_assert!(aggregate(&ups).unwrap().bit_eq(&aggregate(&shuffled).unwrap()));
    }

    #[test]
    fn each_coordinate_stays_within_input_range(ups in updates()) {
        let out = aggregate(&ups).unwrap().flatten();
        let flats: Vec<Vec<f32>> = ups.iter().map(|u| u.weights.flatten()).collect();
        for (j, &v) in out.iter().enumerate() {
            let lo = flats.iter().map(|f| f[j]).fold(f32::INFINITY, f32::min);
            let hi = flats.iter().map(|f| f[j]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(lo <= v && v <= hi, "coordinate {j}: {v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn scaling_all_counts_is_bit_identical(ups in updates(), k in 2u64..1000) {
        let scaled: Vec<WeightedUpdate> = ups
            .iter()
            .map(|u| WeightedUpdate::new(u.node_id.clone(), u.sample_count * k, u.weights.clone()).unwrap())
            .collect();
        prop_assert!(aggregate(&ups).unwrap().bit_eq(&aggregate(&scaled).unwrap()));
    }

    #[test]
    fn matches_weighted_mean_oracle(ups in updates()) {
        let out = aggregate(&ups).unwrap().flatten();
        let total: f64 = ups.iter().map(|u| u.sample_count as f64).sum();
        for (j, &v) in out.iter().enumerate() {
            let expected: f64 = ups
                .iter()
                .map(|u| u.sample_count as f64 * f64::from(u.weights.flatten()[j]))
                .sum::<f64>()
                / total;
            let tol = 1e-6 * expected.abs().max(1.0);
            prop_assert!((f64::from(v) - expected).abs() <= tol, "coordinate {j}: {v} vs {expected}");
        }
    }

    #[test]
    fn identical_weights_aggregate_to_themselves(ups in updates()) {
        let same: Vec<WeightedUpdate> = ups
            .iter()
            .map(|u| WeightedUpdate::new(u.node_id.clone(), u.sample_count, ups[0].weights.clone()).unwrap())
            .collect();
        let out = aggregate(&same).unwrap();
        for (a, b) in out.flatten().iter().zip(ups[0].weights.flatten()) {
            prop_assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }
}

#[test]
fn mismatched_structures_and_duplicates_are_rejected() {
    let a = map_for(&[vec![2]], &[1.0, 2.0]);
    let b = map_for(&[vec![3]], &[1.0, 2.0, 3.0]);
    let ups = vec![
        WeightedUpdate::new("a", 1, a.clone()).unwrap(),
        WeightedUpdate::new("b", 1, b).unwrap(),
    ];
    assert!(aggregate(&ups).is_err());
    let dup = vec![
        WeightedUpdate::new("a", 1, a.clone()).unwrap(),
        WeightedUpdate::new("a", 2, a).unwrap(),
    ];
    assert!(aggregate(&dup).is_err());
    assert!(aggregate(&[]).is_err());
}
