use ella_core::metrics::{
    accuracy, bin_index, categorical_nll, ece, error_vs_confidence, reliability_bins, MetricsReport,
};
use proptest::prelude::*;

fn probs_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..6, 1usize..40).prop_flat_map(|(c, n)| {
        (
            prop::collection::vec(prop::collection::vec(-4.0f64..4.0, c), n),
            prop::collection::vec(0..c, n),
        )
            .prop_map(|(logits, labels)| {
                let probs = logits.iter().map(|g| ella_core::likelihood::softmax(g)).collect();
                (probs, labels)
            })
    })
}

fn top(p: &[f64]) -> (f64, usize) {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    (p[best], best)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ece_matches_direct_sum((probs, labels) in probs_strategy(), bins in 1usize..20) {
        let n = probs.len() as f64;
        let mut expected = 0.0;
        for b in 0..bins {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            let members: Vec<(f64, bool)> = probs
                .iter()
                .zip(&labels)
                .map(|(p, &y)| { let (c, k) = top(p); (c, k == y) })
                .filter(|(c, _)| (*c > lo || (b == 0 && *c >= 0.0)) && *c <= hi)
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let conf = members.iter().map(|x| x.0).sum::<f64>() / m;
            let acc = members.iter().filter(|x| x.1).count() as f64 / m;
            expected += m / n * (acc - conf).abs();
        }
        let got = ece(&probs, &labels, bins).unwrap();
        prop_assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn bins_partition_the_items((probs, labels) in probs_strategy()) {
        let table = reliability_bins(&probs, &labels, 15).unwrap();
        prop_assert_eq!(table.iter().map(|b| b.count).sum::<usize>(), probs.len());
    }

    #[test]
    fn curve_endpoint_is_overall_error((probs, labels) in probs_strategy()) {
        let curve = error_vs_confidence(&probs, &labels, &[1.0]).unwrap();
        let acc = accuracy(&probs, &labels).unwrap();
        prop_assert!((curve[0].error.unwrap() - (1.0 - acc)).abs() < 1e-12);
    }

    #[test]
    fn bin_index_respects_its_bounds(conf in 0.0f64..=1.0, bins in 1usize..40) {
        let b = bin_index(conf, bins);
        prop_assert!(b < bins);
        prop_assert!(conf <= (b + 1) as f64 / bins as f64);
        prop_assert!(b == 0 || conf > b as f64 / bins as f64);
    }
}

#[test]
fn boundary_confidences_land_in_the_lower_bin() {
    assert_eq!(bin_index(0.2, 15), 2);
    assert_eq!(bin_index(0.0, 15), 0);
    assert_eq!(bin_index(1.0, 15), 14);
    assert_eq!(bin_index(0.5, 2), 0);
}

#[test]
fn perfect_confident_predictions_have_zero_ece() {
    let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let r = MetricsReport::classification(&probs, &[0, 1], 15).unwrap();
    assert_eq!(r.ece, 0.0);
    assert_eq!(r.nll, 0.0);
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn nll_of_uniform_is_log_classes() {
    assert!((categorical_nll(&[0.25; 4], 3) - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn zero_probability_is_finite() {
    assert!(categorical_nll(&[1.0, 0.0], 1).is_finite());
}

#[test]
fn malformed_rows_are_rejected() {
    assert!(ece(&[vec![0.5, 0.6]], &[0], 15).is_err());
    assert!(ece(&[vec![0.5, 0.5]], &[2], 15).is_err());
    assert!(ece(&[], &[], 15).is_err());
}

#[test]
fn report_serializes_and_writes_bins() {
    let probs = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.9, 0.1]];
    let r = MetricsReport::classification(&probs, &[0, 0, 0], 15).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(v["n"], 3);
    let mut buf = Vec::new();
    r.write_bins_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 16);
}
