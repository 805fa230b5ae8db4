//! mIOU, precision-recall and confusion counts against exhaustive oracles.

mod common;

use common::identities::{miou_oracle, pr_oracle};
use condadapt_core::metrics::{auc, miou, pr_curve, Match};
use proptest::prelude::*;

#[test]
fn handcrafted_metric_cases() {
    let failures = common::identities::metric_oracle_failures();
    assert!(failures.is_empty(), "{failures:#?}");
}

proptest! {
    #[test]
    fn miou_matches_pixel_count(pairs in prop::collection::vec((0u8..5, 0u8..5), 1..80)) {
        let (p, g): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let v = miou(&p, &g, 5).unwrap();
        prop_assert_eq!(v, miou_oracle(&p, &g, 5));
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn pr_curve_matches_threshold_sweep(raw in prop::collection::vec((0u8..8, any::<bool>()), 1..50)) {
        let matches: Vec<Match> = raw
            .iter()
            .enumerate()
            .map(|(query, &(d, correct))| Match { query, db_index: 0, distance: f64::from(d), correct })
            .collect();
        let curve = pr_curve(&matches);
        prop_assert_eq!(&curve, &pr_oracle(&matches));
        let a = auc(&curve);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    /// Turning a wrong match into a correct one never lowers the AUC.
    #[test]
    fn auc_monotone_in_correctness(raw in prop::collection::vec((0u8..8, any::<bool>()), 1..50), flip in any::<prop::sample::Index>()) {
        let mut matches: Vec<Match> = raw
            .iter()
            .enumerate()
            .map(|(query, &(d, correct))| Match { query, db_index: 0, distance: f64::from(d), correct })
            .collect();
        let before = auc(&pr_curve(&matches));
        let i = flip.index(matches.len());
        matches[i].correct = true;
        prop_assert!(auc(&pr_curve(&matches)) >= before - 1e-12);
    }
}
