use std::path::PathBuf;
use std::time::Instant;

use introspect::metrics::{calibration_errors, evaluate, Measure, MetricsConfig};
use introspect::predictive::load_predictions;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/metrics").join(name)
}

fn close(got: f64, want: &Value, what: &str) {
    let want = want.as_f64().unwrap_or_else(|| panic!("{what} missing from expected report"));
    assert!((got - want).abs() <= 1e-9, "{what}: {got} vs {want}");
}

fn close_all(got: &[f64], want: &Value, what: &str) {
    let want = want.as_array().unwrap();
    assert_eq!(got.len(), want.len(), "{what} length");
    for (k, (g, w)) in got.iter().zip(want).enumerate() {
        close(*g, w, &format!("{what}[{k}]"));
    }
}

#[test]
fn fixture_report_matches_the_hand_computed_values() {
    let start = Instant::now();
    let test = load_predictions(&fixture("test.json")).unwrap();
    let ood = load_predictions(&fixture("ood.json")).unwrap();
    let want: Value = serde_json::from_str(&std::fs::read_to_string(fixture("expected.json")).unwrap()).unwrap();
    let cfg = MetricsConfig {
        bins: want["bins"].as_u64().unwrap() as usize,
        measure: Measure::Confidence,
        require_ood: true,
    };
    let r = evaluate(&test, Some(&ood), &cfg).unwrap();

    assert_eq!(r.n_test as u64, want["n_test"].as_u64().unwrap());
    assert_eq!(r.n_ood as u64, want["n_ood"].as_u64().unwrap());
    close(r.accuracy, &want["accuracy"], "accuracy");
    close(r.ece, &want["ece"], "ece");
    close(r.mce, &want["mce"], "mce");
    close(r.nll, &want["nll"], "nll");
    close(r.brier, &want["brier"], "brier");
    close(r.ece_with_ood.unwrap(), &want["ece_with_ood"], "ece_with_ood");
    close(r.mce_with_ood.unwrap(), &want["mce_with_ood"], "mce_with_ood");
    close(r.auroc_misclassification.unwrap(), &want["auroc_misclassification"], "auroc_misclassification");
    close(r.aupr_misclassification.unwrap(), &want["aupr_misclassification"], "aupr_misclassification");
    close(r.auroc_ood.unwrap(), &want["auroc_ood"], "auroc_ood");
    close(r.aupr_ood.unwrap(), &want["aupr_ood"], "aupr_ood");
    close_all(&r.histogram.correct, &want["histogram"]["correct"], "histogram.correct");
    close_all(&r.histogram.misclassified, &want["histogram"]["misclassified"], "histogram.misclassified");
    close_all(&r.histogram.ood, &want["histogram"]["ood"], "histogram.ood");
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn worked_ece_example() {
    let items = [(0.95, true), (0.95, false), (0.65, true), (0.65, true)];
    let (ece, mce) = calibration_errors(&items, 10).unwrap();
    assert!((ece - 0.4).abs() < 1e-12, "ece {ece}");
    assert!((mce - 0.45).abs() < 1e-12, "mce {mce}");
}
