use std::fs;
use std::path::Path;

use introspect::bnn::{self, CdpParams, Variant};
use introspect::crf::{self, CrfParams};
use introspect::dataio::{self, gen_clusters, gen_scenes, SceneGenConfig, Split};
use introspect::laplace::{self, accumulate_kfac, posterior};
use introspect::numerics::RngStream;
use introspect::predictive::{self, Prediction};
use introspect::Error;
use proptest::prelude::*;

fn is_schema(e: &Error) -> bool {
    matches!(e, Error::Schema { .. })
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.json");
    let mut data = gen_clusters(3, 4, 12, 2.5, RngStream::new(1)).unwrap();
    data.assign_splits(&[(Split::Validation, 0.25), (Split::Train, 1.0)], RngStream::new(2)).unwrap();
    dataio::save_dataset(&path, &data).unwrap();
    assert_eq!(dataio::load_dataset(&path).unwrap(), data);
    let first = fs::read(&path).unwrap();
    dataio::save_dataset(&path, &data).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn dataset_schema_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    write(&path, r#"{"c": 2, "d": 1, "items": [{"x": [0.5], "y": 2, "split": "train"}]}"#);
    match dataio::load_dataset(&path).unwrap_err() {
        Error::Schema { field, .. } => assert_eq!(field, "items[0].y"),
        e => panic!("unexpected {e}"),
    }
    write(&path, r#"{"c": 2, "d": 2, "items": [{"x": [0.5], "y": 0, "split": "train"}]}"#);
    assert!(is_schema(&dataio::load_dataset(&path).unwrap_err()));
    write(&path, r#"{"c": 2, "d": 1, "items": [{"x": [0.5], "y": 0, "split": "holdout"}]}"#);
    assert!(is_schema(&dataio::load_dataset(&path).unwrap_err()));
    write(&path, r#"{"c": 2, "items": []}"#);
    assert!(is_schema(&dataio::load_dataset(&path).unwrap_err()));
}

#[test]
fn scene_round_trip_and_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.json");
    let cfg = SceneGenConfig {
        c: 4,
        groups: vec![vec![0, 1], vec![2, 3]],
        scenes: 5,
        n_min: 2,
        n_max: 4,
        unary_noise: 0.5,
        diagonal: true,
    };
    let set = gen_scenes(&cfg, RngStream::new(3)).unwrap();
    dataio::save_scenes(&path, &set).unwrap();
    assert_eq!(dataio::load_scenes(&path).unwrap(), set);

    let bad_m = r#"{"c": 2, "scenes": [{"m": [[1, 2], [0, 1]], "instances": [{"unary": [0.5, 0.5], "y": 0}]}]}"#;
    write(&path, bad_m);
    match dataio::load_scenes(&path).unwrap_err() {
        Error::Schema { field, .. } => assert_eq!(field, "scenes[0].m[0][1]"),
        e => panic!("unexpected {e}"),
    }
    let bad_y = r#"{"c": 2, "scenes": [{"m": [[1, 1], [1, 1]], "instances": [{"unary": [0.5, 0.5], "y": 5}]}]}"#;
    write(&path, bad_y);
    assert!(is_schema(&dataio::load_scenes(&path).unwrap_err()));
}

#[test]
fn cooccurrence_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let m = vec![vec![1, 0, 1], vec![0, 1, 0], vec![1, 0, 1]];
    dataio::save_cooc_csv(&path, &m).unwrap();
    assert_eq!(dataio::load_cooc_csv(&path).unwrap(), m);
    write(&path, "1,0\n0,x\n");
    assert!(is_schema(&dataio::load_cooc_csv(&path).unwrap_err()));
}

#[test]
fn checkpoint_and_posterior_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = CdpParams::init(3, &[5, 4], 3, Variant::Cdp, 0.2, RngStream::new(4)).unwrap();
    let ckpt = dir.path().join("model.json");
    bnn::save_checkpoint(&ckpt, &params).unwrap();
    assert_eq!(bnn::load_checkpoint(&ckpt).unwrap(), params);

    let data = gen_clusters(3, 3, 10, 2.0, RngStream::new(5)).unwrap();
    let plain = CdpParams::init(3, &[5], 3, Variant::Plain, 0.1, RngStream::new(6)).unwrap();
    let post = posterior(&accumulate_kfac(&plain, &data.items).unwrap(), &plain, 1.0, 15.0).unwrap();
    let path = dir.path().join("posterior.json");
    laplace::save_posterior(&path, &post).unwrap();
    assert_eq!(laplace::load_posterior(&path).unwrap(), post);

    write(&ckpt, r#"{"layers": [], "c": 2, "d": 1, "variant": "bayesian"}"#);
    assert!(is_schema(&bnn::load_checkpoint(&ckpt).unwrap_err()));
}

#[test]
fn predictions_and_crf_params_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let preds = vec![
        Prediction {
            mean: vec![0.7, 0.2, 0.1],
            conf: 0.7,
            entropy: 0.8018185525433373,
            mi: 0.01,
            y: Some(0),
        },
        Prediction {
            mean: vec![1.0 / 3.0; 3],
            conf: 1.0 / 3.0,
            entropy: 3f64.ln(),
            mi: 0.0,
            y: None,
        },
    ];
    let path = dir.path().join("preds.json");
    predictive::save_predictions(&path, &preds).unwrap();
    assert_eq!(predictive::load_predictions(&path).unwrap(), preds);
    assert!(fs::read_to_string(&path).unwrap().contains("\"y\": null"));

    let theta = CrfParams::new(0.12345678901234568, -2.5);
    let tpath = dir.path().join("crf.json");
    crf::save_params(&tpath, &theta).unwrap();
    assert_eq!(crf::load_params(&tpath).unwrap(), theta);
    write(&tpath, r#"{"theta_u": 1.0}"#);
    assert!(is_schema(&crf::load_params(&tpath).unwrap_err()));
}

#[test]
fn loading_never_touches_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.json");
    let data = gen_clusters(2, 2, 10, 2.0, RngStream::new(8)).unwrap();
    dataio::save_dataset(&path, &data).unwrap();
    let before = (fs::read(&path).unwrap(), fs::metadata(&path).unwrap().modified().unwrap());
    dataio::load_dataset(&path).unwrap();
    assert_eq!((fs::read(&path).unwrap(), fs::metadata(&path).unwrap().modified().unwrap()), before);
}

proptest! {
    #[test]
    fn floats_survive_serialization(xs in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..20)) {
        let text = dataio::to_json_string(&xs).unwrap();
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, xs);
    }
}
