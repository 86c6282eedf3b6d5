//! Monte-Carlo posterior predictive and the three per-item uncertainty measures.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{forward_with_noise, CdpParams, MaskNoise};
use crate::dataio;
use crate::error::{Error, Result};
use crate::laplace::LaplacePosterior;
use crate::numerics::{argmax, entropy, softmax, Matrix, RngStream};

pub const DEFAULT_SAMPLES: usize = 50;

/// Where posterior draws come from.
#[derive(Debug, Clone, Copy)]
pub enum Sampler<'a> {
    /// Masks off; every draw is the same network.
    Deterministic(&'a CdpParams),
    /// Fresh concrete-dropout masks per pass.
    CdpMasks { params: &'a CdpParams, temperature: f64 },
    /// Matrix-normal weight draws.
    Laplace(&'a LaplacePosterior),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveResult {
    /// `T × C` softmax draws.
    pub samples: Matrix,
    pub mean: Vec<f64>,
}

impl PredictiveResult {
    pub fn from_samples(samples: Matrix) -> Result<Self> {
        let t = samples.rows();
        if t == 0 {
            return Err(Error::Empty("predictive samples"));
        }
        let mut mean = vec![0.0; samples.cols()];
        for r in 0..t {
            for (m, v) in mean.iter_mut().zip(samples.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        Ok(Self { samples, mean })
    }

    pub fn draws(&self) -> usize {
        self.samples.rows()
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.mean)
    }
}

/// `T` posterior draws for one input; pass `t` uses `stream.derive(t)`.
pub fn predict_mc(sampler: Sampler<'_>, x: &[f64], t: usize, stream: RngStream) -> Result<PredictiveResult> {
    if t == 0 {
        return Err(Error::invalid("number of MC samples must be at least 1"));
    }
    let c = match sampler {
        Sampler::Deterministic(p) | Sampler::CdpMasks { params: p, .. } => p.c,
        Sampler::Laplace(post) => post.c,
    };
    let mut samples = Matrix::zeros(t, c);
    match sampler {
        Sampler::Deterministic(params) => {
            let probs = softmax(&forward_with_noise(params, x, None, 1.0)?.0);
            for r in 0..t {
                samples.row_mut(r).copy_from_slice(&probs);
            }
        }
        Sampler::CdpMasks { params, temperature } => {
            for r in 0..t {
                let noise = MaskNoise::draw(params, stream.derive(r as u64));
                let logits = forward_with_noise(params, x, Some(&noise), temperature)?.0;
                samples.row_mut(r).copy_from_slice(&softmax(&logits));
            }
        }
        Sampler::Laplace(post) => {
            for r in 0..t {
                let params = post.sample_params(stream.derive(r as u64));
                let logits = forward_with_noise(&params, x, None, 1.0)?.0;
                samples.row_mut(r).copy_from_slice(&softmax(&logits));
            }
        }
    }
    PredictiveResult::from_samples(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchOptions {
    /// Laplace only: redraw weights for every item instead of once per pass.
    pub per_item_weights: bool,
    /// Worker threads; 0 or 1 runs inline.
    pub workers: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            per_item_weights: false,
            workers: 1,
        }
    }
}

/// Predictive results for many inputs, merged in input order.
///
/// Mask draws are per item (`stream.derive(i)` for item `i`). Laplace weight draws are
/// shared by all items within a pass unless `per_item_weights` is set.
pub fn predict_batch(sampler: Sampler<'_>, xs: &[&[f64]], t: usize, stream: RngStream, opts: BatchOptions) -> Result<Vec<PredictiveResult>> {
    if t == 0 {
        return Err(Error::invalid("number of MC samples must be at least 1"));
    }
    let shared: Option<Vec<CdpParams>> = match sampler {
        Sampler::Laplace(post) if !opts.per_item_weights => Some((0..t).map(|r| post.sample_params(stream.derive(r as u64))).collect()),
        _ => None,
    };
    let one = |i: usize| -> Result<PredictiveResult> {
        let x = xs[i];
        match &shared {
            Some(nets) => {
                let mut samples = Matrix::zeros(t, nets[0].c);
                for (r, net) in nets.iter().enumerate() {
                    let logits = forward_with_noise(net, x, None, 1.0)?.0;
                    samples.row_mut(r).copy_from_slice(&softmax(&logits));
                }
                PredictiveResult::from_samples(samples)
            }
            None => predict_mc(sampler, x, t, stream.derive(i as u64)),
        }
    };
    if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        pool.install(|| (0..xs.len()).into_par_iter().map(one).collect())
    } else {
        (0..xs.len()).map(one).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMeasures {
    pub confidence: f64,
    pub entropy: f64,
    pub mutual_information: f64,
}

/// Confidence, predictive entropy and mutual information (nats).
pub fn measures(r: &PredictiveResult) -> UncertaintyMeasures {
    let h = entropy(&r.mean);
    let t = r.draws();
    let expected: f64 = (0..t).map(|k| entropy(r.samples.row(k))).sum::<f64>() / t as f64;
    UncertaintyMeasures {
        confidence: r.mean.iter().copied().fold(0.0, f64::max),
        entropy: h,
        mutual_information: (h - expected).max(0.0),
    }
}

/// One record of the predictions interchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub conf: f64,
    pub entropy: f64,
    pub mi: f64,
    pub y: Option<usize>,
}

impl Prediction {
    pub fn from_result(r: &PredictiveResult, y: Option<usize>) -> Self {
        let m = measures(r);
        Self {
            mean: r.mean.clone(),
            conf: m.confidence,
            entropy: m.entropy,
            mi: m.mutual_information,
            y,
        }
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.mean)
    }

    pub fn is_correct(&self) -> Option<bool> {
        self.y.map(|y| self.predicted() == y)
    }
}

pub fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    dataio::write_json(path, &preds)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let preds: Vec<Prediction> = dataio::read_json(path)?;
    for (i, p) in preds.iter().enumerate() {
        if p.mean.is_empty() || p.mean.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::schema(path, format!("[{i}].mean"), "must be a non-empty probability vector"));
        }
        if (p.mean.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::schema(path, format!("[{i}].mean"), "does not sum to 1"));
        }
        if let Some(y) = p.y {
            if y >= p.mean.len() {
                return Err(Error::schema(path, format!("[{i}].y"), format!("label {y} >= C={}", p.mean.len())));
            }
        }
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::Variant;
    use proptest::prelude::*;

    fn rows(r: &[Vec<f64>]) -> PredictiveResult {
        PredictiveResult::from_samples(Matrix::from_rows(r).unwrap()).unwrap()
    }

    #[test]
    fn identical_rows_have_zero_mi() {
        let r = rows(&[vec![0.2, 0.8], vec![0.2, 0.8], vec![0.2, 0.8]]);
        assert!(measures(&r).mutual_information.abs() < 1e-15);
    }

    #[test]
    fn uniform_rows() {
        let u = vec![1.0 / 3.0; 3];
        let m = measures(&rows(&[u.clone(), u]));
        assert!((m.entropy - 3f64.ln()).abs() < 1e-12);
        assert!(m.mutual_information.abs() < 1e-12);
    }

    #[test]
    fn disagreeing_one_hot_rows() {
        let m = measures(&rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert!((m.entropy - 2f64.ln()).abs() < 1e-15);
        assert!((m.mutual_information - 2f64.ln()).abs() < 1e-15);
        assert_eq!(m.confidence, 0.5);
    }

    #[test]
    fn deterministic_sampler_repeats_softmax() {
        let p = CdpParams::init(3, &[5], 4, Variant::Cdp, 0.3, RngStream::new(1)).unwrap();
        let x = [0.1, 0.2, -0.3];
        let r = predict_mc(Sampler::Deterministic(&p), &x, 7, RngStream::new(2)).unwrap();
        let expected = softmax(&forward_with_noise(&p, &x, None, 1.0).unwrap().0);
        for k in 0..7 {
            assert_eq!(r.samples.row(k), expected.as_slice());
        }
        for (a, b) in r.mean.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cdp_sampler_is_deterministic_per_stream_and_collapses_at_tiny_rate() {
        let mut p = CdpParams::init(3, &[6, 6], 3, Variant::Cdp, 0.3, RngStream::new(3)).unwrap();
        let x = [1.0, -0.5, 0.25];
        let s = RngStream::new(4);
        let sampler = Sampler::CdpMasks {
            params: &p,
            temperature: 0.1,
        };
        assert_eq!(predict_mc(sampler, &x, 10, s).unwrap(), predict_mc(sampler, &x, 10, s).unwrap());

        for l in &mut p.layers {
            if l.rho.is_some() {
                l.rho = Some(-40.0);
            }
        }
        let r = predict_mc(
            Sampler::CdpMasks {
                params: &p,
                temperature: 0.1,
            },
            &x,
            20,
            s,
        )
        .unwrap();
        let mut spread: f64 = 0.0;
        for k in 0..20 {
            for (a, b) in r.samples.row(k).iter().zip(r.samples.row(0)) {
                spread = spread.max((a - b).abs());
            }
        }
        assert!(spread < 1e-6, "spread {spread}");
    }

    #[test]
    fn batch_matches_single_and_workers_agree() {
        let p = CdpParams::init(2, &[5], 3, Variant::Cdp, 0.3, RngStream::new(5)).unwrap();
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3, 1.0 - i as f64]).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let sampler = Sampler::CdpMasks {
            params: &p,
            temperature: 0.1,
        };
        let s = RngStream::new(6);
        let serial = predict_batch(sampler, &refs, 8, s, BatchOptions::default()).unwrap();
        let parallel = predict_batch(
            sampler,
            &refs,
            8,
            s,
            BatchOptions {
                workers: 3,
                ..BatchOptions::default()
            },
        )
        .unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(serial[2], predict_mc(sampler, &xs[2], 8, s.derive(2)).unwrap());
    }

    proptest! {
        #[test]
        fn measure_bounds(raw in proptest::collection::vec(proptest::collection::vec(-6.0f64..6.0, 4), 1..20)) {
            let probs: Vec<Vec<f64>> = raw.iter().map(|r| softmax(r)).collect();
            let m = measures(&rows(&probs));
            prop_assert!(m.mutual_information >= 0.0);
            prop_assert!(m.mutual_information <= m.entropy + 1e-12);
            prop_assert!(m.entropy <= 4f64.ln() + 1e-12);
            prop_assert!(m.confidence > 0.0 && m.confidence <= 1.0 + 1e-15);
        }

        #[test]
        fn class_permutation_invariance(raw in proptest::collection::vec(proptest::collection::vec(-6.0f64..6.0, 3), 1..10)) {
            let probs: Vec<Vec<f64>> = raw.iter().map(|r| softmax(r)).collect();
            let perm = [2usize, 0, 1];
            let permuted: Vec<Vec<f64>> = probs.iter().map(|r| perm.iter().map(|&k| r[k]).collect()).collect();
            let (a, b) = (rows(&probs), rows(&permuted));
            for (j, &k) in perm.iter().enumerate() {
                prop_assert!((b.mean[j] - a.mean[k]).abs() < 1e-15);
            }
            let (ma, mb) = (measures(&a), measures(&b));
            prop_assert!((ma.confidence - mb.confidence).abs() < 1e-15);
            prop_assert!((ma.entropy - mb.entropy).abs() < 1e-12);
            prop_assert!((ma.mutual_information - mb.mutual_information).abs() < 1e-12);
        }
    }
}
