//! Desk-scale experiment recipes: synthetic stand-ins for the uncertainty, context and
//! adaptation comparisons, each a pure function of (recipe, seed).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{self, AdaptConfig, AdaptInputs, AdaptReport};
use crate::bnn::{self, TrainConfig, Variant};
use crate::crf::{self, CrfParams, CrfTrainConfig, LbpConfig};
use crate::dataio::{self, apply_shift, gen_clusters, Dataset, SceneGenConfig, ShiftSpec, Split};
use crate::error::{Error, Result, StageExt};
use crate::laplace;
use crate::metrics::{self, MetricsConfig, MetricsReport};
use crate::numerics::RngStream;
use crate::predictive::{self, BatchOptions, Prediction, Sampler};

/// Source clusters and a shifted copy of the same classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterBenchmark {
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub validation_fraction: f64,
    pub shift: ShiftSpec,
    /// Pool / calibration / test proportions of the target data.
    pub pool_fraction: f64,
    pub calibration_fraction: f64,
    /// Per-class multiplier on the number of pool items kept (skews the pool).
    #[serde(default)]
    pub pool_class_keep: Option<Vec<f64>>,
    /// Extra clusters generated alongside the target and used only as OOD inputs.
    #[serde(default)]
    pub ood_classes: usize,
}

pub struct Benchmark {
    pub source: Dataset,
    pub target: Dataset,
    pub ood: Vec<Vec<f64>>,
}

impl ClusterBenchmark {
    pub fn build(&self, stream: RngStream) -> Result<Benchmark> {
        // all clusters share one simplex; the extra ones only ever appear as OOD inputs
        let total = self.classes + self.ood_classes;
        let known = |d: Dataset| Dataset {
            c: self.classes,
            d: self.dims,
            items: d.items.into_iter().filter(|it| it.y < self.classes).collect(),
        };
        let mut source = known(gen_clusters(total, self.dims, self.source_per_class, self.separation, stream.derive(0))?);
        source.assign_splits(
            &[(Split::Validation, self.validation_fraction), (Split::Train, 1.0)],
            stream.derive(1),
        )?;
        let shifted = apply_shift(
            &gen_clusters(total, self.dims, self.target_per_class, self.separation, stream.derive(2))?,
            &self.shift,
            stream.derive(3),
        )?;
        let ood = shifted.items.iter().filter(|it| it.y >= self.classes).map(|it| it.x.clone()).collect();
        let mut target = known(shifted);
        target.assign_splits(
            &[
                (Split::Pool, self.pool_fraction),
                (Split::Calibration, self.calibration_fraction),
                (Split::Test, 1.0),
            ],
            stream.derive(4),
        )?;
        if let Some(keep) = &self.pool_class_keep {
            if keep.len() != self.classes {
                return Err(Error::invalid("pool_class_keep needs one entry per class"));
            }
            let mut seen = vec![0usize; self.classes];
            let pool_counts: Vec<usize> = (0..self.classes)
                .map(|k| target.items.iter().filter(|it| it.split == Split::Pool && it.y == k).count())
                .collect();
            target.items.retain(|it| {
                if it.split != Split::Pool {
                    return true;
                }
                seen[it.y] += 1;
                seen[it.y] as f64 <= (keep[it.y] * pool_counts[it.y] as f64).round()
            });
        }
        Ok(Benchmark { source, target, ood })
    }
}

fn seeded(cfg: &TrainConfig, stream: RngStream) -> TrainConfig {
    TrainConfig {
        stream,
        ..cfg.clone()
    }
}

/// Plain vs concrete-dropout vs Laplace uncertainty on shifted test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecipe {
    pub data: ClusterBenchmark,
    pub train: TrainConfig,
    pub mc_samples: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_n_scale")]
    pub n_scale: f64,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn default_tau() -> f64 {
    15.0
}

fn default_n_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyResult {
    pub plain: MetricsReport,
    pub cdp: MetricsReport,
    pub laplace: MetricsReport,
}

/// Scene-context gain of the CRF over unary argmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecipe {
    pub scenes: SceneGenConfig,
    pub test_scenes: usize,
    pub train: CrfTrainConfig,
    #[serde(default)]
    pub lbp: LbpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextResult {
    pub params: CrfParams,
    pub unary_accuracy: f64,
    pub smoothed_accuracy: f64,
    pub train_unary_accuracy: f64,
    pub unconverged_iters: usize,
}

/// Adaptation conditions, optionally repeated under several balance policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecipe {
    pub data: ClusterBenchmark,
    pub adapt: AdaptConfig,
    /// Extra runs differing only in balance policy, reported side by side.
    #[serde(default)]
    pub compare_policies: Vec<adapt::BalancePolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult {
    pub report: AdaptReport,
    pub policy_runs: Vec<(adapt::BalancePolicy, AdaptReport)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)]
pub enum Recipe {
    Uncertainty(UncertaintyRecipe),
    Context(ContextRecipe),
    Adaptation(AdaptationRecipe),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)]
pub enum RecipeResult {
    Uncertainty(UncertaintyResult),
    Context(ContextResult),
    Adaptation(AdaptationResult),
}

pub fn load_recipe(path: &Path) -> Result<Recipe> {
    dataio::read_json(path)
}

pub fn run_recipe(recipe: &Recipe, seed: u64, workers: usize) -> Result<RecipeResult> {
    let stream = RngStream::new(seed);
    Ok(match recipe {
        Recipe::Uncertainty(r) => RecipeResult::Uncertainty(run_uncertainty(r, stream, workers)?),
        Recipe::Context(r) => RecipeResult::Context(run_context(r, stream, workers)?),
        Recipe::Adaptation(r) => RecipeResult::Adaptation(run_adaptation(r, stream, workers)?),
    })
}

pub fn run_uncertainty(r: &UncertaintyRecipe, stream: RngStream, workers: usize) -> Result<UncertaintyResult> {
    let bench = r.data.build(stream.derive(0)).stage("data")?;
    // the shifted test split plays the role of the evaluation data
    let test: Vec<_> = bench.target.split(Split::Test).collect();
    let xs: Vec<&[f64]> = test.iter().map(|it| it.x.as_slice()).collect();
    let ys: Vec<usize> = test.iter().map(|it| it.y).collect();
    let ood: Vec<&[f64]> = bench.ood.iter().map(Vec::as_slice).collect();
    let opts = BatchOptions {
        per_item_weights: false,
        workers,
    };
    // both networks share initialization and batch order, so the comparison is paired
    let plain = bnn::train(&seeded(&r.train, stream.derive(1)), &bench.source, Variant::Plain).stage("plain training")?;
    let cdp = bnn::train(&seeded(&r.train, stream.derive(1)), &bench.source, Variant::Cdp).stage("cdp training")?;
    let factors = laplace::accumulate_kfac(&cdp, bench.source.split(Split::Train)).stage("kfac")?;
    let post = laplace::posterior(&factors, &cdp, r.n_scale, r.tau).stage("laplace")?;

    let evaluate = |sampler: Sampler<'_>, s: RngStream| -> Result<MetricsReport> {
        let to_preds = |xs: &[&[f64]], ys: Option<&[usize]>, s: RngStream| -> Result<Vec<Prediction>> {
            let res = predictive::predict_batch(sampler, xs, r.mc_samples, s, opts)?;
            Ok(res.iter().enumerate().map(|(i, p)| Prediction::from_result(p, ys.map(|y| y[i]))).collect())
        };
        let test_preds = to_preds(&xs, Some(&ys), s.derive(0))?;
        let ood_preds = to_preds(&ood, None, s.derive(1))?;
        metrics::evaluate(&test_preds, Some(&ood_preds), &r.metrics)
    };
    Ok(UncertaintyResult {
        plain: evaluate(Sampler::Deterministic(&plain), stream.derive(3)).stage("plain evaluation")?,
        cdp: evaluate(
            Sampler::CdpMasks {
                params: &cdp,
                temperature: r.train.temperature,
            },
            stream.derive(4),
        )
        .stage("cdp evaluation")?,
        laplace: evaluate(Sampler::Laplace(&post), stream.derive(5)).stage("laplace evaluation")?,
    })
}

pub fn run_context(r: &ContextRecipe, stream: RngStream, workers: usize) -> Result<ContextResult> {
    let train_set = dataio::gen_scenes(&r.scenes, stream.derive(0)).stage("scene generation")?;
    let test_cfg = SceneGenConfig {
        scenes: r.test_scenes,
        ..r.scenes.clone()
    };
    let test_set = dataio::gen_scenes(&test_cfg, stream.derive(1)).stage("scene generation")?;
    let cfg = CrfTrainConfig {
        stream: stream.derive(2),
        workers,
        ..r.train.clone()
    };
    let out = crf::train_crf(&train_set, &cfg).map_err(Error::from).stage("crf training")?;
    Ok(ContextResult {
        params: out.params,
        unary_accuracy: crf::unary_accuracy(&test_set),
        smoothed_accuracy: crf::smoothed_accuracy(&test_set, &out.params, &r.lbp).stage("smoothing")?,
        train_unary_accuracy: crf::unary_accuracy(&train_set),
        unconverged_iters: out.unconverged_iters,
    })
}

pub fn run_adaptation(r: &AdaptationRecipe, stream: RngStream, workers: usize) -> Result<AdaptationResult> {
    let bench = r.data.build(stream.derive(0)).stage("data")?;
    let cfg = AdaptConfig {
        stream: stream.derive(1),
        workers,
        ..r.adapt.clone()
    };
    let first = adapt::run_adaptation(
        &cfg,
        AdaptInputs {
            source: &bench.source,
            target: &bench.target,
            base: None,
        },
    )?;
    let mut policy_runs = Vec::new();
    for &policy in &r.compare_policies {
        let alt = AdaptConfig {
            balance_policy: policy,
            ..cfg.clone()
        };
        let out = adapt::run_adaptation(
            &alt,
            AdaptInputs {
                source: &bench.source,
                target: &bench.target,
                base: Some(first.base.clone()),
            },
        )?;
        policy_runs.push((policy, out.report));
    }
    Ok(AdaptationResult {
        report: first.report,
        policy_runs,
    })
}
