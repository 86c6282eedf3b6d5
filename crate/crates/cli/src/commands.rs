use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use introspect::adapt::{self, AdaptConfig, AdaptInputs};
use introspect::bnn::{self, EpochStats, TrainConfig, Variant};
use introspect::crf::{self, CrfTrainConfig, LbpConfig};
use introspect::dataio::{self, Dataset, Item, SceneGenConfig, ShiftSpec, Split};
use introspect::experiments::{self, ClusterBenchmark, Recipe};
use introspect::laplace;
use introspect::metrics::{self, MetricsConfig};
use introspect::numerics::RngStream;
use introspect::predictive::{self, BatchOptions, Prediction, Sampler};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config;
use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    GenData,
    Train,
    LaplaceFit,
    Predict,
    Eval,
    TrainCrf,
    Smooth,
    Adapt,
    Recipe,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::GenData => "gen-data",
            CommandKind::Train => "train",
            CommandKind::LaplaceFit => "laplace-fit",
            CommandKind::Predict => "predict",
            CommandKind::Eval => "eval",
            CommandKind::TrainCrf => "train-crf",
            CommandKind::Smooth => "smooth",
            CommandKind::Adapt => "adapt",
            CommandKind::Recipe => "recipe",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [
            CommandKind::GenData,
            CommandKind::Train,
            CommandKind::LaplaceFit,
            CommandKind::Predict,
            CommandKind::Eval,
            CommandKind::TrainCrf,
            CommandKind::Smooth,
            CommandKind::Adapt,
            CommandKind::Recipe,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

/// One resolved invocation: the config is the merged JSON before typing.
pub struct Request<'a> {
    pub kind: CommandKind,
    pub config: Option<Value>,
    pub overrides: &'a [String],
    pub seed: u64,
    pub workers: usize,
    pub inputs: &'a BTreeMap<String, PathBuf>,
    pub out: &'a Path,
}

pub struct Completed {
    pub config: Value,
    pub artifacts: Vec<String>,
}

impl Request<'_> {
    fn resolve<T: Serialize + DeserializeOwned>(&self, default: Option<T>) -> Result<T, Failure> {
        config::resolve(self.config.clone(), self.overrides, default)
    }

    fn input(&self, name: &str) -> Result<&Path, Failure> {
        self.inputs
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| Failure::usage(format!("{} needs --{name}", self.kind.name())))
    }

    fn stream(&self) -> RngStream {
        RngStream::new(self.seed)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn echo<T: Serialize>(cfg: &T) -> Value {
    serde_json::to_value(cfg).expect("configs serialize")
}

pub fn run(req: &Request<'_>) -> Result<Completed, Failure> {
    std::fs::create_dir_all(req.out).map_err(|e| Failure::usage(format!("cannot create {}: {e}", req.out.display())))?;
    match req.kind {
        CommandKind::GenData => gen_data(req),
        CommandKind::Train => train(req),
        CommandKind::LaplaceFit => laplace_fit(req),
        CommandKind::Predict => predict(req),
        CommandKind::Eval => eval(req),
        CommandKind::TrainCrf => train_crf(req),
        CommandKind::Smooth => smooth(req),
        CommandKind::Adapt => adapt(req),
        CommandKind::Recipe => recipe(req),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GenDataConfig {
    Clusters(ClusterBenchmark),
    Scenes {
        scenes: SceneGenConfig,
        #[serde(default)]
        test_scenes: usize,
    },
}

fn default_benchmark() -> GenDataConfig {
    GenDataConfig::Clusters(ClusterBenchmark {
        classes: 5,
        dims: 6,
        separation: 6.0,
        source_per_class: 100,
        target_per_class: 600,
        validation_fraction: 0.2,
        shift: ShiftSpec {
            mean_offset: vec![2.5, -1.5, 1.0, 0.0, 0.0, 0.0],
            noise_scale: 1.0,
        },
        pool_fraction: 0.6,
        calibration_fraction: 0.1,
        pool_class_keep: None,
        ood_classes: 0,
    })
}

fn gen_data(req: &Request<'_>) -> Result<Completed, Failure> {
    let cfg: GenDataConfig = req.resolve(Some(default_benchmark()))?;
    let mut artifacts = Vec::new();
    match &cfg {
        GenDataConfig::Clusters(b) => {
            let bench = b.build(req.stream())?;
            dataio::save_dataset(&req.path("source.json"), &bench.source)?;
            dataio::save_dataset(&req.path("target.json"), &bench.target)?;
            artifacts.extend(["source.json".to_string(), "target.json".to_string()]);
            if !bench.ood.is_empty() {
                // OOD clusters keep their own ids, which lie outside the known classes
                let ood = Dataset {
                    c: b.classes + b.ood_classes,
                    d: b.dims,
                    items: bench
                        .ood
                        .iter()
                        .map(|x| Item {
                            x: x.clone(),
                            y: b.classes,
                            split: Split::Test,
                        })
                        .collect(),
                };
                dataio::save_dataset(&req.path("ood.json"), &ood)?;
                artifacts.push("ood.json".into());
            }
        }
        GenDataConfig::Scenes { scenes, test_scenes } => {
            dataio::save_scenes(&req.path("scenes.json"), &dataio::gen_scenes(scenes, req.stream().derive(0))?)?;
            artifacts.push("scenes.json".into());
            if *test_scenes > 0 {
                let test_cfg = SceneGenConfig {
                    scenes: *test_scenes,
                    ..scenes.clone()
                };
                dataio::save_scenes(&req.path("test_scenes.json"), &dataio::gen_scenes(&test_cfg, req.stream().derive(1))?)?;
                artifacts.push("test_scenes.json".into());
            }
        }
    }
    Ok(Completed {
        config: echo(&cfg),
        artifacts,
    })
}

fn default_variant() -> Variant {
    Variant::Cdp
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCommandConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_epoch: usize,
    history: &'a [EpochStats],
}

fn train(req: &Request<'_>) -> Result<Completed, Failure> {
    let mut cfg: TrainCommandConfig = req.resolve(Some(TrainCommandConfig {
        variant: default_variant(),
        train: TrainConfig::default(),
    }))?;
    cfg.train.stream = req.stream();
    let data = dataio::load_dataset(req.input("data")?)?;
    let out = bnn::train_with_history(&cfg.train, &data, cfg.variant)?;
    bnn::save_checkpoint(&req.path("model.json"), &out.params)?;
    dataio::write_json(
        &req.path("history.json"),
        &TrainSummary {
            best_epoch: out.best_epoch,
            history: &out.history,
        },
    )?;
    Ok(Completed {
        config: echo(&cfg),
        artifacts: vec!["model.json".into(), "history.json".into()],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LaplaceConfig {
    pub n_scale: f64,
    pub tau: f64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self { n_scale: 1.0, tau: 15.0 }
    }
}

fn laplace_fit(req: &Request<'_>) -> Result<Completed, Failure> {
    let cfg: LaplaceConfig = req.resolve(Some(LaplaceConfig::default()))?;
    let model = bnn::load_checkpoint(req.input("model")?)?;
    let data = dataio::load_dataset(req.input("data")?)?;
    let factors = laplace::accumulate_kfac(&model, data.split(Split::Train))?;
    let post = laplace::posterior(&factors, &model, cfg.n_scale, cfg.tau)?;
    laplace::save_posterior(&req.path("posterior.json"), &post)?;
    Ok(Completed {
        config: echo(&cfg),
        artifacts: vec!["posterior.json".into()],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub mc_samples: usize,
    pub temperature: f64,
    /// Restrict to one split; all items when absent.
    pub split: Option<Split>,
    pub per_item_weights: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            mc_samples: 50,
            temperature: 0.1,
            split: None,
            per_item_weights: false,
        }
    }
}

fn predict(req: &Request<'_>) -> Result<Completed, Failure> {
    let cfg: PredictConfig = req.resolve(Some(PredictConfig::default()))?;
    let data = dataio::load_dataset(req.input("data")?)?;
    let posterior = match req.inputs.get("posterior") {
        Some(p) => Some(laplace::load_posterior(p)?),
        None => None,
    };
    let model = match (&posterior, req.inputs.get("model")) {
        (None, Some(p)) => Some(bnn::load_checkpoint(p)?),
        (None, None) => return Err(Failure::usage("predict needs --model or --posterior")),
        (Some(_), Some(_)) => return Err(Failure::usage("predict takes --model or --posterior, not both")),
        (Some(_), None) => None,
    };
    let sampler = match (&posterior, &model) {
        (Some(post), _) => Sampler::Laplace(post),
        (None, Some(m)) if m.variant == Variant::Plain => Sampler::Deterministic(m),
        (None, Some(m)) => Sampler::CdpMasks {
            params: m,
            temperature: cfg.temperature,
        },
        (None, None) => unreachable!(),
    };
    let c = posterior.as_ref().map_or_else(|| model.as_ref().map_or(0, |m| m.c), |p| p.c);
    let items: Vec<&Item> = data.items.iter().filter(|it| cfg.split.is_none_or(|s| it.split == s)).collect();
    let xs: Vec<&[f64]> = items.iter().map(|it| it.x.as_slice()).collect();
    let opts = BatchOptions {
        per_item_weights: cfg.per_item_weights,
        workers: req.workers,
    };
    let results = predictive::predict_batch(sampler, &xs, cfg.mc_samples, req.stream(), opts)?;
    // labels the model cannot output (e.g. OOD cluster ids) are dropped
    let preds: Vec<Prediction> = results
        .iter()
        .zip(&items)
        .map(|(r, it)| Prediction::from_result(r, (it.y < c).then_some(it.y)))
        .collect();
    predictive::save_predictions(&req.path("predictions.json"), &preds)?;
    Ok(Completed {
        config: echo(&cfg),
        artifacts: vec!["predictions.json".into()],
    })
}

fn eval(req: &Request<'_>) -> Result<Completed, Failure> {
    let cfg: MetricsConfig = req.resolve(Some(MetricsConfig::default()))?;
    let test = predictive::load_predictions(req.input("predictions")?)?;
    let ood = match req.inputs.get("ood") {
        Some(p) => Some(predictive::load_predictions(p)?),
        None => None,
    };
    let report = metrics::evaluate(&test, ood.as_deref(), &cfg)?;
    metrics::save_report(req.out, &report)?;
    Ok(Completed {
        config: echo(&cfg),
        artifacts: vec!["report.json".into(), "histogram.csv".into()],
    })
}

fn train_crf(req: &Request<'_>) -> Result<Completed, Failure> {
    let mut cfg: CrfTrainConfig = req.resolve(Some(CrfTrainConfig::default()))?;
    cfg.stream = req.stream();
    cfg.workers = req.workers;
    let scenes = dataio::load_scenes(req.input("scenes")?)?;
    match crf::train_crf(&scenes, &cfg) {
        Ok(out) => {
            crf::save_params(&req.path("crf_params.json"), &out.params)?;
            dataio::write_atomic(&req.path("trace.csv"), &crf::trace_csv(&out.trace))?;
            Ok(Completed {
                config: echo(&cfg),
                artifacts: vec!["crf_params.json".into(), "trace.csv".into()],
            })
        }
        Err(failure) => {
            // keep the partial trace for diagnosis
            dataio::write_atomic(&req.path("trace.csv"), &crf::trace_csv(&failure.trace))?;
            Err(Failure::Core(failure.error))
        }
    }
}

#[derive(Serialize)]
struct SmoothedScene {
    labels: Vec<usize>,
    beliefs: Vec<Vec<f64>>,
    converged: bool,
}

#[derive(Serialize)]
struct SmoothOutput {
    unary_accuracy: f64,
    smoothed_accuracy: f64,
    unconverged_scenes: usize,
    scenes: Vec<SmoothedScene>,
}

fn smooth(req: &Request<'_>) -> Result<Completed, Failure> {
    let cfg: LbpConfig = req.resolve(Some(LbpConfig::default()))?;
    let set = dataio::load_scenes(req.input("scenes")?)?;
    let params = crf::load_params(req.input("params")?)?;
    let mut scenes = Vec::with_capacity(set.scenes.len());
    let (mut hit, mut total) = (0usize, 0usize);
    for s in &set.scenes {
        let out = crf::smooth(s, &params, &cfg)?;
        hit += out.labels.iter().zip(&s.instances).filter(|(l, inst)| **l == inst.y).count();
        total += s.len();
        scenes.push(SmoothedScene {
            labels: out.labels,
            beliefs: out.smoothed,
            converged: out.converged,
        });
    }
    let output = SmoothOutput {
        unary_accuracy: crf::unary_accuracy(&set),
        smoothed_accuracy: hit as f64 / total.max(1) as f64,
        unconverged_scenes: scenes.iter().filter(|s| !s.converged).count(),
        scenes,
    };
    dataio::write_json(&req.path("smoothed.json"), &output)?;
    Ok(Completed {
        config: echo(&cfg),
        artifacts: vec!["smoothed.json".into()],
    })
}

const ADAPT_ARTIFACTS: [&str; 8] = [
    "adapt_report.json",
    "threshold.json",
    "auto_set.json",
    "manual_set.json",
    "calibration_set.json",
    "test_predictions.json",
    "base_model.json",
    "adapted_model.json",
];

fn adapt(req: &Request<'_>) -> Result<Completed, Failure> {
    let mut cfg: AdaptConfig = req.resolve(Some(AdaptConfig::default()))?;
    cfg.stream = req.stream();
    cfg.workers = req.workers;
    let source = dataio::load_dataset(req.input("source")?)?;
    let target = dataio::load_dataset(req.input("target")?)?;
    let base = match req.inputs.get("base") {
        Some(p) => Some(bnn::load_checkpoint(p)?),
        None => None,
    };
    let out = adapt::run_adaptation(
        &cfg,
        AdaptInputs {
            source: &source,
            target: &target,
            base,
        },
    )?;
    adapt::save_outcome(req.out, &out)?;
    Ok(Completed {
        config: echo(&cfg),
        artifacts: ADAPT_ARTIFACTS.iter().map(|s| s.to_string()).collect(),
    })
}

fn recipe(req: &Request<'_>) -> Result<Completed, Failure> {
    let recipe: Recipe = req.resolve(None)?;
    let result = experiments::run_recipe(&recipe, req.seed, req.workers)?;
    dataio::write_json(&req.path("result.json"), &result)?;
    Ok(Completed {
        config: echo(&recipe),
        artifacts: vec!["result.json".into()],
    })
}
