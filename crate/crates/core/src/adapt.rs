//! Uncertainty-gated domain adaptation: calibrate a confidence threshold on a small
//! labelled target subset, pseudo-label confident pool items, add a random manually
//! labelled slice, balance classes, fine-tune, and evaluate.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bnn::{self, CdpParams, TrainConfig, Variant};
use crate::crf::{self, CrfParams, CrfTrainConfig, LbpConfig};
use crate::dataio::{self, group_cooc, Dataset, Instance, Item, Scene, SceneSet, Split};
use crate::error::{Error, Result, StageExt};
use crate::metrics::{self, Measure, MetricsConfig, MetricsReport};
use crate::numerics::{argmax, shuffle, RngStream};
use crate::predictive::{self, BatchOptions, Prediction, Sampler, DEFAULT_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalancePolicy {
    None,
    #[default]
    JitterDuplicate,
}

/// Optional CRF scoring of the adapted model on scenes assembled from test items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub groups: Vec<Vec<usize>>,
    pub scenes: usize,
    pub n_min: usize,
    pub n_max: usize,
    #[serde(default = "default_diagonal")]
    pub diagonal: bool,
    /// Used as-is unless `train` is given, in which case it is the starting point.
    #[serde(default = "default_crf_params")]
    pub params: CrfParams,
    /// Fit θ on scenes built from the labelled target items (calibration + manual).
    #[serde(default)]
    pub train: Option<CrfTrainConfig>,
    #[serde(default)]
    pub lbp: LbpConfig,
}

fn default_diagonal() -> bool {
    true
}

fn default_crf_params() -> CrfParams {
    CrfParams::new(1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub target_accuracy: f64,
    pub manual_fraction: f64,
    pub auto_enabled: bool,
    /// Keep at most this fraction of the pool in the auto set (most confident first).
    pub auto_fraction_cap: Option<f64>,
    /// Keep at most this many auto-labelled items per pseudo-class.
    pub per_class_top_k: Option<usize>,
    pub gate: Measure,
    pub balance_policy: BalancePolicy,
    pub jitter_scale: f64,
    pub variant: Variant,
    /// Source training; ignored when a base model is supplied.
    pub train: TrainConfig,
    pub fine_tune: TrainConfig,
    pub mc_samples: usize,
    pub rounds: usize,
    pub workers: usize,
    pub metric_bins: usize,
    pub context: Option<ContextConfig>,
    pub stream: RngStream,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            target_accuracy: 0.95,
            manual_fraction: 0.01,
            auto_enabled: true,
            auto_fraction_cap: None,
            per_class_top_k: None,
            gate: Measure::Confidence,
            balance_policy: BalancePolicy::JitterDuplicate,
            jitter_scale: 0.1,
            variant: Variant::Cdp,
            train: TrainConfig::default(),
            fine_tune: TrainConfig::default(),
            mc_samples: DEFAULT_SAMPLES,
            rounds: 1,
            workers: 1,
            metric_bins: 15,
            context: None,
            stream: RngStream::new(0),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return Err(Error::invalid("target accuracy must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.manual_fraction) {
            return Err(Error::invalid("manual fraction must lie in [0, 1]"));
        }
        if let Some(cap) = self.auto_fraction_cap {
            if !(0.0..=1.0).contains(&cap) {
                return Err(Error::invalid("auto fraction cap must lie in [0, 1]"));
            }
        }
        if !(self.jitter_scale >= 0.0) {
            return Err(Error::invalid("jitter scale must be non-negative"));
        }
        if self.mc_samples == 0 || self.rounds == 0 {
            return Err(Error::invalid("mc samples and rounds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    /// Nothing reached the target accuracy; `value` lies above every observed score.
    pub sentinel: bool,
}

/// Smallest observed score `δ` whose selection `{score ≥ δ}` reaches `target` accuracy.
pub fn calibrate_threshold(calib: &[(f64, bool)], target: f64) -> Result<Threshold> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration predictions"));
    }
    let mut sorted = calib.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut hits, mut count) = (0usize, 0usize);
    let mut best = None;
    let mut i = 0;
    while i < sorted.len() {
        let delta = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == delta {
            hits += usize::from(sorted[i].1);
            count += 1;
            i += 1;
        }
        if hits as f64 >= target * count as f64 {
            best = Some(delta);
        }
    }
    Ok(match best {
        Some(value) => Threshold { value, sentinel: false },
        None => {
            let max = sorted[0].0;
            Threshold {
                value: max + 1e-9 * max.abs().max(1.0),
                sentinel: true,
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoLabel {
    /// Position in the pool.
    pub index: usize,
    pub label: usize,
    pub score: f64,
}

/// Pool items whose gate score reaches `delta`, pseudo-labelled by argmax of the mean.
pub fn auto_label(pool: &[Prediction], delta: f64, gate: Measure) -> Vec<AutoLabel> {
    pool.iter()
        .enumerate()
        .filter(|(_, p)| gate.score(p) >= delta)
        .map(|(index, p)| AutoLabel {
            index,
            label: argmax(&p.mean),
            score: gate.score(p),
        })
        .collect()
}

/// Most-confident-first truncation: to `cap · pool_size` overall and `top_k` per class.
pub fn restrict_auto(mut auto: Vec<AutoLabel>, pool_size: usize, cap: Option<f64>, top_k: Option<usize>) -> Vec<AutoLabel> {
    auto.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    if let Some(k) = top_k {
        let mut seen = std::collections::BTreeMap::<usize, usize>::new();
        auto.retain(|a| {
            let n = seen.entry(a.label).or_default();
            *n += 1;
            *n <= k
        });
    }
    if let Some(cap) = cap {
        auto.truncate((cap * pool_size as f64).floor() as usize);
    }
    auto.sort_by_key(|a| a.index);
    auto
}

/// Ground truth for the unlabelled pool, released only item by item through `label`.
#[derive(Debug, Clone)]
pub struct LabelOracle {
    labels: Vec<usize>,
    queried: BTreeSet<usize>,
}

impl LabelOracle {
    pub fn new(labels: Vec<usize>) -> Self {
        Self {
            labels,
            queried: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// A manual labelling request; recorded.
    pub fn label(&mut self, index: usize) -> usize {
        self.queried.insert(index);
        self.labels[index]
    }

    pub fn queried(&self) -> &BTreeSet<usize> {
        &self.queried
    }

    /// Evaluation-only access for auditing pseudo-labels; not a labelling request.
    pub fn audit(&self, index: usize) -> usize {
        self.labels[index]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManualSelection {
    pub labelled: Vec<(usize, usize)>,
    pub warning: Option<String>,
}

/// Uniform sample of `floor(fraction · |candidates|)` pool positions, labelled by the oracle.
pub fn manual_label(candidates: &[usize], fraction: f64, oracle: &mut LabelOracle, stream: RngStream) -> Result<ManualSelection> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("manual fraction must lie in [0, 1]"));
    }
    let want = fraction * candidates.len() as f64;
    if want < 1.0 {
        let warning = (fraction > 0.0).then(|| format!("manual fraction {fraction} of {} pool items selects nothing", candidates.len()));
        return Ok(ManualSelection {
            labelled: Vec::new(),
            warning,
        });
    }
    let mut order = candidates.to_vec();
    shuffle(&mut order, &mut stream.rng());
    order.truncate(want.floor() as usize);
    order.sort_unstable();
    let labelled = order.into_iter().map(|i| (i, oracle.label(i))).collect();
    Ok(ManualSelection { labelled, warning: None })
}

/// Equalizes class counts by appending jittered copies of minority-class items.
///
/// Copies cycle through each class's items in a shuffled order and add `N(0, σ²)` noise.
pub fn balance(items: &[Item], c: usize, policy: BalancePolicy, jitter_scale: f64, stream: RngStream) -> Vec<Item> {
    let mut out = items.to_vec();
    if policy == BalancePolicy::None || items.is_empty() {
        return out;
    }
    let counts = class_counts(items, c);
    let target = counts.iter().copied().max().unwrap_or(0);
    for class in 0..c {
        if counts[class] == 0 || counts[class] == target {
            continue;
        }
        let s = stream.derive(class as u64);
        let mut members: Vec<&Item> = items.iter().filter(|it| it.y == class).collect();
        shuffle(&mut members, &mut s.derive(0).rng());
        let missing = target - counts[class];
        let noise = s.derive(1).std_normal(missing * items[0].x.len());
        for k in 0..missing {
            let src = members[k % members.len()];
            let d = src.x.len();
            let x = src.x.iter().zip(&noise[k * d..(k + 1) * d]).map(|(v, z)| v + jitter_scale * z).collect();
            out.push(Item {
                x,
                y: class,
                split: src.split,
            });
        }
    }
    out
}

pub fn class_counts(items: &[Item], c: usize) -> Vec<usize> {
    let mut counts = vec![0; c];
    for it in items {
        counts[it.y] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAccuracies {
    pub no_finetune: f64,
    pub auto_only: f64,
    pub manual_only: f64,
    pub auto_manual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextReport {
    pub params: CrfParams,
    pub scenes: usize,
    pub unary_accuracy: f64,
    pub smoothed_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub threshold: Threshold,
    pub calibration_size: usize,
    pub pool_size: usize,
    pub auto_set_size: usize,
    /// Audited against withheld ground truth after the fact; absent for an empty auto set.
    pub auto_set_accuracy: Option<f64>,
    pub manual_set_size: usize,
    pub class_counts_before: Vec<usize>,
    pub class_counts_after: Vec<usize>,
    pub accuracy: ConditionAccuracies,
    /// Metrics of the final (auto + manual) model on the test split.
    pub final_metrics: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<ContextReport>,
    pub warnings: Vec<String>,
}

/// Per-stage artifacts persisted for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptArtifacts {
    pub threshold: Threshold,
    pub calibration_indices: Vec<usize>,
    pub auto: Vec<AutoLabel>,
    pub manual: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub report: AdaptReport,
    pub artifacts: AdaptArtifacts,
    pub base: CdpParams,
    pub adapted: CdpParams,
    pub test_predictions: Vec<Prediction>,
}

/// Adaptation inputs. Target items are read by split: `Pool` (labels withheld behind an
/// oracle), `Calibration` (labelled) and `Test` (evaluation only).
pub struct AdaptInputs<'a> {
    pub source: &'a Dataset,
    pub target: &'a Dataset,
    pub base: Option<CdpParams>,
}

struct Predictor<'a> {
    cfg: &'a AdaptConfig,
}

impl Predictor<'_> {
    fn run(&self, params: &CdpParams, xs: &[&[f64]], ys: Option<&[usize]>, stream: RngStream) -> Result<Vec<Prediction>> {
        let sampler = match params.variant {
            Variant::Plain => Sampler::Deterministic(params),
            _ => Sampler::CdpMasks {
                params,
                temperature: self.cfg.fine_tune.temperature,
            },
        };
        let opts = BatchOptions {
            per_item_weights: false,
            workers: self.cfg.workers,
        };
        let results = predictive::predict_batch(sampler, xs, self.cfg.mc_samples, stream, opts)?;
        Ok(results
            .iter()
            .enumerate()
            .map(|(i, r)| Prediction::from_result(r, ys.map(|y| y[i])))
            .collect())
    }
}

fn accuracy_of(preds: &[Prediction]) -> f64 {
    let hits = preds.iter().filter(|p| p.is_correct() == Some(true)).count();
    hits as f64 / preds.len().max(1) as f64
}

pub fn run_adaptation(cfg: &AdaptConfig, inputs: AdaptInputs<'_>) -> Result<AdaptOutcome> {
    cfg.validate().stage("config")?;
    let target = inputs.target;
    let c = target.c;
    let pool_items: Vec<&Item> = target.split(Split::Pool).collect();
    let calib_items: Vec<&Item> = target.split(Split::Calibration).collect();
    let test_items: Vec<&Item> = target.split(Split::Test).collect();
    if pool_items.is_empty() {
        return Err(Error::Empty("target pool")).stage("inputs");
    }
    if test_items.is_empty() {
        return Err(Error::Empty("target test split")).stage("inputs");
    }
    if calib_items.is_empty() {
        return Err(Error::Empty("target calibration split")).stage("inputs");
    }
    if inputs.source.c != c || inputs.source.d != target.d {
        return Err(Error::invalid("source and target disagree on C or d")).stage("inputs");
    }

    // the pool is split into features (visible) and an oracle (labels, on request only)
    let pool_x: Vec<&[f64]> = pool_items.iter().map(|it| it.x.as_slice()).collect();
    let mut oracle = LabelOracle::new(pool_items.iter().map(|it| it.y).collect());
    let mut warnings = Vec::new();

    let base = match inputs.base {
        Some(p) => p,
        None => {
            let train_cfg = TrainConfig {
                stream: cfg.stream.derive(1),
                ..cfg.train.clone()
            };
            bnn::train(&train_cfg, inputs.source, cfg.variant).stage("base training")?
        }
    };
    if base.c != c || base.d != target.d {
        return Err(Error::invalid("base model does not match the target data")).stage("inputs");
    }
    let predictor = Predictor { cfg };

    // threshold calibration on the labelled target subset
    let calib_x: Vec<&[f64]> = calib_items.iter().map(|it| it.x.as_slice()).collect();
    let calib_y: Vec<usize> = calib_items.iter().map(|it| it.y).collect();
    let calib_pred = predictor.run(&base, &calib_x, Some(&calib_y), cfg.stream.derive(2)).stage("calibration prediction")?;
    let calib_scores: Vec<(f64, bool)> = calib_pred
        .iter()
        .map(|p| (cfg.gate.score(p), p.is_correct() == Some(true)))
        .collect();
    let threshold = calibrate_threshold(&calib_scores, cfg.target_accuracy).stage("threshold calibration")?;
    if threshold.sentinel {
        warnings.push("no threshold reaches the target accuracy; auto set is empty".to_string());
    }

    // manual labels: uniform over the pool, which is disjoint from calibration by split tag
    let candidates: Vec<usize> = (0..pool_items.len()).collect();
    let manual = manual_label(&candidates, cfg.manual_fraction, &mut oracle, cfg.stream.derive(3)).stage("manual labelling")?;
    warnings.extend(manual.warning.clone());

    let val_items: Vec<&Item> = calib_items.clone();
    let fine_tune = |init: &CdpParams, items: &[Item], k: u64| -> Result<CdpParams> {
        if items.is_empty() {
            return Ok(init.clone());
        }
        let refs: Vec<&Item> = items.iter().collect();
        let ft = TrainConfig {
            stream: cfg.stream.derive(5).derive(k),
            ..cfg.fine_tune.clone()
        };
        Ok(bnn::fit(init.clone(), &ft, &refs, &val_items)?.params)
    };
    let as_item = |index: usize, label: usize| Item {
        x: pool_x[index].to_vec(),
        y: label,
        split: Split::Train,
    };
    let manual_items: Vec<Item> = manual.labelled.iter().map(|&(i, y)| as_item(i, y)).collect();

    // rounds of pool prediction -> auto labelling -> fine-tuning on auto + manual
    let mut current = base.clone();
    let mut auto = Vec::new();
    let mut threshold_now = threshold;
    let mut auto_only_params = base.clone();
    let mut counts = (class_counts(&manual_items, c), class_counts(&manual_items, c));
    for round in 0..cfg.rounds as u64 {
        if round > 0 {
            let preds = predictor.run(&current, &calib_x, Some(&calib_y), cfg.stream.derive(2).derive(round))?;
            let scores: Vec<(f64, bool)> = preds.iter().map(|p| (cfg.gate.score(p), p.is_correct() == Some(true))).collect();
            threshold_now = calibrate_threshold(&scores, cfg.target_accuracy)?;
        }
        auto = if cfg.auto_enabled && !threshold_now.sentinel {
            let pool_pred = predictor
                .run(&current, &pool_x, None, cfg.stream.derive(4).derive(round))
                .stage("pool prediction")?;
            let raw = auto_label(&pool_pred, threshold_now.value, cfg.gate);
            restrict_auto(raw, pool_items.len(), cfg.auto_fraction_cap, cfg.per_class_top_k)
        } else {
            Vec::new()
        };
        let manual_set: BTreeSet<usize> = manual.labelled.iter().map(|&(i, _)| i).collect();
        let auto_items: Vec<Item> = auto
            .iter()
            .filter(|a| !manual_set.contains(&a.index))
            .map(|a| as_item(a.index, a.label))
            .collect();
        if round == 0 {
            auto_only_params = fine_tune(&base, &auto_items, 0).stage("auto-only fine-tuning")?;
        }
        let mut combined = auto_items;
        combined.extend(manual_items.iter().cloned());
        let balanced = balance(&combined, c, cfg.balance_policy, cfg.jitter_scale, cfg.stream.derive(6).derive(round));
        counts = (class_counts(&combined, c), class_counts(&balanced, c));
        current = fine_tune(&current, &balanced, 2 + round).stage("auto+manual fine-tuning")?;
    }
    let manual_only = fine_tune(&base, &manual_items, 1).stage("manual-only fine-tuning")?;

    // evaluation: ground truth of the test split and audited auto labels
    let test_x: Vec<&[f64]> = test_items.iter().map(|it| it.x.as_slice()).collect();
    let test_y: Vec<usize> = test_items.iter().map(|it| it.y).collect();
    let eval_stream = cfg.stream.derive(7);
    let evaluate = |p: &CdpParams| predictor.run(p, &test_x, Some(&test_y), eval_stream);
    let base_pred = evaluate(&base).stage("evaluation")?;
    let final_pred = evaluate(&current).stage("evaluation")?;
    let accuracy = ConditionAccuracies {
        no_finetune: accuracy_of(&base_pred),
        auto_only: accuracy_of(&evaluate(&auto_only_params).stage("evaluation")?),
        manual_only: accuracy_of(&evaluate(&manual_only).stage("evaluation")?),
        auto_manual: accuracy_of(&final_pred),
    };
    let metrics_cfg = MetricsConfig {
        bins: cfg.metric_bins,
        ..MetricsConfig::default()
    };
    let final_metrics = metrics::evaluate(&final_pred, None, &metrics_cfg).stage("evaluation")?;
    let auto_set_accuracy = (!auto.is_empty())
        .then(|| auto.iter().filter(|a| oracle.audit(a.index) == a.label).count() as f64 / auto.len() as f64);

    let context = match &cfg.context {
        Some(ctx) => {
            let labelled: Vec<(&[f64], usize)> = calib_items
                .iter()
                .map(|it| (it.x.as_slice(), it.y))
                .chain(manual.labelled.iter().map(|&(i, y)| (pool_x[i], y)))
                .collect();
            let test: Vec<(&[f64], usize)> = test_x.iter().copied().zip(test_y.iter().copied()).collect();
            Some(context_stage(cfg, ctx, &current, &labelled, &test, &predictor).stage("context")?)
        }
        None => None,
    };

    let report = AdaptReport {
        threshold,
        calibration_size: calib_items.len(),
        pool_size: pool_items.len(),
        auto_set_size: auto.len(),
        auto_set_accuracy,
        manual_set_size: manual.labelled.len(),
        class_counts_before: counts.0,
        class_counts_after: counts.1,
        accuracy,
        final_metrics,
        context,
        warnings,
    };
    let artifacts = AdaptArtifacts {
        threshold,
        calibration_indices: target
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.split == Split::Calibration)
            .map(|(i, _)| i)
            .collect(),
        auto,
        manual: manual.labelled,
    };
    Ok(AdaptOutcome {
        report,
        artifacts,
        base,
        adapted: current,
        test_predictions: final_pred,
    })
}

/// Scenes of `items` drawn kit by kit: each scene picks a group, then instances whose
/// label belongs to it. Unaries come from `preds`.
fn assemble_scenes(ctx: &ContextConfig, c: usize, labels: &[usize], preds: &[Prediction], count: usize, stream: RngStream) -> Result<SceneSet> {
    dataio::validate_groups(c, &ctx.groups)?;
    if ctx.n_min == 0 || ctx.n_min > ctx.n_max {
        return Err(Error::invalid("scene size range must satisfy 1 <= min <= max"));
    }
    let members: Vec<Vec<usize>> = ctx
        .groups
        .iter()
        .map(|g| (0..labels.len()).filter(|&i| g.contains(&labels[i])).collect())
        .collect();
    let usable: Vec<usize> = (0..ctx.groups.len()).filter(|&g| !members[g].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Empty("items belonging to any context group"));
    }
    let mut rng = stream.rng();
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        use rand::Rng;
        let g = usable[rng.random_range(0..usable.len())];
        let n = rng.random_range(ctx.n_min..=ctx.n_max);
        let instances = (0..n)
            .map(|_| {
                let i = members[g][rng.random_range(0..members[g].len())];
                Instance {
                    unary: preds[i].mean.clone(),
                    y: labels[i],
                }
            })
            .collect();
        scenes.push(Scene::new(c, instances, group_cooc(c, &ctx.groups[g], ctx.diagonal))?);
    }
    Ok(SceneSet { c, scenes })
}

fn unzip_items<'a>(v: &[(&'a [f64], usize)]) -> (Vec<&'a [f64]>, Vec<usize>) {
    v.iter().copied().unzip()
}

fn context_stage(
    cfg: &AdaptConfig,
    ctx: &ContextConfig,
    model: &CdpParams,
    labelled: &[(&[f64], usize)],
    test: &[(&[f64], usize)],
    predictor: &Predictor<'_>,
) -> Result<ContextReport> {
    let s = cfg.stream.derive(8);
    let c = model.c;
    let params = match &ctx.train {
        Some(train_cfg) => {
            let (x, y) = unzip_items(labelled);
            let preds = predictor.run(model, &x, Some(&y), s.derive(0))?;
            let set = assemble_scenes(ctx, c, &y, &preds, ctx.scenes, s.derive(1))?;
            let tc = CrfTrainConfig {
                init: ctx.params,
                stream: s.derive(2),
                ..train_cfg.clone()
            };
            crf::train_crf(&set, &tc)?.params
        }
        None => ctx.params,
    };
    let (x, y) = unzip_items(test);
    let preds = predictor.run(model, &x, Some(&y), s.derive(3))?;
    let set = assemble_scenes(ctx, c, &y, &preds, ctx.scenes, s.derive(4))?;
    Ok(ContextReport {
        params,
        scenes: set.scenes.len(),
        unary_accuracy: crf::unary_accuracy(&set),
        smoothed_accuracy: crf::smoothed_accuracy(&set, &params, &ctx.lbp)?,
    })
}

pub fn save_outcome(dir: &Path, outcome: &AdaptOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    dataio::write_json(&dir.join("adapt_report.json"), &outcome.report)?;
    dataio::write_json(&dir.join("threshold.json"), &outcome.artifacts.threshold)?;
    dataio::write_json(&dir.join("auto_set.json"), &outcome.artifacts.auto)?;
    dataio::write_json(&dir.join("manual_set.json"), &outcome.artifacts.manual)?;
    dataio::write_json(&dir.join("calibration_set.json"), &outcome.artifacts.calibration_indices)?;
    predictive::save_predictions(&dir.join("test_predictions.json"), &outcome.test_predictions)?;
    bnn::save_checkpoint(&dir.join("base_model.json"), &outcome.base)?;
    bnn::save_checkpoint(&dir.join("adapted_model.json"), &outcome.adapted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(mean: Vec<f64>) -> Prediction {
        let conf = mean.iter().copied().fold(0.0, f64::max);
        Prediction {
            entropy: crate::numerics::entropy(&mean),
            mean,
            conf,
            mi: 0.0,
            y: None,
        }
    }

    #[test]
    fn threshold_grid_search() {
        let calib = [(0.99, true), (0.95, true), (0.9, false), (0.8, true), (0.6, false)];
        let t = calibrate_threshold(&calib, 0.95).unwrap();
        assert_eq!(t, Threshold { value: 0.95, sentinel: false });
        let all = [(0.7, true), (0.9, true), (0.5, true)];
        assert_eq!(calibrate_threshold(&all, 0.95).unwrap().value, 0.5);
        let none = [(0.7, false), (0.9, false)];
        let t = calibrate_threshold(&none, 0.95).unwrap();
        assert!(t.sentinel && t.value > 0.9);
        assert!(calibrate_threshold(&[], 0.95).is_err());
    }

    #[test]
    fn auto_label_filters_by_threshold() {
        let pool = vec![pred(vec![0.01, 0.02, 0.97]), pred(vec![0.3, 0.5, 0.2])];
        let a = auto_label(&pool, 0.95, Measure::Confidence);
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].index, a[0].label), (0, 2));
        assert!(auto_label(&pool, 1.0 + 1e-9, Measure::Confidence).is_empty());
    }

    #[test]
    fn restriction_keeps_most_confident() {
        let a = |index, label, score| AutoLabel { index, label, score };
        let auto = vec![a(0, 0, 0.9), a(1, 0, 0.99), a(2, 1, 0.95), a(3, 0, 0.97)];
        let top = restrict_auto(auto.clone(), 10, None, Some(1));
        assert_eq!(top.iter().map(|x| x.index).collect::<Vec<_>>(), vec![1, 2]);
        let capped = restrict_auto(auto, 10, Some(0.2), None);
        assert_eq!(capped.iter().map(|x| x.index).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn manual_selection_cases() {
        let cands: Vec<usize> = (0..20).collect();
        let mut oracle = LabelOracle::new((0..20).map(|i| i % 3).collect());
        let none = manual_label(&cands, 0.0, &mut oracle, RngStream::new(1)).unwrap();
        assert!(none.labelled.is_empty() && none.warning.is_none());
        let tiny = manual_label(&cands, 0.01, &mut oracle, RngStream::new(1)).unwrap();
        assert!(tiny.labelled.is_empty() && tiny.warning.is_some());
        assert!(oracle.queried().is_empty());
        let all = manual_label(&cands, 1.0, &mut oracle, RngStream::new(1)).unwrap();
        assert_eq!(all.labelled.len(), 20);
        assert!(all.labelled.iter().all(|&(i, y)| y == i % 3));
        let a = manual_label(&cands, 0.3, &mut oracle, RngStream::new(7)).unwrap();
        let b = manual_label(&cands, 0.3, &mut oracle, RngStream::new(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labelled.len(), 6);
    }

    #[test]
    fn balancing_equalizes_counts() {
        let item = |x: f64, y| Item {
            x: vec![x, -x],
            y,
            split: Split::Train,
        };
        let items = vec![item(0.0, 0), item(1.0, 0), item(2.0, 0), item(3.0, 0), item(9.0, 1)];
        let out = balance(&items, 3, BalancePolicy::JitterDuplicate, 0.5, RngStream::new(2));
        assert_eq!(class_counts(&out, 3), vec![4, 4, 0]);
        for dup in &out[5..] {
            assert_eq!(dup.y, 1);
            assert_ne!(dup.x, items[4].x);
        }
        assert_eq!(balance(&items, 3, BalancePolicy::None, 0.5, RngStream::new(2)), items);
    }

    #[test]
    fn oracle_records_requests_but_not_audits() {
        let mut o = LabelOracle::new(vec![2, 1, 0]);
        assert_eq!(o.audit(0), 2);
        assert!(o.queried().is_empty());
        assert_eq!(o.label(1), 1);
        assert_eq!(o.queried().iter().copied().collect::<Vec<_>>(), vec![1]);
    }
}
