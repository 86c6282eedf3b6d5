//! Calibration (ECE, MCE), proper scoring rules (NLL, Brier), separability
//! (AUROC, AUPR) and per-type normalized uncertainty histograms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio;
use crate::error::{Error, Result};
use crate::numerics::argmax;
use crate::predictive::Prediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    Confidence,
    Entropy,
    MutualInformation,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Confidence, Measure::Entropy, Measure::MutualInformation];

    /// Raw value of the measure for one prediction.
    pub fn value(&self, p: &Prediction) -> f64 {
        match self {
            Measure::Confidence => p.conf,
            Measure::Entropy => p.entropy,
            Measure::MutualInformation => p.mi,
        }
    }

    /// Score oriented so that larger means "more likely correct / in-distribution".
    pub fn score(&self, p: &Prediction) -> f64 {
        match self {
            Measure::Confidence => p.conf,
            Measure::Entropy => -p.entropy,
            Measure::MutualInformation => -p.mi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub bins: usize,
    pub measure: Measure,
    /// Fail instead of omitting OOD fields when no OOD predictions are given.
    pub require_ood: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bins: 15,
            measure: Measure::Confidence,
            require_ood: false,
        }
    }
}

/// Bin of `v` among `bins` equal-width, right-closed intervals over `[0, hi]`;
/// zero falls in the first bin, `hi` in the last.
fn bin_index(v: f64, hi: f64, bins: usize) -> usize {
    if v <= 0.0 || hi <= 0.0 {
        return 0;
    }
    let pos = v / hi * bins as f64;
    // right-closed: an exact edge belongs to the lower bin
    let idx = (pos - 1e-12).ceil() as isize - 1;
    idx.clamp(0, bins as isize - 1) as usize
}

/// ECE and MCE over `(confidence, correct)` pairs; empty bins are skipped.
pub fn calibration_errors(items: &[(f64, bool)], bins: usize) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::Empty("calibration input"));
    }
    if bins < 2 {
        return Err(Error::invalid("need at least 2 bins"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for &(c, ok) in items {
        let b = bin_index(c, 1.0, bins);
        count[b] += 1;
        conf[b] += c;
        hits[b] += f64::from(u8::from(ok));
    }
    let n = items.len() as f64;
    let (mut ece, mut mce) = (0.0, 0.0f64);
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let k = count[b] as f64;
        let gap = (hits[b] / k - conf[b] / k).abs();
        ece += k / n * gap;
        mce = mce.max(gap);
    }
    Ok((ece, mce))
}

/// ECE and MCE of labelled probability vectors (predicted label = argmax, ties low).
pub fn ece_mce(preds: &[(&[f64], usize)], bins: usize) -> Result<(f64, f64)> {
    let items: Vec<(f64, bool)> = preds
        .iter()
        .map(|(p, y)| (p.iter().copied().fold(0.0, f64::max), argmax(p) == *y))
        .collect();
    calibration_errors(&items, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringRules {
    /// `+∞` when some item puts zero mass on its label (see `zero_mass_items`).
    pub nll: f64,
    pub brier: f64,
    pub zero_mass_items: Vec<usize>,
}

pub fn nll_brier(preds: &[(&[f64], usize)]) -> Result<ScoringRules> {
    if preds.is_empty() {
        return Err(Error::Empty("scoring-rule input"));
    }
    let mut nll = 0.0;
    let mut brier = 0.0;
    let mut zero = Vec::new();
    for (i, (p, y)) in preds.iter().enumerate() {
        if *y >= p.len() {
            return Err(Error::invalid(format!("label {y} out of range for item {i}")));
        }
        if p[*y] <= 0.0 {
            zero.push(i);
        } else {
            nll -= p[*y].ln();
        }
        brier += p
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                let t = if c == *y { 1.0 } else { 0.0 };
                (v - t) * (v - t)
            })
            .sum::<f64>();
    }
    let n = preds.len() as f64;
    Ok(ScoringRules {
        nll: if zero.is_empty() { nll / n } else { f64::INFINITY },
        brier: brier / n,
        zero_mass_items: zero,
    })
}

/// AUROC (rank statistic, ties averaged) and AUPR (step-wise average precision with
/// tied scores grouped); `positives` is the class to be detected.
pub fn auroc_aupr(positives: &[f64], negatives: &[f64]) -> Result<(f64, f64)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty("AUROC needs both positives and negatives"));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // average ranks (1-based) over tie groups, ascending
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|(_, p)| *p).count() as f64;
        i = j;
    }
    let auroc = (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);

    // descending sweep for precision/recall
    let mut ap = 0.0;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut prev_recall = 0.0;
    let mut j = all.len();
    while j > 0 {
        let mut i = j;
        while i > 0 && all[i - 1].0 == all[j - 1].0 {
            i -= 1;
        }
        for &(_, pos) in &all[i..j] {
            if pos {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / np;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        j = i;
    }
    Ok((auroc, ap))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub measure: Measure,
    pub edges: Vec<f64>,
    pub correct: Vec<f64>,
    pub misclassified: Vec<f64>,
    pub ood: Vec<f64>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,correct,misclassified,ood\n");
        for b in 0..self.correct.len() {
            s.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                self.edges[b], self.edges[b + 1], self.correct[b], self.misclassified[b], self.ood[b]
            ));
        }
        s
    }
}

fn normalized_counts(values: &[f64], hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        h[bin_index(v, hi, bins)] += 1.0;
    }
    if !values.is_empty() {
        let n = values.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_test: usize,
    pub n_ood: usize,
    pub measure: Measure,
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub nll: f64,
    pub brier: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece_with_ood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mce_with_ood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc_misclassification: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aupr_misclassification: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc_ood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aupr_ood: Option<f64>,
    /// Reason for each metric that could not be computed.
    pub absent: BTreeMap<String, String>,
    pub zero_mass_items: Vec<usize>,
    pub histogram: Histogram,
}

pub fn evaluate(test: &[Prediction], ood: Option<&[Prediction]>, cfg: &MetricsConfig) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Empty("test predictions"));
    }
    let ood = ood.filter(|o| !o.is_empty());
    if cfg.require_ood && ood.is_none() {
        return Err(Error::invalid("OOD metrics requested but no OOD predictions were given"));
    }
    let labelled: Vec<(&[f64], usize)> = test
        .iter()
        .enumerate()
        .map(|(i, p)| p.y.map(|y| (p.mean.as_slice(), y)).ok_or_else(|| Error::invalid(format!("test prediction {i} has no label"))))
        .collect::<Result<_>>()?;
    let correct: Vec<bool> = labelled.iter().map(|(p, y)| argmax(p) == *y).collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / test.len() as f64;
    let (ece, mce) = ece_mce(&labelled, cfg.bins)?;
    let rules = nll_brier(&labelled)?;
    let mut absent = BTreeMap::new();

    let (ece_with_ood, mce_with_ood) = match ood {
        Some(o) => {
            let mut items: Vec<(f64, bool)> = test.iter().zip(&correct).map(|(p, &ok)| (p.conf, ok)).collect();
            items.extend(o.iter().map(|p| (p.conf, false)));
            let (e, m) = calibration_errors(&items, cfg.bins)?;
            (Some(e), Some(m))
        }
        None => {
            absent.insert("ece_with_ood".into(), "no OOD predictions".into());
            (None, None)
        }
    };

    let pos: Vec<f64> = test.iter().zip(&correct).filter(|(_, &c)| c).map(|(p, _)| cfg.measure.score(p)).collect();
    let neg: Vec<f64> = test.iter().zip(&correct).filter(|(_, &c)| !c).map(|(p, _)| cfg.measure.score(p)).collect();
    let (auroc_mis, aupr_mis) = if pos.is_empty() || neg.is_empty() {
        let reason = if neg.is_empty() { "no misclassified test predictions" } else { "no correct test predictions" };
        absent.insert("auroc_misclassification".into(), reason.into());
        (None, None)
    } else {
        let (a, p) = auroc_aupr(&pos, &neg)?;
        (Some(a), Some(p))
    };

    let (auroc_ood, aupr_ood) = match ood {
        Some(o) => {
            let ins: Vec<f64> = test.iter().map(|p| cfg.measure.score(p)).collect();
            let outs: Vec<f64> = o.iter().map(|p| cfg.measure.score(p)).collect();
            let (a, p) = auroc_aupr(&ins, &outs)?;
            (Some(a), Some(p))
        }
        None => {
            absent.insert("auroc_ood".into(), "no OOD predictions".into());
            (None, None)
        }
    };

    let classes = test[0].mean.len();
    let hi = match cfg.measure {
        Measure::Confidence => 1.0,
        _ => (classes as f64).ln(),
    };
    let values = |ps: &mut dyn Iterator<Item = &Prediction>| ps.map(|p| cfg.measure.value(p)).collect::<Vec<f64>>();
    let right = values(&mut test.iter().zip(&correct).filter(|(_, &c)| c).map(|(p, _)| p));
    let wrong = values(&mut test.iter().zip(&correct).filter(|(_, &c)| !c).map(|(p, _)| p));
    let outs = values(&mut ood.unwrap_or(&[]).iter());
    let histogram = Histogram {
        measure: cfg.measure,
        edges: (0..=cfg.bins).map(|b| hi * b as f64 / cfg.bins as f64).collect(),
        correct: normalized_counts(&right, hi, cfg.bins),
        misclassified: normalized_counts(&wrong, hi, cfg.bins),
        ood: normalized_counts(&outs, hi, cfg.bins),
    };

    Ok(MetricsReport {
        n_test: test.len(),
        n_ood: ood.map_or(0, <[Prediction]>::len),
        measure: cfg.measure,
        accuracy,
        ece,
        mce,
        nll: rules.nll,
        brier: rules.brier,
        ece_with_ood,
        mce_with_ood,
        auroc_misclassification: auroc_mis,
        aupr_misclassification: aupr_mis,
        auroc_ood,
        aupr_ood,
        absent,
        zero_mass_items: rules.zero_mass_items,
        histogram,
    })
}

/// The measure whose misclassification AUROC is highest (ties keep the earlier measure).
pub fn best_measure(test: &[Prediction], ood: Option<&[Prediction]>, bins: usize) -> Result<(Measure, MetricsReport)> {
    let mut best: Option<(Measure, MetricsReport)> = None;
    for m in Measure::ALL {
        let cfg = MetricsConfig {
            bins,
            measure: m,
            require_ood: false,
        };
        let report = evaluate(test, ood, &cfg)?;
        let score = report.auroc_misclassification.unwrap_or(f64::NEG_INFINITY);
        let better = match &best {
            None => true,
            Some((_, r)) => score > r.auroc_misclassification.unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best = Some((m, report));
        }
    }
    Ok(best.expect("three measures evaluated"))
}

pub fn save_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    dataio::write_json(&dir.join("report.json"), report)?;
    dataio::write_atomic(&dir.join("histogram.csv"), &report.histogram.to_csv())
}
