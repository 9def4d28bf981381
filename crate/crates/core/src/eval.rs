//! Detection-rate evaluation. Summaries are computed from report records
//! only, so any external script can recompute them from the emitted lines.

use serde::{Deserialize, Serialize};

use crate::bundle::{ModelBundle, SampleItem, SampleSet};
use crate::detect::{detect_batch, DetectConfig, DetectionReport, Truth};
use crate::error::{Error, Result};
use crate::profiler::ProfileStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Semantic,
    Activation,
}

impl Metric {
    pub fn score(self, r: &DetectionReport) -> Option<f64> {
        match self {
            Metric::Semantic => r.d_semantic,
            Metric::Activation => r.d_activation,
        }
    }

    /// Upper end of the metric's range.
    pub fn range(self) -> f64 {
        match self {
            Metric::Semantic => 1.0,
            Metric::Activation => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Metric swept by the threshold grid search.
    pub metric: Metric,
    /// Candidate thresholds; empty disables the search.
    pub grid: Vec<f64>,
    /// FPR budget for picking the best grid threshold.
    pub max_fpr: f64,
    pub histogram_bins: usize,
}

impl EvalConfig {
    pub fn new(metric: Metric) -> Self {
        EvalConfig {
            metric,
            grid: uniform_grid(0.0, metric.range(), 0.005),
            max_fpr: 0.10,
            histogram_bins: 20,
        }
    }
}

/// `start, start+step, …` up to and including `stop` (within rounding).
pub fn uniform_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || stop < start {
        return Vec::new();
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub detection_rate: f64,
    pub false_positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: String,
    pub count: usize,
    pub detection_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower: f64,
    pub upper: f64,
    pub counts: Vec<usize>,
    /// Records without a score for the metric.
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub metric: Metric,
    pub naturals: usize,
    pub adversarial: usize,
    /// Fraction of adversarial records with a non-natural verdict.
    pub detection_rate: f64,
    /// Fraction of natural records with a non-natural verdict.
    pub false_positive_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_semantic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_activation: Option<f64>,
    pub auc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_natural: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_adversarial: Option<f64>,
    pub per_kind: Vec<KindSummary>,
    pub histogram_natural: Histogram,
    pub histogram_adversarial: Histogram,
    pub roc: Vec<RocPoint>,
    /// Highest detection rate on the grid with FPR within budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<RocPoint>,
}

/// Missing scores count as maximally suspicious.
fn flagged_at(score: Option<f64>, threshold: f64) -> bool {
    score.is_none_or(|d| d > threshold)
}

fn rate(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Mann–Whitney AUC of adversarial over natural scores; ties count one half
/// and missing scores rank above every present score.
pub fn auc(naturals: &[Option<f64>], adversarial: &[Option<f64>]) -> f64 {
    let key = |s: &Option<f64>| s.unwrap_or(f64::INFINITY);
    let mut wins = 0.0;
    for a in adversarial {
        for n in naturals {
            let (ka, kn) = (key(a), key(n));
            if ka > kn {
                wins += 1.0;
            } else if ka == kn {
                wins += 0.5;
            }
        }
    }
    wins / (naturals.len() * adversarial.len()) as f64
}

pub fn median(scores: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = scores.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

fn histogram(scores: &[Option<f64>], upper: f64, bins: usize) -> Histogram {
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    let mut missing = 0;
    for s in scores {
        match s {
            Some(d) => {
                let b = ((d / upper) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
                counts[b] += 1;
            }
            None => missing += 1,
        }
    }
    Histogram {
        lower: 0.0,
        upper,
        counts,
        missing,
    }
}

pub fn roc(naturals: &[Option<f64>], adversarial: &[Option<f64>], grid: &[f64]) -> Vec<RocPoint> {
    grid.iter()
        .map(|&t| RocPoint {
            threshold: t,
            detection_rate: rate(adversarial.iter().filter(|s| flagged_at(**s, t)).count(), adversarial.len()),
            false_positive_rate: rate(naturals.iter().filter(|s| flagged_at(**s, t)).count(), naturals.len()),
        })
        .collect()
}

/// Best grid point within the FPR budget; ties prefer the larger threshold.
pub fn best_point(roc: &[RocPoint], max_fpr: f64) -> Option<RocPoint> {
    roc.iter()
        .filter(|p| p.false_positive_rate <= max_fpr)
        .fold(None, |best: Option<RocPoint>, p| match best {
            Some(b) if b.detection_rate > p.detection_rate => Some(b),
            _ => Some(*p),
        })
}

/// Summary of report records that carry ground truth.
pub fn summarize(reports: &[DetectionReport], cfg: &EvalConfig) -> Result<EvaluationSummary> {
    let naturals: Vec<&DetectionReport> = reports.iter().filter(|r| r.truth == Some(Truth::Natural)).collect();
    let adversarial: Vec<&DetectionReport> =
        reports.iter().filter(|r| r.truth == Some(Truth::Adversarial)).collect();
    if naturals.is_empty() || adversarial.is_empty() {
        return Err(Error::Empty("evaluation needs both natural and adversarial records".into()));
    }
    let scores = |rs: &[&DetectionReport]| rs.iter().map(|r| cfg.metric.score(r)).collect::<Vec<_>>();
    let nat_scores = scores(&naturals);
    let adv_scores = scores(&adversarial);

    let mut kinds: Vec<String> = adversarial
        .iter()
        .map(|r| r.attack.clone().unwrap_or_else(|| "unknown".into()))
        .collect();
    kinds.sort();
    kinds.dedup();
    let per_kind = kinds
        .into_iter()
        .map(|kind| {
            let members: Vec<&DetectionReport> = adversarial
                .iter()
                .copied()
                .filter(|r| r.attack.as_deref().unwrap_or("unknown") == kind)
                .collect();
            let ks = scores(&members);
            KindSummary {
                count: members.len(),
                detection_rate: rate(members.iter().filter(|r| r.verdict.flagged()).count(), members.len()),
                auc: Some(auc(&nat_scores, &ks)),
                median_score: median(&ks),
                kind,
            }
        })
        .collect();

    let roc = roc(&nat_scores, &adv_scores, &cfg.grid);
    let first_threshold = |f: fn(&DetectionReport) -> Option<f64>| reports.iter().find_map(f);
    Ok(EvaluationSummary {
        metric: cfg.metric,
        naturals: naturals.len(),
        adversarial: adversarial.len(),
        detection_rate: rate(adversarial.iter().filter(|r| r.verdict.flagged()).count(), adversarial.len()),
        false_positive_rate: rate(naturals.iter().filter(|r| r.verdict.flagged()).count(), naturals.len()),
        threshold_semantic: first_threshold(|r| r.threshold_semantic),
        threshold_activation: first_threshold(|r| r.threshold_activation),
        auc: auc(&nat_scores, &adv_scores),
        median_natural: median(&nat_scores),
        median_adversarial: median(&adv_scores),
        per_kind,
        histogram_natural: histogram(&nat_scores, cfg.metric.range(), cfg.histogram_bins),
        histogram_adversarial: histogram(&adv_scores, cfg.metric.range(), cfg.histogram_bins),
        best: best_point(&roc, cfg.max_fpr),
        roc,
    })
}

/// Keeps the attack items that fooled the model.
pub fn successful_only(attacks: &SampleSet) -> Result<SampleSet> {
    let items: Vec<SampleItem> = attacks
        .items
        .iter()
        .filter(|i| i.attack.as_ref().is_some_and(|a| a.fooled))
        .cloned()
        .collect();
    let mut set = SampleSet::new(attacks.modality, items)?;
    set.provenance = attacks.provenance.clone();
    Ok(set)
}

/// Runs detection over both sets and tags each record with ground truth.
/// Naturals come first, then attacks, each in input order.
pub fn evaluation_reports(
    bundle: &ModelBundle,
    store: &ProfileStore,
    naturals: &SampleSet,
    attacks: &SampleSet,
    cfg: &DetectConfig,
) -> Result<Vec<DetectionReport>> {
    if naturals.is_empty() || attacks.is_empty() {
        return Err(Error::Empty("evaluation needs natural and attack samples".into()));
    }
    if let Some(item) = naturals.items.iter().find(|i| i.adversarial) {
        return Err(Error::format("natural set", format!("item {} is marked adversarial", item.id)));
    }
    if let Some(item) = attacks.items.iter().find(|i| !i.adversarial) {
        return Err(Error::format("attack set", format!("item {} is not marked adversarial", item.id)));
    }
    let mut reports = detect_batch(bundle, &naturals.items, store, cfg);
    reports.iter_mut().for_each(|r| r.truth = Some(Truth::Natural));
    let mut adv = detect_batch(bundle, &attacks.items, store, cfg);
    for (r, item) in adv.iter_mut().zip(&attacks.items) {
        r.truth = Some(Truth::Adversarial);
        r.attack = Some(item.attack.as_ref().map_or_else(|| "unknown".into(), |a| a.kind.clone()));
    }
    reports.extend(adv);
    Ok(reports)
}
