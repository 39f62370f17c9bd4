//! Lesion-level and patient-level evaluation.
//!
//! A lesion counts as found when some candidate center lies inside its box
//! (closed intervals). Candidates at or above a threshold `t` are the
//! detections at `t`; the FROC sweep visits every distinct candidate
//! probability. False positives are normalized by all volumes, including
//! those without lesions.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::BoundingBox;
use crate::error::{Error, Result};
use crate::postproc::CandidateDetection;

pub const FPPV_GRID: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub bbox: BoundingBox,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl Lesion {
    pub fn new(bbox: BoundingBox) -> Self {
        Lesion {
            bbox,
            labels: BTreeMap::new(),
        }
    }
}

/// Ground truth and detections of one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub volume_id: String,
    pub lesions: Vec<Lesion>,
    pub candidates: Vec<CandidateDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Lesion each candidate is assigned to, if any.
    pub assigned: Vec<Option<usize>>,
    /// True when the candidate center lies inside at least one lesion.
    pub is_tp: Vec<bool>,
    /// Highest probability among candidates inside each lesion; the lesion
    /// is hit at threshold `t` iff this is `Some(p)` with `p >= t`.
    pub lesion_hit_prob: Vec<Option<f64>>,
}

impl MatchResult {
    pub fn lesion_found(&self) -> Vec<bool> {
        self.lesion_hit_prob.iter().map(Option::is_some).collect()
    }

    pub fn n_fp(&self) -> usize {
        self.is_tp.iter().filter(|t| !**t).count()
    }
}

/// Matches candidates to lesions by center containment. Candidates claim
/// lesions in descending probability order; a candidate inside several
/// lesions marks all of them hit but is assigned to the first unclaimed one.
pub fn match_lesions(cands: &[CandidateDetection], lesions: &[BoundingBox]) -> MatchResult {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].probability.total_cmp(&cands[a].probability).then(a.cmp(&b)));
    let mut assigned = vec![None; cands.len()];
    let mut is_tp = vec![false; cands.len()];
    let mut lesion_hit_prob: Vec<Option<f64>> = vec![None; lesions.len()];
    let mut claimed = vec![false; lesions.len()];
    for ci in order {
        let c = cands[ci].center();
        let inside: Vec<usize> = (0..lesions.len()).filter(|&li| lesions[li].contains(c)).collect();
        if inside.is_empty() {
            continue;
        }
        is_tp[ci] = true;
        for &li in &inside {
            let p = cands[ci].probability;
            lesion_hit_prob[li] = Some(lesion_hit_prob[li].map_or(p, |q| q.max(p)));
        }
        let pick = inside.iter().copied().find(|&li| !claimed[li]).unwrap_or(inside[0]);
        claimed[pick] = true;
        assigned[ci] = Some(pick);
    }
    MatchResult {
        assigned,
        is_tp,
        lesion_hit_prob,
    }
}

/// Everything the metrics need from one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSummary {
    pub volume_id: String,
    pub candidate_probs: Vec<f64>,
    pub fp_probs: Vec<f64>,
    pub lesion_hit_probs: Vec<Option<f64>>,
    pub lesion_labels: Vec<BTreeMap<String, String>>,
    pub score: f64,
}

impl VolumeSummary {
    pub fn has_lesion(&self) -> bool {
        !self.lesion_hit_probs.is_empty()
    }
}

pub fn summarize(record: &VolumeRecord) -> VolumeSummary {
    let boxes: Vec<BoundingBox> = record.lesions.iter().map(|l| l.bbox).collect();
    let m = match_lesions(&record.candidates, &boxes);
    VolumeSummary {
        volume_id: record.volume_id.clone(),
        candidate_probs: record.candidates.iter().map(|c| c.probability).collect(),
        fp_probs: record
            .candidates
            .iter()
            .zip(&m.is_tp)
            .filter(|(_, tp)| !**tp)
            .map(|(c, _)| c.probability)
            .collect(),
        lesion_hit_probs: m.lesion_hit_prob,
        lesion_labels: record.lesions.iter().map(|l| l.labels.clone()).collect(),
        score: volume_score(&record.candidates),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fppv: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// One point per distinct candidate probability, threshold descending.
    pub points: Vec<FrocPoint>,
    pub n_volumes: usize,
    pub n_lesions: usize,
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

pub fn froc_from_summaries(volumes: &[&VolumeSummary]) -> Result<FrocCurve> {
    let n_lesions: usize = volumes.iter().map(|v| v.lesion_hit_probs.len()).sum();
    if n_lesions == 0 {
        return Err(Error::Undefined("FROC needs at least one lesion".into()));
    }
    let n_volumes = volumes.len();
    let mut thresholds = sorted_desc(volumes.iter().flat_map(|v| v.candidate_probs.iter().copied()).collect());
    thresholds.dedup();
    let fps = sorted_desc(volumes.iter().flat_map(|v| v.fp_probs.iter().copied()).collect());
    let hits = sorted_desc(
        volumes
            .iter()
            .flat_map(|v| v.lesion_hit_probs.iter().filter_map(|p| *p))
            .collect(),
    );
    let (mut nf, mut nh) = (0usize, 0usize);
    let mut points = Vec::with_capacity(thresholds.len());
    for t in thresholds {
        while nf < fps.len() && fps[nf] >= t {
            nf += 1;
        }
        while nh < hits.len() && hits[nh] >= t {
            nh += 1;
        }
        points.push(FrocPoint {
            threshold: t,
            fppv: nf as f64 / n_volumes as f64,
            sensitivity: nh as f64 / n_lesions as f64,
        });
    }
    Ok(FrocCurve {
        points,
        n_volumes,
        n_lesions,
    })
}

pub fn froc(records: &[VolumeRecord]) -> Result<FrocCurve> {
    let summaries: Vec<VolumeSummary> = records.iter().map(summarize).collect();
    froc_from_summaries(&summaries.iter().collect::<Vec<_>>())
}

/// Step-function reading: best sensitivity among points with FPPV at most
/// `fppv`, or 0 when no point qualifies.
pub fn sensitivity_at_fppv(curve: &FrocCurve, fppv: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fppv <= fppv)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

pub fn avg_sensitivity(curve: &FrocCurve, fppvs: &[f64]) -> f64 {
    if fppvs.is_empty() {
        return 0.0;
    }
    fppvs.iter().map(|&f| sensitivity_at_fppv(curve, f)).sum::<f64>() / fppvs.len() as f64
}

/// Lowest threshold whose FPPV does not exceed `target`.
pub fn threshold_for_operating_point(curve: &FrocCurve, target: f64) -> Option<f64> {
    curve
        .points
        .iter()
        .filter(|p| p.fppv <= target)
        .map(|p| p.threshold)
        .reduce(f64::min)
}

/// Patient-level score: the highest candidate probability, 0 when empty.
pub fn volume_score(cands: &[CandidateDetection]) -> f64 {
    cands.iter().map(|c| c.probability).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// The leading point sits above every score; JSON writes it as `null`.
    #[serde(with = "threshold_or_null")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

mod threshold_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if t.is_finite() {
            s.serialize_f64(*t)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn class_counts(scores: &[(f64, bool)]) -> (usize, usize) {
    let pos = scores.iter().filter(|s| s.1).count();
    (pos, scores.len() - pos)
}

/// Mann-Whitney AUC with ties counted as one half.
pub fn auc_rank(scores: &[(f64, bool)]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(scores);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("ROC needs both positive and negative volumes".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn roc_auc(scores: &[(f64, bool)]) -> Result<RocCurve> {
    let auc = auc_rank(scores)?;
    let (n_pos, n_neg) = class_counts(scores);
    let mut thresholds = sorted_desc(scores.iter().map(|s| s.0).collect());
    thresholds.dedup();
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for t in thresholds {
        let tp = scores.iter().filter(|s| s.1 && s.0 >= t).count();
        let fp = scores.iter().filter(|s| !s.1 && s.0 >= t).count();
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(RocCurve { points, auc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMetrics {
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        ConfusionMetrics {
            threshold,
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

/// A volume is called positive when its score reaches the threshold.
/// Ratios with an empty denominator are reported as 0.
pub fn confusion_at_threshold(scores: &[(f64, bool)], threshold: f64) -> ConfusionMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for &(s, truth) in scores {
        match (s >= threshold, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    ConfusionMetrics::from_counts(threshold, tp, fp, tn, fn_)
}

/// Sweeps every distinct score; ties in F1 keep the higher threshold.
pub fn best_f1_threshold(scores: &[(f64, bool)]) -> Result<(f64, ConfusionMetrics)> {
    if !scores.iter().any(|s| s.1) {
        return Err(Error::Undefined("best F1 needs at least one positive volume".into()));
    }
    let mut thresholds = sorted_desc(scores.iter().map(|s| s.0).collect());
    thresholds.dedup();
    let mut best: Option<ConfusionMetrics> = None;
    for t in thresholds {
        let m = confusion_at_threshold(scores, t);
        if best.is_none_or(|b| m.f1 > b.f1) {
            best = Some(m);
        }
    }
    let best = best.expect("at least one score");
    Ok((best.threshold, best))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
    /// Worker threads. Not serialized: results do not depend on it.
    #[serde(skip, default = "one_job")]
    pub jobs: usize,
    /// Redraws allowed when the statistic is undefined on a resample.
    pub max_retries: usize,
}

fn one_job() -> usize {
    1
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: 1000,
            level: 0.95,
            seed: 0,
            jobs: 1,
            max_retries: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// RNG for resample `index`: ChaCha8 seeded with `seed`, stream `index`.
/// Retries keep drawing from the same stream.
pub fn resample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Positions of the percentile bounds in `n` sorted resample values.
pub fn percentile_indices(n: usize, level: f64) -> (usize, usize) {
    let alpha = 0.5 * (1.0 - level);
    let lo = ((alpha * n as f64) + 1e-9).floor() as usize;
    let hi = (((1.0 - alpha) * n as f64) - 1e-9).ceil() as usize;
    (lo.min(n - 1), hi.saturating_sub(1).clamp(lo.min(n - 1), n - 1))
}

/// Percentile bootstrap over items (volumes), with replacement.
pub fn bootstrap_ci<T, F>(data: &[T], statistic: F, config: &BootstrapConfig) -> Result<ConfidenceInterval>
where
    T: Sync,
    F: Fn(&[&T]) -> Option<f64> + Sync,
{
    if data.is_empty() {
        return Err(Error::InvalidParameter("bootstrap needs a nonempty dataset".into()));
    }
    if config.n_resamples == 0 || !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::InvalidParameter(
            "bootstrap needs n_resamples >= 1 and level in (0, 1)".into(),
        ));
    }
    let full: Vec<&T> = data.iter().collect();
    let estimate = statistic(&full).ok_or_else(|| Error::Undefined("statistic undefined on the full dataset".into()))?;
    let n = data.len();
    let one = |i: usize| -> Result<f64> {
        let mut rng = resample_rng(config.seed, i);
        let mut sample: Vec<&T> = Vec::with_capacity(n);
        for _ in 0..=config.max_retries {
            sample.clear();
            sample.extend((0..n).map(|_| &data[rng.random_range(0..n)]));
            if let Some(v) = statistic(&sample) {
                return Ok(v);
            }
        }
        Err(Error::Undefined(format!(
            "statistic undefined on resample {i} after {} retries",
            config.max_retries
        )))
    };
    let mut values: Vec<f64> = if config.jobs <= 1 {
        (0..config.n_resamples).map(one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
        pool.install(|| (0..config.n_resamples).into_par_iter().map(one).collect::<Result<_>>())?
    };
    values.sort_by(f64::total_cmp);
    let (lo, hi) = percentile_indices(values.len(), config.level);
    Ok(ConfidenceInterval {
        estimate,
        lo: values[lo],
        hi: values[hi],
    })
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(n + 1);
    t.push(0.0);
    let mut acc = 0.0;
    for k in 1..=n {
        acc += (k as f64).ln();
        t.push(acc);
    }
    t
}

/// Two-sided Fisher exact test on `[[a, b], [c, d]]`: total probability of
/// the tables with the observed margins that are no more likely than the
/// observed one.
pub fn fisher_exact(table: [[u64; 2]; 2]) -> Result<f64> {
    let [[a, b], [c, d]] = table;
    let n = a + b + c + d;
    if n == 0 {
        return Err(Error::InvalidParameter("Fisher test on an all-zero table".into()));
    }
    let (r1, c1) = (a + b, a + c);
    let c2 = n - c1;
    let lf = ln_factorials(n as usize);
    let lf = |k: u64| lf[k as usize];
    let ln_choose = |m: u64, k: u64| lf(m) - lf(k) - lf(m - k);
    let ln_denominator = ln_choose(n, r1);
    let ln_p = |x: u64| ln_choose(c1, x) + ln_choose(c2, r1 - x) - ln_denominator;
    let lo = r1.saturating_sub(c2);
    let hi = r1.min(c1);
    let observed = ln_p(a);
    // slack so that mathematically tied tables are all counted
    let cutoff = observed + 1e-12;
    let peak = (lo..=hi).map(ln_p).fold(f64::NEG_INFINITY, f64::max);
    // ratio of sums, so that counting every table gives exactly 1
    let (mut kept, mut total) = (0.0, 0.0);
    for x in lo..=hi {
        let lp = ln_p(x);
        let w = (lp - peak).exp();
        total += w;
        if lp <= cutoff {
            kept += w;
        }
    }
    Ok((kept / total).min(1.0))
}

/// Sensitivity at one lesion-level operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointSensitivity {
    pub fppv: f64,
    pub threshold: Option<f64>,
    pub sensitivity: f64,
    pub ci: Option<ConfidenceInterval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub key: String,
    pub value: String,
    pub n_lesions: usize,
    pub operating_points: Vec<OperatingPointSensitivity>,
}

fn stratum_sensitivity(volumes: &[&VolumeSummary], key: &str, value: &str, threshold: Option<f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut hit = 0usize;
    for v in volumes {
        for (p, labels) in v.lesion_hit_probs.iter().zip(&v.lesion_labels) {
            if labels.get(key).map(String::as_str) == Some(value) {
                n += 1;
                if let (Some(p), Some(t)) = (p, threshold) {
                    if *p >= t {
                        hit += 1;
                    }
                }
            }
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Per-stratum lesion sensitivity at thresholds fixed from the global FROC.
/// `operating_points` pairs each FPPV with its global threshold.
pub fn stratified_report(
    volumes: &[VolumeSummary],
    keys: &[String],
    operating_points: &[(f64, Option<f64>)],
    bootstrap: Option<&BootstrapConfig>,
) -> Result<Vec<StratumReport>> {
    let mut strata: BTreeMap<(String, String), usize> = BTreeMap::new();
    for v in volumes {
        for labels in &v.lesion_labels {
            for key in keys {
                let value = labels.get(key).ok_or_else(|| Error::MissingLabel(key.clone()))?;
                *strata.entry((key.clone(), value.clone())).or_default() += 1;
            }
        }
    }
    let all: Vec<&VolumeSummary> = volumes.iter().collect();
    let mut out = Vec::new();
    // keys in the requested order, values sorted
    for key in keys {
        for ((k, value), &n_lesions) in strata.range((key.clone(), String::new())..) {
            if k != key {
                break;
            }
            let mut ops = Vec::new();
            for &(fppv, threshold) in operating_points {
                let sensitivity = stratum_sensitivity(&all, key, value, threshold).unwrap_or(0.0);
                let ci = match bootstrap {
                    Some(cfg) => Some(bootstrap_ci(
                        volumes,
                        |s: &[&VolumeSummary]| stratum_sensitivity(s, key, value, threshold),
                        cfg,
                    )?),
                    None => None,
                };
                ops.push(OperatingPointSensitivity {
                    fppv,
                    threshold,
                    sensitivity,
                    ci,
                });
            }
            out.push(StratumReport {
                key: key.clone(),
                value: value.clone(),
                n_lesions,
                operating_points: ops,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub fppv_grid: Vec<f64>,
    /// FPPVs at which fixed-threshold and stratified metrics are reported.
    pub operating_points: Vec<f64>,
    pub bootstrap: BootstrapConfig,
    pub strata_keys: Vec<String>,
    /// Skip all confidence intervals.
    pub skip_ci: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fppv_grid: FPPV_GRID.to_vec(),
            operating_points: vec![0.25, 1.0],
            bootstrap: BootstrapConfig::default(),
            strata_keys: vec!["size_class".into(), "location".into(), "site".into(), "sah".into()],
            skip_ci: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedThresholdMetrics {
    pub name: String,
    pub threshold: f64,
    /// Lesion-level false positives per volume at this threshold.
    pub fppv: f64,
    pub metrics: ConfusionMetrics,
    pub accuracy_ci: Option<ConfidenceInterval>,
    pub sensitivity_ci: Option<ConfidenceInterval>,
    pub specificity_ci: Option<ConfidenceInterval>,
    pub f1_ci: Option<ConfidenceInterval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub volume_id: String,
    pub score: f64,
    pub has_lesion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_volumes: usize,
    pub n_lesions: usize,
    pub froc: FrocCurve,
    pub fppv_grid: Vec<f64>,
    pub avg_sensitivity: f64,
    pub avg_sensitivity_ci: Option<ConfidenceInterval>,
    pub sensitivity_at: Vec<OperatingPointSensitivity>,
    pub roc: Option<RocCurve>,
    pub auc_ci: Option<ConfidenceInterval>,
    pub fixed_threshold_metrics: Vec<FixedThresholdMetrics>,
    pub strata: Vec<StratumReport>,
    pub volume_scores: Vec<VolumeScore>,
    pub bootstrap: BootstrapConfig,
}

fn scores_of(volumes: &[&VolumeSummary]) -> Vec<(f64, bool)> {
    volumes.iter().map(|v| (v.score, v.has_lesion())).collect()
}

fn fppv_at(volumes: &[&VolumeSummary], threshold: f64) -> f64 {
    let n: usize = volumes
        .iter()
        .map(|v| v.fp_probs.iter().filter(|&&p| p >= threshold).count())
        .sum();
    n as f64 / volumes.len() as f64
}

pub fn evaluate(records: &[VolumeRecord], config: &EvalConfig) -> Result<EvaluationReport> {
    let summaries: Vec<VolumeSummary> = records.iter().map(summarize).collect();
    let all: Vec<&VolumeSummary> = summaries.iter().collect();
    let curve = froc_from_summaries(&all)?;
    let boot = (!config.skip_ci).then_some(&config.bootstrap);
    let grid = config.fppv_grid.clone();

    let avg = avg_sensitivity(&curve, &grid);
    let avg_ci = boot
        .map(|cfg| {
            bootstrap_ci(
                &summaries,
                |s: &[&VolumeSummary]| froc_from_summaries(s).ok().map(|c| avg_sensitivity(&c, &grid)),
                cfg,
            )
        })
        .transpose()?;

    let mut sensitivity_at = Vec::new();
    for &fppv in &config.operating_points {
        let ci = boot
            .map(|cfg| {
                bootstrap_ci(
                    &summaries,
                    |s: &[&VolumeSummary]| froc_from_summaries(s).ok().map(|c| sensitivity_at_fppv(&c, fppv)),
                    cfg,
                )
            })
            .transpose()?;
        sensitivity_at.push(OperatingPointSensitivity {
            fppv,
            threshold: threshold_for_operating_point(&curve, fppv),
            sensitivity: sensitivity_at_fppv(&curve, fppv),
            ci,
        });
    }

    let scores = scores_of(&all);
    let roc = roc_auc(&scores).ok();
    let auc_ci = match (&roc, boot) {
        (Some(_), Some(cfg)) => Some(bootstrap_ci(
            &summaries,
            |s: &[&VolumeSummary]| auc_rank(&scores_of(s)).ok(),
            cfg,
        )?),
        _ => None,
    };

    let mut thresholds: Vec<(String, f64)> = sensitivity_at
        .iter()
        .filter_map(|op| op.threshold.map(|t| (format!("{} FPPV", op.fppv), t)))
        .collect();
    if let Ok((t, _)) = best_f1_threshold(&scores) {
        thresholds.push(("best F1".to_string(), t));
    }
    let mut fixed = Vec::new();
    for (name, threshold) in thresholds {
        let metric_ci = |pick: fn(&ConfusionMetrics) -> f64| -> Result<Option<ConfidenceInterval>> {
            boot.map(|cfg| {
                bootstrap_ci(
                    &summaries,
                    |s: &[&VolumeSummary]| Some(pick(&confusion_at_threshold(&scores_of(s), threshold))),
                    cfg,
                )
            })
            .transpose()
        };
        fixed.push(FixedThresholdMetrics {
            name,
            threshold,
            fppv: fppv_at(&all, threshold),
            metrics: confusion_at_threshold(&scores, threshold),
            accuracy_ci: metric_ci(|m| m.accuracy)?,
            sensitivity_ci: metric_ci(|m| m.sensitivity)?,
            specificity_ci: metric_ci(|m| m.specificity)?,
            f1_ci: metric_ci(|m| m.f1)?,
        });
    }

    let ops: Vec<(f64, Option<f64>)> = sensitivity_at.iter().map(|o| (o.fppv, o.threshold)).collect();
    let strata = stratified_report(&summaries, &config.strata_keys, &ops, boot)?;

    Ok(EvaluationReport {
        n_volumes: curve.n_volumes,
        n_lesions: curve.n_lesions,
        froc: curve,
        fppv_grid: grid,
        avg_sensitivity: avg,
        avg_sensitivity_ci: avg_ci,
        sensitivity_at,
        roc,
        auc_ci,
        fixed_threshold_metrics: fixed,
        strata,
        volume_scores: summaries
            .iter()
            .map(|s| VolumeScore {
                volume_id: s.volume_id.clone(),
                score: s.score,
                has_lesion: s.has_lesion(),
            })
            .collect(),
        bootstrap: config.bootstrap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherComparison {
    pub table: [[u64; 2]; 2],
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointComparison {
    pub name: String,
    pub threshold_a: f64,
    pub threshold_b: f64,
    /// Rows are models A and B; columns are correct and incorrect calls.
    pub accuracy: FisherComparison,
    pub sensitivity: FisherComparison,
    pub specificity: FisherComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub operating_points: Vec<OperatingPointComparison>,
    pub froc_a: FrocCurve,
    pub froc_b: FrocCurve,
    pub avg_sensitivity_a: f64,
    pub avg_sensitivity_b: f64,
}

fn fisher_rows(a: (u64, u64), b: (u64, u64)) -> Result<FisherComparison> {
    let table = [[a.0, a.1], [b.0, b.1]];
    let p_value = if a.0 + a.1 + b.0 + b.1 == 0 {
        1.0
    } else {
        fisher_exact(table)?
    };
    Ok(FisherComparison { table, p_value })
}

/// Fisher tests of patient-level correctness between two reports on the
/// same volumes, for every fixed-threshold row present in both.
pub fn compare_reports(a: &EvaluationReport, b: &EvaluationReport) -> Result<Comparison> {
    let ids = |r: &EvaluationReport| -> BTreeSet<String> { r.volume_scores.iter().map(|v| v.volume_id.clone()).collect() };
    let (ia, ib) = (ids(a), ids(b));
    if ia != ib || a.volume_scores.len() != b.volume_scores.len() {
        let only_a: Vec<_> = ia.difference(&ib).cloned().collect();
        let only_b: Vec<_> = ib.difference(&ia).cloned().collect();
        return Err(Error::Inconsistent(format!(
            "reports cover different volumes; only in A: {only_a:?}, only in B: {only_b:?}"
        )));
    }
    let truth_b: BTreeMap<&str, bool> = b.volume_scores.iter().map(|v| (v.volume_id.as_str(), v.has_lesion)).collect();
    if let Some(v) = a.volume_scores.iter().find(|v| truth_b[v.volume_id.as_str()] != v.has_lesion) {
        return Err(Error::Inconsistent(format!(
            "volume {} has different ground truth in the two reports",
            v.volume_id
        )));
    }
    let tally = |r: &EvaluationReport, threshold: f64| {
        let (mut all, mut pos, mut neg) = ((0, 0), (0, 0), (0, 0));
        for v in &r.volume_scores {
            let correct = (v.score >= threshold) == v.has_lesion;
            let bucket = if v.has_lesion { &mut pos } else { &mut neg };
            if correct {
                all.0 += 1;
                bucket.0 += 1;
            } else {
                all.1 += 1;
                bucket.1 += 1;
            }
        }
        (all, pos, neg)
    };
    let mut operating_points = Vec::new();
    for fa in &a.fixed_threshold_metrics {
        let Some(fb) = b.fixed_threshold_metrics.iter().find(|m| m.name == fa.name) else {
            continue;
        };
        let (all_a, pos_a, neg_a) = tally(a, fa.threshold);
        let (all_b, pos_b, neg_b) = tally(b, fb.threshold);
        operating_points.push(OperatingPointComparison {
            name: fa.name.clone(),
            threshold_a: fa.threshold,
            threshold_b: fb.threshold,
            accuracy: fisher_rows(all_a, all_b)?,
            sensitivity: fisher_rows(pos_a, pos_b)?,
            specificity: fisher_rows(neg_a, neg_b)?,
        });
    }
    Ok(Comparison {
        operating_points,
        froc_a: a.froc.clone(),
        froc_b: b.froc.clone(),
        avg_sensitivity_a: a.avg_sensitivity,
        avg_sensitivity_b: b.avg_sensitivity,
    })
}
