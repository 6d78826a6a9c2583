//! Detection metrics: point-adjust, exhaustive best-F1 threshold sweep,
//! and scoring of a test series with a trained model.
//!
//! Scores exist only for timestamps with a full window behind them, so the
//! first `w − 1` test timestamps are excluded from all metrics.


use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{make_windows, LabelSeries, RawSeries};
use crate::error::{Error, Result};
use crate::model::{self, HifiConfig, LatentSampling};
use crate::params::ParamStore;

/// Per-timestamp anomaly scores aligned with their binary labels.
/// `scores[i]` belongs to original test timestamp `offset + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// First scored timestamp (w − 1 for stride-1 scoring).
    pub offset: usize,
}

impl ScoreSeries {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, offset: usize) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite score".into()));
        }
        Ok(ScoreSeries {
            scores,
            labels,
            offset,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// "timestamp score label" rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (s, l)) in self.scores.iter().zip(self.labels.iter()).enumerate() {
            out.push_str(&format!("{} {} {}\n", self.offset + i, s, l));
        }
        out
    }
}

/// Detection quality at one threshold, counts taken after point-adjust.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionResult {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl DetectionResult {
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionResult {
            threshold,
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// For every maximal run of label 1s, if any prediction inside the run is 1,
/// the whole run becomes 1. Predictions outside label runs are unchanged.
pub fn point_adjust(pred: &[u8], labels: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let mut out = pred.to_vec();
    let n = labels.len();
    let mut i = 0;
    while i < n {
        if labels[i] == 1 {
            let start = i;
            while i < n && labels[i] == 1 {
                i += 1;
            }
            if pred[start..i].iter().any(|&p| p == 1) {
                out[start..i].fill(1);
            }
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// Threshold rule: a timestamp is predicted anomalous when
/// `score >= threshold`.
pub fn metrics_at_threshold(s: &ScoreSeries, threshold: f64) -> Result<DetectionResult> {
    if !threshold.is_finite() {
        return Err(Error::Validation(format!(
            "threshold must be finite, got {threshold}"
        )));
    }
    let pred: Vec<u8> = s
        .scores
        .iter()
        .map(|&v| u8::from(v >= threshold))
        .collect();
    let adjusted = point_adjust(&pred, &s.labels)?;
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&p, &l) in adjusted.iter().zip(s.labels.iter()) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    Ok(DetectionResult::from_counts(threshold, tp, fp, fn_))
}

/// Candidate thresholds for the exhaustive sweep: every distinct score plus
/// a sentinel one above the maximum (the "predict nothing" point).
pub fn sweep_candidates(scores: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = scores.to_vec();
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c.dedup();
    let max = *c.last().unwrap();
    c.push(max + 1.0);
    c
}

/// Prefer higher F1, then higher precision, then the lower threshold.
fn better(a: &DetectionResult, b: &DetectionResult) -> bool {
    (a.f1, a.precision, -a.threshold) > (b.f1, b.precision, -b.threshold)
}

/// Exhaustive best-F1 search over all candidate thresholds.
///
/// Point-adjust makes this cheap: a label run counts fully as true
/// positives exactly when its maximum score clears the threshold, and false
/// positives are the label-0 scores clearing it, so every candidate is
/// evaluated from two sorted arrays instead of a full rescan.
///
/// When no threshold achieves a true positive (best F1 = 0), the sentinel
/// above the maximum is returned: the no-alarm report.
pub fn best_f1_sweep(s: &ScoreSeries) -> Result<DetectionResult> {
    if s.is_empty() {
        return Err(Error::Validation("empty score series".into()));
    }
    // segment max scores and lengths
    let mut seg_max: Vec<(f64, usize)> = Vec::new();
    let mut total_pos = 0usize;
    let n = s.len();
    let mut i = 0;
    while i < n {
        if s.labels[i] == 1 {
            let start = i;
            let mut m = f64::NEG_INFINITY;
            while i < n && s.labels[i] == 1 {
                m = m.max(s.scores[i]);
                i += 1;
            }
            seg_max.push((m, i - start));
            total_pos += i - start;
        } else {
            i += 1;
        }
    }
    // descending sort of segment maxima with cumulative covered length
    seg_max.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut seg_cum: Vec<(f64, usize)> = Vec::with_capacity(seg_max.len());
    let mut acc = 0usize;
    for (m, len) in &seg_max {
        acc += len;
        seg_cum.push((*m, acc));
    }
    // descending negative scores
    let mut neg: Vec<f64> = s
        .scores
        .iter()
        .zip(s.labels.iter())
        .filter(|(_, &l)| l == 0)
        .map(|(&v, _)| v)
        .collect();
    neg.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let count_ge = |sorted_desc: &[f64], thr: f64| -> usize {
        // number of entries >= thr in a descending array
        sorted_desc.partition_point(|&v| v >= thr)
    };

    let mut best: Option<DetectionResult> = None;
    for thr in sweep_candidates(&s.scores) {
        let covered = seg_cum.partition_point(|&(m, _)| m >= thr);
        let tp = if covered == 0 { 0 } else { seg_cum[covered - 1].1 };
        let fp = count_ge(&neg, thr);
        let fn_ = total_pos - tp;
        let r = DetectionResult::from_counts(thr, tp, fp, fn_);
        match &best {
            None => best = Some(r),
            Some(b) => {
                if better(&r, b) {
                    best = Some(r);
                }
            }
        }
    }
    let best = best.expect("at least one candidate");
    if best.f1 == 0.0 {
        let sentinel = *sweep_candidates(&s.scores).last().unwrap();
        return metrics_at_threshold(s, sentinel);
    }
    Ok(best)
}

/// How the latent sample is produced while scoring.
#[derive(Clone, Copy, Debug)]
pub enum ScoreLatents {
    /// One seeded draw per window (reference behavior).
    Sampled { eps_seed: u64 },
    /// z = mu everywhere; exact reproducibility across runs.
    Deterministic,
}

/// Score every stride-1 window of a normalized test series and align with
/// labels from index w − 1.
pub fn score_dataset(
    params: &ParamStore,
    cfg: &HifiConfig,
    test: &RawSeries,
    labels: &LabelSeries,
    latents: ScoreLatents,
) -> Result<ScoreSeries> {
    if test.len() < cfg.w {
        return Err(Error::Validation(format!(
            "test series of length {} is shorter than the window {}",
            test.len(),
            cfg.w
        )));
    }
    if labels.labels.len() != test.len() {
        return Err(Error::Shape(format!(
            "{} labels for a test series of length {}",
            labels.labels.len(),
            test.len()
        )));
    }
    let wb = make_windows(test, cfg.w, 1)?;
    let mut rng = match latents {
        ScoreLatents::Sampled { eps_seed } => Some(ChaCha8Rng::seed_from_u64(eps_seed)),
        ScoreLatents::Deterministic => None,
    };
    let mut scores = Vec::with_capacity(wb.len());
    let chunk_size = 256;
    let mut start = 0;
    while start < wb.len() {
        let end = (start + chunk_size).min(wb.len());
        let idx: Vec<usize> = (start..end).collect();
        let chunk = wb.subset(&idx);
        let latent = match rng.as_mut() {
            Some(r) => LatentSampling::Draw(r),
            None => LatentSampling::Mean,
        };
        let pass = model::forward(params, cfg, &chunk.windows, latent)?;
        let trace = pass.trace();
        scores.extend(model::anomaly_score(&trace, &chunk.windows));
        start = end;
    }
    let aligned: Vec<u8> = labels.labels[cfg.w - 1..].to_vec();
    ScoreSeries::new(scores, aligned, cfg.w - 1)
}

/// Render a detection report as key=value text.
pub fn report_text(r: &DetectionResult) -> String {
    format!(
        "f1_best = {}\nprecision = {}\nrecall = {}\nthreshold = {}\ntp = {}\nfp = {}\nfn = {}\n",
        r.f1, r.precision, r.recall, r.threshold, r.tp, r.fp, r.fn_
    )
}
