//! Evaluation protocols: framewise MSE, Frame-AP, Average Progress
//! Precision (APP) and Video-AP, with the shared greedy matcher and
//! all-point average precision.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tube::{progress_targets, spatial_iou, tube_iou, BoundingBox, Tube};
use crate::TubeSample;

/// Video-AP thresholds.
pub const VIDEO_AP_THRESHOLDS: [f64; 7] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

/// `(start, end)` progress windows of the partial-observation grid.
pub const PARTIAL_WINDOWS: [(f64, f64); 10] = [
    (0.0, 0.25),
    (0.0, 0.5),
    (0.0, 0.75),
    (0.0, 1.0),
    (0.25, 0.5),
    (0.25, 0.75),
    (0.25, 1.0),
    (0.5, 0.75),
    (0.5, 1.0),
    (0.75, 1.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub iou_threshold: f64,
    pub progress_margin: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            progress_margin: 1.0,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.progress_margin) {
            return Err(Error::InvalidConfig(format!(
                "progress margin {} outside [0, 1]",
                self.progress_margin
            )));
        }
        Ok(())
    }
}

/// Area under the precision/recall curve of a ranked detection list, with
/// precision made monotone from the right (all-point interpolation).
/// `None` when there is no ground truth.
pub fn average_precision(ranked_tp: &[bool], n_ground_truth: usize) -> Option<f64> {
    if n_ground_truth == 0 {
        return None;
    }
    let mut tp = 0usize;
    let points: Vec<(f64, f64, bool)> = ranked_tp
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            (
                tp as f64 / (k + 1) as f64,
                tp as f64 / n_ground_truth as f64,
                hit,
            )
        })
        .collect();
    let mut envelope = 0.0f64;
    let mut interpolated = vec![0.0; points.len()];
    for (k, &(p, _, _)) in points.iter().enumerate().rev() {
        envelope = envelope.max(p);
        interpolated[k] = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(_, r, hit)) in points.iter().enumerate() {
        if hit {
            ap += (r - prev_recall) * interpolated[k];
            prev_recall = r;
        }
    }
    Some(ap.clamp(0.0, 1.0))
}

/// Greedy score-ordered matching. Each detection, from the highest score
/// down (ties in input order), takes the unmatched ground truth of its group
/// with the highest overlap `>= tau` (ties to the lower index). Returns the
/// ranking and, per detection, the matched ground truth and overlap.
pub fn greedy_match<'a, K, D, G>(
    detections: &'a [D],
    truths: &'a [G],
    det_key: impl Fn(&'a D) -> K,
    truth_key: impl Fn(&'a G) -> K,
    score: impl Fn(&D) -> f64,
    overlap: impl Fn(&D, &G) -> f64,
    tau: f64,
) -> (Vec<usize>, Vec<Option<(usize, f64)>>)
where
    K: Eq + Hash,
{
    let mut groups: HashMap<K, Vec<usize>> = HashMap::new();
    for (i, g) in truths.iter().enumerate() {
        groups.entry(truth_key(g)).or_default().push(i);
    }
    let mut ranking: Vec<usize> = (0..detections.len()).collect();
    ranking.sort_by(|&a, &b| score(&detections[b]).total_cmp(&score(&detections[a])));

    let mut taken = vec![false; truths.len()];
    let mut assignment = vec![None; detections.len()];
    for &d in &ranking {
        let Some(candidates) = groups.get(&det_key(&detections[d])) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for &g in candidates {
            if taken[g] {
                continue;
            }
            let o = overlap(&detections[d], &truths[g]);
            if o >= tau && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        assignment[d] = best;
    }
    (ranking, assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassValue {
    pub class_id: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub detection: usize,
    pub ground_truth: Option<usize>,
    pub iou: f64,
    pub progress_error: Option<f64>,
    pub true_positive: bool,
}

/// Per-class AP, their mean, and the matching that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub per_class: Vec<ClassValue>,
    pub mean: f64,
    /// Classes that have detections but no ground truth (AP undefined).
    pub excluded_classes: Vec<u32>,
    pub matches: Vec<MatchRecord>,
}

fn summarize_ap(
    det_classes: &[u32],
    truth_classes: &[u32],
    ranking: &[usize],
    tp: &[bool],
    matches: Vec<MatchRecord>,
) -> ApResult {
    let mut n_gt: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in truth_classes {
        *n_gt.entry(c).or_default() += 1;
    }
    let mut ranked: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    for &d in ranking {
        ranked.entry(det_classes[d]).or_default().push(tp[d]);
    }
    let per_class: Vec<ClassValue> = n_gt
        .iter()
        .map(|(&c, &n)| ClassValue {
            class_id: c,
            value: average_precision(ranked.get(&c).map_or(&[][..], |v| v), n).unwrap(),
        })
        .collect();
    let excluded_classes = ranked.keys().filter(|c| !n_gt.contains_key(c)).copied().collect();
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.value).sum::<f64>() / per_class.len() as f64
    };
    ApResult {
        per_class,
        mean,
        excluded_classes,
        matches,
    }
}

/// A detected box in one frame, with the progress predicted for it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetection {
    pub video_id: String,
    pub frame: u32,
    pub class_id: u32,
    pub bbox: BoundingBox,
    pub score: f64,
    pub progress: Option<f64>,
}

/// An annotated box in one frame with its progress target.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub video_id: String,
    pub frame: u32,
    pub class_id: u32,
    pub bbox: BoundingBox,
    pub progress: f64,
}

/// Explodes detection tubes into per-frame boxes scored by their tube.
pub fn frame_detections(tubes: &[Tube]) -> Vec<FrameDetection> {
    tubes
        .iter()
        .flat_map(|t| {
            t.boxes.iter().enumerate().map(move |(i, b)| FrameDetection {
                video_id: t.video_id.clone(),
                frame: t.start_frame + i as u32,
                class_id: t.class_id,
                bbox: *b,
                score: t.score,
                progress: t.progress.as_ref().map(|p| p[i]),
            })
        })
        .collect()
}

pub fn frame_truths(tubes: &[Tube]) -> Vec<FrameTruth> {
    tubes
        .iter()
        .flat_map(|t| {
            let targets = progress_targets(t);
            t.boxes
                .iter()
                .zip(targets.into_inner())
                .enumerate()
                .map(move |(i, (b, p))| FrameTruth {
                    video_id: t.video_id.clone(),
                    frame: t.start_frame + i as u32,
                    class_id: t.class_id,
                    bbox: *b,
                    progress: p,
                })
        })
        .collect()
}

fn frame_eval(
    detections: &[FrameDetection],
    truths: &[FrameTruth],
    tau: f64,
    margin: Option<f64>,
) -> Result<ApResult> {
    MatchParams {
        iou_threshold: tau,
        progress_margin: margin.unwrap_or(1.0),
    }
    .validate()?;
    if margin.is_some() {
        if let Some(i) = detections.iter().position(|d| d.progress.is_none()) {
            return Err(Error::MissingPredictions(format!(
                "detection {i} ({} frame {}) has no progress",
                detections[i].video_id, detections[i].frame
            )));
        }
    }
    let (ranking, assignment) = greedy_match(
        detections,
        truths,
        |d| (d.video_id.as_str(), d.frame, d.class_id),
        |g| (g.video_id.as_str(), g.frame, g.class_id),
        |d| d.score,
        |d, g| spatial_iou(&d.bbox, &g.bbox),
        tau,
    );
    let mut tp = vec![false; detections.len()];
    let matches = assignment
        .iter()
        .enumerate()
        .map(|(d, a)| {
            let progress_error = match (a, detections[d].progress) {
                (Some((g, _)), Some(p)) => Some((p - truths[*g].progress).abs()),
                _ => None,
            };
            // a ground truth consumed by a detection outside the margin stays consumed
            tp[d] = a.is_some() && margin.is_none_or(|m| progress_error.unwrap() <= m);
            MatchRecord {
                detection: d,
                ground_truth: a.map(|(g, _)| g),
                iou: a.map_or(0.0, |(_, o)| o),
                progress_error,
                true_positive: tp[d],
            }
        })
        .collect();
    let det_classes: Vec<u32> = detections.iter().map(|d| d.class_id).collect();
    let truth_classes: Vec<u32> = truths.iter().map(|g| g.class_id).collect();
    Ok(summarize_ap(&det_classes, &truth_classes, &ranking, &tp, matches))
}

/// Per-class Frame-AP at IoU threshold `tau`.
pub fn frame_ap(detections: &[FrameDetection], truths: &[FrameTruth], tau: f64) -> Result<ApResult> {
    frame_eval(detections, truths, tau, None)
}

/// Average Progress Precision: Frame-AP where a true positive must also
/// predict progress within `margin` of the target. Matching is decided by
/// overlap alone, so the result is non-decreasing in `margin` and equals
/// Frame-AP at `margin = 1`.
pub fn app(
    detections: &[FrameDetection],
    truths: &[FrameTruth],
    tau: f64,
    margin: f64,
) -> Result<ApResult> {
    frame_eval(detections, truths, tau, Some(margin))
}

/// Video-AP at one tube-IoU threshold.
pub fn video_ap_at(detections: &[Tube], truths: &[Tube], tau: f64) -> Result<ApResult> {
    MatchParams {
        iou_threshold: tau,
        progress_margin: 1.0,
    }
    .validate()?;
    let (ranking, assignment) = greedy_match(
        detections,
        truths,
        |d| (d.video_id.as_str(), d.class_id),
        |g| (g.video_id.as_str(), g.class_id),
        |d| d.score,
        tube_iou,
        tau,
    );
    let tp: Vec<bool> = assignment.iter().map(Option::is_some).collect();
    let matches = assignment
        .iter()
        .enumerate()
        .map(|(d, a)| MatchRecord {
            detection: d,
            ground_truth: a.map(|(g, _)| g),
            iou: a.map_or(0.0, |(_, o)| o),
            progress_error: None,
            true_positive: a.is_some(),
        })
        .collect();
    let det_classes: Vec<u32> = detections.iter().map(|d| d.class_id).collect();
    let truth_classes: Vec<u32> = truths.iter().map(|g| g.class_id).collect();
    Ok(summarize_ap(&det_classes, &truth_classes, &ranking, &tp, matches))
}

/// Video-AP for each threshold.
pub fn video_ap(detections: &[Tube], truths: &[Tube], thresholds: &[f64]) -> Result<Vec<(f64, ApResult)>> {
    thresholds
        .iter()
        .map(|&t| Ok((t, video_ap_at(detections, truths, t)?)))
        .collect()
}

/// Predictions and targets for one tube.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSequence<'a> {
    pub class_id: u32,
    pub predictions: &'a [f64],
    pub targets: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseResult {
    pub per_class: Vec<ClassValue>,
    /// Unweighted mean over classes.
    pub mean: f64,
    pub frames: usize,
}

/// Squared error pooled over frames per class, then averaged over classes.
pub fn framewise_mse(items: &[ScoredSequence<'_>]) -> Result<MseResult> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (i, s) in items.iter().enumerate() {
        if s.predictions.len() != s.targets.len() {
            return Err(Error::MissingPredictions(format!(
                "tube {i}: {} predictions for {} frames",
                s.predictions.len(),
                s.targets.len()
            )));
        }
        let e = acc.entry(s.class_id).or_default();
        for (p, t) in s.predictions.iter().zip(s.targets) {
            e.0 += (p - t).powi(2);
            e.1 += 1;
        }
    }
    let per_class: Vec<ClassValue> = acc
        .iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(&c, &(sum, n))| ClassValue {
            class_id: c,
            value: sum / n as f64,
        })
        .collect();
    if per_class.is_empty() {
        return Err(Error::MissingPredictions("no frames to evaluate".into()));
    }
    let mean = per_class.iter().map(|c| c.value).sum::<f64>() / per_class.len() as f64;
    Ok(MseResult {
        per_class,
        mean,
        frames: acc.values().map(|(_, n)| n).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMse {
    pub lo: f64,
    pub hi: f64,
    pub mse: Option<f64>,
    pub count: usize,
}

/// MSE grouped by target progress into `bins` equal intervals over [0, 1].
pub fn mse_by_progress(items: &[ScoredSequence<'_>], bins: usize) -> Vec<BinMse> {
    let bins = bins.max(1);
    let mut acc = vec![(0.0, 0usize); bins];
    for s in items {
        for (p, t) in s.predictions.iter().zip(s.targets) {
            let b = ((t * bins as f64) as usize).min(bins - 1);
            acc[b].0 += (p - t).powi(2);
            acc[b].1 += 1;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(b, (sum, n))| BinMse {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            mse: (n > 0).then(|| sum / n as f64),
            count: n,
        })
        .collect()
}

/// Frames of a linear-target tube whose target lies in `[start, end]`.
pub fn progress_window(targets: &[f64], start: f64, end: f64) -> Option<std::ops::Range<usize>> {
    const EPS: f64 = 1e-12;
    let lo = targets.iter().position(|&t| t >= start - EPS)?;
    let hi = targets.iter().rposition(|&t| t <= end + EPS)?;
    (lo <= hi).then_some(lo..hi + 1)
}

/// MSE on partially observed tubes: each tube is cut to the frames whose
/// target lies in `[start, end]`, the predictor sees only that window, and
/// its output is scored against the original (not rescaled) targets.
pub fn partial_tube_mse<F>(
    predictor: F,
    samples: &[TubeSample],
    start: f64,
    end: f64,
) -> Result<MseResult>
where
    F: Fn(&TubeSample) -> Result<Vec<f64>>,
{
    if !(0.0 <= start && start < end && end <= 1.0) {
        return Err(Error::EmptyWindow { start, end });
    }
    let mut windows = Vec::new();
    let mut preds = Vec::new();
    for s in samples {
        let Some(w) = progress_window(&s.targets, start, end) else {
            continue;
        };
        let sub = s.restrict(w);
        preds.push(predictor(&sub)?);
        windows.push(sub);
    }
    if windows.is_empty() {
        return Err(Error::EmptyWindow { start, end });
    }
    let items: Vec<ScoredSequence<'_>> = windows
        .iter()
        .zip(&preds)
        .map(|(w, p)| ScoredSequence {
            class_id: w.class_id,
            predictions: p,
            targets: &w.targets,
        })
        .collect();
    framewise_mse(&items)
}

/// One block of a report: a metric value per class and their mean, under
/// one setting (a threshold, a margin, a window).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub label: String,
    pub parameter: Option<f64>,
    pub per_class: Vec<ClassValue>,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_classes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub sections: Vec<ReportSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub progress_bins: Vec<BinMse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub matches: Vec<MatchRecord>,
}

impl EvalReport {
    pub fn from_ap(metric: &str, label: impl Into<String>, parameter: f64, r: ApResult) -> Self {
        let mut rep = Self {
            metric: metric.into(),
            sections: vec![],
            progress_bins: vec![],
            matches: vec![],
        };
        rep.push_ap(label, parameter, r);
        rep
    }

    pub fn push_ap(&mut self, label: impl Into<String>, parameter: f64, r: ApResult) {
        self.sections.push(ReportSection {
            label: label.into(),
            parameter: Some(parameter),
            per_class: r.per_class,
            mean: r.mean,
            excluded_classes: r.excluded_classes,
        });
        if self.matches.is_empty() {
            self.matches = r.matches;
        }
    }

    pub fn push_mse(&mut self, label: impl Into<String>, parameter: Option<f64>, r: MseResult) {
        self.sections.push(ReportSection {
            label: label.into(),
            parameter,
            per_class: r.per_class,
            mean: r.mean,
            excluded_classes: vec![],
        });
    }

    /// Fixed-width text table, one row per class and a mean row per section.
    pub fn to_table(&self, class_names: &BTreeMap<u32, String>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.metric);
        let classes: BTreeSet<u32> = self
            .sections
            .iter()
            .flat_map(|s| s.per_class.iter().map(|c| c.class_id))
            .collect();
        let _ = write!(out, "{:<24}", "class");
        for s in &self.sections {
            let _ = write!(out, " {:>12}", s.label);
        }
        out.push('\n');
        for c in &classes {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let _ = write!(out, "{name:<24}");
            for s in &self.sections {
                match s.per_class.iter().find(|v| v.class_id == *c) {
                    Some(v) => write!(out, " {:>12.4}", v.value),
                    None => write!(out, " {:>12}", "-"),
                }
                .unwrap();
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<24}", "mean");
        for s in &self.sections {
            let _ = write!(out, " {:>12.4}", s.mean);
        }
        out.push('\n');
        let excluded: BTreeSet<u32> = self
            .sections
            .iter()
            .flat_map(|s| s.excluded_classes.iter().copied())
            .collect();
        if !excluded.is_empty() {
            let _ = writeln!(out, "excluded (no ground truth): {excluded:?}");
        }
        if !self.progress_bins.is_empty() {
            let _ = writeln!(out, "\n{:<14} {:>10} {:>8}", "progress", "mse", "frames");
            for b in &self.progress_bins {
                let mse = b.mse.map_or("-".to_string(), |v| format!("{v:.4}"));
                let _ = writeln!(out, "[{:.2}, {:.2}]   {:>10} {:>8}", b.lo, b.hi, mse, b.count);
            }
        }
        out
    }

    /// `label,parameter,mean` rows, e.g. mAPP against the margin.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("label,parameter,mean\n");
        for sec in &self.sections {
            let p = sec.parameter.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{}", sec.label, p, sec.mean);
        }
        s
    }

    /// `lo,hi,mse,count` rows of the progress breakdown.
    pub fn bins_csv(&self) -> String {
        let mut s = String::from("lo,hi,mse,count\n");
        for b in &self.progress_bins {
            let mse = b.mse.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{}", b.lo, b.hi, mse, b.count);
        }
        s
    }
}
