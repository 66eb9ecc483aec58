//! Boxes, tubes and datasets, with the overlap measures used for matching.

use std::collections::{BTreeMap, HashSet};
use std::ops::Deref;

use crate::error::{Error, Result};

/// Axis-aligned box in frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union of two boxes.
pub fn spatial_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Per-frame progress values aligned with a tube, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProgressSequence(Vec<f64>);

impl ProgressSequence {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::ProgressOutOfRange { index, value });
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for ProgressSequence {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A temporally contiguous run of boxes for one action instance (or one
/// detection hypothesis). Frame `start_frame + i` carries `boxes[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub video_id: String,
    pub class_id: u32,
    pub start_frame: u32,
    pub boxes: Vec<BoundingBox>,
    pub score: f64,
    /// Predicted (or annotated) per-frame progress, when attached.
    pub progress: Option<ProgressSequence>,
}

impl Tube {
    pub fn new(
        video_id: impl Into<String>,
        class_id: u32,
        start_frame: u32,
        boxes: Vec<BoundingBox>,
        score: f64,
    ) -> Result<Self> {
        let tube = Self {
            video_id: video_id.into(),
            class_id,
            start_frame,
            boxes,
            score,
            progress: None,
        };
        tube.validate()?;
        Ok(tube)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::InvalidTube("tube has no boxes".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidTube(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        if (self.start_frame as u64) + (self.boxes.len() as u64) - 1 > u32::MAX as u64 {
            return Err(Error::InvalidTube("frame range overflows".into()));
        }
        if let Some(i) = self.boxes.iter().position(|b| !b.is_valid()) {
            let b = self.boxes[i];
            return Err(Error::InvalidBox {
                x_min: b.x_min,
                y_min: b.y_min,
                x_max: b.x_max,
                y_max: b.y_max,
            });
        }
        if let Some(p) = &self.progress {
            if p.len() != self.boxes.len() {
                return Err(Error::LengthMismatch {
                    what: "progress values vs tube frames",
                    left: p.len(),
                    right: self.boxes.len(),
                });
            }
        }
        Ok(())
    }

    pub fn with_progress(mut self, progress: ProgressSequence) -> Result<Self> {
        if progress.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "progress values vs tube frames",
                left: progress.len(),
                right: self.len(),
            });
        }
        self.progress = Some(progress);
        Ok(self)
    }

    /// Inclusive last frame index.
    pub fn end_frame(&self) -> u32 {
        self.start_frame + self.boxes.len() as u32 - 1
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn box_at(&self, frame: u32) -> Option<&BoundingBox> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|i| self.boxes.get(i as usize))
    }

    /// Frames `[offset, offset + len)` of this tube, keeping any attached progress.
    pub fn slice(&self, offset: usize, len: usize) -> Tube {
        Tube {
            video_id: self.video_id.clone(),
            class_id: self.class_id,
            start_frame: self.start_frame + offset as u32,
            boxes: self.boxes[offset..offset + len].to_vec(),
            score: self.score,
            progress: self
                .progress
                .as_ref()
                .map(|p| ProgressSequence(p[offset..offset + len].to_vec())),
        }
    }
}

/// Linear progress target: frame `i` of an `n`-frame tube gets `i / (n - 1)`.
/// A single-frame tube is complete at its only frame.
pub fn progress_targets(tube: &Tube) -> ProgressSequence {
    linear_targets(tube.len())
}

pub fn linear_targets(len: usize) -> ProgressSequence {
    if len == 1 {
        return ProgressSequence(vec![1.0]);
    }
    let span = (len - 1) as f64;
    ProgressSequence((0..len).map(|i| i as f64 / span).collect())
}

/// Spatio-temporal IoU: temporal IoU of the frame ranges times the mean box
/// IoU over the temporally shared frames.
pub fn tube_iou(a: &Tube, b: &Tube) -> f64 {
    if a.video_id != b.video_id {
        return 0.0;
    }
    let lo = a.start_frame.max(b.start_frame);
    let hi = a.end_frame().min(b.end_frame());
    if lo > hi {
        return 0.0;
    }
    let inter = (hi - lo + 1) as f64;
    let union = (a.end_frame().max(b.end_frame()) - a.start_frame.min(b.start_frame) + 1) as f64;
    let spatial: f64 = (lo..=hi)
        .map(|f| spatial_iou(a.box_at(f).unwrap(), b.box_at(f).unwrap()))
        .sum::<f64>()
        / inter;
    (inter / union) * spatial
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub cyclic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoInfo {
    pub id: String,
    pub frame_count: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub classes: Vec<ClassInfo>,
    pub videos: Vec<VideoInfo>,
    /// Annotated action instances; their score is always 1.
    pub ground_truth: Vec<Tube>,
    pub detections: Vec<Tube>,
}

impl Dataset {
    pub fn class(&self, id: u32) -> Option<&ClassInfo> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn video(&self, id: &str) -> Option<&VideoInfo> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Checks header uniqueness and that every tube references a declared
    /// class and fits inside its video.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c.id) {
                return Err(Error::Validation(format!("duplicate class id {}", c.id)));
            }
        }
        let mut frames: BTreeMap<&str, u32> = BTreeMap::new();
        for v in &self.videos {
            if frames.insert(v.id.as_str(), v.frame_count).is_some() {
                return Err(Error::Validation(format!("duplicate video id `{}`", v.id)));
            }
        }
        let sets = [("ground_truth", &self.ground_truth), ("detections", &self.detections)];
        for (set, tubes) in sets {
            for (i, t) in tubes.iter().enumerate() {
                let name = format!("{set}[{i}]");
                t.validate()
                    .map_err(|e| Error::Validation(format!("tube {name}: {e}")))?;
                if !seen.contains(&t.class_id) {
                    return Err(Error::Validation(format!(
                        "tube {name}: undeclared class {}",
                        t.class_id
                    )));
                }
                let Some(&count) = frames.get(t.video_id.as_str()) else {
                    return Err(Error::Validation(format!(
                        "tube {name}: undeclared video `{}`",
                        t.video_id
                    )));
                };
                if t.end_frame() >= count {
                    return Err(Error::Validation(format!(
                        "tube {name}: frames {}..={} exceed video `{}` with {count} frames",
                        t.start_frame,
                        t.end_frame(),
                        t.video_id
                    )));
                }
                if set == "ground_truth" && t.score != 1.0 {
                    return Err(Error::Validation(format!(
                        "tube {name}: ground-truth score must be 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One scored, class-labelled box of a per-frame detector dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub class_id: u32,
    pub score: f64,
}

struct OpenTube {
    class_id: u32,
    start_frame: u32,
    last_frame: u32,
    boxes: Vec<BoundingBox>,
    scores: Vec<f64>,
}

impl OpenTube {
    fn close(self, video_id: &str) -> Tube {
        let score = self.scores.iter().sum::<f64>() / self.scores.len() as f64;
        Tube {
            video_id: video_id.to_string(),
            class_id: self.class_id,
            start_frame: self.start_frame,
            boxes: self.boxes,
            score: score.clamp(0.0, 1.0),
            progress: None,
        }
    }
}

/// Greedy frame-to-frame linker.
///
/// Open tubes, in creation order, take the unused same-class box of the next
/// frame with the highest IoU strictly above `link_iou_threshold` (ties go to
/// the higher score, then the lower box index). Tubes without a match close,
/// unused boxes open new tubes, and a gap in frame indices closes everything.
/// Tube score is the mean box score.
pub fn link_detections(
    video_id: &str,
    frames: &[(u32, Vec<ScoredBox>)],
    link_iou_threshold: f64,
) -> Vec<Tube> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&i| frames[i].0);

    let mut open: Vec<OpenTube> = Vec::new();
    let mut closed: Vec<Tube> = Vec::new();

    for idx in order {
        let (frame, boxes) = &frames[idx];
        let frame = *frame;
        let mut used = vec![false; boxes.len()];
        let mut still_open = Vec::with_capacity(open.len());

        for mut t in open.drain(..) {
            if t.last_frame.checked_add(1) != Some(frame) {
                closed.push(t.close(video_id));
                continue;
            }
            let last = *t.boxes.last().unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (j, b) in boxes.iter().enumerate() {
                if used[j] || b.class_id != t.class_id {
                    continue;
                }
                let iou = spatial_iou(&last, &b.bbox);
                if iou <= link_iou_threshold {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((k, best_iou)) => {
                        iou > best_iou || (iou == best_iou && b.score > boxes[k].score)
                    }
                };
                if better {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    t.boxes.push(boxes[j].bbox);
                    t.scores.push(boxes[j].score);
                    t.last_frame = frame;
                    still_open.push(t);
                }
                None => closed.push(t.close(video_id)),
            }
        }

        for (j, b) in boxes.iter().enumerate() {
            if !used[j] {
                still_open.push(OpenTube {
                    class_id: b.class_id,
                    start_frame: frame,
                    last_frame: frame,
                    boxes: vec![b.bbox],
                    scores: vec![b.score],
                });
            }
        }
        open = still_open;
    }
    closed.extend(open.into_iter().map(|t| t.close(video_id)));
    closed.sort_by_key(|t| (t.start_frame, t.class_id));
    closed
}
