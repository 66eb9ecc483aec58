//! JSON annotation files: class table, video frame counts, ground-truth and
//! detection tubes with optional per-frame progress.
//!
//! The writer's output is canonical (fixed key order, shortest round-trip
//! float formatting), so `write(parse(write(d))) == write(d)` byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tube::{BoundingBox, ClassInfo, Dataset, ProgressSequence, Tube, VideoInfo};

pub const FORMAT: &str = "progress-tubes/annotations";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    classes: Vec<ClassRecord>,
    videos: Vec<VideoRecord>,
    ground_truth: Vec<TubeRecord>,
    detections: Vec<TubeRecord>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassRecord {
    id: u32,
    name: String,
    cyclic: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoRecord {
    id: String,
    frame_count: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TubeRecord {
    video_id: String,
    class_id: u32,
    score: f64,
    start_frame: u32,
    boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    progress: Option<Vec<f64>>,
}

impl From<&Tube> for TubeRecord {
    fn from(t: &Tube) -> Self {
        Self {
            video_id: t.video_id.clone(),
            class_id: t.class_id,
            score: t.score,
            start_frame: t.start_frame,
            boxes: t.boxes.iter().map(|b| b.to_array()).collect(),
            progress: t.progress.as_ref().map(|p| p.to_vec()),
        }
    }
}

fn to_tube(r: TubeRecord, set: &str, index: usize) -> Result<Tube> {
    let name = format!("{set}[{index}]");
    let boxes = r
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            BoundingBox::new(b[0], b[1], b[2], b[3])
                .map_err(|e| Error::Validation(format!("tube {name}: boxes[{i}]: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let tube = Tube::new(r.video_id, r.class_id, r.start_frame, boxes, r.score)
        .map_err(|e| Error::Validation(format!("tube {name}: {e}")))?;
    match r.progress {
        None => Ok(tube),
        Some(p) => ProgressSequence::new(p)
            .and_then(|p| tube.with_progress(p))
            .map_err(|e| Error::Validation(format!("tube {name}: progress: {e}"))),
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, e: serde_json::Error) -> Error {
    let offset = byte_offset(text, e.line(), e.column());
    let message = e.to_string();
    // serde_json appends its own " at line L column C"; the location carries it
    let message = message.rsplit_once(" at line ").map_or(message.as_str(), |(m, _)| m).to_string();
    Error::Parse {
        location: format!("line {} column {} (byte offset {offset})", e.line(), e.column()),
        message,
    }
}

/// Parses and validates an annotation document.
pub fn parse_annotations_str(text: &str) -> Result<Dataset> {
    let header: Header = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    if header.format != FORMAT {
        return Err(Error::Parse {
            location: "header".into(),
            message: format!("format: expected `{FORMAT}`, found `{}`", header.format),
        });
    }
    if header.version != VERSION {
        return Err(Error::UnsupportedVersion {
            format: FORMAT,
            found: header.version,
            expected: VERSION,
        });
    }
    let doc: Document = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    let mut dataset = Dataset {
        classes: doc
            .classes
            .into_iter()
            .map(|c| ClassInfo { id: c.id, name: c.name, cyclic: c.cyclic })
            .collect(),
        videos: doc
            .videos
            .into_iter()
            .map(|v| VideoInfo { id: v.id, frame_count: v.frame_count })
            .collect(),
        ..Default::default()
    };
    for (i, r) in doc.ground_truth.into_iter().enumerate() {
        dataset.ground_truth.push(to_tube(r, "ground_truth", i)?);
    }
    for (i, r) in doc.detections.into_iter().enumerate() {
        dataset.detections.push(to_tube(r, "detections", i)?);
    }
    dataset.validate()?;
    Ok(dataset)
}

/// Canonical text form of a dataset. Fails if the dataset does not validate.
pub fn annotations_to_string(dataset: &Dataset) -> Result<String> {
    dataset.validate()?;
    let doc = Document {
        format: FORMAT.into(),
        version: VERSION,
        classes: dataset
            .classes
            .iter()
            .map(|c| ClassRecord { id: c.id, name: c.name.clone(), cyclic: c.cyclic })
            .collect(),
        videos: dataset
            .videos
            .iter()
            .map(|v| VideoRecord { id: v.id.clone(), frame_count: v.frame_count })
            .collect(),
        ground_truth: dataset.ground_truth.iter().map(TubeRecord::from).collect(),
        detections: dataset.detections.iter().map(TubeRecord::from).collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("finite values serialize");
    s.push('\n');
    Ok(s)
}

pub fn parse_annotations(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn write_annotations(dataset: &Dataset, path: &Path) -> Result<()> {
    let text = annotations_to_string(dataset)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
