//! Binary per-video feature files.
//!
//! Layout, all integers `u32` little-endian:
//! magic `PTFM`, version, video id (length + UTF-8), frame count, then per
//! frame: height, width, channels, spatial scale (`f32`), and
//! `height * width * channels` `f32` values in row-major channel-last order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{put_string, Reader};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::tube::Dataset;

pub const MAGIC: &[u8; 4] = b"PTFM";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "ptfm";

const FRAME_HEADER_BYTES: usize = 16;

pub fn encode_features(video_id: &str, frames: &[FeatureMap]) -> Vec<u8> {
    let payload: usize = frames.iter().map(|f| FRAME_HEADER_BYTES + 4 * f.data.len()).sum();
    let mut out = Vec::with_capacity(16 + video_id.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_string(&mut out, video_id);
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        for d in [f.height, f.width, f.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&f.spatial_scale.to_le_bytes());
        for v in &f.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes a feature file. Every declared size is checked against the bytes
/// actually present before anything is allocated.
pub fn decode_features(bytes: &[u8]) -> Result<(String, Vec<FeatureMap>)> {
    let mut r = Reader::new(bytes, "feature file");
    if r.take(4, "magic")? != MAGIC {
        return Err(r.error("magic", "not a feature file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { format: "feature file", found: version, expected: VERSION });
    }
    let video_id = r.string("video_id")?;
    let count = r.u32("frame_count")? as usize;
    if count.saturating_mul(FRAME_HEADER_BYTES) > r.remaining() {
        return Err(r.error("frame_count", format!("{count} frames cannot fit in {} bytes", r.remaining())));
    }
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let c = r.u32("channels")? as usize;
        let scale = r.f32("spatial_scale")?;
        let n = h.checked_mul(w).and_then(|x| x.checked_mul(c));
        let field = format!("frame {i} data");
        let bytes = match n.and_then(|n| n.checked_mul(4)) {
            Some(b) if b <= r.remaining() => b,
            _ => return Err(r.error(&field, format!("declared {h}x{w}x{c} exceeds the payload"))),
        };
        let data = r
            .take(bytes, &field)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let map = FeatureMap::new(h, w, c, scale, data).map_err(|e| r.error(&format!("frame {i}"), e))?;
        frames.push(map);
    }
    r.finish()?;
    Ok((video_id, frames))
}

pub fn feature_path(dir: &Path, video_id: &str) -> Result<PathBuf> {
    if video_id.is_empty() || video_id.contains(['/', '\\']) || video_id == "." || video_id == ".." {
        return Err(Error::InvalidConfig(format!("video id `{video_id}` is not usable as a file name")));
    }
    Ok(dir.join(format!("{video_id}.{EXTENSION}")))
}

pub fn write_feature_file(path: &Path, video_id: &str, frames: &[FeatureMap]) -> Result<()> {
    std::fs::write(path, encode_features(video_id, frames)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<(String, Vec<FeatureMap>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}

/// Writes one file per video into `dir`.
pub fn write_feature_dir(dir: &Path, features: &BTreeMap<String, Vec<FeatureMap>>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, frames) in features {
        write_feature_file(&feature_path(dir, id)?, id, frames)?;
    }
    Ok(())
}

/// Loads the feature file of every video the dataset declares, checking
/// that the stored id and frame count agree with the header.
pub fn load_features(dir: &Path, dataset: &Dataset) -> Result<BTreeMap<String, Vec<FeatureMap>>> {
    let mut out = BTreeMap::new();
    for v in &dataset.videos {
        let path = feature_path(dir, &v.id)?;
        if !path.exists() {
            return Err(Error::MissingFeatures(format!("video `{}`: no file {}", v.id, path.display())));
        }
        let (id, frames) = read_feature_file(&path)?;
        if id != v.id {
            return Err(Error::Validation(format!("{} holds video `{id}`, expected `{}`", path.display(), v.id)));
        }
        if frames.len() != v.frame_count as usize {
            return Err(Error::LengthMismatch { what: "feature frames vs declared frame count", left: frames.len(), right: v.frame_count as usize });
        }
        out.insert(id, frames);
    }
    Ok(out)
}
