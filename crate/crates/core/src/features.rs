//! Region and whole-frame pooling over precomputed convolutional maps.

use crate::error::{Error, Result};
use crate::tube::BoundingBox;

/// Channel-last feature grid for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Grid cells per image pixel.
    pub spatial_scale: f32,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        spatial_scale: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if !(spatial_scale > 0.0 && spatial_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "spatial scale must be positive, got {spatial_scale}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "feature map data",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            spatial_scale,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, spatial_scale: f32, v: f32) -> Self {
        Self::new(height, width, channels, spatial_scale, vec![v; height * width * channels])
            .expect("valid dims")
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Box covering the whole grid in image coordinates.
    pub fn full_box(&self) -> BoundingBox {
        let s = self.spatial_scale as f64;
        BoundingBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: self.width as f64 / s,
            y_max: self.height as f64 / s,
        }
    }

    /// Per-channel max over rows `[r0, r1)` and columns `[c0, c1)`, appended to `out`.
    /// An empty window yields zeros.
    fn max_window(&self, r0: usize, r1: usize, c0: usize, c1: usize, out: &mut Vec<f64>) {
        for ch in 0..self.channels {
            let mut best = f32::NEG_INFINITY;
            for r in r0..r1 {
                for c in c0..c1 {
                    best = best.max(self.at(r, c, ch));
                }
            }
            out.push(if best == f32::NEG_INFINITY { 0.0 } else { best as f64 });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Region,
    Context,
    Blended,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub kind: FeatureKind,
}

/// `[floor(b·n/bins), ceil((b+1)·n/bins))`.
fn bin_range(b: usize, n: usize, bins: usize) -> (usize, usize) {
    (b * n / bins, ((b + 1) * n).div_ceil(bins))
}

/// Max-pools the projection of `bbox` onto the grid into `pool_h × pool_w`
/// bins. Output layout is bin-major (row-major over bins), channel-last.
pub fn roi_pool(
    map: &FeatureMap,
    bbox: &BoundingBox,
    pool_h: usize,
    pool_w: usize,
) -> Result<FeatureVector> {
    if pool_h == 0 || pool_w == 0 {
        return Err(Error::InvalidConfig("pool size must be positive".into()));
    }
    let s = map.spatial_scale as f64;
    let project = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        let a = (lo * s).floor().max(0.0);
        let b = (hi * s).ceil().min(n as f64);
        (a < b).then_some((a as usize, b as usize))
    };
    let (Some((r0, r1)), Some((c0, c1))) = (
        project(bbox.y_min, bbox.y_max, map.height),
        project(bbox.x_min, bbox.x_max, map.width),
    ) else {
        return Err(Error::BoxOutsideMap {
            height: map.height,
            width: map.width,
        });
    };

    let (rh, rw) = (r1 - r0, c1 - c0);
    let mut values = Vec::with_capacity(pool_h * pool_w * map.channels);
    for by in 0..pool_h {
        let (ya, yb) = bin_range(by, rh, pool_h);
        for bx in 0..pool_w {
            let (xa, xb) = bin_range(bx, rw, pool_w);
            map.max_window(r0 + ya, r0 + yb, c0 + xa, c0 + xb, &mut values);
        }
    }
    Ok(FeatureVector {
        values,
        kind: FeatureKind::Region,
    })
}

/// Spatial pyramid pooling of the whole frame: one `L × L` max-pool per
/// level, concatenated in level order.
pub fn spp_pool(map: &FeatureMap, levels: &[usize]) -> Result<FeatureVector> {
    if levels.is_empty() || levels.contains(&0) {
        return Err(Error::InvalidConfig(
            "pyramid levels must be non-empty and positive".into(),
        ));
    }
    let len: usize = levels.iter().map(|l| l * l).sum::<usize>() * map.channels;
    let mut values = Vec::with_capacity(len);
    for &level in levels {
        for by in 0..level {
            let (ya, yb) = bin_range(by, map.height, level);
            for bx in 0..level {
                let (xa, xb) = bin_range(bx, map.width, level);
                map.max_window(ya, yb, xa, xb, &mut values);
            }
        }
    }
    Ok(FeatureVector {
        values,
        kind: FeatureKind::Context,
    })
}

/// Region-then-context concatenation.
pub fn blend_input(region: &FeatureVector, context: &FeatureVector) -> Result<FeatureVector> {
    if region.kind != FeatureKind::Region || context.kind != FeatureKind::Context {
        return Err(Error::InvalidConfig(format!(
            "blend expects region + context, got {:?} + {:?}",
            region.kind, context.kind
        )));
    }
    let mut values = Vec::with_capacity(region.values.len() + context.values.len());
    values.extend_from_slice(&region.values);
    values.extend_from_slice(&context.values);
    Ok(FeatureVector {
        values,
        kind: FeatureKind::Blended,
    })
}

/// Pooling geometry for the model input.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureConfig {
    pub pool_h: usize,
    pub pool_w: usize,
    pub levels: Vec<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            pool_h: 3,
            pool_w: 3,
            levels: vec![1, 2, 4],
        }
    }
}

impl FeatureConfig {
    pub fn input_dim(&self, channels: usize) -> usize {
        let context: usize = self.levels.iter().map(|l| l * l).sum();
        (self.pool_h * self.pool_w + context) * channels
    }

    pub fn extract(&self, map: &FeatureMap, bbox: &BoundingBox) -> Result<FeatureVector> {
        let region = roi_pool(map, bbox, self.pool_h, self.pool_w)?;
        let context = spp_pool(map, &self.levels)?;
        blend_input(&region, &context)
    }
}
