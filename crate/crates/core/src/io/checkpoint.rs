//! Binary model checkpoints.
//!
//! Layout, integers `u32` little-endian: magic `PTCK`, version, input dim,
//! FC7 dim, hidden layer count and widths, dropout rate (`f64`), variant
//! byte (0 recurrent, 1 static), weight count, then the weights as `f32` in
//! parameter declaration order.

use std::path::Path;

use super::Reader;
use crate::error::{Error, Result};
use crate::net::{ModelConfig, ModelParams, Variant};

pub const MAGIC: &[u8; 4] = b"PTCK";
pub const VERSION: u32 = 1;

/// Weights are narrowed to `f32`; `decode(encode(p))` equals `p` rounded to `f32`.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(40 + 4 * params.weights.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [c.input_dim, c.fc7_dim, c.hidden_dims.len()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for d in &c.hidden_dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.dropout_rate.to_le_bytes());
    out.push(match c.variant {
        Variant::Recurrent => 0,
        Variant::Static => 1,
    });
    out.extend_from_slice(&(params.weights.len() as u32).to_le_bytes());
    for w in &params.weights {
        out.extend_from_slice(&(*w as f32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(4, "magic")? != MAGIC {
        return Err(r.error("magic", "not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { format: "checkpoint", found: version, expected: VERSION });
    }
    let input_dim = r.u32("input_dim")? as usize;
    let fc7_dim = r.u32("fc7_dim")? as usize;
    let layers = r.u32("hidden_layers")? as usize;
    if layers.saturating_mul(4) > r.remaining() {
        return Err(r.error("hidden_layers", format!("{layers} layers cannot fit")));
    }
    let hidden_dims = (0..layers)
        .map(|_| r.u32("hidden_dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let dropout_rate = f64::from_le_bytes(r.take(8, "dropout_rate")?.try_into().unwrap());
    let variant = match r.u8("variant")? {
        0 => Variant::Recurrent,
        1 => Variant::Static,
        v => return Err(r.error("variant", format!("unknown variant tag {v}"))),
    };
    let config = ModelConfig { input_dim, fc7_dim, hidden_dims, dropout_rate, variant };
    config.validate().map_err(|e| r.error("config", e))?;
    let count = r.u32("weight_count")? as usize;
    if count.saturating_mul(4) != r.remaining() {
        return Err(r.error("weights", format!("{count} weights declared, {} bytes present", r.remaining())));
    }
    // guard before building the layout: absurd widths would overflow the size math
    let expected = expected_weights(&config);
    if expected != Some(count) {
        return Err(r.error("weights", format!("config needs {expected:?} weights, file has {count}")));
    }
    let weights = r
        .take(count * 4, "weights")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    r.finish()?;
    ModelParams::from_weights(config, weights)
}

fn expected_weights(c: &ModelConfig) -> Option<usize> {
    let dense = |i: usize, o: usize| i.checked_mul(o)?.checked_add(o);
    let mut total = dense(c.input_dim, c.fc7_dim)?;
    let mut prev = c.fc7_dim;
    for &h in &c.hidden_dims {
        let layer = match c.variant {
            Variant::Recurrent => {
                let g = h.checked_mul(4)?;
                g.checked_mul(prev)?.checked_add(g.checked_mul(h)?)?.checked_add(g)?
            }
            Variant::Static => dense(prev, h)?,
        };
        total = total.checked_add(layer)?;
        prev = h;
    }
    total.checked_add(dense(prev, 1)?)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
