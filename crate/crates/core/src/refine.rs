//! Temporal trimming of detected tubes from predicted progress.
//!
//! A frame at the head of the tube is dropped while the action has not
//! started (low progress that is not moving); a frame at the tail is dropped
//! once the action is over (high progress that is not moving). Only a
//! prefix and a suffix are ever removed, so the result stays contiguous.

use crate::error::{Error, Result};
use crate::tube::{ProgressSequence, Tube};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrimParams {
    /// Derivative threshold below which progress counts as stalled.
    pub delta: f64,
    /// Upper progress bound for a trimmable head frame.
    pub mu_s: f64,
    /// Lower progress bound for a trimmable tail frame.
    pub mu_e: f64,
}

impl Default for TrimParams {
    fn default() -> Self {
        Self {
            delta: 0.05,
            mu_s: 0.1,
            mu_e: 0.8,
        }
    }
}

impl TrimParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.mu_s && self.mu_s < self.mu_e && self.mu_e <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= mu_s < mu_e <= 1, got mu_s={} mu_e={}",
                self.mu_s, self.mu_e
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidConfig(format!("delta must be >= 0, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Backward difference; the first frame's derivative is 0.
pub fn progress_derivative(predictions: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(predictions.len());
    if !predictions.is_empty() {
        out.push(0.0);
    }
    out.extend(predictions.windows(2).map(|w| w[1] - w[0]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trimmed {
    pub tube: Tube,
    pub predictions: Vec<f64>,
    /// Derivatives of the retained frames as computed on the untrimmed stream.
    pub derivatives: Vec<f64>,
    /// Retained frame offsets within the input tube.
    pub kept: std::ops::Range<usize>,
    /// Every frame met a trimming condition; only the steepest frame was kept.
    pub degenerate: bool,
}

/// Trims using derivatives supplied by the caller (one per frame).
///
/// A frame's derivative belongs to the online prediction stream it came
/// from, so re-trimming an already trimmed tube must reuse the original
/// derivatives; with them the rule is idempotent.
pub fn trim_with_derivatives(
    tube: &Tube,
    predictions: &[f64],
    derivatives: &[f64],
    params: &TrimParams,
) -> Result<Trimmed> {
    params.validate()?;
    let n = tube.len();
    for (what, len) in [("predictions vs tube frames", predictions.len()), ("derivatives vs tube frames", derivatives.len())] {
        if len != n {
            return Err(Error::LengthMismatch { what, left: len, right: n });
        }
    }

    let head = |i: usize| derivatives[i] <= params.delta && predictions[i] <= params.mu_s;
    let tail = |i: usize| derivatives[i] <= params.delta && predictions[i] >= params.mu_e;
    let start = (0..n).find(|&i| !head(i)).unwrap_or(n);
    let end = (0..n).rev().find(|&i| !tail(i)).map_or(0, |i| i + 1);

    let (kept, degenerate) = if start < end {
        (start..end, false)
    } else {
        // first maximum wins
        let best = (0..n).fold(0, |b, i| if derivatives[i] > derivatives[b] { i } else { b });
        (best..best + 1, true)
    };
    Ok(Trimmed {
        tube: tube.slice(kept.start, kept.len()),
        predictions: predictions[kept.clone()].to_vec(),
        derivatives: derivatives[kept.clone()].to_vec(),
        kept,
        degenerate,
    })
}

/// Removes the stalled low-progress prefix and stalled high-progress suffix.
pub fn trim_tube(tube: &Tube, predictions: &ProgressSequence, params: &TrimParams) -> Result<Trimmed> {
    let d = progress_derivative(predictions);
    trim_with_derivatives(tube, predictions, &d, params)
}
