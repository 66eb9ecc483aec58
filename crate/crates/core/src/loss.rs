//! Progress regression losses and their gradients with respect to the
//! predictions.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// d value / d prediction, one entry per frame.
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Boundary observant loss.
    #[default]
    Bo,
    L2,
}

impl LossKind {
    pub fn evaluate(self, predictions: &[f64], targets: &[f64]) -> Result<LossValue> {
        match self {
            LossKind::Bo => bo_loss(predictions, targets),
            LossKind::L2 => l2_loss(predictions, targets),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bo" => Ok(LossKind::Bo),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::InvalidConfig(format!("unknown loss `{other}`"))),
        }
    }
}

fn check_lengths(predictions: &[f64], targets: &[f64]) -> Result<usize> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs targets",
            left: predictions.len(),
            right: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::LengthMismatch {
            what: "loss over an empty sequence",
            left: 0,
            right: 0,
        });
    }
    Ok(predictions.len())
}

/// sign with sign(0) = 0.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over frames of `[(p - ½)² + (p̂ - ½)²] · |p - p̂|`.
///
/// The weight grows towards either end of the progress range, so an error at
/// the action boundaries costs more than the same error mid-action.
pub fn bo_loss(predictions: &[f64], targets: &[f64]) -> Result<LossValue> {
    let n = check_lengths(predictions, targets)? as f64;
    let mut value = 0.0;
    let gradient = predictions
        .iter()
        .zip(targets)
        .map(|(&q, &p)| {
            let weight = (p - 0.5).powi(2) + (q - 0.5).powi(2);
            let err = (p - q).abs();
            value += weight * err;
            (2.0 * (q - 0.5) * err + weight * sign(q - p)) / n
        })
        .collect();
    Ok(LossValue {
        value: value / n,
        gradient,
    })
}

pub fn l2_loss(predictions: &[f64], targets: &[f64]) -> Result<LossValue> {
    let n = check_lengths(predictions, targets)? as f64;
    let mut value = 0.0;
    let gradient = predictions
        .iter()
        .zip(targets)
        .map(|(&q, &p)| {
            value += (q - p).powi(2);
            2.0 * (q - p) / n
        })
        .collect();
    Ok(LossValue {
        value: value / n,
        gradient,
    })
}
