//! Reference predictors that need no learning.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tube::ProgressSequence;

/// I.i.d. uniform predictions.
pub fn baseline_random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> ProgressSequence {
    ProgressSequence::new((0..len).map(|_| rng.random::<f64>()).collect()).expect("in range")
}

/// The same value on every frame; `0.5` is the expected progress.
pub fn baseline_constant(len: usize, value: f64) -> Result<ProgressSequence> {
    ProgressSequence::new(vec![value; len])
}

/// `(i + 1) / mean_length` for the `i`-th frame of the tube, clamped to 1,
/// where the mean length is the class average over training tubes.
pub fn baseline_expected_length(
    len: usize,
    class_id: u32,
    class_mean_lengths: &BTreeMap<u32, f64>,
) -> Result<ProgressSequence> {
    let mean = *class_mean_lengths
        .get(&class_id)
        .ok_or(Error::UnknownClass(class_id))?;
    if !(mean > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "mean length for class {class_id} must be positive, got {mean}"
        )));
    }
    ProgressSequence::new(
        (0..len)
            .map(|i| ((i + 1) as f64 / mean).clamp(0.0, 1.0))
            .collect(),
    )
}

/// Mean tube length per class.
pub fn class_mean_lengths<'a>(tubes: impl IntoIterator<Item = (u32, usize)> + 'a) -> BTreeMap<u32, f64> {
    let mut acc: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (class, len) in tubes {
        let e = acc.entry(class).or_default();
        e.0 += len;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(c, (sum, n))| (c, sum as f64 / n as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_is_constant() {
        let p = baseline_constant(7, 0.5).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
        assert!(baseline_constant(3, 1.5).is_err());
    }

    #[test]
    fn random_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = baseline_random(1000, &mut rng);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = p.iter().sum::<f64>() / 1000.0;
        assert!((mean - 0.5).abs() < 0.05);
    }

    #[test]
    fn expected_length_ramp_and_clamp() {
        let means: BTreeMap<u32, f64> = [(1, 10.0), (2, 5.0)].into();
        let p = baseline_expected_length(10, 1, &means).unwrap();
        for (i, v) in p.iter().enumerate() {
            assert!((v - (i + 1) as f64 / 10.0).abs() < 1e-12);
        }
        let p = baseline_expected_length(10, 2, &means).unwrap();
        assert!((p[3] - 0.8).abs() < 1e-12);
        assert!(p[4..].iter().all(|&v| v == 1.0));
        assert!(matches!(
            baseline_expected_length(3, 9, &means),
            Err(Error::UnknownClass(9))
        ));
    }

    #[test]
    fn mean_lengths_per_class() {
        let m = class_mean_lengths([(0, 10), (0, 20), (1, 5)]);
        assert_eq!(m[&0], 15.0);
        assert_eq!(m[&1], 5.0);
    }
}
