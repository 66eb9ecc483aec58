//! Initialization, augmentation and the mini-batch training loop.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureMap};
use crate::loss::LossKind;
use crate::net::{backward_tube, forward_tube, ForwardMode, ModelConfig, ModelParams};
use crate::tube::{progress_targets, Dataset, Tube};

/// One training (or evaluation) sequence: blended features and progress
/// targets for every frame of a ground-truth tube.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeSample {
    pub class_id: u32,
    pub cyclic: bool,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl TubeSample {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Frames in `window`, targets kept as they are.
    pub fn restrict(&self, window: Range<usize>) -> TubeSample {
        TubeSample {
            class_id: self.class_id,
            cyclic: self.cyclic,
            features: self.features[window.clone()].to_vec(),
            targets: self.targets[window].to_vec(),
        }
    }

    /// Every `stride`-th frame starting with the first.
    pub fn subsample(&self, stride: usize) -> TubeSample {
        let stride = stride.max(1);
        TubeSample {
            class_id: self.class_id,
            cyclic: self.cyclic,
            features: self.features.iter().step_by(stride).cloned().collect(),
            targets: self.targets.iter().step_by(stride).copied().collect(),
        }
    }
}

/// Per-frame blended features for the boxes of `tube`, read from the frame
/// maps of its video.
pub fn tube_features(
    tube: &Tube,
    frames: &[FeatureMap],
    config: &FeatureConfig,
) -> Result<Vec<Vec<f64>>> {
    tube.boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let f = tube.start_frame as usize + i;
            let map = frames.get(f).ok_or_else(|| {
                Error::MissingFeatures(format!("{} frame {f}", tube.video_id))
            })?;
            Ok(config.extract(map, b)?.values)
        })
        .collect()
}

/// Samples for every ground-truth tube of the dataset.
pub fn samples_from_dataset(
    dataset: &Dataset,
    features: &BTreeMap<String, Vec<FeatureMap>>,
    config: &FeatureConfig,
) -> Result<Vec<TubeSample>> {
    dataset
        .ground_truth
        .iter()
        .map(|t| {
            let frames = features
                .get(&t.video_id)
                .ok_or_else(|| Error::MissingFeatures(t.video_id.clone()))?;
            let cyclic = dataset
                .class(t.class_id)
                .ok_or(Error::UnknownClass(t.class_id))?
                .cyclic;
            Ok(TubeSample {
                class_id: t.class_id,
                cyclic,
                features: tube_features(t, frames, config)?,
                targets: progress_targets(t).into_inner(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs of the main stage.
    pub epochs: usize,
    /// Head-only fine-tuning epochs when `curriculum` is on.
    pub finetune_epochs: usize,
    /// Tubes per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub curriculum: bool,
    pub augment: bool,
    pub subsample_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            finetune_epochs: 10,
            batch_size: 8,
            seed: 0,
            loss: LossKind::Bo,
            curriculum: false,
            augment: true,
            subsample_max: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be >= 0".into()));
        }
        if self.subsample_max == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "subsample_max and batch_size must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }
}

/// Glorot-uniform matrix: entries in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect()
}

/// Xavier-initialized weights, zero biases.
pub fn xavier_init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config.clone())?;
    for (range, fan_in, fan_out) in params.layout.matrices() {
        let w = xavier_uniform(fan_in, fan_out, rng);
        params.weights[range].copy_from_slice(&w);
    }
    Ok(params)
}

/// Uniform start, then uniform duration over what remains.
pub fn random_window<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Range<usize> {
    let start = rng.random_range(0..len);
    let duration = rng.random_range(1..=len - start);
    start..start + duration
}

/// Random contiguous sub-tube; targets are the original values of the
/// window, so the first one is generally not zero.
pub fn augment_subtube<R: Rng + ?Sized>(sample: &TubeSample, rng: &mut R) -> TubeSample {
    sample.restrict(random_window(sample.len(), rng))
}

/// Keeps every k-th frame, k uniform in `1..=subsample_max`.
pub fn augment_subsample<R: Rng + ?Sized>(
    sample: &TubeSample,
    subsample_max: usize,
    rng: &mut R,
) -> TubeSample {
    let k = rng.random_range(1..=subsample_max.max(1));
    sample.subsample(k)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, trainable: &Range<usize>, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in trainable.clone() {
            let g = params.grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params.weights[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

impl TrainOutcome {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss\n");
        for r in &self.trace {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.loss));
        }
        s
    }
}

struct Stage<'a> {
    pool: Vec<&'a TubeSample>,
    epochs: usize,
    trainable: Range<usize>,
}

/// Trains from a fresh Xavier initialization.
///
/// Without curriculum every sample is used for `epochs` epochs. With it,
/// the first stage sees only non-cyclic classes and updates all layers;
/// the second sees everything for `finetune_epochs` epochs and updates the
/// output head only.
pub fn train(samples: &[TubeSample], model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = xavier_init(model, &mut rng)?;
    train_from(params, samples, cfg, &mut rng)
}

/// Continues training `params`; the rng drives shuffling, augmentation and dropout.
pub fn train_from(
    mut params: ModelParams,
    samples: &[TubeSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = samples.iter().find(|s| s.is_empty() || s.features.len() != s.targets.len()) {
        return Err(Error::LengthMismatch {
            what: "sample features vs targets",
            left: s.features.len(),
            right: s.targets.len(),
        });
    }

    let all = 0..params.weights.len();
    let stages = if cfg.curriculum {
        let easy: Vec<_> = samples.iter().filter(|s| !s.cyclic).collect();
        if easy.is_empty() {
            return Err(Error::EmptyDataset);
        }
        vec![
            Stage { pool: easy, epochs: cfg.epochs, trainable: all },
            Stage {
                pool: samples.iter().collect(),
                epochs: cfg.finetune_epochs,
                trainable: params.layout.head(),
            },
        ]
    } else {
        vec![Stage { pool: samples.iter().collect(), epochs: cfg.epochs, trainable: all }]
    };

    let mut trace = Vec::new();
    let mut epoch = 0;
    let mut step = 0;
    for stage in stages {
        let mut adam = Adam::new(params.weights.len());
        let mut order: Vec<usize> = (0..stage.pool.len()).collect();
        for _ in 0..stage.epochs {
            order.shuffle(rng);
            for batch in order.chunks(cfg.batch_size) {
                params.zero_grad();
                let mut batch_loss = 0.0;
                for &i in batch {
                    let sample = stage.pool[i];
                    let augmented;
                    let s = if cfg.augment {
                        let sub = augment_subtube(sample, rng);
                        augmented = augment_subsample(&sub, cfg.subsample_max, rng);
                        &augmented
                    } else {
                        sample
                    };
                    let pass = forward_tube(&params, &s.features, ForwardMode::Train(&mut *rng))?;
                    let lv = cfg.loss.evaluate(&pass.predictions, &s.targets)?;
                    if !lv.value.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch, step, loss: lv.value });
                    }
                    batch_loss += lv.value;
                    backward_tube(&mut params, &pass, &lv.gradient)?;
                }
                let n = batch.len() as f64;
                params.grads.iter_mut().for_each(|g| *g /= n);
                if params.grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteLoss { epoch, step, loss: f64::NAN });
                }
                adam.step(&mut params, &stage.trainable, cfg);
                trace.push(TraceRow { epoch, step, loss: batch_loss / n });
                step += 1;
            }
            epoch += 1;
        }
    }
    params.zero_grad();
    Ok(TrainOutcome { params, trace })
}
