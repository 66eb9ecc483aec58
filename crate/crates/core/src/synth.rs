//! Synthetic untrimmed videos with known progress.
//!
//! Every video holds one actor whose appearance is a smooth function of a
//! latent phase. For non-cyclic classes the phase is the progress itself;
//! for cyclic classes it wraps `cycles` times over the action, so a single
//! frame cannot tell which repetition it belongs to. Before the action the
//! actor holds the opening pose, after it the closing pose; neither moves,
//! which is what makes those frames trimmable. Detections cover the action
//! plus a random amount of the surrounding held-pose frames.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::tube::{linear_targets, BoundingBox, ClassInfo, Dataset, Tube, VideoInfo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    /// Number of appearance repetitions over one action; `None` or 1 means non-cyclic.
    #[serde(default)]
    pub cycles: Option<u32>,
}

impl SynthClass {
    pub fn cyclic(&self) -> bool {
        self.cycles.is_some_and(|k| k > 1)
    }

    /// Latent appearance phase at a given progress.
    pub fn phase(&self, progress: f64) -> f64 {
        match self.cycles {
            Some(k) if k > 1 => {
                let x = k as f64 * progress;
                let f = x - x.floor();
                if f == 0.0 && progress > 0.0 {
                    1.0
                } else {
                    f
                }
            }
            _ => progress,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    /// Probability that an action produces no detection tube at all.
    pub drop_rate: f64,
    pub score_mean: f64,
    pub score_noise: f64,
    /// Uniform per-coordinate box noise, in pixels.
    pub box_jitter: f64,
    /// Extra frames before the action, as a fraction of its length (uniform range).
    pub extend_before: (f64, f64),
    pub extend_after: (f64, f64),
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            drop_rate: 0.0,
            score_mean: 0.8,
            score_noise: 0.1,
            box_jitter: 2.0,
            extend_before: (0.0, 1.0),
            extend_after: (0.0, 1.0),
        }
    }
}

impl DetectorModel {
    /// Detections identical to the ground truth.
    pub fn perfect() -> Self {
        Self {
            drop_rate: 0.0,
            score_mean: 1.0,
            score_noise: 0.0,
            box_jitter: 0.0,
            extend_before: (0.0, 0.0),
            extend_after: (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: Vec<SynthClass>,
    pub videos_per_class: usize,
    /// Inclusive range of action lengths in frames.
    pub tube_length: (usize, usize),
    /// Inclusive range of held-pose frames on each side of the action.
    pub padding: (usize, usize),
    pub image_width: f64,
    pub image_height: f64,
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    /// Number of phase harmonics feeding the appearance mapping.
    pub harmonics: usize,
    /// Inclusive actor size range in pixels.
    pub actor_size: (f64, f64),
    pub feature_noise: f64,
    /// Uniform per-frame ground-truth box noise, in pixels.
    pub box_jitter: f64,
    pub detector: DetectorModel,
    pub seed: u64,
    /// Seed of the per-class appearance mappings; shared between splits.
    pub mapping_seed: u64,
    pub video_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: vec![
                SynthClass { name: "reach".into(), cycles: None },
                SynthClass { name: "jump".into(), cycles: None },
                SynthClass { name: "swing".into(), cycles: None },
                SynthClass { name: "cycle".into(), cycles: Some(2) },
            ],
            videos_per_class: 20,
            tube_length: (20, 60),
            padding: (10, 40),
            image_width: 96.0,
            image_height: 96.0,
            grid_height: 12,
            grid_width: 12,
            channels: 8,
            harmonics: 3,
            actor_size: (24.0, 40.0),
            feature_noise: 0.05,
            box_jitter: 1.0,
            detector: DetectorModel::default(),
            seed: 0,
            mapping_seed: 1,
            video_prefix: "vid".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.classes.is_empty() {
            return bad("need at least one class");
        }
        if self.tube_length.0 == 0 || self.tube_length.0 > self.tube_length.1 {
            return bad("tube length range must be non-empty and positive");
        }
        if self.padding.0 > self.padding.1 {
            return bad("padding range is empty");
        }
        if self.grid_height == 0 || self.grid_width == 0 || self.channels == 0 || self.harmonics == 0 {
            return bad("grid, channels and harmonics must be positive");
        }
        if !(self.actor_size.0 > 0.0
            && self.actor_size.0 <= self.actor_size.1
            && self.actor_size.1 <= self.image_width.min(self.image_height))
        {
            return bad("actor size must fit the image");
        }
        let d = &self.detector;
        if self.feature_noise < 0.0 || self.box_jitter < 0.0 || d.box_jitter < 0.0 || d.score_noise < 0.0 {
            return bad("noise levels must be >= 0");
        }
        if !(0.0..=1.0).contains(&d.drop_rate) || !(0.0..=1.0).contains(&d.score_mean) {
            return bad("drop rate and score mean must lie in [0, 1]");
        }
        for (lo, hi) in [d.extend_before, d.extend_after] {
            if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
                return bad("detector extension ranges must be ordered and >= 0");
            }
        }
        Ok(())
    }

    pub fn spatial_scale(&self) -> f32 {
        (self.grid_width as f64 / self.image_width) as f32
    }
}

/// Smooth map from phase to a per-channel appearance vector:
/// `tanh(A · [cos(πjφ), sin(πjφ)]_j + b)` with random `A`, `b` per class.
#[derive(Debug, Clone)]
pub struct PhaseMapping {
    weights: Vec<f64>,
    bias: Vec<f64>,
    harmonics: usize,
}

impl PhaseMapping {
    pub fn new(channels: usize, harmonics: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.5 / (harmonics as f64).sqrt();
        let weights = (0..channels * 2 * harmonics)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();
        let bias = (0..channels).map(|_| rng.random_range(-0.3..0.3)).collect();
        Self { weights, bias, harmonics }
    }

    pub fn appearance(&self, phase: f64) -> Vec<f64> {
        let basis: Vec<f64> = (1..=self.harmonics)
            .flat_map(|j| {
                let a = PI * j as f64 * phase;
                [a.cos(), a.sin()]
            })
            .collect();
        let k = basis.len();
        self.bias
            .iter()
            .enumerate()
            .map(|(c, b)| {
                let z: f64 = self.weights[c * k..(c + 1) * k].iter().zip(&basis).map(|(w, x)| w * x).sum();
                (z + b).tanh()
            })
            .collect()
    }
}

/// Value of every grid cell not covered by the actor.
pub const BACKGROUND_LEVEL: f32 = -1.2;

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    /// Per-video frame maps, keyed by video id.
    pub features: BTreeMap<String, Vec<FeatureMap>>,
}

fn video_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn clamp_box(b: BoundingBox, w: f64, h: f64) -> BoundingBox {
    let x_min = b.x_min.clamp(0.0, w - 1.0);
    let y_min = b.y_min.clamp(0.0, h - 1.0);
    BoundingBox {
        x_min,
        y_min,
        x_max: b.x_max.clamp(x_min + 1.0, w),
        y_max: b.y_max.clamp(y_min + 1.0, h),
    }
}

fn jitter<R: Rng>(b: &BoundingBox, amount: f64, rng: &mut R) -> BoundingBox {
    if amount == 0.0 {
        return *b;
    }
    let mut d = || rng.random_range(-amount..=amount);
    BoundingBox {
        x_min: b.x_min + d(),
        y_min: b.y_min + d(),
        x_max: b.x_max + d(),
        y_max: b.y_max + d(),
    }
}

fn render<R: Rng>(
    cfg: &SynthConfig,
    actor: &BoundingBox,
    appearance: &[f64],
    noise: &Normal<f64>,
    rng: &mut R,
) -> FeatureMap {
    let (h, w, c) = (cfg.grid_height, cfg.grid_width, cfg.channels);
    let s = cfg.spatial_scale() as f64;
    let r0 = (actor.y_min * s).floor().max(0.0) as usize;
    let r1 = ((actor.y_max * s).ceil() as usize).min(h);
    let c0 = (actor.x_min * s).floor().max(0.0) as usize;
    let c1 = ((actor.x_max * s).ceil() as usize).min(w);
    let mut data = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            let inside = (r0..r1).contains(&r) && (c0..c1).contains(&col);
            for &a in &appearance[..c] {
                let base = if inside { a as f32 } else { BACKGROUND_LEVEL };
                let n = if cfg.feature_noise > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
                data.push(base + n);
            }
        }
    }
    FeatureMap::new(h, w, c, cfg.spatial_scale(), data).expect("valid synthetic map")
}

/// Builds the dataset, frame maps and detections. Identical configs give
/// bit-identical output.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mappings: Vec<PhaseMapping> = (0..cfg.classes.len())
        .map(|k| PhaseMapping::new(cfg.channels, cfg.harmonics, video_seed(cfg.mapping_seed, k)))
        .collect();
    let noise = Normal::new(0.0, cfg.feature_noise.max(f64::MIN_POSITIVE)).unwrap();
    let score_noise = Normal::new(0.0, cfg.detector.score_noise.max(f64::MIN_POSITIVE)).unwrap();

    let mut dataset = Dataset {
        classes: cfg
            .classes
            .iter()
            .enumerate()
            .map(|(k, c)| ClassInfo {
                id: k as u32,
                name: c.name.clone(),
                cyclic: c.cyclic(),
            })
            .collect(),
        ..Default::default()
    };
    let mut features = BTreeMap::new();
    let n_videos = cfg.videos_per_class * cfg.classes.len();

    for v in 0..n_videos {
        let class_idx = v % cfg.classes.len();
        let class = &cfg.classes[class_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, v));
        let video_id = format!("{}{v:04}", cfg.video_prefix);

        let len = rng.random_range(cfg.tube_length.0..=cfg.tube_length.1);
        let pad_before = rng.random_range(cfg.padding.0..=cfg.padding.1);
        let pad_after = rng.random_range(cfg.padding.0..=cfg.padding.1);
        let frame_count = pad_before + len + pad_after;

        let aw = rng.random_range(cfg.actor_size.0..=cfg.actor_size.1);
        let ah = rng.random_range(cfg.actor_size.0..=cfg.actor_size.1);
        let ax = rng.random_range(0.0..=cfg.image_width - aw);
        let ay = rng.random_range(0.0..=cfg.image_height - ah);
        let base = BoundingBox { x_min: ax, y_min: ay, x_max: ax + aw, y_max: ay + ah };

        let targets = linear_targets(len).into_inner();
        let mut actor_boxes = Vec::with_capacity(frame_count);
        let mut maps = Vec::with_capacity(frame_count);
        for f in 0..frame_count {
            let b = clamp_box(jitter(&base, cfg.box_jitter, &mut rng), cfg.image_width, cfg.image_height);
            let progress = if f < pad_before {
                0.0
            } else if f < pad_before + len {
                targets[f - pad_before]
            } else {
                1.0
            };
            let look = mappings[class_idx].appearance(class.phase(progress));
            maps.push(render(cfg, &b, &look, &noise, &mut rng));
            actor_boxes.push(b);
        }

        let gt = Tube::new(
            video_id.clone(),
            class_idx as u32,
            pad_before as u32,
            actor_boxes[pad_before..pad_before + len].to_vec(),
            1.0,
        )?;

        let det = &cfg.detector;
        if rng.random::<f64>() >= det.drop_rate {
            let ext = |range: (f64, f64), rng: &mut ChaCha8Rng| -> usize {
                let frac = if range.1 > range.0 { rng.random_range(range.0..=range.1) } else { range.0 };
                (frac * len as f64).round() as usize
            };
            let before = ext(det.extend_before, &mut rng).min(pad_before);
            let after = ext(det.extend_after, &mut rng).min(pad_after);
            let first = pad_before - before;
            let last = pad_before + len + after;
            let boxes = actor_boxes[first..last]
                .iter()
                .map(|b| clamp_box(jitter(b, det.box_jitter, &mut rng), cfg.image_width, cfg.image_height))
                .collect();
            let n = if det.score_noise > 0.0 { score_noise.sample(&mut rng) } else { 0.0 };
            let score = (det.score_mean + n).clamp(0.01, 1.0);
            dataset.detections.push(Tube::new(video_id.clone(), class_idx as u32, first as u32, boxes, score)?);
        }

        dataset.ground_truth.push(gt);
        dataset.videos.push(VideoInfo {
            id: video_id.clone(),
            frame_count: frame_count as u32,
        });
        features.insert(video_id, maps);
    }
    dataset.validate()?;
    Ok(SynthData { dataset, features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::roi_pool;
    use crate::metrics::{video_ap, VIDEO_AP_THRESHOLDS};
    use crate::tube::progress_targets;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            videos_per_class: 3,
            tube_length: (8, 16),
            padding: (2, 6),
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&small(4)).unwrap();
        let b = generate(&small(4)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.features, b.features);
        let c = generate(&small(5)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn layout_and_targets() {
        let d = generate(&small(1)).unwrap();
        assert_eq!(d.dataset.ground_truth.len(), 12);
        for t in &d.dataset.ground_truth {
            let frames = &d.features[&t.video_id];
            assert_eq!(frames.len(), d.dataset.video(&t.video_id).unwrap().frame_count as usize);
            let p = progress_targets(t);
            let step = p[1] - p[0];
            assert!(p.windows(2).all(|w| (w[1] - w[0] - step).abs() < 1e-12));
        }
        assert!(d.dataset.class(3).unwrap().cyclic);
        assert!(!d.dataset.class(0).unwrap().cyclic);
    }

    #[test]
    fn noiseless_appearance_is_a_function_of_progress() {
        let cfg = SynthConfig {
            feature_noise: 0.0,
            box_jitter: 0.0,
            tube_length: (11, 11),
            ..small(2)
        };
        let d = generate(&cfg).unwrap();
        let region = |t: &Tube, i: usize| {
            let m = &d.features[&t.video_id][t.start_frame as usize + i];
            roi_pool(m, &t.boxes[i], 2, 2).unwrap().values
        };
        let same_class: Vec<&Tube> = d.dataset.ground_truth.iter().filter(|t| t.class_id == 0).collect();
        for i in 0..11 {
            assert_eq!(region(same_class[0], i), region(same_class[1], i));
            for j in 0..i {
                assert_ne!(region(same_class[0], i), region(same_class[0], j));
            }
        }
    }

    #[test]
    fn phase_oracle_recovers_progress_on_non_cyclic() {
        let non_cyclic = SynthClass { name: "a".into(), cycles: None };
        let cyclic = SynthClass { name: "b".into(), cycles: Some(2) };
        for p in linear_targets(31).iter() {
            assert_eq!(non_cyclic.phase(*p), *p);
        }
        assert_eq!(cyclic.phase(0.25), 0.5);
        assert_eq!(cyclic.phase(0.75), 0.5);
        assert_eq!(cyclic.phase(1.0), 1.0);
        assert_eq!(cyclic.phase(0.0), 0.0);
    }

    #[test]
    fn perfect_detector_gives_perfect_video_ap() {
        let cfg = SynthConfig {
            detector: DetectorModel::perfect(),
            box_jitter: 0.0,
            ..small(3)
        };
        let d = generate(&cfg).unwrap();
        assert_eq!(d.dataset.detections.len(), d.dataset.ground_truth.len());
        for (tau, r) in video_ap(&d.dataset.detections, &d.dataset.ground_truth, &VIDEO_AP_THRESHOLDS).unwrap() {
            assert_eq!(r.mean, 1.0, "tau {tau}");
        }
    }

    #[test]
    fn detections_extend_into_padding() {
        let cfg = SynthConfig {
            detector: DetectorModel { extend_before: (1.0, 1.0), extend_after: (1.0, 1.0), ..Default::default() },
            padding: (50, 50),
            ..small(6)
        };
        let d = generate(&cfg).unwrap();
        for (det, gt) in d.dataset.detections.iter().zip(&d.dataset.ground_truth) {
            assert_eq!(det.len(), 3 * gt.len());
            assert_eq!(det.start_frame + gt.len() as u32, gt.start_frame);
        }
    }

    #[test]
    fn rejects_invalid_config() {
        let cfg = SynthConfig { tube_length: (5, 2), ..Default::default() };
        assert!(generate(&cfg).is_err());
        let cfg = SynthConfig { feature_noise: -1.0, ..Default::default() };
        assert!(generate(&cfg).is_err());
    }
}
