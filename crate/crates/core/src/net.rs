//! The progress regressor.
//!
//! Each frame's blended feature goes through a rectified dense layer (FC7),
//! a stack of gated memory layers (or, for the static variant, rectified
//! dense layers of the same widths) and a single sigmoid unit (FC8):
//!
//! ```text
//! x ─dropout─ FC7+ReLU ─ LSTM(64) ─ LSTM(32) ─dropout─ FC8+sigmoid ─ p̂
//! ```
//!
//! All weights live in one flat buffer (see [`Layout`]) so that the
//! optimizer, checkpoints and gradient checks can treat them uniformly.
//! Gate rows of a memory layer are ordered input, forget, output, candidate.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tube::ProgressSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Recurrent,
    /// Memoryless ablation: the recurrent layers become framewise dense layers.
    Static,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub fc7_dim: usize,
    /// Widths of the stacked memory layers (dense widths for the static variant).
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            fc7_dim: 128,
            hidden_dims: vec![64, 32],
            dropout_rate: 0.5,
            variant: Variant::Recurrent,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.fc7_dim == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "need at least one hidden layer, all widths positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn top_dim(&self) -> usize {
        *self.hidden_dims.last().unwrap()
    }
}

/// Location of a dense layer's weights (`outputs × inputs`, row-major) and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSlot {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub inputs: usize,
    pub outputs: usize,
}

/// Location of a memory layer's input weights (`4h × inputs`), recurrent
/// weights (`4h × h`) and bias (`4h`).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmSlot {
    pub w_x: Range<usize>,
    pub w_h: Range<usize>,
    pub b: Range<usize>,
    pub inputs: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HiddenSlot {
    Lstm(LstmSlot),
    Dense(DenseSlot),
}

/// Offsets of every tensor in the flat parameter buffer, in declaration
/// order: FC7, hidden layers bottom to top, FC8.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub fc7: DenseSlot,
    pub hidden: Vec<HiddenSlot>,
    pub fc8: DenseSlot,
    pub total: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut cursor = 0;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let dense = |inputs: usize, outputs: usize, take: &mut dyn FnMut(usize) -> Range<usize>| {
            DenseSlot {
                w: take(inputs * outputs),
                b: take(outputs),
                inputs,
                outputs,
            }
        };
        let fc7 = dense(config.input_dim, config.fc7_dim, &mut take);
        let mut hidden = Vec::new();
        let mut inputs = config.fc7_dim;
        for &h in &config.hidden_dims {
            hidden.push(match config.variant {
                Variant::Recurrent => HiddenSlot::Lstm(LstmSlot {
                    w_x: take(4 * h * inputs),
                    w_h: take(4 * h * h),
                    b: take(4 * h),
                    inputs,
                    hidden: h,
                }),
                Variant::Static => HiddenSlot::Dense(dense(inputs, h, &mut take)),
            });
            inputs = h;
        }
        let fc8 = dense(inputs, 1, &mut take);
        Self {
            fc7,
            hidden,
            fc8,
            total: cursor,
        }
    }

    /// Every weight matrix as `(range, fan_in, fan_out)`.
    pub fn matrices(&self) -> Vec<(Range<usize>, usize, usize)> {
        let mut out = vec![(self.fc7.w.clone(), self.fc7.inputs, self.fc7.outputs)];
        for slot in &self.hidden {
            match slot {
                HiddenSlot::Lstm(l) => {
                    out.push((l.w_x.clone(), l.inputs, 4 * l.hidden));
                    out.push((l.w_h.clone(), l.hidden, 4 * l.hidden));
                }
                HiddenSlot::Dense(d) => out.push((d.w.clone(), d.inputs, d.outputs)),
            }
        }
        out.push((self.fc8.w.clone(), self.fc8.inputs, self.fc8.outputs));
        out
    }

    /// The output head's weights and bias (contiguous, at the end).
    pub fn head(&self) -> Range<usize> {
        self.fc8.w.start..self.fc8.b.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub weights: Vec<f64>,
    /// Gradient slot parallel to `weights`; filled by [`backward_tube`].
    pub grads: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Self {
            weights: vec![0.0; layout.total],
            grads: vec![0.0; layout.total],
            config,
            layout,
        })
    }

    pub fn from_weights(config: ModelConfig, weights: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if weights.len() != p.layout.total {
            return Err(Error::DimensionMismatch {
                what: "parameter count",
                expected: p.layout.total,
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        p.weights = weights;
        Ok(p)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Per-layer hidden and cell vectors carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
}

impl RecurrentState {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            hidden: config.hidden_dims.iter().map(|&h| vec![0.0; h]).collect(),
            cell: config.hidden_dims.iter().map(|&h| vec![0.0; h]).collect(),
        }
    }

    fn matches(&self, config: &ModelConfig) -> bool {
        self.hidden.len() == config.hidden_dims.len()
            && self.cell.len() == config.hidden_dims.len()
            && self
                .hidden
                .iter()
                .zip(&self.cell)
                .zip(&config.hidden_dims)
                .all(|((h, c), &d)| h.len() == d && c.len() == d)
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Lstm {
        input: Vec<f64>,
        h_prev: Vec<f64>,
        c_prev: Vec<f64>,
        /// Post-activation gates, `[i | f | o | g]`.
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
    Dense {
        input: Vec<f64>,
        out: Vec<f64>,
    },
}

/// Activations of one frame kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    x_masked: Vec<f64>,
    fc7_out: Vec<f64>,
    layers: Vec<LayerCache>,
    head_mask: Vec<f64>,
    head_in: Vec<f64>,
    prediction: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `out = W x + b` for a row-major `outputs × inputs` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        *o = b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W x` (no bias).
fn add_matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dw += d ⊗ x`, `dx += Wᵀ d`.
fn accumulate_dense(w: &[f64], dw: &mut [f64], d: &[f64], x: &[f64], dx: Option<&mut [f64]>) {
    let n = x.len();
    for (r, &dr) in d.iter().enumerate() {
        if dr == 0.0 {
            continue;
        }
        for (g, xi) in dw[r * n..(r + 1) * n].iter_mut().zip(x) {
            *g += dr * xi;
        }
    }
    if let Some(dx) = dx {
        for (r, &dr) in d.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            for (o, wi) in dx.iter_mut().zip(&w[r * n..(r + 1) * n]) {
                *o += dr * wi;
            }
        }
    }
}

fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: Option<&mut R>) -> Vec<f64> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            (0..len)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        }
        _ => vec![1.0; len],
    }
}

/// Runs one frame. Dropout is active iff `rng` is given (training mode).
pub fn forward_step<R: Rng + ?Sized>(
    params: &ModelParams,
    state: &RecurrentState,
    input: &[f64],
    mut rng: Option<&mut R>,
) -> Result<(f64, RecurrentState, StepCache)> {
    let cfg = &params.config;
    if input.len() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            what: "model input",
            expected: cfg.input_dim,
            actual: input.len(),
        });
    }
    if !state.matches(cfg) {
        return Err(Error::DimensionMismatch {
            what: "recurrent state layers",
            expected: cfg.hidden_dims.len(),
            actual: state.hidden.len(),
        });
    }
    let w = &params.weights;
    let lay = &params.layout;

    let in_mask = dropout_mask(input.len(), cfg.dropout_rate, rng.as_deref_mut());
    let x_masked: Vec<f64> = input.iter().zip(&in_mask).map(|(a, m)| a * m).collect();
    let mut fc7_out = vec![0.0; cfg.fc7_dim];
    affine(&w[lay.fc7.w.clone()], &w[lay.fc7.b.clone()], &x_masked, &mut fc7_out);
    fc7_out.iter_mut().for_each(|v| *v = v.max(0.0));

    let mut next = RecurrentState::zeros(cfg);
    let mut layers = Vec::with_capacity(lay.hidden.len());
    let mut current = fc7_out.clone();
    for (l, slot) in lay.hidden.iter().enumerate() {
        match slot {
            HiddenSlot::Lstm(s) => {
                let h = s.hidden;
                let mut gates = vec![0.0; 4 * h];
                affine(&w[s.w_x.clone()], &w[s.b.clone()], &current, &mut gates);
                add_matvec(&w[s.w_h.clone()], &state.hidden[l], &mut gates);
                for (k, g) in gates.iter_mut().enumerate() {
                    *g = if k < 3 * h { sigmoid(*g) } else { g.tanh() };
                }
                let c_prev = &state.cell[l];
                let mut tanh_c = vec![0.0; h];
                for j in 0..h {
                    let (i, f, o, g) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                    let c = f * c_prev[j] + i * g;
                    next.cell[l][j] = c;
                    tanh_c[j] = c.tanh();
                    next.hidden[l][j] = o * tanh_c[j];
                }
                let out = next.hidden[l].clone();
                layers.push(LayerCache::Lstm {
                    input: std::mem::replace(&mut current, out),
                    h_prev: state.hidden[l].clone(),
                    c_prev: c_prev.clone(),
                    gates,
                    tanh_c,
                });
            }
            HiddenSlot::Dense(d) => {
                let mut out = vec![0.0; d.outputs];
                affine(&w[d.w.clone()], &w[d.b.clone()], &current, &mut out);
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                next.hidden[l].copy_from_slice(&out);
                layers.push(LayerCache::Dense {
                    input: std::mem::replace(&mut current, out.clone()),
                    out,
                });
            }
        }
    }

    let head_mask = dropout_mask(current.len(), cfg.dropout_rate, rng.as_deref_mut());
    let head_in: Vec<f64> = current.iter().zip(&head_mask).map(|(a, m)| a * m).collect();
    let mut z = [0.0];
    affine(&w[lay.fc8.w.clone()], &w[lay.fc8.b.clone()], &head_in, &mut z);
    let prediction = sigmoid(z[0]).clamp(f64::EPSILON, 1.0 - f64::EPSILON);

    Ok((
        prediction,
        next,
        StepCache {
            x_masked,
            fc7_out,
            layers,
            head_mask,
            head_in,
            prediction,
        },
    ))
}

/// Whether to keep activations (and apply dropout) during a tube pass.
pub enum ForwardMode<'a, R: Rng + ?Sized> {
    Inference,
    Train(&'a mut R),
}

impl ForwardMode<'static, rand_chacha::ChaCha8Rng> {
    pub fn inference() -> Self {
        ForwardMode::Inference
    }
}

/// Result of running a whole tube.
#[derive(Debug, Clone)]
pub struct TubePass {
    pub predictions: ProgressSequence,
    pub last_hidden: Vec<Vec<f64>>,
    cache: Option<Vec<StepCache>>,
}

impl TubePass {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// Folds [`forward_step`] over a tube from a zero state.
pub fn forward_tube<R: Rng + ?Sized>(
    params: &ModelParams,
    features: &[Vec<f64>],
    mode: ForwardMode<'_, R>,
) -> Result<TubePass> {
    if features.is_empty() {
        return Err(Error::InvalidTube("cannot run the model on an empty tube".into()));
    }
    let (mut rng, keep) = match mode {
        ForwardMode::Inference => (None, false),
        ForwardMode::Train(r) => (Some(r), true),
    };
    let mut state = RecurrentState::zeros(&params.config);
    let mut preds = Vec::with_capacity(features.len());
    let mut last_hidden = Vec::with_capacity(features.len());
    let mut caches = Vec::with_capacity(if keep { features.len() } else { 0 });
    for x in features {
        let (p, next, cache) = forward_step(params, &state, x, rng.as_deref_mut())?;
        preds.push(p);
        last_hidden.push(next.hidden.last().unwrap().clone());
        if keep {
            caches.push(cache);
        }
        state = next;
    }
    Ok(TubePass {
        predictions: ProgressSequence::new(preds)?,
        last_hidden,
        cache: keep.then_some(caches),
    })
}

/// Inference-only convenience wrapper.
pub fn predict_tube(params: &ModelParams, features: &[Vec<f64>]) -> Result<ProgressSequence> {
    Ok(forward_tube(params, features, ForwardMode::inference())?.predictions)
}

/// Top hidden layer activations per frame.
pub fn dump_hidden_states(params: &ModelParams, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(forward_tube(params, features, ForwardMode::inference())?.last_hidden)
}

/// Back-propagates `loss_gradient` (d loss / d prediction per frame) through
/// time and adds the parameter gradients into `params.grads`.
pub fn backward_tube(params: &mut ModelParams, pass: &TubePass, loss_gradient: &[f64]) -> Result<()> {
    let steps = pass.cache.as_ref().ok_or(Error::MissingCache)?;
    if loss_gradient.len() != steps.len() {
        return Err(Error::LengthMismatch {
            what: "loss gradient vs tube frames",
            left: loss_gradient.len(),
            right: steps.len(),
        });
    }
    let ModelParams {
        layout,
        weights: w,
        grads: g,
        ..
    } = params;

    let n_layers = layout.hidden.len();
    let mut dh_next: Vec<Vec<f64>> = layout
        .hidden
        .iter()
        .map(|s| match s {
            HiddenSlot::Lstm(l) => vec![0.0; l.hidden],
            HiddenSlot::Dense(d) => vec![0.0; d.outputs],
        })
        .collect();
    let mut dc_next = dh_next.clone();

    for (t, step) in steps.iter().enumerate().rev() {
        let y = step.prediction;
        let dz = loss_gradient[t] * y * (1.0 - y);

        // FC8
        let fc8 = &layout.fc8;
        g[fc8.b.start] += dz;
        let mut d_above: Vec<f64> = step
            .head_in
            .iter()
            .zip(&mut g[fc8.w.clone()])
            .zip(&w[fc8.w.clone()])
            .zip(&step.head_mask)
            .map(|(((x, gw), ww), m)| {
                *gw += dz * x;
                dz * ww * m
            })
            .collect();

        for l in (0..n_layers).rev() {
            match (&layout.hidden[l], &step.layers[l]) {
                (
                    HiddenSlot::Lstm(s),
                    LayerCache::Lstm {
                        input,
                        h_prev,
                        c_prev,
                        gates,
                        tanh_c,
                    },
                ) => {
                    let h = s.hidden;
                    let mut dpre = vec![0.0; 4 * h];
                    for j in 0..h {
                        let (i, f, o, gg) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                        let dh = d_above[j] + dh_next[l][j];
                        let d_o = dh * tanh_c[j];
                        let dc = dh * o * (1.0 - tanh_c[j] * tanh_c[j]) + dc_next[l][j];
                        dpre[j] = dc * gg * i * (1.0 - i);
                        dpre[h + j] = dc * c_prev[j] * f * (1.0 - f);
                        dpre[2 * h + j] = d_o * o * (1.0 - o);
                        dpre[3 * h + j] = dc * i * (1.0 - gg * gg);
                        dc_next[l][j] = dc * f;
                    }
                    for (gb, d) in g[s.b.clone()].iter_mut().zip(&dpre) {
                        *gb += d;
                    }
                    let mut dx = vec![0.0; s.inputs];
                    accumulate_dense(&w[s.w_x.clone()], &mut g[s.w_x.clone()], &dpre, input, Some(&mut dx));
                    let mut dh_prev = vec![0.0; h];
                    accumulate_dense(&w[s.w_h.clone()], &mut g[s.w_h.clone()], &dpre, h_prev, Some(&mut dh_prev));
                    dh_next[l] = dh_prev;
                    d_above = dx;
                }
                (HiddenSlot::Dense(d), LayerCache::Dense { input, out }) => {
                    let dz: Vec<f64> = d_above
                        .iter()
                        .zip(out)
                        .map(|(da, o)| if *o > 0.0 { *da } else { 0.0 })
                        .collect();
                    for (gb, v) in g[d.b.clone()].iter_mut().zip(&dz) {
                        *gb += v;
                    }
                    let mut dx = vec![0.0; d.inputs];
                    accumulate_dense(&w[d.w.clone()], &mut g[d.w.clone()], &dz, input, Some(&mut dx));
                    d_above = dx;
                }
                _ => unreachable!("cache does not match layout"),
            }
        }

        // FC7
        let fc7 = &layout.fc7;
        let dz7: Vec<f64> = d_above
            .iter()
            .zip(&step.fc7_out)
            .map(|(da, o)| if *o > 0.0 { *da } else { 0.0 })
            .collect();
        for (gb, v) in g[fc7.b.clone()].iter_mut().zip(&dz7) {
            *gb += v;
        }
        accumulate_dense(&w[fc7.w.clone()], &mut g[fc7.w.clone()], &dz7, &step.x_masked, None);
    }
    Ok(())
}
