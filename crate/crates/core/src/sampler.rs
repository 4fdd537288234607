//! Autoregressive generation with per-layer ring buffers.
//!
//! Each step costs O(layers * channels^2 * filter) no matter how many
//! samples were already emitted: the state keeps exactly the past layer
//! inputs the dilated convolutions can still reach.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio_io::{AudioBuffer, WavError};
use crate::dsp::MelSpectrogram;
use crate::tensor::{ParamStore, Tensor};
use crate::wavenet::mol::{sigmoid, Quantization};
use crate::wavenet::{ConditionProjections, ConvIds, MixtureParams, WaveNet, WaveNetConfig, WaveNetError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("generation state was built for a different model shape")]
    StateMismatch,
    #[error("previous sample {0} lies outside [-1, 1]")]
    SampleOutOfRange(f64),
    #[error("conditioning vector has {got} values, expected {expected}")]
    CondWidth { expected: usize, got: usize },
    #[error("conditioning row {row} out of range ({rows} rows)")]
    CondRow { row: usize, rows: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("non-finite mixture parameters")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] WaveNetError),
    #[error(transparent)]
    Audio(#[from] WavError),
}

/// Fixed-capacity history of vectors; `get(0)` is the newest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RingBuffer {
    width: usize,
    capacity: usize,
    cursor: usize,
    data: Vec<f32>,
}

impl RingBuffer {
    pub fn new(capacity: usize, width: usize) -> Self {
        Self {
            width,
            capacity,
            cursor: 0,
            data: vec![0.0; capacity * width],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, v: &[f32]) {
        let w = self.width;
        self.data[self.cursor * w..(self.cursor + 1) * w].copy_from_slice(v);
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Entry pushed `lag` pushes ago. Panics if `lag >= capacity`.
    pub fn get(&self, lag: usize) -> &[f32] {
        assert!(lag < self.capacity, "lag {lag} beyond capacity {}", self.capacity);
        let idx = (self.cursor + self.capacity - 1 - lag) % self.capacity;
        &self.data[idx * self.width..(idx + 1) * self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationState {
    shape: Shape,
    /// Shifted audio input seen by the input convolution.
    pub input: RingBuffer,
    /// Layer inputs, one buffer per gated layer.
    pub layers: Vec<RingBuffer>,
    pub emitted: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
struct Shape {
    residual: usize,
    filter: usize,
    input_filter: usize,
    dilations: Vec<usize>,
    out_width: usize,
}

impl Shape {
    fn of(cfg: &WaveNetConfig) -> Self {
        Self {
            residual: cfg.residual_channels,
            filter: cfg.filter_size,
            input_filter: cfg.input_conv_filter,
            dilations: cfg.dilations(),
            out_width: cfg.params_per_step(),
        }
    }
}

impl GenerationState {
    /// Samples emitted so far.
    pub fn emitted(&self) -> u64 {
        self.emitted
    }
}

pub fn init_state(model: &WaveNet) -> GenerationState {
    init_state_seeded(model, 0)
}

/// Zero-filled buffers, matching the zero left padding of the causal convs.
pub fn init_state_seeded(model: &WaveNet, seed: u64) -> GenerationState {
    let shape = Shape::of(model.config());
    let layers = shape
        .dilations
        .iter()
        .map(|d| RingBuffer::new((shape.filter - 1) * d + 1, shape.residual))
        .collect();
    GenerationState {
        input: RingBuffer::new(shape.input_filter, 1),
        layers,
        emitted: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        shape,
    }
}

/// `out += x * W` for one tap of a `[taps, cin, cout]` weight.
fn gemv_acc(x: &[f32], w: &[f32], out: &mut [f32]) {
    let cout = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * cout..(i + 1) * cout];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

fn bias_or_zero(store: &ParamStore, ids: ConvIds, out: &mut [f32]) {
    match ids.bias {
        Some(b) => out.copy_from_slice(store.get(b).value.data()),
        None => out.fill(0.0),
    }
}

fn pointwise(store: &ParamStore, ids: ConvIds, x: &[f32], out: &mut [f32]) {
    bias_or_zero(store, ids, out);
    gemv_acc(x, store.get(ids.weight).value.data(), out);
}

/// Conditioning contribution for one step.
pub enum StepCondition<'a> {
    /// Raw conditioning vector; projected per layer inside the step.
    Vector(&'a [f32]),
    /// Precomputed projections and the output sample index.
    Projected(&'a ConditionProjections, usize),
}

/// Advances the state by one sample and returns the mixture parameters
/// for the next output sample. `prev` is the previously emitted sample
/// (0 before the first step).
pub fn step(
    model: &WaveNet,
    state: &mut GenerationState,
    prev: f64,
    cond: StepCondition<'_>,
) -> Result<Vec<f32>, SamplerError> {
    let cfg = model.config();
    if state.shape != Shape::of(cfg) {
        return Err(SamplerError::StateMismatch);
    }
    if !(-1.0..=1.0).contains(&prev) {
        return Err(SamplerError::SampleOutOfRange(prev));
    }
    let r = cfg.residual_channels;
    match cond {
        StepCondition::Vector(v) if v.len() != r => {
            return Err(SamplerError::CondWidth { expected: r, got: v.len() })
        }
        StepCondition::Projected(p, t) if t >= p.output_len() => {
            return Err(SamplerError::CondRow {
                row: t,
                rows: p.output_len(),
            })
        }
        StepCondition::Projected(p, _) if p.filter.len() != state.layers.len() => {
            return Err(SamplerError::StateMismatch)
        }
        _ => {}
    }
    let store = model.params();
    let layout = model.layout();
    let k = cfg.filter_size;

    state.input.push(&[prev as f32]);
    let mut h = vec![0.0f32; r];
    {
        let ids = layout.input;
        bias_or_zero(store, ids, &mut h);
        let w = store.get(ids.weight).value.data();
        let taps = cfg.input_conv_filter;
        for tap in 0..taps {
            gemv_acc(state.input.get(taps - 1 - tap), &w[tap * r..(tap + 1) * r], &mut h);
        }
    }

    let mut f = vec![0.0f32; r];
    let mut q = vec![0.0f32; r];
    let mut z = vec![0.0f32; r];
    let mut tmp = vec![0.0f32; r];
    let mut skips = vec![0.0f32; r];
    let last = layout.layers.len() - 1;
    for (li, (layer, ring)) in layout.layers.iter().zip(state.layers.iter_mut()).enumerate() {
        ring.push(&h);
        bias_or_zero(store, layer.filter, &mut f);
        bias_or_zero(store, layer.gate, &mut q);
        let wf = store.get(layer.filter.weight).value.data();
        let wg = store.get(layer.gate.weight).value.data();
        for tap in 0..k {
            let x = ring.get((k - 1 - tap) * layer.dilation);
            gemv_acc(x, &wf[tap * r * r..(tap + 1) * r * r], &mut f);
            gemv_acc(x, &wg[tap * r * r..(tap + 1) * r * r], &mut q);
        }
        match cond {
            StepCondition::Vector(c) => {
                gemv_acc(c, store.get(layer.cond_filter.weight).value.data(), &mut f);
                gemv_acc(c, store.get(layer.cond_gate.weight).value.data(), &mut q);
            }
            StepCondition::Projected(p, t) => {
                let row = t / p.repeat;
                for (o, v) in f.iter_mut().zip(p.filter[li].row(row)) {
                    *o += v;
                }
                for (o, v) in q.iter_mut().zip(p.gate[li].row(row)) {
                    *o += v;
                }
            }
        }
        for j in 0..r {
            z[j] = f[j].tanh() * sigmoid(q[j] as f64) as f32;
        }
        pointwise(store, layer.skip, &z, &mut tmp);
        for (s, v) in skips.iter_mut().zip(&tmp) {
            *s += v;
        }
        if li != last {
            pointwise(store, layer.residual, &z, &mut tmp);
            for (hv, v) in h.iter_mut().zip(&tmp) {
                *hv += v;
            }
        }
    }

    let relu = |v: &mut [f32]| v.iter_mut().for_each(|x| *x = x.max(0.0));
    relu(&mut skips);
    let hc = cfg.head_channels;
    let mut y1 = vec![0.0f32; hc];
    pointwise(store, layout.head1, &skips, &mut y1);
    relu(&mut y1);
    let mut y2 = vec![0.0f32; hc];
    pointwise(store, layout.head2, &y1, &mut y2);
    relu(&mut y2);
    let mut out = vec![0.0f32; cfg.params_per_step()];
    pointwise(store, layout.out, &y2, &mut out);
    state.emitted += 1;
    Ok(out)
}

/// Draws one sample from a single step's mixture parameters
/// `[logits(M), means(M), raw log-scales(M)]`.
///
/// The component is chosen from the untempered softmax; the temperature
/// scales only the logistic spread.
pub fn sample_from_mol<R: Rng + ?Sized>(
    params: &[f32],
    q: &Quantization,
    rng: &mut R,
    temperature: f64,
) -> Result<f64, SamplerError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(SamplerError::Temperature(temperature));
    }
    let m = params.len() / 3;
    if m == 0 || params.len() != 3 * m || params.iter().any(|v| !v.is_finite()) {
        return Err(SamplerError::NonFinite);
    }
    let logits = &params[..m];
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let weights: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut c = m - 1;
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            c = i;
            break;
        }
        pick -= w;
    }
    let mean = params[m + c] as f64;
    let scale = (params[2 * m + c] as f64).max(q.log_scale_min).exp();
    // u in (0, 1) so the logit stays finite.
    let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
    let x = mean + scale * temperature * (u / (1.0 - u)).ln();
    Ok(x.clamp(-1.0, 1.0))
}

/// Generates `frames * samples_per_frame` samples at the model's output
/// rate. Deterministic for a given seed.
pub fn synthesize(
    model: &WaveNet,
    mel: &MelSpectrogram,
    seed: u64,
    temperature: f64,
) -> Result<AudioBuffer, SamplerError> {
    synthesize_with(model, mel, seed, temperature, |_, _| {})
}

/// [`synthesize`] with a progress callback `(done, total)` invoked every
/// 1000 samples.
pub fn synthesize_with(
    model: &WaveNet,
    mel: &MelSpectrogram,
    seed: u64,
    temperature: f64,
    mut progress: impl FnMut(usize, usize),
) -> Result<AudioBuffer, SamplerError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(SamplerError::Temperature(temperature));
    }
    let proj = model.condition_projections(mel)?;
    let total = proj.output_len();
    let q = model.config().quantization();
    let mut state = init_state_seeded(model, seed);
    let mut out = Vec::with_capacity(total);
    let mut prev = 0.0;
    for t in 0..total {
        let params = step(model, &mut state, prev, StepCondition::Projected(&proj, t))?;
        prev = sample_from_mol(&params, &q, &mut state.rng, temperature)?;
        out.push(prev);
        if (t + 1) % 1000 == 0 || t + 1 == total {
            progress(t + 1, total);
        }
    }
    Ok(AudioBuffer::new(out, model.config().output_rate_hz)?)
}

/// Runs `step` over a given sequence (teacher forcing through the
/// incremental path) and collects the per-step parameters.
pub fn incremental_forward(
    model: &WaveNet,
    audio: &[f64],
    cond: &Tensor<f32>,
) -> Result<MixtureParams, SamplerError> {
    if cond.rows() != audio.len() {
        return Err(WaveNetError::LengthMismatch {
            audio: audio.len(),
            cond: cond.rows(),
        }
        .into());
    }
    let mut state = init_state(model);
    let mut data = Vec::with_capacity(audio.len() * model.config().params_per_step());
    let mut prev = 0.0;
    for (t, &x) in audio.iter().enumerate() {
        data.extend(step(model, &mut state, prev, StepCondition::Vector(cond.row(t)))?);
        prev = x;
    }
    Ok(MixtureParams {
        components: model.config().mixture_components,
        data,
    })
}
