use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mol;
use super::{MixtureParams, WaveNetConfig, WaveNetError};
use crate::dsp::MelSpectrogram;
use crate::tensor::{
    Graph, LossEval, NodeId, Padding, ParamId, ParamStore, ParamValues, Real, Tensor, TensorError,
};

/// Weight and bias of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Parameters of one gated residual layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub dilation: usize,
    pub filter: ConvIds,
    pub gate: ConvIds,
    pub cond_filter: ConvIds,
    pub cond_gate: ConvIds,
    pub residual: ConvIds,
    pub skip: ConvIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub cond_convs: Vec<ConvIds>,
    pub cond_tconvs: Vec<ConvIds>,
    pub input: ConvIds,
    pub layers: Vec<LayerSpec>,
    pub head1: ConvIds,
    pub head2: ConvIds,
    pub out: ConvIds,
}

/// Per-layer conditioning projections at the low (pre-repetition) rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionProjections {
    /// Output samples per low-rate row.
    pub repeat: usize,
    pub filter: Vec<Tensor<f32>>,
    pub gate: Vec<Tensor<f32>>,
}

impl ConditionProjections {
    pub fn output_len(&self) -> usize {
        self.filter.first().map_or(0, |t| t.rows() * self.repeat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveNet {
    config: WaveNetConfig,
    params: ParamStore,
    layout: ParamLayout,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn conv(
        &mut self,
        name: &str,
        taps: usize,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Result<ConvIds, TensorError> {
        let bound = (1.0 / (taps * cin) as f64).sqrt();
        let data = (0..taps * cin * cout)
            .map(|_| (bound * (2.0 * self.rng.random::<f64>() - 1.0)) as f32)
            .collect();
        let weight = self
            .store
            .add(format!("{name}.w"), Tensor::from_vec(&[taps, cin, cout], data)?)?;
        let bias = if bias {
            Some(self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(ConvIds { weight, bias })
    }
}

/// Output-layer bias: zero logits, means spread evenly over [-0.6, 0.6]
/// and scales at 0.4 of the mean spacing, so the initial mixture already
/// covers the bulk of the amplitude range.
fn output_bias(m: usize) -> Vec<f32> {
    let (means, scale): (Vec<f64>, f64) = if m == 1 {
        (vec![0.0], 0.3)
    } else {
        let spacing = 1.2 / (m - 1) as f64;
        ((0..m).map(|i| -0.6 + spacing * i as f64).collect(), 0.4 * spacing)
    };
    let mut bias = vec![0.0f32; 3 * m];
    for i in 0..m {
        bias[m + i] = means[i] as f32;
        bias[2 * m + i] = scale.ln() as f32;
    }
    bias
}

const OUT_WEIGHT_SCALE: f32 = 0.01;

fn to_f64<F: Real>(data: &[F]) -> Vec<f64> {
    data.iter().map(|v| v.as_f64()).collect()
}

impl WaveNet {
    pub fn new(config: WaveNetConfig) -> Result<Self, WaveNetError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let r = config.residual_channels;
        let h = config.head_channels;
        let m = config.mixture_components;

        let mut cond_convs = Vec::new();
        for i in 0..config.cond_layers {
            let cin = if i == 0 { config.mel_bins } else { r };
            cond_convs.push(init.conv(&format!("cond.conv{i}"), config.cond_filter_size, cin, r, true)?);
        }
        let mut cond_tconvs = Vec::new();
        for i in 0..config.cond_transpose_layers {
            cond_tconvs.push(init.conv(&format!("cond.tconv{i}"), config.cond_transpose_filter, r, r, true)?);
        }
        let input = init.conv("input.conv", config.input_conv_filter, 1, r, true)?;
        let mut layers = Vec::new();
        for s in 0..config.stacks {
            for l in 0..config.layers_per_stack {
                let base = format!("stack{s}.layer{l}");
                layers.push(LayerSpec {
                    dilation: config.dilation_growth.pow(l as u32),
                    filter: init.conv(&format!("{base}.filter"), config.filter_size, r, r, true)?,
                    gate: init.conv(&format!("{base}.gate"), config.filter_size, r, r, true)?,
                    cond_filter: init.conv(&format!("{base}.cond_filter"), 1, r, r, false)?,
                    cond_gate: init.conv(&format!("{base}.cond_gate"), 1, r, r, false)?,
                    residual: init.conv(&format!("{base}.residual"), 1, r, r, true)?,
                    skip: init.conv(&format!("{base}.skip"), 1, r, r, true)?,
                });
            }
        }
        let head1 = init.conv("head.conv1", 1, r, h, true)?;
        let head2 = init.conv("head.conv2", 1, h, h, true)?;
        let out = init.conv("head.out", 1, h, 3 * m, true)?;

        let w = store.get_mut(out.weight).value.data_mut();
        w.iter_mut().for_each(|v| *v *= OUT_WEIGHT_SCALE);
        if let Some(b) = out.bias {
            store
                .get_mut(b)
                .value
                .data_mut()
                .copy_from_slice(&output_bias(m));
        }

        Ok(Self {
            config,
            params: store,
            layout: ParamLayout {
                cond_convs,
                cond_tconvs,
                input,
                layers,
                head1,
                head2,
                out,
            },
        })
    }

    /// Rebuilds a model from named parameter values (e.g. a checkpoint).
    /// Every expected name must be present with matching dims; values and
    /// Adam moments are copied.
    pub fn from_params(config: WaveNetConfig, loaded: &ParamStore) -> Result<Self, WaveNetError> {
        let mut model = Self::new(config)?;
        if loaded.len() != model.params.len() {
            let unknown = loaded
                .iter()
                .find(|p| model.params.by_name(&p.name).is_none())
                .map_or_else(|| "<missing parameters>".to_string(), |p| p.name.clone());
            return Err(TensorError::UnknownParameter(unknown).into());
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.get(id).name.clone();
            let src = loaded
                .by_name(&name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            let src = loaded.get(src);
            let dst = model.params.get_mut(id);
            if src.value.dims() != dst.value.dims() {
                return Err(TensorError::ShapeMismatch {
                    op: "load",
                    expected: dst.value.dims().to_vec(),
                    got: src.value.dims().to_vec(),
                }
                .into());
            }
            dst.value = src.value.clone();
            dst.adam_m = src.adam_m.clone();
            dst.adam_v = src.adam_v.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &WaveNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn check_mel(&self, mel: &MelSpectrogram) -> Result<(), WaveNetError> {
        if (mel.frame_rate_hz - self.config.cond_rate_hz as f64).abs() > 1e-9 {
            return Err(WaveNetError::RateMismatch {
                expected: self.config.cond_rate_hz as f64,
                actual: mel.frame_rate_hz,
            });
        }
        if mel.num_bins != self.config.mel_bins {
            return Err(WaveNetError::BinMismatch {
                expected: self.config.mel_bins,
                actual: mel.num_bins,
            });
        }
        Ok(())
    }

    fn conv<F: Real, P: ParamValues<F>>(
        g: &mut Graph<F>,
        p: &P,
        x: NodeId,
        ids: ConvIds,
        dilation: usize,
        padding: Padding,
    ) -> Result<NodeId, TensorError> {
        let w = g.param(p, ids.weight);
        let b = ids.bias.map(|b| g.param(p, b));
        g.conv1d(x, w, b, dilation, padding)
    }

    /// Conditioning stack up to (and including) the transpose convolutions:
    /// `[frames * 2^L x residual_channels]`.
    pub fn build_condition_low<F: Real, P: ParamValues<F>>(
        &self,
        g: &mut Graph<F>,
        p: &P,
        mel: &MelSpectrogram,
    ) -> Result<NodeId, WaveNetError> {
        self.check_mel(mel)?;
        let frames = Tensor::from_f64(&[mel.num_frames, mel.num_bins], &mel.frames)?;
        let mut h = g.constant(frames);
        for (i, ids) in self.layout.cond_convs.iter().enumerate() {
            h = Self::conv(g, p, h, *ids, 1 << i, Padding::Same)?;
        }
        for ids in &self.layout.cond_tconvs {
            let w = g.param(p, ids.weight);
            let b = ids.bias.map(|b| g.param(p, b));
            h = g.conv_transpose1d(h, w, b, 2)?;
        }
        Ok(g.tanh(h)?)
    }

    /// One conditioning vector per output sample.
    pub fn condition(&self, mel: &MelSpectrogram) -> Result<Tensor<f32>, WaveNetError> {
        let mut g = Graph::new();
        let low = self.build_condition_low(&mut g, &self.params, mel)?;
        let full = g.repeat_rows(low, self.config.cond_repeat_factor)?;
        Ok(g.value(full).clone())
    }

    pub fn condition_projections(&self, mel: &MelSpectrogram) -> Result<ConditionProjections, WaveNetError> {
        let mut g = Graph::new();
        let low = self.build_condition_low(&mut g, &self.params, mel)?;
        let mut filter = Vec::new();
        let mut gate = Vec::new();
        for layer in &self.layout.layers {
            let f = Self::conv(&mut g, &self.params, low, layer.cond_filter, 1, Padding::Causal)?;
            let q = Self::conv(&mut g, &self.params, low, layer.cond_gate, 1, Padding::Causal)?;
            filter.push(g.value(f).clone());
            gate.push(g.value(q).clone());
        }
        Ok(ConditionProjections {
            repeat: self.config.cond_repeat_factor,
            filter,
            gate,
        })
    }

    fn check_audio(audio: &[f64], cond_len: usize) -> Result<(), WaveNetError> {
        if audio.len() != cond_len {
            return Err(WaveNetError::LengthMismatch {
                audio: audio.len(),
                cond: cond_len,
            });
        }
        if let Some((index, &value)) = audio
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(WaveNetError::SampleOutOfRange { index, value });
        }
        Ok(())
    }

    /// Causal core and head. `cond` holds conditioning rows that are each
    /// used for `repeat` consecutive samples. Returns `[T x 3M]`.
    pub fn build_core<F: Real, P: ParamValues<F>>(
        &self,
        g: &mut Graph<F>,
        p: &P,
        audio: &[f64],
        cond: NodeId,
        repeat: usize,
    ) -> Result<NodeId, WaveNetError> {
        Self::check_audio(audio, g.value(cond).rows() * repeat)?;
        let mut shifted = Vec::with_capacity(audio.len());
        if !audio.is_empty() {
            shifted.push(0.0);
            shifted.extend_from_slice(&audio[..audio.len() - 1]);
        }
        let x = g.constant(Tensor::from_f64(&[audio.len(), 1], &shifted)?);
        let mut h = Self::conv(g, p, x, self.layout.input, 1, Padding::Causal)?;
        let mut skips: Option<NodeId> = None;
        let last = self.layout.layers.len() - 1;
        for (i, layer) in self.layout.layers.iter().enumerate() {
            let mut f = Self::conv(g, p, h, layer.filter, layer.dilation, Padding::Causal)?;
            let mut q = Self::conv(g, p, h, layer.gate, layer.dilation, Padding::Causal)?;
            let cf = Self::conv(g, p, cond, layer.cond_filter, 1, Padding::Causal)?;
            let cg = Self::conv(g, p, cond, layer.cond_gate, 1, Padding::Causal)?;
            let (cf, cg) = if repeat == 1 {
                (cf, cg)
            } else {
                (g.repeat_rows(cf, repeat)?, g.repeat_rows(cg, repeat)?)
            };
            f = g.add(f, cf)?;
            q = g.add(q, cg)?;
            let z = g.gated(f, q)?;
            let s = Self::conv(g, p, z, layer.skip, 1, Padding::Causal)?;
            skips = Some(match skips {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
            if i != last {
                let r = Self::conv(g, p, z, layer.residual, 1, Padding::Causal)?;
                h = g.add(h, r)?;
            }
        }
        let mut y = g.relu(skips.expect("at least one layer"))?;
        y = Self::conv(g, p, y, self.layout.head1, 1, Padding::Causal)?;
        y = g.relu(y)?;
        y = Self::conv(g, p, y, self.layout.head2, 1, Padding::Causal)?;
        y = g.relu(y)?;
        Ok(Self::conv(g, p, y, self.layout.out, 1, Padding::Causal)?)
    }

    /// Teacher-forced output graph for `audio` conditioned on `mel`.
    pub fn build_forward<F: Real, P: ParamValues<F>>(
        &self,
        g: &mut Graph<F>,
        p: &P,
        audio: &[f64],
        mel: &MelSpectrogram,
    ) -> Result<NodeId, WaveNetError> {
        let low = self.build_condition_low(g, p, mel)?;
        self.build_core(g, p, audio, low, self.config.cond_repeat_factor)
    }

    /// Appends the mean negative log-likelihood of `audio` under `out`.
    pub fn build_nll<F: Real>(
        &self,
        g: &mut Graph<F>,
        out: NodeId,
        audio: &[f64],
    ) -> Result<NodeId, WaveNetError> {
        let m = self.config.mixture_components;
        let q = self.config.quantization();
        g.scalar_loss(out, |t| {
            let (loss, grad, kinks) = mol::mean_nll(audio, &to_f64(t.data()), m, &q)?;
            Ok::<_, WaveNetError>(LossEval {
                value: F::of(loss),
                grad: Tensor::from_f64(t.dims(), &grad)?,
                kinks,
            })
        })
    }

    pub fn build_loss<F: Real, P: ParamValues<F>>(
        &self,
        g: &mut Graph<F>,
        p: &P,
        audio: &[f64],
        mel: &MelSpectrogram,
    ) -> Result<NodeId, WaveNetError> {
        let out = self.build_forward(g, p, audio, mel)?;
        self.build_nll(g, out, audio)
    }

    /// Training graph in f32 over the model's own parameters.
    pub fn loss_graph(&self, audio: &[f64], mel: &MelSpectrogram) -> Result<(Graph<f32>, NodeId), WaveNetError> {
        let mut g = Graph::new();
        let loss = self.build_loss(&mut g, &self.params, audio, mel)?;
        Ok((g, loss))
    }

    pub fn nll_loss(&self, audio: &[f64], mel: &MelSpectrogram) -> Result<f64, WaveNetError> {
        let (g, loss) = self.loss_graph(audio, mel)?;
        Ok(g.value(loss).item() as f64)
    }

    fn mixture(&self, t: &Tensor<f32>) -> MixtureParams {
        MixtureParams {
            components: self.config.mixture_components,
            data: t.data().to_vec(),
        }
    }

    pub fn forward_teacher_forced(
        &self,
        audio: &[f64],
        mel: &MelSpectrogram,
    ) -> Result<MixtureParams, WaveNetError> {
        let mut g = Graph::new();
        let out = self.build_forward(&mut g, &self.params, audio, mel)?;
        Ok(self.mixture(g.value(out)))
    }

    /// Same as [`Self::forward_teacher_forced`] with an explicit per-sample
    /// conditioning tensor `[T x residual_channels]`.
    pub fn forward_with_condition(
        &self,
        audio: &[f64],
        cond: &Tensor<f32>,
    ) -> Result<MixtureParams, WaveNetError> {
        if cond.dims().len() != 2 || cond.cols() != self.config.residual_channels {
            return Err(TensorError::ShapeMismatch {
                op: "forward_with_condition",
                expected: vec![audio.len(), self.config.residual_channels],
                got: cond.dims().to_vec(),
            }
            .into());
        }
        let mut g = Graph::new();
        let c = g.constant(cond.clone());
        let out = self.build_core(&mut g, &self.params, audio, c, 1)?;
        Ok(self.mixture(g.value(out)))
    }
}
