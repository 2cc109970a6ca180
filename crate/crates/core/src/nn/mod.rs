//! Convolutional encoder/decoder with hand-written backpropagation and Adam.
//!
//! Activations are kept channel-major as `(channels, batch * length)` matrices
//! so that every convolution is one GEMM over an im2col buffer. Dense layers
//! use `(features, batch)`. Samples enter and leave the model as rows of a
//! `(batch, length)` matrix.

mod adam;
mod layers;
mod model;

pub use adam::{adam_step, AdamState};
pub use model::{
    backward, decoder_forward, encode_one, encoder_forward, DecoderCache, EncoderCache,
};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Base channel count `d`; conv layer `i` has `d * channel_mults[i]` channels.
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Units of the tempo head; the last entry must be 1.
    pub head_units: Vec<usize>,
    pub input_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channel_mults: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Width of the dense layer that lifts the scalar back to a feature map.
    pub expand_units: usize,
    pub output_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Six stride-2 layers with `d * [1, 2, 4, 8, 8, 8]` channels and a 48-unit
    /// tempo head; the decoder mirrors it.
    pub fn new(base_channels: usize, input_len: usize) -> Self {
        let encoder = EncoderConfig {
            base_channels,
            channel_mults: vec![1, 2, 4, 8, 8, 8],
            kernel: 3,
            stride: 2,
            head_units: vec![48, 1],
            input_len,
        };
        let final_len = conv_lengths(input_len, 2, 6).last().copied().unwrap_or(1);
        let decoder = DecoderConfig {
            channel_mults: vec![8, 8, 8, 4, 2, 1],
            kernel: 3,
            stride: 2,
            expand_units: final_len * base_channels * 8,
            output_len: input_len,
        };
        Self { encoder, decoder }
    }

    pub fn paper() -> Self {
        Self::new(64, 128)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        if e.base_channels == 0 || e.input_len == 0 || e.kernel == 0 || e.stride == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if e.channel_mults.is_empty() || e.channel_mults.contains(&0) {
            return Err(Error::config(
                "encoder channel multipliers must be positive",
            ));
        }
        if e.head_units.last() != Some(&1) || e.head_units.contains(&0) {
            return Err(Error::config("tempo head must end in a single unit"));
        }
        if d.channel_mults.len() != e.channel_mults.len() || d.channel_mults.contains(&0) {
            return Err(Error::config(
                "decoder needs as many positive channel multipliers as the encoder",
            ));
        }
        if d.kernel != e.kernel || d.stride != e.stride {
            return Err(Error::config(
                "decoder kernel/stride must match the encoder",
            ));
        }
        if d.output_len != e.input_len {
            return Err(Error::config(
                "decoder output length must equal encoder input length",
            ));
        }
        let final_len = *self.encoder_lengths().last().unwrap();
        if d.expand_units == 0 || d.expand_units % final_len != 0 {
            return Err(Error::config(format!(
                "expand_units {} is not a multiple of the bottleneck length {final_len}",
                d.expand_units
            )));
        }
        Ok(())
    }

    /// Spatial length before each encoder layer and after the last one.
    pub fn encoder_lengths(&self) -> Vec<usize> {
        conv_lengths(
            self.encoder.input_len,
            self.encoder.stride,
            self.encoder.channel_mults.len(),
        )
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        std::iter::once(1)
            .chain(
                self.encoder
                    .channel_mults
                    .iter()
                    .map(|m| m * self.encoder.base_channels),
            )
            .collect()
    }

    /// Channels entering each transposed conv, plus the channels of the last output.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let first = self.decoder.expand_units / self.encoder_lengths().last().unwrap();
        std::iter::once(first)
            .chain(
                self.decoder
                    .channel_mults
                    .iter()
                    .map(|m| m * self.encoder.base_channels),
            )
            .collect()
    }

    pub fn flatten_size(&self) -> usize {
        self.encoder_lengths().last().unwrap() * self.encoder_channels().last().unwrap()
    }

    pub(crate) fn slots(&self) -> Slots {
        let n_enc = self.encoder.channel_mults.len();
        let n_head = self.encoder.head_units.len();
        let n_dec = self.decoder.channel_mults.len();
        Slots {
            n_enc,
            n_head,
            n_dec,
        }
    }
}

fn conv_lengths(input_len: usize, stride: usize, layers: usize) -> Vec<usize> {
    let mut lens = vec![input_len];
    for _ in 0..layers {
        let last = *lens.last().unwrap();
        lens.push(last.div_ceil(stride));
    }
    lens
}

/// Positions of each weight/bias pair in the flat tensor list.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slots {
    pub n_enc: usize,
    pub n_head: usize,
    pub n_dec: usize,
}

impl Slots {
    pub fn enc_conv(&self, i: usize) -> (usize, usize) {
        (2 * i, 2 * i + 1)
    }
    pub fn head(&self, j: usize) -> (usize, usize) {
        let base = 2 * (self.n_enc + j);
        (base, base + 1)
    }
    pub fn expand(&self) -> (usize, usize) {
        let base = 2 * (self.n_enc + self.n_head);
        (base, base + 1)
    }
    pub fn dec_tconv(&self, i: usize) -> (usize, usize) {
        let base = 2 * (self.n_enc + self.n_head + 1 + i);
        (base, base + 1)
    }
    pub fn proj(&self) -> (usize, usize) {
        let base = 2 * (self.n_enc + self.n_head + 1 + self.n_dec);
        (base, base + 1)
    }
    pub fn count(&self) -> usize {
        2 * (self.n_enc + self.n_head + self.n_dec + 2)
    }
}

/// Every weight and bias of the encoder, tempo head and decoder.
///
/// Both pretext branches run through this single copy. Weights are stored as
/// matrices: conv `(out, in * kernel)`, transposed conv `(in, out * kernel)`,
/// dense `(out, in)`; biases as `(channels, 1)` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Array2<f64>>,
}

/// Same layout as [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl ModelParams {
    /// Shapes of every tensor, in storage order.
    pub fn shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
        let k = config.encoder.kernel;
        let enc_ch = config.encoder_channels();
        let dec_ch = config.decoder_channels();
        let mut shapes = Vec::new();
        for w in enc_ch.windows(2) {
            shapes.push((w[1], w[0] * k));
            shapes.push((w[1], 1));
        }
        let mut fan_in = config.flatten_size();
        for &units in &config.encoder.head_units {
            shapes.push((units, fan_in));
            shapes.push((units, 1));
            fan_in = units;
        }
        shapes.push((config.decoder.expand_units, 1));
        shapes.push((config.decoder.expand_units, 1));
        for w in dec_ch.windows(2) {
            shapes.push((w[0], w[1] * k));
            shapes.push((w[1], 1));
        }
        shapes.push((1, *dec_ch.last().unwrap()));
        shapes.push((1, 1));
        shapes
    }

    pub fn names(config: &ModelConfig) -> Vec<String> {
        let s = config.slots();
        let mut names = Vec::with_capacity(s.count());
        for i in 0..s.n_enc {
            names.push(format!("enc.conv{i}.weight"));
            names.push(format!("enc.conv{i}.bias"));
        }
        for j in 0..s.n_head {
            names.push(format!("head.dense{j}.weight"));
            names.push(format!("head.dense{j}.bias"));
        }
        names.push("dec.expand.weight".into());
        names.push("dec.expand.bias".into());
        for i in 0..s.n_dec {
            names.push(format!("dec.tconv{i}.weight"));
            names.push(format!("dec.tconv{i}.bias"));
        }
        names.push("dec.proj.weight".into());
        names.push("dec.proj.bias".into());
        names
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            tensors: Self::shapes(config)
                .into_iter()
                .map(Array2::zeros)
                .collect(),
            config: config.clone(),
        })
    }

    /// Builds parameters from tensors loaded elsewhere, checking their shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Array2<f64>>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(&config);
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| *s != t.dim())
        {
            return Err(Error::contract(
                "tensor shapes do not match the model config",
            ));
        }
        Ok(Self { config, tensors })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Fan-in of the weight at `index` (biases report 0).
    fn fan_in(&self, index: usize) -> usize {
        if index % 2 == 1 {
            return 0;
        }
        let slots = self.config.slots();
        let (rows, cols) = self.tensors[index].dim();
        let first_tconv = slots.dec_tconv(0).0;
        let proj = slots.proj().0;
        if (first_tconv..proj).contains(&index) {
            // (in, out * kernel): each output sees `in * kernel` taps at most.
            rows * self.config.decoder.kernel
        } else {
            cols
        }
    }
}

/// He-uniform weights (`U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`) and zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (0..params.tensors.len()).step_by(2) {
        let limit = (6.0 / params.fan_in(i) as f64).sqrt();
        params.tensors[i].mapv_inplace(|_| rng.random_range(-limit..limit));
    }
    Ok(params)
}
