//! U-Net encoder/decoder with a vector-quantized bottleneck.
//!
//! Level `l` of the encoder runs two 3×3 conv-BN-ReLU units at
//! `base_channels·2^l` channels and then halves the resolution with a
//! strided 4×4 unit. A 1×1 convolution maps the deepest features to the
//! `bottleneck_dim` channels of `z_e`. The decoder mirrors this with
//! transposed convolutions; in prediction mode each level concatenates the
//! matching encoder features before its two units. A final 1×1 convolution
//! without normalization or rectifier produces the frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{codebook_init, straight_through, straight_through_grad, Codebook, QuantizationResult};
use crate::dataset::{FrameWindow, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{join, Param, Parameters, Phase, Unit, UnitCache};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Predict the frame after `n` inputs; skip connections on.
    Prediction,
    /// Reconstruct the single input frame; skip connections off.
    Reconstruction,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Prediction => "prediction",
            Mode::Reconstruction => "reconstruction",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prediction" => Ok(Mode::Prediction),
            "reconstruction" => Ok(Mode::Reconstruction),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected prediction or reconstruction)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Input window length; 0 in reconstruction mode.
    pub n: usize,
    pub levels: usize,
    pub base_channels: usize,
    /// `D`, channels of `z_e` and dimension of codebook entries.
    pub bottleneck_dim: usize,
    /// `K`.
    pub codebook_size: usize,
    /// Registered codebook initializer.
    pub codebook_init: String,
    /// Image channels.
    pub channels: usize,
    pub mode: Mode,
    pub use_codebook: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n: 5,
            levels: 4,
            base_channels: 64,
            bottleneck_dim: 512,
            codebook_size: 256,
            codebook_init: "uniform_small".into(),
            channels: CHANNELS,
            mode: Mode::Prediction,
            use_codebook: true,
        }
    }
}

impl NetworkConfig {
    pub fn reconstruction() -> Self {
        Self {
            n: 0,
            mode: Mode::Reconstruction,
            ..Self::default()
        }
    }

    pub fn skips(&self) -> bool {
        self.mode == Mode::Prediction
    }

    pub fn input_channels(&self) -> usize {
        self.n.max(1) * self.channels
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.mode {
            Mode::Prediction if self.n == 0 => return bad("prediction mode needs n ≥ 1".into()),
            Mode::Reconstruction if self.n != 0 => {
                return bad(format!("reconstruction mode needs n = 0, got {}", self.n))
            }
            _ => {}
        }
        if self.levels == 0 || self.levels > 8 {
            return bad(format!("levels must be in 1..=8, got {}", self.levels));
        }
        if self.base_channels == 0 || self.bottleneck_dim == 0 || self.channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.use_codebook && self.codebook_size < 2 {
            return bad(format!("codebook_size must be ≥ 2, got {}", self.codebook_size));
        }
        Ok(())
    }

    /// Checks a `B × C × H × W` input shape against this configuration.
    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [b, c, h, w] = shape;
        let step = 1usize << self.levels;
        if b == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        if c != self.input_channels() {
            return Err(Error::Config(format!(
                "input has {c} channels; n={} needs {}",
                self.n,
                self.input_channels()
            )));
        }
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return Err(Error::Config(format!(
                "input size {h}×{w} not divisible by 2^{} = {step}",
                self.levels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel<T> {
    a: Unit<T>,
    b: Unit<T>,
    down: Unit<T>,
}

#[derive(Clone, Debug)]
struct DecoderLevel<T> {
    up: Unit<T>,
    a: Unit<T>,
    b: Unit<T>,
}

#[derive(Clone, Debug)]
pub struct VqUNet<T> {
    config: NetworkConfig,
    encoder: Vec<EncoderLevel<T>>,
    pre_quant: Unit<T>,
    /// Deepest level first.
    decoder: Vec<DecoderLevel<T>>,
    head: Unit<T>,
    pub codebook: Option<Codebook<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Unclamped decoder output, same shape as the target frames.
    pub predicted: Tensor<T>,
    pub quantization: Option<QuantizationResult<T>>,
}

#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub z_e: Tensor<T>,
    /// Per level, shallowest first; empty in reconstruction mode.
    pub skips: Vec<Tensor<T>>,
}

/// Forward caches needed by [`VqUNet::backward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    encoder: Vec<[UnitCache<T>; 3]>,
    pre_quant: UnitCache<T>,
    decoder: Vec<[UnitCache<T>; 3]>,
    head: UnitCache<T>,
}

/// Gradients at both sides of the bottleneck.
#[derive(Clone, Debug)]
pub struct BottleneckGrads<T> {
    /// At the decoder input (`z_q`, or `z_e` without a codebook).
    pub decoder_input: Tensor<T>,
    /// At the encoder output: the straight-through copy plus any direct term.
    pub encoder_output: Tensor<T>,
}

impl<T: Real> VqUNet<T> {
    /// Fresh network, deterministic per seed. Codebooks whose initializer
    /// needs encoder features start from `uniform_small` and must be
    /// re-initialized with [`VqUNet::init_codebook_from`].
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(config.levels);
        let mut cin = config.input_channels();
        for l in 0..config.levels {
            let c = config.level_channels(l);
            encoder.push(EncoderLevel {
                a: Unit::conv_bn_relu(cin, c, 3, 1, &mut rng),
                b: Unit::conv_bn_relu(c, c, 3, 1, &mut rng),
                down: Unit::conv_bn_relu(c, c, 4, 2, &mut rng),
            });
            cin = c;
        }
        let pre_quant = Unit::conv(cin, config.bottleneck_dim, 1, &mut rng);
        let mut decoder = Vec::with_capacity(config.levels);
        let mut cin = config.bottleneck_dim;
        for l in (0..config.levels).rev() {
            let c = config.level_channels(l);
            let merged = if config.skips() { 2 * c } else { c };
            decoder.push(DecoderLevel {
                up: Unit::deconv_bn_relu(cin, c, &mut rng),
                a: Unit::conv_bn_relu(merged, c, 3, 1, &mut rng),
                b: Unit::conv_bn_relu(c, c, 3, 1, &mut rng),
            });
            cin = c;
        }
        let head = Unit::conv(cin, config.channels, 1, &mut rng);
        let codebook = if config.use_codebook {
            let scheme = if crate::codebook::registry().get(&config.codebook_init)?.needs_features() {
                "uniform_small"
            } else {
                config.codebook_init.as_str()
            };
            Some(codebook_init(
                config.codebook_size,
                config.bottleneck_dim,
                seed.wrapping_add(0x9e37_79b9),
                scheme,
                None,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            encoder,
            pre_quant,
            decoder,
            head,
            codebook,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Re-initializes the codebook from encoder features of `inputs`
    /// using the configured scheme.
    pub fn init_codebook_from(&mut self, inputs: &Tensor<T>, seed: u64) -> Result<()> {
        if self.codebook.is_none() {
            return Ok(());
        }
        let z_e = self.encode(inputs, Phase::Train)?.z_e;
        let observed = crate::codebook::site_vectors(&z_e);
        let cfg = &self.config;
        self.codebook = Some(codebook_init(
            cfg.codebook_size,
            cfg.bottleneck_dim,
            seed,
            &cfg.codebook_init,
            Some(&observed),
        )?);
        Ok(())
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    /// Encoder pass only.
    pub fn encode(&self, inputs: &Tensor<T>, phase: Phase) -> Result<Encoded<T>> {
        self.config.check_input(inputs.shape())?;
        let (caches, pre) = self.run_encoder(inputs, phase);
        let skips = if self.config.skips() {
            caches.into_iter().map(|[_, b, _]| b.output).collect()
        } else {
            Vec::new()
        };
        Ok(Encoded {
            z_e: pre.output,
            skips,
        })
    }

    fn run_encoder(&self, inputs: &Tensor<T>, phase: Phase) -> (Vec<[UnitCache<T>; 3]>, UnitCache<T>) {
        let mut caches = Vec::with_capacity(self.encoder.len());
        let mut x = inputs.clone();
        for lvl in &self.encoder {
            let a = lvl.a.forward(x, phase);
            let b = lvl.b.forward(a.output.clone(), phase);
            let d = lvl.down.forward(b.output.clone(), phase);
            x = d.output.clone();
            caches.push([a, b, d]);
        }
        let pre = self.pre_quant.forward(x, phase);
        (caches, pre)
    }

    /// Full pass. With a codebook the decoder consumes the straight-through
    /// quantized map, never the raw encoder output.
    pub fn forward(&self, inputs: &Tensor<T>, phase: Phase) -> Result<(ForwardOutput<T>, Tape<T>)> {
        self.config.check_input(inputs.shape())?;
        let (enc, pre) = self.run_encoder(inputs, phase);
        let (bottleneck, quantization) = match &self.codebook {
            Some(cb) => {
                let q = cb.quantize(&pre.output)?;
                (straight_through(&q), Some(q))
            }
            None => (pre.output.clone(), None),
        };
        let levels = self.config.levels;
        let mut x = bottleneck;
        let mut dec = Vec::with_capacity(levels);
        for (i, lvl) in self.decoder.iter().enumerate() {
            let up = lvl.up.forward(x, phase);
            let merged = if self.config.skips() {
                Tensor::concat_channels(&up.output, &enc[levels - 1 - i][1].output)
            } else {
                up.output.clone()
            };
            let a = lvl.a.forward(merged, phase);
            let b = lvl.b.forward(a.output.clone(), phase);
            x = b.output.clone();
            dec.push([up, a, b]);
        }
        let head = self.head.forward(x, phase);
        let out = ForwardOutput {
            predicted: head.output.clone(),
            quantization,
        };
        let tape = Tape {
            encoder: enc,
            pre_quant: pre,
            decoder: dec,
            head,
        };
        Ok((out, tape))
    }

    /// Evaluation-mode forward without keeping caches around.
    pub fn infer(&self, inputs: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.forward(inputs, Phase::Eval).map(|(out, _)| out)
    }

    /// Accumulates parameter gradients for `d_pred` at the output and an
    /// optional direct term `d_ze_extra` at the encoder output (the
    /// commitment gradient). Codebook gradients are not touched here.
    pub fn backward(
        &mut self,
        tape: &Tape<T>,
        d_pred: &Tensor<T>,
        d_ze_extra: Option<&Tensor<T>>,
    ) -> BottleneckGrads<T> {
        let levels = self.config.levels;
        let skips = self.config.skips();
        let mut g = self.head.backward(&tape.head, d_pred);
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; levels];
        for (i, (lvl, [up, a, b])) in self.decoder.iter_mut().zip(&tape.decoder).enumerate().rev() {
            g = lvl.b.backward(b, &g);
            g = lvl.a.backward(a, &g);
            if skips {
                let (g_up, g_skip) = g.split_channels(up.output.channels());
                skip_grads[levels - 1 - i] = Some(g_skip);
                g = g_up;
            }
            g = lvl.up.backward(up, &g);
        }
        let decoder_input = g;
        let mut encoder_output = if self.codebook.is_some() {
            straight_through_grad(&decoder_input)
        } else {
            decoder_input.clone()
        };
        if let Some(extra) = d_ze_extra {
            encoder_output.add_assign(extra);
        }
        let mut g = self.pre_quant.backward(&tape.pre_quant, &encoder_output);
        for (l, (lvl, [a, b, d])) in self.encoder.iter_mut().zip(&tape.encoder).enumerate().rev() {
            g = lvl.down.backward(d, &g);
            if let Some(gs) = &skip_grads[l] {
                g.add_assign(gs);
            }
            g = lvl.b.backward(b, &g);
            g = lvl.a.backward(a, &g);
        }
        BottleneckGrads {
            decoder_input,
            encoder_output,
        }
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn absorb(&mut self, tape: &Tape<T>) {
        for (lvl, [a, b, d]) in self.encoder.iter_mut().zip(&tape.encoder) {
            lvl.a.absorb(a);
            lvl.b.absorb(b);
            lvl.down.absorb(d);
        }
        for (lvl, [up, a, b]) in self.decoder.iter_mut().zip(&tape.decoder) {
            lvl.up.absorb(up);
            lvl.a.absorb(a);
            lvl.b.absorb(b);
        }
    }

    /// Number of decoder inputs per level: 2 with skip connections, else 1.
    pub fn decoder_arity(&self) -> usize {
        if self.config.skips() {
            2
        } else {
            1
        }
    }

    /// Visits only encoder and decoder parameters.
    pub fn visit_network_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (l, lvl) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.level{l}");
            lvl.a.visit_params(&join(&p, "a"), f);
            lvl.b.visit_params(&join(&p, "b"), f);
            lvl.down.visit_params(&join(&p, "down"), f);
        }
        self.pre_quant.visit_params("encoder.pre_quant", f);
        let levels = self.config.levels;
        for (i, lvl) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.level{}", levels - 1 - i);
            lvl.up.visit_params(&join(&p, "up"), f);
            lvl.a.visit_params(&join(&p, "a"), f);
            lvl.b.visit_params(&join(&p, "b"), f);
        }
        self.head.visit_params("decoder.head", f);
    }
}

impl<T: Real> Parameters<T> for VqUNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.visit_network_params(&mut |name, p| f(&join(prefix, name), p));
        if let Some(cb) = &mut self.codebook {
            cb.visit_params(&join(prefix, "codebook"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        for (l, lvl) in self.encoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("encoder.level{l}"));
            lvl.a.visit_buffers(&join(&p, "a"), f);
            lvl.b.visit_buffers(&join(&p, "b"), f);
            lvl.down.visit_buffers(&join(&p, "down"), f);
        }
        let levels = self.config.levels;
        for (i, lvl) in self.decoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("decoder.level{}", levels - 1 - i));
            lvl.up.visit_buffers(&join(&p, "up"), f);
            lvl.a.visit_buffers(&join(&p, "a"), f);
            lvl.b.visit_buffers(&join(&p, "b"), f);
        }
    }
}

/// Stacks windows into `(inputs, targets)` batches.
pub fn stack_windows<T: Real>(windows: &[FrameWindow<'_>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let f = first.target();
    let (h, w) = (f.height, f.width);
    let cin = first.input_channels();
    let mut inputs = Tensor::zeros([windows.len(), cin, h, w]);
    let mut targets = Tensor::zeros([windows.len(), CHANNELS, h, w]);
    for (i, win) in windows.iter().enumerate() {
        let t = win.target();
        if (t.width, t.height) != (w, h) || win.input_channels() != cin {
            return Err(Error::Shape(format!(
                "window {} of clip {} differs in shape from the batch",
                win.target_index(),
                win.clip_id()
            )));
        }
        win.write_inputs(inputs.sample_mut(i));
        win.write_target(targets.sample_mut(i));
    }
    Ok((inputs, targets))
}
