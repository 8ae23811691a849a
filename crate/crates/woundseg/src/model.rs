//! Assembled segmentation model plus the whole-system gradient suite.
//!
//! The encoder pyramid feeds one of two heads; either way the quarter
//! scale logits are bilinearly upsampled back to the input extent, so
//! losses and metrics always see `[N,K,H,W]` against full-resolution
//! masks. Labels are never downsampled: thin structures would vanish
//! from the ground truth.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{AllMlpDecoder, DecoderConfig, SpatialFusionDecoder};
use crate::encoder::{EncoderConfig, MitEncoder};
use crate::nn::{Buffer, Parameter, Params};
use crate::tensor::{ClassMask, Tape, Tensor, TensorId};
use crate::{Error, Result, Scalar};

/// Which head consumes the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    SpatialFusion,
    AllMlp,
}

/// Complete structural description of a model. `decoder.num_classes`
/// is the class count for both head kinds; the all-MLP head reads only
/// that field and `allmlp_embed_dim`, taking its input widths from the
/// encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub decoder_kind: DecoderKind,
    pub allmlp_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::micro(7)
    }
}

impl ModelConfig {
    /// Desk-scale model with the fusion head.
    pub fn micro(num_classes: usize) -> Self {
        let encoder = EncoderConfig::micro();
        let decoder = DecoderConfig::micro(encoder.channels, num_classes);
        ModelConfig { encoder, decoder, decoder_kind: DecoderKind::SpatialFusion, allmlp_embed_dim: 128 }
    }

    /// Same encoder, baseline all-MLP head.
    pub fn micro_allmlp(num_classes: usize) -> Self {
        ModelConfig { decoder_kind: DecoderKind::AllMlp, ..Self::micro(num_classes) }
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        match self.decoder_kind {
            DecoderKind::SpatialFusion => {
                self.decoder.validate()?;
                if self.decoder.in_channels != self.encoder.channels {
                    return Err(Error::Config(format!(
                        "decoder expects pyramid widths {:?} but encoder produces {:?}",
                        self.decoder.in_channels, self.encoder.channels
                    )));
                }
            }
            DecoderKind::AllMlp => {
                if self.allmlp_embed_dim == 0 {
                    return Err(Error::Config("allmlp_embed_dim must be positive".into()));
                }
                if self.decoder.num_classes == 0 {
                    return Err(Error::Config("num_classes must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Closed-form trainable parameter count of encoder plus head.
    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + match self.decoder_kind {
                DecoderKind::SpatialFusion => self.decoder.param_count(),
                DecoderKind::AllMlp => AllMlpDecoder::<f64>::param_count_for(
                    self.encoder.channels,
                    self.allmlp_embed_dim,
                    self.decoder.num_classes,
                ),
            }
    }

    /// Closed-form multiply-accumulate count of one forward pass on an
    /// `[n, 3, h, w]` batch. The final upsample to input resolution
    /// contributes nothing under the counting convention.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        self.encoder.macs(n, h, w)
            + match self.decoder_kind {
                DecoderKind::SpatialFusion => self.decoder.macs(n, h, w),
                DecoderKind::AllMlp => AllMlpDecoder::<f64>::macs_for(
                    self.encoder.channels,
                    self.allmlp_embed_dim,
                    self.decoder.num_classes,
                    n,
                    h,
                    w,
                ),
            }
    }

    /// Two floating-point operations per multiply-accumulate.
    pub fn flops(&self, n: usize, h: usize, w: usize) -> u64 {
        2 * self.macs(n, h, w)
    }
}

enum Head<T> {
    SpatialFusion(SpatialFusionDecoder<T>),
    AllMlp(AllMlpDecoder<T>),
}

/// Encoder plus head. Forward output is full-resolution logits.
pub struct Segmenter<T> {
    pub config: ModelConfig,
    encoder: MitEncoder<T>,
    head: Head<T>,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let encoder = MitEncoder::new(config.encoder.clone(), rng)?;
        let head = match config.decoder_kind {
            DecoderKind::SpatialFusion => {
                Head::SpatialFusion(SpatialFusionDecoder::new(config.decoder.clone(), rng)?)
            }
            DecoderKind::AllMlp => Head::AllMlp(AllMlpDecoder::new(
                config.encoder.channels,
                config.allmlp_embed_dim,
                config.decoder.num_classes,
                rng,
            )?),
        };
        Ok(Segmenter { config, encoder, head })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    /// `[N,3,H,W]` image batch -> `[N,K,H,W]` logits.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: TensorId, training: bool) -> Result<TensorId> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("segmenter", format!("input {:?}", shape)));
        }
        let (h, w) = (shape[2], shape[3]);
        let pyramid = self.encoder.forward(tape, x)?;
        let quarter = match &mut self.head {
            Head::SpatialFusion(d) => d.forward(tape, &pyramid, training)?,
            Head::AllMlp(d) => d.forward(tape, &pyramid)?,
        };
        tape.bilinear_upsample(quarter, h, w)
    }

    /// Inference: argmax class per pixel, `[N,H,W]`.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<ClassMask> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let logits = self.forward(&mut tape, x, false)?;
        argmax_channels(tape.shape(logits), tape.data(logits))
    }
}

impl<T: Scalar> Params<T> for Segmenter<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.encoder.params();
        match &self.head {
            Head::SpatialFusion(d) => v.extend(d.params()),
            Head::AllMlp(d) => v.extend(d.params()),
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.encoder.params_mut();
        match &mut self.head {
            Head::SpatialFusion(d) => v.extend(d.params_mut()),
            Head::AllMlp(d) => v.extend(d.params_mut()),
        }
        v
    }
    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut v = self.encoder.buffers();
        match &self.head {
            Head::SpatialFusion(d) => v.extend(d.buffers()),
            Head::AllMlp(d) => v.extend(d.buffers()),
        }
        v
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut v = self.encoder.buffers_mut();
        match &mut self.head {
            Head::SpatialFusion(d) => v.extend(d.buffers_mut()),
            Head::AllMlp(d) => v.extend(d.buffers_mut()),
        }
        v
    }
}

/// Per-pixel argmax over the class axis of `[N,K,H,W]` logits; ties
/// resolve to the lowest class index.
pub fn argmax_channels<T: Scalar>(shape: &[usize], data: &[T]) -> Result<ClassMask> {
    if shape.len() != 4 {
        return Err(Error::shape("argmax", format!("logits {:?}", shape)));
    }
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if k == 0 || k > u8::MAX as usize + 1 {
        return Err(Error::argument("argmax", format!("{k} classes")));
    }
    let plane = h * w;
    let mut out = vec![0u8; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = data[(b * k) * plane + p];
            for c in 1..k {
                let v = data[(b * k + c) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[b * plane + p] = best as u8;
        }
    }
    ClassMask::new(&[n, h, w], out)
}

/// Finite-difference verification of every differentiable building
/// block, from single tape ops up through attention, the fusion head,
/// and both objectives. Returns one report per check.
pub fn gradient_suite() -> Result<Vec<crate::tensor::gradcheck::GradReport>> {
    use crate::decoder::{Activation, NormKind};
    use crate::encoder::{EfficientAttention, MixFfn};
    use crate::nn::{BatchNormLayer, LayerNormLayer};
    use crate::tensor::gradcheck::{randn, GradCheck};
    use rand::SeedableRng;

    let check = GradCheck::default();
    let mut reports = Vec::new();

    reports.push(check.check_op(
        "conv1x1",
        &[randn(&[2, 3, 5, 5], 10), randn(&[4, 3, 1, 1], 11), randn(&[4], 12)],
        |tape, ids| tape.conv2d(ids[0], ids[1], ids[2], 1, 0),
    )?);
    reports.push(check.check_op(
        "conv3x3",
        &[randn(&[2, 3, 6, 6], 20), randn(&[4, 3, 3, 3], 21), randn(&[4], 22)],
        |tape, ids| tape.conv2d(ids[0], ids[1], ids[2], 1, 1),
    )?);
    reports.push(check.check_op(
        "conv7x7_stride4",
        &[randn(&[1, 3, 16, 16], 30), randn(&[5, 3, 7, 7], 31), randn(&[5], 32)],
        |tape, ids| tape.conv2d(ids[0], ids[1], ids[2], 4, 3),
    )?);

    let mut bn = BatchNormLayer::<f64>::new("suite.bn", 3);
    reports.push(check.check_with_params(
        "batch_norm_training",
        &mut bn,
        &[randn(&[2, 3, 4, 4], 40)],
        |tape, m, ids| m.forward(tape, ids[0], true),
    )?);

    reports.push(check.check_op("relu", &[randn(&[2, 3, 4, 4], 50)], |tape, ids| {
        tape.relu(ids[0])
    })?);
    reports.push(check.check_op("gelu", &[randn(&[2, 3, 4, 4], 60)], |tape, ids| {
        tape.gelu(ids[0])
    })?);
    reports.push(check.check_op("bilinear_upsample", &[randn(&[1, 2, 3, 3], 70)], |tape, ids| {
        tape.bilinear_upsample(ids[0], 6, 5)
    })?);
    reports.push(check.check_op(
        "concat_channels",
        &[randn(&[1, 2, 3, 3], 80), randn(&[1, 3, 3, 3], 81)],
        |tape, ids| tape.concat_channels(ids[0], ids[1]),
    )?);
    reports.push(check.check_op(
        "matmul",
        &[randn(&[2, 3, 4], 90), randn(&[2, 4, 5], 91)],
        |tape, ids| tape.matmul(ids[0], ids[1]),
    )?);
    reports.push(check.check_op("softmax", &[randn(&[1, 2, 3, 4], 100)], |tape, ids| {
        tape.softmax(ids[0], 3)
    })?);

    let mut ln = LayerNormLayer::<f64>::new("suite.ln", 5);
    reports.push(check.check_with_params(
        "layer_norm",
        &mut ln,
        &[randn(&[2, 4, 5], 110)],
        |tape, m, ids| m.forward(tape, ids[0]),
    )?);

    let mut rng = ChaCha8Rng::seed_from_u64(120);
    let mut attn = EfficientAttention::<f64>::new("suite.attn", 4, 2, 2, &mut rng);
    reports.push(check.check_with_params(
        "attention_block",
        &mut attn,
        &[randn(&[1, 16, 4], 121)],
        |tape, m, ids| m.forward(tape, ids[0], 4, 4),
    )?);

    let mut ffn = MixFfn::<f64>::new("suite.ffn", 4, 8, &mut rng);
    reports.push(check.check_with_params(
        "mix_ffn",
        &mut ffn,
        &[randn(&[1, 16, 4], 130)],
        |tape, m, ids| m.forward(tape, ids[0], 4, 4),
    )?);

    let cfg = DecoderConfig {
        in_channels: [2, 3, 4, 5],
        unified_channels: 2,
        align_kernel: 3,
        align_norm: NormKind::BatchNorm,
        align_activation: Activation::Relu,
        extra_convs: vec![1, 3],
        num_classes: 3,
    };
    let mut dec = SpatialFusionDecoder::<f64>::new(cfg, &mut rng)?;
    reports.push(check.check_with_params(
        "fusion_decoder",
        &mut dec,
        &[
            randn(&[1, 2, 8, 8], 140),
            randn(&[1, 3, 4, 4], 141),
            randn(&[1, 4, 2, 2], 142),
            randn(&[1, 5, 1, 1], 143),
        ],
        |tape, m, ids| m.forward(tape, &[ids[0], ids[1], ids[2], ids[3]], true),
    )?);

    let labels = ClassMask::new(&[1, 4, 4], (0..16).map(|i| (i % 3) as u8).collect())?;
    let ce_labels = labels.clone();
    reports.push(check.check_op("cross_entropy", &[randn(&[1, 3, 4, 4], 150)], move |tape, ids| {
        crate::loss::cross_entropy(tape, ids[0], &ce_labels)
    })?);
    reports.push(check.check_op("focal_dice", &[randn(&[1, 3, 4, 4], 160)], move |tape, ids| {
        crate::loss::focal_dice(tape, ids[0], &labels, 2.0, 1.0)
    })?);

    Ok(reports)
}
