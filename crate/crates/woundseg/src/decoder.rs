//! Multi-scale convolutional decoder over the encoder pyramid.
//!
//! Every feature map stays `[N,C,H,W]` from input to logits; nothing
//! is flattened to token rows, so spatial structure survives the whole
//! head. Three phases:
//!
//! 1. align: per-level convolutions map each pyramid level to a shared
//!    channel width,
//! 2. fuse: walking coarse to fine, the running map is upsampled,
//!    concatenated with the next finer aligned level, and mixed by a
//!    1x1 convolution,
//! 3. refine + predict: optional bare convolutions at 1/4 resolution,
//!    then a 1x1 projection to per-class logits `[N,K,H/4,W/4]`.
//!
//! An all-linear baseline head ([`AllMlpDecoder`]) and the decoder
//! ablation grid ([`ablation_table`]) live here too.

use rand_chacha::ChaCha8Rng;

use crate::loss::LossKind;
use crate::nn::{BatchNormLayer, Buffer, Conv2dLayer, LinearLayer, Parameter, Params};
use crate::tensor::{Tape, TensorId};
use crate::{Error, Result, Scalar};

/// Normalization applied after alignment and fusion convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    BatchNorm,
}

/// Pointwise nonlinearity applied after alignment and fusion
/// convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        match self {
            Activation::None => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Structural description of the decoder head.
///
/// `align_norm` and `align_activation` govern every convolution on the
/// fusion path (the four alignment convs and the three fusion convs);
/// the refinement stack configured by `extra_convs` is always bare.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channel widths of the incoming pyramid, fine to coarse.
    pub in_channels: [usize; 4],
    /// Shared width every level is aligned to.
    pub unified_channels: usize,
    /// Kernel extent of the alignment convolutions (1 or 3).
    pub align_kernel: usize,
    pub align_norm: NormKind,
    pub align_activation: Activation,
    /// Kernel extents of bare refinement convolutions at 1/4 scale.
    pub extra_convs: Vec<usize>,
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::micro([16, 32, 64, 128], 7)
    }
}

impl DecoderConfig {
    /// Best-performing structure: 1x1 align convs with batch norm and
    /// ReLU, refinement stack [1x1, 3x3], shared width 128.
    pub fn full(in_channels: [usize; 4], num_classes: usize) -> Self {
        DecoderConfig {
            in_channels,
            unified_channels: 128,
            align_kernel: 1,
            align_norm: NormKind::BatchNorm,
            align_activation: Activation::Relu,
            extra_convs: vec![1, 3],
            num_classes,
        }
    }

    /// Same structure at shared width 32 for desk-scale training.
    pub fn micro(in_channels: [usize; 4], num_classes: usize) -> Self {
        DecoderConfig { unified_channels: 32, ..Self::full(in_channels, num_classes) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unified_channels == 0 || self.num_classes == 0 {
            return Err(Error::argument("decoder_config", "zero channels or classes"));
        }
        if self.in_channels.contains(&0) {
            return Err(Error::argument("decoder_config", "zero-width pyramid level"));
        }
        if !matches!(self.align_kernel, 1 | 3) {
            return Err(Error::argument(
                "decoder_config",
                format!("align kernel {} not in {{1, 3}}", self.align_kernel),
            ));
        }
        if let Some(k) = self.extra_convs.iter().find(|k| !matches!(k, 1 | 3)) {
            return Err(Error::argument(
                "decoder_config",
                format!("refinement kernel {k} not in {{1, 3}}"),
            ));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let u = self.unified_channels;
        let norm = match self.align_norm {
            NormKind::BatchNorm => 2 * u,
            NormKind::None => 0,
        };
        let mut total = 0;
        for cin in self.in_channels {
            total += self.align_kernel * self.align_kernel * cin * u + u + norm;
        }
        total += 3 * (2 * u * u + u + norm);
        for k in &self.extra_convs {
            total += k * k * u * u + u;
        }
        total += u * self.num_classes + self.num_classes;
        total
    }

    /// Closed-form multiply-accumulate count for one forward pass fed
    /// by the pyramid of an `[n, _, h, w]` image. Same convention as
    /// the tape: resampling and normalization count zero.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let u = self.unified_channels;
        let level = |s: usize| (h / s) * (w / s);
        let mut total: u64 = 0;
        for (i, cin) in self.in_channels.iter().enumerate() {
            let l = level(4 << i);
            total += (l * self.align_kernel * self.align_kernel * cin * u) as u64;
        }
        for i in 0..3 {
            total += (level(4 << i) * 2 * u * u) as u64;
        }
        for k in &self.extra_convs {
            total += (level(4) * k * k * u * u) as u64;
        }
        total += (level(4) * u * self.num_classes) as u64;
        total * n as u64
    }
}

/// Stride-1 convolution with the decoder's configured norm and
/// activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct<T> {
    pub conv: Conv2dLayer<T>,
    pub norm: Option<BatchNormLayer<T>>,
    pub activation: Activation,
}

impl<T: Scalar> ConvBnAct<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        norm: NormKind,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBnAct {
            conv: Conv2dLayer::new(&format!("{name}.conv"), cin, cout, kernel, 1, kernel / 2, rng),
            norm: match norm {
                NormKind::BatchNorm => Some(BatchNormLayer::new(&format!("{name}.norm"), cout)),
                NormKind::None => None,
            },
            activation,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: TensorId, training: bool) -> Result<TensorId> {
        let mut y = self.conv.forward(tape, x)?;
        if let Some(norm) = &mut self.norm {
            y = norm.forward(tape, y, training)?;
        }
        self.activation.apply(tape, y)
    }
}

impl<T: Scalar> Params<T> for ConvBnAct<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.conv.params();
        if let Some(norm) = &self.norm {
            v.extend(norm.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.conv.params_mut();
        if let Some(norm) = &mut self.norm {
            v.extend(norm.params_mut());
        }
        v
    }
    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.norm.iter().flat_map(|n| n.buffers()).collect()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.norm.iter_mut().flat_map(|n| n.buffers_mut()).collect()
    }
}

/// The spatially-preserving fusion decoder.
#[derive(Clone, Debug)]
pub struct SpatialFusionDecoder<T> {
    pub config: DecoderConfig,
    align: Vec<ConvBnAct<T>>,
    /// Fusion convolutions in application order: level 3, 2, then 1.
    fuse: Vec<ConvBnAct<T>>,
    refine: Vec<Conv2dLayer<T>>,
    head: Conv2dLayer<T>,
}

impl<T: Scalar> SpatialFusionDecoder<T> {
    pub fn new(config: DecoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let u = config.unified_channels;
        let align = (0..4)
            .map(|i| {
                ConvBnAct::new(
                    &format!("decoder.align{}", i + 1),
                    config.in_channels[i],
                    u,
                    config.align_kernel,
                    config.align_norm,
                    config.align_activation,
                    rng,
                )
            })
            .collect();
        let fuse = [3usize, 2, 1]
            .iter()
            .map(|level| {
                ConvBnAct::new(
                    &format!("decoder.fuse{level}"),
                    2 * u,
                    u,
                    1,
                    config.align_norm,
                    config.align_activation,
                    rng,
                )
            })
            .collect();
        let refine = config
            .extra_convs
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                Conv2dLayer::new(&format!("decoder.refine{}", i + 1), u, u, k, 1, k / 2, rng)
            })
            .collect();
        let head = Conv2dLayer::new("decoder.head", u, config.num_classes, 1, 1, 0, rng);
        Ok(SpatialFusionDecoder { config, align, fuse, refine, head })
    }

    /// Pyramid fine to coarse -> logits `[N, K, H/4, W/4]`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        pyramid: &[TensorId; 4],
        training: bool,
    ) -> Result<TensorId> {
        for (i, &f) in pyramid.iter().enumerate() {
            let s = tape.shape(f);
            if s.len() != 4 || s[1] != self.config.in_channels[i] {
                return Err(Error::shape(
                    "decoder",
                    format!(
                        "pyramid level {} is {:?}, expected [N,{},H,W]",
                        i + 1,
                        s,
                        self.config.in_channels[i]
                    ),
                ));
            }
        }
        let mut aligned = [pyramid[0]; 4];
        for i in 0..4 {
            aligned[i] = self.align[i].forward(tape, pyramid[i], training)?;
        }
        // Coarse to fine: the running map rides up the pyramid. The
        // finer aligned level always takes the first channel block of
        // the concatenation.
        let mut x = aligned[3];
        for (step, level) in (0..3).rev().enumerate() {
            let (th, tw) = (tape.shape(aligned[level])[2], tape.shape(aligned[level])[3]);
            let up = tape.bilinear_upsample(x, th, tw)?;
            let cat = tape.concat_channels(aligned[level], up)?;
            x = self.fuse[step].forward(tape, cat, training)?;
        }
        for conv in &self.refine {
            x = conv.forward(tape, x)?;
        }
        self.head.forward(tape, x)
    }
}

impl<T: Scalar> Params<T> for SpatialFusionDecoder<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = Vec::new();
        for a in &self.align {
            v.extend(a.params());
        }
        for f in &self.fuse {
            v.extend(f.params());
        }
        for r in &self.refine {
            v.extend(r.params());
        }
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = Vec::new();
        for a in &mut self.align {
            v.extend(a.params_mut());
        }
        for f in &mut self.fuse {
            v.extend(f.params_mut());
        }
        for r in &mut self.refine {
            v.extend(r.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut v: Vec<&Buffer<T>> = Vec::new();
        for a in &self.align {
            v.extend(a.buffers());
        }
        for f in &self.fuse {
            v.extend(f.buffers());
        }
        v
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut v: Vec<&mut Buffer<T>> = Vec::new();
        for a in &mut self.align {
            v.extend(a.buffers_mut());
        }
        for f in &mut self.fuse {
            v.extend(f.buffers_mut());
        }
        v
    }
}

/// Token-MLP baseline head: per-level linear embedding, upsample to
/// 1/4 scale, channel concatenation, linear fuse, linear classify. No
/// normalization, no nonlinearity, no convolutions.
#[derive(Clone, Debug)]
pub struct AllMlpDecoder<T> {
    pub in_channels: [usize; 4],
    pub embed_dim: usize,
    pub num_classes: usize,
    levels: Vec<LinearLayer<T>>,
    fuse: LinearLayer<T>,
    classify: LinearLayer<T>,
}

impl<T: Scalar> AllMlpDecoder<T> {
    pub fn new(
        in_channels: [usize; 4],
        embed_dim: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if embed_dim == 0 || num_classes == 0 || in_channels.contains(&0) {
            return Err(Error::argument("allmlp_decoder", "zero-sized dimension"));
        }
        let levels = (0..4)
            .map(|i| {
                LinearLayer::new(&format!("allmlp.level{}", i + 1), in_channels[i], embed_dim, rng)
            })
            .collect();
        let fuse = LinearLayer::new("allmlp.fuse", 4 * embed_dim, embed_dim, rng);
        let classify = LinearLayer::new("allmlp.classify", embed_dim, num_classes, rng);
        Ok(AllMlpDecoder { in_channels, embed_dim, num_classes, levels, fuse, classify })
    }

    /// Pyramid fine to coarse -> logits `[N, K, H/4, W/4]`.
    pub fn forward(&self, tape: &mut Tape<T>, pyramid: &[TensorId; 4]) -> Result<TensorId> {
        use crate::encoder::{spatial_to_tokens, tokens_to_spatial};
        let (th, tw) = {
            let s = tape.shape(pyramid[0]);
            if s.len() != 4 {
                return Err(Error::shape("allmlp_decoder", format!("level 1 is {:?}", s)));
            }
            (s[2], s[3])
        };
        let mut embedded = Vec::with_capacity(4);
        for (i, &f) in pyramid.iter().enumerate() {
            let s = tape.shape(f).to_vec();
            if s.len() != 4 || s[1] != self.in_channels[i] {
                return Err(Error::shape(
                    "allmlp_decoder",
                    format!("pyramid level {} is {:?}", i + 1, s),
                ));
            }
            let tokens = spatial_to_tokens(tape, f)?;
            let emb = self.levels[i].forward(tape, tokens)?;
            let plane = tokens_to_spatial(tape, emb, s[2], s[3])?;
            embedded.push(tape.bilinear_upsample(plane, th, tw)?);
        }
        let mut cat = embedded[0];
        for &e in &embedded[1..] {
            cat = tape.concat_channels(cat, e)?;
        }
        let tokens = spatial_to_tokens(tape, cat)?;
        let fused = self.fuse.forward(tape, tokens)?;
        let logits = self.classify.forward(tape, fused)?;
        tokens_to_spatial(tape, logits, th, tw)
    }

    /// Closed-form trainable parameter count.
    pub fn param_count_for(in_channels: [usize; 4], embed_dim: usize, num_classes: usize) -> usize {
        let e = embed_dim;
        let per_level: usize = in_channels.iter().map(|c| c * e + e).sum();
        per_level + (4 * e * e + e) + (e * num_classes + num_classes)
    }

    /// Closed-form multiply-accumulate count fed by the pyramid of an
    /// `[n, _, h, w]` image.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        Self::macs_for(self.in_channels, self.embed_dim, self.num_classes, n, h, w)
    }

    pub fn macs_for(
        in_channels: [usize; 4],
        embed_dim: usize,
        num_classes: usize,
        n: usize,
        h: usize,
        w: usize,
    ) -> u64 {
        let e = embed_dim;
        let l4 = (h / 4) * (w / 4);
        let mut total: u64 = 0;
        for (i, c) in in_channels.iter().enumerate() {
            let l = (h / (4 << i)) * (w / (4 << i));
            total += (l * c * e) as u64;
        }
        total += (l4 * 4 * e * e) as u64;
        total += (l4 * e * num_classes) as u64;
        total * n as u64
    }
}

impl<T: Scalar> Params<T> for AllMlpDecoder<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self.levels.iter().flat_map(|l| l.params()).collect();
        v.extend(self.fuse.params());
        v.extend(self.classify.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> =
            self.levels.iter_mut().flat_map(|l| l.params_mut()).collect();
        v.extend(self.fuse.params_mut());
        v.extend(self.classify.params_mut());
        v
    }
}

/// One row of the decoder ablation grid: a head structure plus the
/// training recipe it was scored with, and the mean DSC (percent)
/// published for that row on the clinical six-tissue benchmark.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub index: usize,
    pub align_kernel: usize,
    pub norm: NormKind,
    pub activation: Activation,
    pub extra_convs: Vec<usize>,
    pub loss: LossKind,
    pub augment: bool,
    pub reported_mean_dsc: f64,
}

impl AblationRow {
    /// Applies this row's head structure to a base config, keeping the
    /// base's channel widths and class count.
    pub fn configure(&self, base: &DecoderConfig) -> DecoderConfig {
        DecoderConfig {
            align_kernel: self.align_kernel,
            align_norm: self.norm,
            align_activation: self.activation,
            extra_convs: self.extra_convs.clone(),
            ..base.clone()
        }
    }
}

/// The published 11-row ablation grid, in table order.
pub fn ablation_table() -> Vec<AblationRow> {
    use Activation::{Gelu, None as NoAct, Relu};
    use LossKind::{CrossEntropy, FocalDice};
    use NormKind::{BatchNorm, None as NoNorm};
    let row = |index, align_kernel, norm, activation, extra: &[usize], loss, augment, dsc| {
        AblationRow {
            index,
            align_kernel,
            norm,
            activation,
            extra_convs: extra.to_vec(),
            loss,
            augment,
            reported_mean_dsc: dsc,
        }
    };
    vec![
        row(1, 1, NoNorm, NoAct, &[], CrossEntropy, false, 51.11),
        row(2, 1, BatchNorm, NoAct, &[], CrossEntropy, false, 57.18),
        row(3, 1, BatchNorm, Gelu, &[], CrossEntropy, false, 66.13),
        row(4, 1, BatchNorm, Relu, &[], CrossEntropy, false, 67.67),
        row(5, 3, BatchNorm, Relu, &[], CrossEntropy, false, 65.01),
        row(6, 1, BatchNorm, Relu, &[1], CrossEntropy, false, 67.69),
        row(7, 1, BatchNorm, Relu, &[1, 1], CrossEntropy, false, 46.50),
        row(8, 1, BatchNorm, Relu, &[3], CrossEntropy, false, 53.28),
        row(9, 1, BatchNorm, Relu, &[1, 3], CrossEntropy, false, 81.89),
        row(10, 1, BatchNorm, Relu, &[1, 3], FocalDice, true, 45.78),
        row(11, 1, BatchNorm, Relu, &[1, 3], CrossEntropy, true, 85.50),
    ]
}

/// Looks up one ablation row by its 1-based table index.
pub fn ablation_row(index: usize) -> Result<AblationRow> {
    ablation_table()
        .into_iter()
        .find(|r| r.index == index)
        .ok_or_else(|| Error::argument("ablation_row", format!("row {index} not in 1..=11")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{randn, GradCheck};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Leaf pyramid shaped like an encoder output for an `[n,_,h,w]`
    /// image with the given channel widths.
    fn leaf_pyramid(
        tape: &mut Tape<f64>,
        n: usize,
        h: usize,
        w: usize,
        channels: [usize; 4],
        seed: u64,
    ) -> [TensorId; 4] {
        let mut ids = [TensorId(0); 4];
        for i in 0..4 {
            let s = 4 << i;
            let mut t = randn(&[n, channels[i], h / s, w / s], seed + i as u64);
            ids[i] = tape.leaf(&mut t);
        }
        ids
    }

    use crate::tensor::TensorId;

    #[test]
    fn b5_param_count_matches_per_layer_arithmetic() {
        let cfg = DecoderConfig::full([64, 128, 320, 512], 7);
        // align:  (64+128+320+512)*128 + 4*128 biases + 4*(2*128) norms = 132_608
        // fuse:   3 * (256*128 + 128 + 2*128)                           =  99_456
        // refine: (128*128 + 128) + (9*128*128 + 128)                   = 164_096
        // head:   128*7 + 7                                             =     903
        assert_eq!(cfg.param_count(), 397_063);
        let dec = SpatialFusionDecoder::<f64>::new(cfg.clone(), &mut rng(1)).unwrap();
        assert_eq!(dec.param_count(), cfg.param_count());
    }

    #[test]
    fn micro_param_count_matches_closed_form() {
        let cfg = DecoderConfig::default();
        let dec = SpatialFusionDecoder::<f64>::new(cfg.clone(), &mut rng(2)).unwrap();
        // 8_064 align + 6_432 fuse + 10_304 refine + 231 head.
        assert_eq!(cfg.param_count(), 25_031);
        assert_eq!(dec.param_count(), cfg.param_count());
    }

    #[test]
    fn allmlp_param_count_matches_closed_form() {
        let dec = AllMlpDecoder::<f64>::new([16, 32, 64, 128], 128, 7, &mut rng(3)).unwrap();
        // levels: (16+32+64+128)*128 + 4*128 = 31_232
        // fuse:   512*128 + 128             = 65_664
        // classify: 128*7 + 7               =     903
        assert_eq!(AllMlpDecoder::<f64>::param_count_for([16, 32, 64, 128], 128, 7), 97_799);
        assert_eq!(dec.param_count(), 97_799);
    }

    #[test]
    fn logits_shape_is_quarter_scale() {
        let mut dec = SpatialFusionDecoder::<f64>::new(DecoderConfig::default(), &mut rng(4)).unwrap();
        let mut tape = Tape::new();
        let pyr = leaf_pyramid(&mut tape, 2, 64, 64, [16, 32, 64, 128], 10);
        let out = dec.forward(&mut tape, &pyr, true).unwrap();
        assert_eq!(tape.shape(out), &[2, 7, 16, 16]);
    }

    #[test]
    fn allmlp_logits_shape_matches_fusion_head() {
        let dec = AllMlpDecoder::<f64>::new([16, 32, 64, 128], 128, 7, &mut rng(5)).unwrap();
        let mut tape = Tape::new();
        let pyr = leaf_pyramid(&mut tape, 2, 64, 64, [16, 32, 64, 128], 20);
        let out = dec.forward(&mut tape, &pyr).unwrap();
        assert_eq!(tape.shape(out), &[2, 7, 16, 16]);
    }

    /// The head's structural claim: every computed value between the
    /// pyramid and the logits is a spatial `[N,C,H,W]` map.
    #[test]
    fn every_intermediate_stays_spatial() {
        let mut dec = SpatialFusionDecoder::<f64>::new(DecoderConfig::default(), &mut rng(6)).unwrap();
        let mut tape = Tape::new();
        let pyr = leaf_pyramid(&mut tape, 1, 64, 64, [16, 32, 64, 128], 30);
        let mark = tape.len();
        dec.forward(&mut tape, &pyr, true).unwrap();
        let computed: Vec<_> =
            tape.trace().into_iter().skip(mark).filter(|e| !e.inputs.is_empty()).collect();
        assert!(!computed.is_empty());
        for entry in computed {
            assert_eq!(entry.shape.len(), 4, "{} produced {:?}", entry.op, entry.shape);
        }
    }

    /// Freezes the concatenation convention: the finer aligned level
    /// occupies the leading channel block, the upsampled running map
    /// the trailing one.
    #[test]
    fn fusion_concatenates_lateral_before_upsampled() {
        let cfg = DecoderConfig {
            in_channels: [1, 1, 1, 1],
            unified_channels: 1,
            align_kernel: 1,
            align_norm: NormKind::None,
            align_activation: Activation::None,
            extra_convs: vec![],
            num_classes: 1,
        };
        let mut dec = SpatialFusionDecoder::<f64>::new(cfg, &mut rng(7)).unwrap();
        for block in dec.align.iter_mut() {
            block.conv.weight.value.data_mut().fill(1.0);
            block.conv.bias.value.data_mut().fill(0.0);
        }
        for block in dec.fuse.iter_mut() {
            block.conv.weight.value.data_mut().copy_from_slice(&[1.0, 0.0]);
            block.conv.bias.value.data_mut().fill(0.0);
        }
        dec.head.weight.value.data_mut().fill(1.0);
        dec.head.bias.value.data_mut().fill(0.0);

        let mut tape = Tape::new();
        let mut ids = [TensorId(0); 4];
        for i in 0..4 {
            let s = 4 << i;
            let mut t = Tensor::full(&[1, 1, 32 / s, 32 / s], (i + 1) as f64);
            ids[i] = tape.leaf(&mut t);
        }
        let out = dec.forward(&mut tape, &ids, false).unwrap();
        // Each fusion keeps its lateral input, so level 1's constant
        // survives to the logits; the swapped order would yield 4.
        for v in tape.data(out) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn runtime_macs_match_closed_form() {
        let cfg = DecoderConfig::default();
        let mut dec = SpatialFusionDecoder::<f64>::new(cfg.clone(), &mut rng(8)).unwrap();
        let mut tape = Tape::new();
        let pyr = leaf_pyramid(&mut tape, 2, 64, 64, cfg.in_channels, 40);
        dec.forward(&mut tape, &pyr, true).unwrap();
        assert_eq!(tape.macs(), cfg.macs(2, 64, 64));

        let mlp = AllMlpDecoder::<f64>::new([16, 32, 64, 128], 128, 7, &mut rng(9)).unwrap();
        let mut tape = Tape::new();
        let pyr = leaf_pyramid(&mut tape, 2, 64, 64, [16, 32, 64, 128], 50);
        mlp.forward(&mut tape, &pyr).unwrap();
        assert_eq!(tape.macs(), mlp.macs(2, 64, 64));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut dec = SpatialFusionDecoder::<f64>::new(DecoderConfig::default(), &mut rng(10)).unwrap();
        let mut tape = Tape::new();
        let pyr = leaf_pyramid(&mut tape, 1, 64, 64, [16, 32, 64, 64], 60);
        assert!(dec.forward(&mut tape, &pyr, true).is_err());
    }

    #[test]
    fn fusion_decoder_gradcheck() {
        let cfg = DecoderConfig {
            in_channels: [2, 3, 4, 5],
            unified_channels: 2,
            align_kernel: 1,
            align_norm: NormKind::BatchNorm,
            align_activation: Activation::Relu,
            extra_convs: vec![1, 3],
            num_classes: 2,
        };
        let mut dec = SpatialFusionDecoder::<f64>::new(cfg, &mut rng(11)).unwrap();
        let inputs: Vec<Tensor<f64>> = (0..4)
            .map(|i| randn(&[1, 2 + i, 8 >> i, 8 >> i], 70 + i as u64))
            .collect();
        let report = GradCheck::default()
            .check_with_params("fusion_decoder", &mut dec, &inputs, |tape, m, ids| {
                m.forward(tape, &[ids[0], ids[1], ids[2], ids[3]], true)
            })
            .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn allmlp_decoder_gradcheck() {
        let mut dec = AllMlpDecoder::<f64>::new([2, 3, 4, 5], 3, 2, &mut rng(12)).unwrap();
        let inputs: Vec<Tensor<f64>> = (0..4)
            .map(|i| randn(&[1, 2 + i, 8 >> i, 8 >> i], 80 + i as u64))
            .collect();
        let report = GradCheck::default()
            .check_with_params("allmlp_decoder", &mut dec, &inputs, |tape, m, ids| {
                m.forward(tape, &[ids[0], ids[1], ids[2], ids[3]])
            })
            .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn ablation_grid_is_the_published_table() {
        let table = ablation_table();
        assert_eq!(table.len(), 11);
        for (i, row) in table.iter().enumerate() {
            assert_eq!(row.index, i + 1);
        }
        let scores: Vec<f64> = table.iter().map(|r| r.reported_mean_dsc).collect();
        assert_eq!(
            scores,
            [51.11, 57.18, 66.13, 67.67, 65.01, 67.69, 46.50, 53.28, 81.89, 45.78, 85.50]
        );

        let bare = &table[0];
        assert_eq!(bare.norm, NormKind::None);
        assert_eq!(bare.activation, Activation::None);
        assert!(bare.extra_convs.is_empty());

        // Row 9 is the full model's head; rows 10 and 11 train it with
        // augmentation, row 10 swapping the loss.
        let base = DecoderConfig::default();
        assert_eq!(table[8].configure(&base), base);
        assert!(table[9].augment && table[10].augment);
        assert!(matches!(table[9].loss, LossKind::FocalDice));
        assert!(matches!(table[10].loss, LossKind::CrossEntropy));

        assert!(ablation_row(0).is_err());
        assert!(ablation_row(12).is_err());
        assert_eq!(ablation_row(5).unwrap().align_kernel, 3);
    }
}
