//! Hierarchical Mix-Transformer encoder.
//!
//! Four stages, each an overlapped patch embedding followed by
//! pre-norm transformer blocks with sequence-reduced self-attention and
//! a depthwise-conv feed-forward (Mix-FFN). Stage outputs form a
//! feature pyramid at 1/4, 1/8, 1/16, 1/32 of the input resolution:
//!
//! ```text
//! [N,3,H,W] -> F1 [N,C1,H/4, W/4 ]
//!           -> F2 [N,C2,H/8, W/8 ]
//!           -> F3 [N,C3,H/16,W/16]
//!           -> F4 [N,C4,H/32,W/32]
//! ```
//!
//! Positional information comes entirely from the overlapped
//! convolutions; there are no positional embeddings, so the encoder
//! accepts any input extent divisible by 32.

use rand_chacha::ChaCha8Rng;

use crate::nn::{
    Buffer, Conv2dLayer, DepthwiseConv2dLayer, LayerNormLayer, LinearLayer, Parameter, Params,
};
use crate::tensor::{Tape, TensorId};
use crate::{Error, Result, Scalar};

/// Stage widths and block layout for the encoder.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub ffn_expansion: usize,
    pub patch_kernels: [usize; 4],
    pub patch_strides: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl EncoderConfig {
    /// Desk-scale configuration used for training and most tests.
    pub fn micro() -> Self {
        EncoderConfig {
            in_channels: 3,
            channels: [16, 32, 64, 128],
            depths: [1, 1, 1, 1],
            heads: [1, 1, 2, 4],
            sr_ratios: [8, 4, 2, 1],
            ffn_expansion: 4,
            patch_kernels: [7, 3, 3, 3],
            patch_strides: [4, 2, 2, 2],
        }
    }

    /// Full published channel widths (64/128/320/512) at depth one per
    /// stage; used for parameter-count and shape checks, not training.
    pub fn b5_shape() -> Self {
        EncoderConfig {
            channels: [64, 128, 320, 512],
            heads: [1, 2, 5, 8],
            ..Self::micro()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if self.channels[i] == 0 || self.depths[i] == 0 || self.heads[i] == 0 {
                return Err(Error::argument("encoder_config", "zero-sized stage"));
            }
            if self.channels[i] % self.heads[i] != 0 {
                return Err(Error::argument(
                    "encoder_config",
                    format!(
                        "stage {}: {} channels not divisible by {} heads",
                        i + 1,
                        self.channels[i],
                        self.heads[i]
                    ),
                ));
            }
            if self.sr_ratios[i] == 0 || self.patch_strides[i] == 0 {
                return Err(Error::argument("encoder_config", "zero stride or reduction ratio"));
            }
        }
        Ok(())
    }

    /// Product of the patch strides: input extents must divide this.
    pub fn total_stride(&self) -> usize {
        self.patch_strides.iter().product()
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut cin = self.in_channels;
        for i in 0..4 {
            let c = self.channels[i];
            let e = c * self.ffn_expansion;
            let k = self.patch_kernels[i];
            total += k * k * cin * c + c; // patch conv
            total += 2 * c; // patch norm
            for _ in 0..self.depths[i] {
                total += 2 * c; // pre-attention norm
                total += 4 * (c * c + c); // q, k, v, out projections
                if self.sr_ratios[i] > 1 {
                    let sr = self.sr_ratios[i];
                    total += sr * sr * c * c + c; // reduction conv
                    total += 2 * c; // reduction norm
                }
                total += 2 * c; // pre-ffn norm
                total += c * e + e; // expand
                total += 9 * e + e; // depthwise 3x3
                total += e * c + c; // project
            }
            total += 2 * c; // stage output norm
            cin = c;
        }
        total
    }

    /// Closed-form multiply-accumulate count of one forward pass on an
    /// `[n, in_channels, h, w]` input. Matches the tape's runtime
    /// convention: convolutions, linear maps, and matrix products
    /// count; normalization, softmax, and activations do not.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let mut total: u64 = 0;
        let mut cin = self.in_channels;
        let (mut h, mut w) = (h, w);
        for i in 0..4 {
            let c = self.channels[i];
            let e = c * self.ffn_expansion;
            let k = self.patch_kernels[i];
            let s = self.patch_strides[i];
            h /= s;
            w /= s;
            let l = h * w;
            total += (l * c * cin * k * k) as u64; // patch conv
            let sr = self.sr_ratios[i];
            let lr = if sr > 1 { (h / sr) * (w / sr) } else { l };
            for _ in 0..self.depths[i] {
                total += (l * c * c) as u64; // q
                if sr > 1 {
                    total += (lr * c * c * sr * sr) as u64; // reduction conv
                }
                total += 2 * (lr * c * c) as u64; // k, v
                total += 2 * (l * c * lr) as u64; // scores, context
                total += (l * c * c) as u64; // out projection
                total += (l * c * e) as u64; // expand
                total += (l * e * 9) as u64; // depthwise 3x3
                total += (l * e * c) as u64; // project
            }
            cin = c;
        }
        total * n as u64
    }
}

/// Flattens `[N,C,H,W]` into token rows `[N, H*W, C]`.
pub fn spatial_to_tokens<T: Scalar>(tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.permute(flat, &[0, 2, 1])
}

/// Restores token rows `[N, H*W, C]` to `[N,C,H,W]`.
pub fn tokens_to_spatial<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    h: usize,
    w: usize,
) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    if s[1] != h * w {
        return Err(Error::shape(
            "tokens_to_spatial",
            format!("{} tokens cannot tile {}x{}", s[1], h, w),
        ));
    }
    let chw = tape.permute(x, &[0, 2, 1])?;
    tape.reshape(chw, &[s[0], s[2], h, w])
}

/// Strided overlapping-patch convolution with token layer norm.
#[derive(Clone, Debug)]
pub struct OverlapPatchEmbed<T> {
    pub conv: Conv2dLayer<T>,
    pub norm: LayerNormLayer<T>,
}

impl<T: Scalar> OverlapPatchEmbed<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        OverlapPatchEmbed {
            conv: Conv2dLayer::new(&format!("{name}.conv"), cin, cout, kernel, stride, kernel / 2, rng),
            norm: LayerNormLayer::new(&format!("{name}.norm"), cout),
        }
    }

    /// `[N,Cin,H,W] -> [N,Cout,H/s,W/s]`. Extents must divide the
    /// stride so downstream stages see exact power-of-two geometry.
    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("patch_embed", format!("expected rank 4, got {:?}", s)));
        }
        let stride = self.conv.stride;
        if s[2] % stride != 0 || s[3] % stride != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("extent {}x{} not divisible by stride {}", s[2], s[3], stride),
            ));
        }
        let y = self.conv.forward(tape, x)?;
        let (h, w) = (tape.shape(y)[2], tape.shape(y)[3]);
        let tokens = spatial_to_tokens(tape, y)?;
        let normed = self.norm.forward(tape, tokens)?;
        tokens_to_spatial(tape, normed, h, w)
    }
}

impl<T: Scalar> Params<T> for OverlapPatchEmbed<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.conv.params();
        v.extend(self.norm.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.conv.params_mut();
        v.extend(self.norm.params_mut());
        v
    }
}

/// Multi-head self-attention whose keys and values are taken from a
/// spatially reduced copy of the sequence: for reduction ratio `sr`,
/// the `H*W` tokens are folded back to the plane, convolved with an
/// `sr`-strided `sr x sr` kernel, and re-flattened, shrinking K/V
/// length by `sr^2` while queries keep full resolution. `sr = 1`
/// degenerates to standard multi-head self-attention.
#[derive(Clone, Debug)]
pub struct EfficientAttention<T> {
    pub q: LinearLayer<T>,
    pub k: LinearLayer<T>,
    pub v: LinearLayer<T>,
    pub proj: LinearLayer<T>,
    pub reduce: Option<(Conv2dLayer<T>, LayerNormLayer<T>)>,
    pub heads: usize,
    pub sr_ratio: usize,
}

impl<T: Scalar> EfficientAttention<T> {
    pub fn new(name: &str, dim: usize, heads: usize, sr_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        debug_assert_eq!(dim % heads, 0);
        let reduce = (sr_ratio > 1).then(|| {
            (
                Conv2dLayer::new(&format!("{name}.sr.conv"), dim, dim, sr_ratio, sr_ratio, 0, rng),
                LayerNormLayer::new(&format!("{name}.sr.norm"), dim),
            )
        });
        EfficientAttention {
            q: LinearLayer::new(&format!("{name}.q"), dim, dim, rng),
            k: LinearLayer::new(&format!("{name}.k"), dim, dim, rng),
            v: LinearLayer::new(&format!("{name}.v"), dim, dim, rng),
            proj: LinearLayer::new(&format!("{name}.proj"), dim, dim, rng),
            reduce,
            heads,
            sr_ratio,
        }
    }

    /// `x: [N, L, C]` with `L = h * w` -> `[N, L, C]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("attention", format!("expected [N,L,C], got {:?}", s)));
        }
        let (n, l, c) = (s[0], s[1], s[2]);
        if l != h * w {
            return Err(Error::shape(
                "attention",
                format!("{} tokens inconsistent with {}x{} plane", l, h, w),
            ));
        }
        let d = c / self.heads;

        let q = self.q.forward(tape, x)?;
        let kv_src = match &self.reduce {
            Some((conv, norm)) => {
                let plane = tokens_to_spatial(tape, x, h, w)?;
                let red = conv.forward(tape, plane)?;
                let tokens = spatial_to_tokens(tape, red)?;
                norm.forward(tape, tokens)?
            }
            None => x,
        };
        let lr = tape.shape(kv_src)[1];
        let k = self.k.forward(tape, kv_src)?;
        let v = self.v.forward(tape, kv_src)?;

        let split = |tape: &mut Tape<T>, t: TensorId, len: usize| -> Result<TensorId> {
            let t = tape.reshape(t, &[n, len, self.heads, d])?;
            tape.permute(t, &[0, 2, 1, 3])
        };
        let qh = split(tape, q, l)?;
        let kh = split(tape, k, lr)?;
        let vh = split(tape, v, lr)?;

        let kt = tape.permute(kh, &[0, 1, 3, 2])?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(attn, vh)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n, l, c])?;
        self.proj.forward(tape, ctx)
    }
}

impl<T: Scalar> Params<T> for EfficientAttention<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.q.params();
        v.extend(self.k.params());
        v.extend(self.v.params());
        v.extend(self.proj.params());
        if let Some((conv, norm)) = &self.reduce {
            v.extend(conv.params());
            v.extend(norm.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.q.params_mut();
        v.extend(self.k.params_mut());
        v.extend(self.v.params_mut());
        v.extend(self.proj.params_mut());
        if let Some((conv, norm)) = &mut self.reduce {
            v.extend(conv.params_mut());
            v.extend(norm.params_mut());
        }
        v
    }
}

/// Token MLP with a depthwise 3x3 convolution between the two linear
/// maps: expand, fold to the plane, depthwise-convolve, GeLU, project.
#[derive(Clone, Debug)]
pub struct MixFfn<T> {
    pub expand: LinearLayer<T>,
    pub depthwise: DepthwiseConv2dLayer<T>,
    pub project: LinearLayer<T>,
}

impl<T: Scalar> MixFfn<T> {
    pub fn new(name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        MixFfn {
            expand: LinearLayer::new(&format!("{name}.expand"), dim, hidden, rng),
            depthwise: DepthwiseConv2dLayer::new(&format!("{name}.dw"), hidden, 3, 1, 1, rng),
            project: LinearLayer::new(&format!("{name}.project"), hidden, dim, rng),
        }
    }

    /// `x: [N, L, C]` with `L = h * w` -> `[N, L, C]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let wide = self.expand.forward(tape, x)?;
        let plane = tokens_to_spatial(tape, wide, h, w)?;
        let mixed = self.depthwise.forward(tape, plane)?;
        let tokens = spatial_to_tokens(tape, mixed)?;
        let act = tape.gelu(tokens)?;
        self.project.forward(tape, act)
    }
}

impl<T: Scalar> Params<T> for MixFfn<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.expand.params();
        v.extend(self.depthwise.params());
        v.extend(self.project.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.expand.params_mut();
        v.extend(self.depthwise.params_mut());
        v.extend(self.project.params_mut());
        v
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock<T> {
    pub norm1: LayerNormLayer<T>,
    pub attn: EfficientAttention<T>,
    pub norm2: LayerNormLayer<T>,
    pub ffn: MixFfn<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncoderBlock {
            norm1: LayerNormLayer::new(&format!("{name}.norm1"), dim),
            attn: EfficientAttention::new(&format!("{name}.attn"), dim, heads, sr_ratio, rng),
            norm2: LayerNormLayer::new(&format!("{name}.norm2"), dim),
            ffn: MixFfn::new(&format!("{name}.ffn"), dim, dim * expansion, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let n1 = self.norm1.forward(tape, x)?;
        let a = self.attn.forward(tape, n1, h, w)?;
        let x = tape.add(x, a)?;
        let n2 = self.norm2.forward(tape, x)?;
        let f = self.ffn.forward(tape, n2, h, w)?;
        tape.add(x, f)
    }
}

impl<T: Scalar> Params<T> for EncoderBlock<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.norm1.params();
        v.extend(self.attn.params());
        v.extend(self.norm2.params());
        v.extend(self.ffn.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.norm1.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.ffn.params_mut());
        v
    }
}

/// One resolution level: patch embedding, blocks, output norm.
#[derive(Clone, Debug)]
pub struct EncoderStage<T> {
    pub patch: OverlapPatchEmbed<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub out_norm: LayerNormLayer<T>,
}

impl<T: Scalar> EncoderStage<T> {
    /// `[N,Cin,H,W] -> [N,Cstage,H/s,W/s]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let embedded = self.patch.forward(tape, x)?;
        let (h, w) = (tape.shape(embedded)[2], tape.shape(embedded)[3]);
        let mut tokens = spatial_to_tokens(tape, embedded)?;
        for block in &self.blocks {
            tokens = block.forward(tape, tokens, h, w)?;
        }
        let normed = self.out_norm.forward(tape, tokens)?;
        tokens_to_spatial(tape, normed, h, w)
    }
}

impl<T: Scalar> Params<T> for EncoderStage<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.patch.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.out_norm.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.patch.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.out_norm.params_mut());
        v
    }
}

/// The full four-stage encoder.
#[derive(Clone, Debug)]
pub struct MitEncoder<T> {
    pub config: EncoderConfig,
    pub stages: Vec<EncoderStage<T>>,
}

impl<T: Scalar> MitEncoder<T> {
    pub fn new(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = config.in_channels;
        for i in 0..4 {
            let name = format!("encoder.stage{}", i + 1);
            let c = config.channels[i];
            let patch = OverlapPatchEmbed::new(
                &format!("{name}.patch"),
                cin,
                c,
                config.patch_kernels[i],
                config.patch_strides[i],
                rng,
            );
            let blocks = (0..config.depths[i])
                .map(|j| {
                    EncoderBlock::new(
                        &format!("{name}.block{}", j + 1),
                        c,
                        config.heads[i],
                        config.sr_ratios[i],
                        config.ffn_expansion,
                        rng,
                    )
                })
                .collect();
            let out_norm = LayerNormLayer::new(&format!("{name}.out_norm"), c);
            stages.push(EncoderStage { patch, blocks, out_norm });
            cin = c;
        }
        Ok(MitEncoder { config, stages })
    }

    /// Runs all four stages, returning the feature pyramid coarse in
    /// channels, fine to coarse in space.
    pub fn forward(&self, tape: &mut Tape<T>, x: TensorId) -> Result<[TensorId; 4]> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape(
                "encoder",
                format!(
                    "expected [N,{},H,W], got {:?}",
                    self.config.in_channels, s
                ),
            ));
        }
        let stride = self.config.total_stride();
        if s[2] == 0 || s[3] == 0 || s[2] % stride != 0 || s[3] % stride != 0 {
            return Err(Error::shape(
                "encoder",
                format!("input extent {}x{} not divisible by {}", s[2], s[3], stride),
            ));
        }
        let mut x = x;
        let mut pyramid = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(tape, x)?;
            pyramid[i] = x;
        }
        Ok(pyramid)
    }
}

impl<T: Scalar> Params<T> for MitEncoder<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.stages.iter_mut().flat_map(|s| s.params_mut()).collect()
    }
    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        Vec::new()
    }
}
