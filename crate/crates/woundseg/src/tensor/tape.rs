use std::collections::BTreeMap;

use crate::{Error, Result, Scalar};

use super::{strides_of, ClassMask, Tensor, TensorId};

/// One recorded operation: forward value plus the saved context needed
/// to run its chain rule.
struct Node<T> {
    op: &'static str,
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    rule: Rule<T>,
}

impl<T: Scalar> Node<T> {
    /// Input value together with a zero-initialized gradient buffer.
    fn value_and_grad_mut(&mut self) -> (&[T], &mut [T]) {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.value.len()]);
        }
        (&self.value, self.grad.as_mut().unwrap().as_mut_slice())
    }
}

enum Rule<T> {
    Leaf,
    Constant,
    Conv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, padding: usize },
    DepthwiseConv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, padding: usize },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, xhat: Vec<T>, inv_std: Vec<T> },
    Relu { x: TensorId },
    Gelu { x: TensorId },
    BilinearUpsample { x: TensorId },
    ConcatChannels { a: TensorId, b: TensorId },
    MatMul { a: TensorId, b: TensorId, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: TensorId, axis: usize },
    Linear { x: TensorId, w: TensorId, b: TensorId, rows: usize, in_dim: usize, out_dim: usize },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: T },
    AddScalar { x: TensorId },
    Ln { x: TensorId },
    PowScalar { x: TensorId, p: T },
    Reshape { x: TensorId },
    Permute { x: TensorId, perm: Vec<usize> },
    SumAll { x: TensorId },
    SumAxis { x: TensorId, axis: usize },
    SumPerChannel { x: TensorId },
    CrossEntropy { x: TensorId, dlogits: Vec<T> },
}

impl<T> Rule<T> {
    fn inputs(&self) -> Vec<TensorId> {
        use Rule::*;
        match self {
            Leaf | Constant => vec![],
            Conv2d { x, w, b, .. } | DepthwiseConv2d { x, w, b, .. } => vec![*x, *w, *b],
            BatchNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Linear { x, w, b, .. } => vec![*x, *w, *b],
            Relu { x } | Gelu { x } | BilinearUpsample { x } | Softmax { x, .. }
            | Scale { x, .. } | AddScalar { x } | Ln { x } | PowScalar { x, .. }
            | Reshape { x } | Permute { x, .. } | SumAll { x } | SumAxis { x, .. }
            | SumPerChannel { x } | CrossEntropy { x, .. } => vec![*x],
            ConcatChannels { a, b } | MatMul { a, b, .. } | Add { a, b } | Mul { a, b }
            | Div { a, b } => vec![*a, *b],
        }
    }
}

/// One row of the recorded forward pass, for structural assertions.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub id: TensorId,
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub inputs: Vec<TensorId>,
}

/// Result of a batch-norm application. In training mode the batch
/// statistics are returned so the owning layer can fold them into its
/// running estimates.
pub struct BatchNormOut<T> {
    pub out: TensorId,
    pub batch_mean: Option<Vec<T>>,
    pub batch_var: Option<Vec<T>>,
}

/// Wengert-list gradient tape. Operators append nodes in execution
/// order; [`Tape::backward`] walks them in reverse, accumulating
/// gradients additively into every node that (transitively) depends on
/// a gradient-requiring leaf.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, TensorId>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations recorded so far (convolutions,
    /// linear maps, and matrix products; normalization, activations and
    /// resampling count zero by convention).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node, if the
    /// node participates in differentiation.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Detached copy of a recorded value.
    pub fn to_tensor(&self, id: TensorId) -> Tensor<T> {
        Tensor::new(&self.nodes[id.0].shape, self.nodes[id.0].value.clone())
            .expect("recorded values are always well-formed")
    }

    /// Scalar payload of a one-element node.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0].to_f64_lossy()
    }

    /// Registers a differentiation leaf, stamping the tensor with its
    /// tape handle.
    pub fn leaf(&mut self, t: &mut Tensor<T>) -> TensorId {
        let id = self.push_unchecked(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            Rule::Leaf,
            t.requires_grad(),
        );
        t.set_tape_id(id);
        id
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> TensorId {
        self.push_unchecked("constant", t.shape().to_vec(), t.data().to_vec(), Rule::Constant, false)
    }

    /// Registers a named parameter leaf. Repeated registration under
    /// the same name returns the original handle, so a weight used
    /// twice accumulates one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Result<TensorId> {
        if let Some(&id) = self.params.get(name) {
            if self.nodes[id.0].shape != t.shape() {
                return Err(Error::shape(
                    "param",
                    format!(
                        "name {:?} re-registered with shape {:?}, previously {:?}",
                        name,
                        t.shape(),
                        self.nodes[id.0].shape
                    ),
                ));
            }
            return Ok(id);
        }
        let id = self.push_unchecked(
            "param",
            t.shape().to_vec(),
            t.data().to_vec(),
            Rule::Leaf,
            t.requires_grad(),
        );
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradient accumulated for a named parameter, if any.
    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|id| self.grad(*id))
    }

    /// Recorded operations in execution order.
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| TraceEntry {
                id: TensorId(i),
                op: n.op,
                shape: n.shape.clone(),
                inputs: n.rule.inputs(),
            })
            .collect()
    }

    fn push_unchecked(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        rule: Rule<T>,
        needs_grad: bool,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { op, shape, value, grad: None, needs_grad, rule });
        id
    }

    /// Appends an op output, rejecting non-finite values.
    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        rule: Rule<T>,
    ) -> Result<TensorId> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = rule.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push_unchecked(op, shape, value, rule, needs_grad))
    }

    fn rank4(&self, op: &'static str, id: TensorId) -> Result<[usize; 4]> {
        let s = self.shape(id);
        if s.len() != 4 {
            return Err(Error::shape(op, format!("expected rank-4 [N,C,H,W], got {:?}", s)));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    // ----- convolution ---------------------------------------------------

    /// 2-D cross-correlation with square stride/padding, bias included.
    /// `x: [N,Cin,H,W]`, `w: [Cout,Cin,Kh,Kw]`, `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let [n, cin, h, wd] = self.rank4("conv2d", x)?;
        let ws = self.shape(w);
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {:?}", ws)));
        }
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", cin, wcin),
            ));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", self.shape(b), cout),
            ));
        }
        if stride == 0 {
            return Err(Error::argument("conv2d", "stride must be positive"));
        }
        let (oh, ow) = conv_out_extent("conv2d", h, wd, kh, kw, stride, padding)?;

        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut oi = 0;
        for bi in 0..n {
            for co in 0..cout {
                let wco = &wv[co * cin * kh * kw..(co + 1) * cin * kh * kw];
                for oy in 0..oh {
                    let iy0 = (oy * stride) as isize - padding as isize;
                    for ox in 0..ow {
                        let ix0 = (ox * stride) as isize - padding as isize;
                        let mut acc = bv[co];
                        for ci in 0..cin {
                            let xch = &xv[((bi * cin + ci) * h) * wd..((bi * cin + ci) * h + h) * wd];
                            let wch = &wco[ci * kh * kw..(ci + 1) * kh * kw];
                            for ky in 0..kh {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &xch[iy as usize * wd..(iy as usize + 1) * wd];
                                let wrow = &wch[ky * kw..(ky + 1) * kw];
                                for kx in 0..kw {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += row[ix as usize] * wrow[kx];
                                }
                            }
                        }
                        out[oi] = acc;
                        oi += 1;
                    }
                }
            }
        }
        self.macs += (n * cout * oh * ow * cin * kh * kw) as u64;
        self.push(
            "conv2d",
            vec![n, cout, oh, ow],
            out,
            Rule::Conv2d { x, w, b, stride, padding },
        )
    }

    /// Depthwise 2-D convolution: one `[1,Kh,Kw]` filter per channel.
    /// `x: [N,C,H,W]`, `w: [C,1,Kh,Kw]`, `b: [C]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let [n, c, h, wd] = self.rank4("depthwise_conv2d", x)?;
        let ws = self.shape(w);
        if ws.len() != 4 || ws[0] != c || ws[1] != 1 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weight {:?} incompatible with {} input channels", ws, c),
            ));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("bias shape {:?}, expected [{}]", self.shape(b), c),
            ));
        }
        if stride == 0 {
            return Err(Error::argument("depthwise_conv2d", "stride must be positive"));
        }
        let (oh, ow) = conv_out_extent("depthwise_conv2d", h, wd, kh, kw, stride, padding)?;

        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut oi = 0;
        for bi in 0..n {
            for ci in 0..c {
                let xch = &xv[((bi * c + ci) * h) * wd..((bi * c + ci) * h + h) * wd];
                let wch = &wv[ci * kh * kw..(ci + 1) * kh * kw];
                for oy in 0..oh {
                    let iy0 = (oy * stride) as isize - padding as isize;
                    for ox in 0..ow {
                        let ix0 = (ox * stride) as isize - padding as isize;
                        let mut acc = bv[ci];
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &xch[iy as usize * wd..(iy as usize + 1) * wd];
                            let wrow = &wch[ky * kw..(ky + 1) * kw];
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += row[ix as usize] * wrow[kx];
                            }
                        }
                        out[oi] = acc;
                        oi += 1;
                    }
                }
            }
        }
        self.macs += (n * c * oh * ow * kh * kw) as u64;
        self.push(
            "depthwise_conv2d",
            vec![n, c, oh, ow],
            out,
            Rule::DepthwiseConv2d { x, w, b, stride, padding },
        )
    }

    // ----- normalization --------------------------------------------------

    /// Batch normalization over `[N,C,H,W]`, statistics per channel.
    /// Training mode normalizes by batch statistics and reports them;
    /// eval mode normalizes by the provided running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[T],
        running_var: &[T],
        training: bool,
        eps: f64,
    ) -> Result<BatchNormOut<T>> {
        let [n, c, h, w] = self.rank4("batch_norm", x)?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{} shape {:?}, expected [{}]", name, self.shape(id), c),
                ));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats length {}/{}, expected {}", running_mean.len(), running_var.len(), c),
            ));
        }
        let m = n * h * w;
        if training && m == 0 {
            return Err(Error::argument("batch_norm", "empty batch in training mode"));
        }
        let eps = T::from_f64_lossy(eps);
        let xv = &self.nodes[x.0].value;
        let sp = h * w;

        let (mean, var): (Vec<T>, Vec<T>) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let denom = T::from_f64_lossy(m as f64);
            for ci in 0..c {
                let mut s = T::zero();
                for bi in 0..n {
                    let base = (bi * c + ci) * sp;
                    for v in &xv[base..base + sp] {
                        s += *v;
                    }
                }
                let mu = s / denom;
                let mut sq = T::zero();
                for bi in 0..n {
                    let base = (bi * c + ci) * sp;
                    for v in &xv[base..base + sp] {
                        let d = *v - mu;
                        sq += d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = sq / denom;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let inv_std: Vec<T> = var.iter().map(|v| (*v + eps).sqrt().recip()).collect();
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..n {
            for ci in 0..c {
                let base = (bi * c + ci) * sp;
                let (mu, inv, g, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for i in base..base + sp {
                    let xh = (xv[i] - mu) * inv;
                    xhat[i] = xh;
                    out[i] = g * xh + be;
                }
            }
        }

        let (batch_mean, batch_var) =
            if training { (Some(mean), Some(var)) } else { (None, None) };
        let out = self.push(
            "batch_norm",
            vec![n, c, h, w],
            out,
            Rule::BatchNorm { x, gamma, beta, xhat, inv_std, training },
        )?;
        Ok(BatchNormOut { out, batch_mean, batch_var })
    }

    /// Layer normalization over the last axis. `gamma`/`beta`: `[D]`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{} shape {:?}, expected [{}]", name, self.shape(id), d),
                ));
            }
        }
        let eps = T::from_f64_lossy(eps);
        let xv = &self.nodes[x.0].value;
        let rows = xv.len() / d;
        let denom = T::from_f64_lossy(d as f64);
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut s = T::zero();
            for v in row {
                s += *v;
            }
            let mu = s / denom;
            let mut sq = T::zero();
            for v in row {
                let dv = *v - mu;
                sq += dv * dv;
            }
            let inv = (sq / denom + eps).sqrt().recip();
            inv_std[r] = inv;
            for i in 0..d {
                let xh = (row[i] - mu) * inv;
                xhat[r * d + i] = xh;
                out[r * d + i] = gv[i] * xh + bv[i];
            }
        }
        self.push("layer_norm", shape, out, Rule::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    // ----- activations ----------------------------------------------------

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<T> =
            self.nodes[x.0].value.iter().map(|v| if *v > T::zero() { *v } else { T::zero() }).collect();
        self.push("relu", shape, out, Rule::Relu { x })
    }

    /// Exact GeLU: `x * Phi(x)` with the Gaussian CDF via `erf`.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let half = T::from_f64_lossy(0.5);
        let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        let out: Vec<T> = self.nodes[x.0]
            .value
            .iter()
            .map(|v| *v * half * (T::one() + (*v * inv_sqrt2).erf()))
            .collect();
        self.push("gelu", shape, out, Rule::Gelu { x })
    }

    // ----- resampling -----------------------------------------------------

    /// Bilinear upsampling with half-pixel source centers and edge
    /// clamping. Target extents must not shrink either axis.
    pub fn bilinear_upsample(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let [n, c, h, w] = self.rank4("bilinear_upsample", x)?;
        if out_h < h || out_w < w {
            return Err(Error::argument(
                "bilinear_upsample",
                format!("target {}x{} shrinks input {}x{}", out_h, out_w, h, w),
            ));
        }
        let ytab = bilinear_axis_table(h, out_h);
        let xtab = bilinear_axis_table(w, out_w);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        let mut oi = 0;
        for bi in 0..n {
            for ci in 0..c {
                let plane = &xv[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for &(y0, y1, fy) in &ytab {
                    let r0 = &plane[y0 * w..(y0 + 1) * w];
                    let r1 = &plane[y1 * w..(y1 + 1) * w];
                    let fy = T::from_f64_lossy(fy);
                    let gy = T::one() - fy;
                    for &(x0, x1, fx) in &xtab {
                        let fx = T::from_f64_lossy(fx);
                        let gx = T::one() - fx;
                        out[oi] = gy * (gx * r0[x0] + fx * r0[x1]) + fy * (gx * r1[x0] + fx * r1[x1]);
                        oi += 1;
                    }
                }
            }
        }
        self.push("bilinear_upsample", vec![n, c, out_h, out_w], out, Rule::BilinearUpsample { x })
    }

    // ----- structure ------------------------------------------------------

    /// Concatenates two `[N,C,H,W]` tensors along the channel axis,
    /// first argument's channels first.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let [na, ca, ha, wa] = self.rank4("concat_channels", a)?;
        let [nb, cb, hb, wb] = self.rank4("concat_channels", b)?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let sp = ha * wa;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(na * (ca + cb) * sp);
        for bi in 0..na {
            out.extend_from_slice(&av[bi * ca * sp..(bi + 1) * ca * sp]);
            out.extend_from_slice(&bv[bi * cb * sp..(bi + 1) * cb * sp]);
        }
        self.push("concat_channels", vec![na, ca + cb, ha, wa], out, Rule::ConcatChannels { a, b })
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(x), new_shape),
            ));
        }
        let value = self.nodes[x.0].value.clone();
        self.push("reshape", new_shape.to_vec(), value, Rule::Reshape { x })
    }

    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::argument(
                "permute",
                format!("{:?} is not a permutation of 0..{}", perm, rank),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides_of(&shape);
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xv.len()];
        let out_strides = strides_of(&out_shape);
        for (oi, slot) in out.iter_mut().enumerate() {
            let mut rem = oi;
            let mut src = 0;
            for d in 0..rank {
                let idx = rem / out_strides[d];
                rem %= out_strides[d];
                src += idx * gather[d];
            }
            *slot = xv[src];
        }
        self.push("permute", out_shape, out, Rule::Permute { x, perm: perm.to_vec() })
    }

    // ----- attention primitives --------------------------------------------

    /// Batched matrix product: `[..., M, K] x [..., K, N]` with equal
    /// leading dimensions.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != sa.len() {
            return Err(Error::shape("matmul", format!("ranks {:?} vs {:?}", sa, sb)));
        }
        let (la, lb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if la != lb {
            return Err(Error::shape("matmul", format!("leading dims {:?} vs {:?}", la, lb)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", format!("inner dims {} vs {}", k, kb)));
        }
        let batch: usize = la.iter().product();
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let am = &av[bi * m * k..(bi + 1) * m * k];
            let bm = &bv[bi * k * n..(bi + 1) * k * n];
            let om = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let arow = &am[i * k..(i + 1) * k];
                let orow = &mut om[i * n..(i + 1) * n];
                for (p, &aip) in arow.iter().enumerate() {
                    let brow = &bm[p * n..(p + 1) * n];
                    for (o, bval) in orow.iter_mut().zip(brow) {
                        *o += aip * *bval;
                    }
                }
            }
        }
        let mut out_shape = la.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        self.macs += (batch * m * k * n) as u64;
        self.push("matmul", out_shape, out, Rule::MatMul { a, b, batch, m, k, n })
    }

    /// Numerically stable softmax along one axis.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::argument(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * len * inner + r;
                let mut mx = T::neg_infinity();
                for i in 0..len {
                    mx = mx.max(xv[base + i * inner]);
                }
                let mut sum = T::zero();
                for i in 0..len {
                    let e = (xv[base + i * inner] - mx).exp();
                    out[base + i * inner] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[base + i * inner] = out[base + i * inner] / sum;
                }
            }
        }
        self.push("softmax", shape, out, Rule::Softmax { x, axis })
    }

    /// Affine map over the last axis: `[..., In] -> [..., Out]`.
    /// `w: [In, Out]`, `b: [Out]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let in_dim = *shape.last().ok_or_else(|| Error::shape("linear", "rank-0 input"))?;
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != in_dim {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} incompatible with input dim {}", ws, in_dim),
            ));
        }
        let out_dim = ws[1];
        if self.shape(b) != [out_dim] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?}, expected [{}]", self.shape(b), out_dim),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let rows = xv.len() / in_dim;
        let mut out = vec![T::zero(); rows * out_dim];
        for r in 0..rows {
            let xrow = &xv[r * in_dim..(r + 1) * in_dim];
            let orow = &mut out[r * out_dim..(r + 1) * out_dim];
            orow.copy_from_slice(bv);
            for (i, &xi) in xrow.iter().enumerate() {
                let wrow = &wv[i * out_dim..(i + 1) * out_dim];
                for (o, wval) in orow.iter_mut().zip(wrow) {
                    *o += xi * *wval;
                }
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_dim;
        self.macs += (rows * in_dim * out_dim) as u64;
        self.push("linear", out_shape, out, Rule::Linear { x, w, b, rows, in_dim, out_dim })
    }

    // ----- elementwise ------------------------------------------------------

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        rule: Rule<T>,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let shape = self.shape(a).to_vec();
        let out: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(op, shape, out, rule)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Rule::Add { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Rule::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Rule::Div { a, b })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let c = T::from_f64_lossy(c);
        let shape = self.shape(x).to_vec();
        let out: Vec<T> = self.nodes[x.0].value.iter().map(|v| *v * c).collect();
        self.push("scale", shape, out, Rule::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let c = T::from_f64_lossy(c);
        let shape = self.shape(x).to_vec();
        let out: Vec<T> = self.nodes[x.0].value.iter().map(|v| *v + c).collect();
        self.push("add_scalar", shape, out, Rule::AddScalar { x })
    }

    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<T> = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        self.push("ln", shape, out, Rule::Ln { x })
    }

    /// Elementwise `x^p` for non-negative `x`. `p = 0` yields ones with
    /// zero gradient.
    pub fn pow_scalar(&mut self, x: TensorId, p: f64) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let pt = T::from_f64_lossy(p);
        let out: Vec<T> = if p == 0.0 {
            vec![T::one(); self.nodes[x.0].value.len()]
        } else {
            self.nodes[x.0].value.iter().map(|v| v.powf(pt)).collect()
        };
        self.push("pow_scalar", shape, out, Rule::PowScalar { x, p: pt })
    }

    // ----- reductions -------------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let mut s = T::zero();
        for v in &self.nodes[x.0].value {
            s += *v;
        }
        self.push("sum_all", vec![1], vec![s], Rule::SumAll { x })
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::argument(
                "sum_axis",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                let orow = &mut out[o * inner..(o + 1) * inner];
                for (slot, v) in orow.iter_mut().zip(&xv[base..base + inner]) {
                    *slot += *v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push("sum_axis", out_shape, out, Rule::SumAxis { x, axis })
    }

    /// Sums a `[N,C,...]` tensor over every axis except the channel
    /// axis, producing `[C]`.
    pub fn sum_per_channel(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("sum_per_channel", format!("need rank >= 2, got {:?}", shape)));
        }
        let (n, c) = (shape[0], shape[1]);
        let sp: usize = shape[2..].iter().product();
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); c];
        for bi in 0..n {
            for ci in 0..c {
                let base = (bi * c + ci) * sp;
                let mut s = T::zero();
                for v in &xv[base..base + sp] {
                    s += *v;
                }
                out[ci] += s;
            }
        }
        self.push("sum_per_channel", vec![c], out, Rule::SumPerChannel { x })
    }

    // ----- objectives -------------------------------------------------------

    /// Pixel-averaged softmax cross-entropy. `logits: [N,K,H,W]`,
    /// `labels: [N,H,W]` with class indices below `K`.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &ClassMask) -> Result<TensorId> {
        let [n, k, h, w] = self.rank4("cross_entropy", logits)?;
        if labels.shape() != [n, h, w] {
            return Err(Error::shape(
                "cross_entropy",
                format!("labels {:?} vs logits {:?}", labels.shape(), self.shape(logits)),
            ));
        }
        if let Some(bad) = labels.data().iter().find(|&&l| l as usize >= k) {
            return Err(Error::LabelOutOfRange { label: *bad as usize, classes: k });
        }
        let xv = &self.nodes[logits.0].value;
        let sp = h * w;
        let pixels = n * sp;
        let inv_pixels = T::from_f64_lossy(1.0 / pixels as f64);
        let mut dlogits = vec![T::zero(); xv.len()];
        let mut total = T::zero();
        for bi in 0..n {
            for pi in 0..sp {
                let label = labels.data()[bi * sp + pi] as usize;
                let idx = |ci: usize| (bi * k + ci) * sp + pi;
                let mut mx = T::neg_infinity();
                for ci in 0..k {
                    mx = mx.max(xv[idx(ci)]);
                }
                let mut sum = T::zero();
                for ci in 0..k {
                    sum += (xv[idx(ci)] - mx).exp();
                }
                let lse = sum.ln() + mx;
                total += lse - xv[idx(label)];
                for ci in 0..k {
                    let p = (xv[idx(ci)] - mx).exp() / sum;
                    let onehot = if ci == label { T::one() } else { T::zero() };
                    dlogits[idx(ci)] = (p - onehot) * inv_pixels;
                }
            }
        }
        let loss = total * inv_pixels;
        self.push("cross_entropy", vec![1], vec![loss], Rule::CrossEntropy { x: logits, dlogits })
    }

    // ----- reverse pass -----------------------------------------------------

    /// Runs the chain rule from a scalar node back to every leaf.
    /// Gradients accumulate: a second call without a fresh tape doubles
    /// them.
    pub fn backward(&mut self, target: TensorId) -> Result<()> {
        if self.nodes[target.0].value.len() != 1 {
            return Err(Error::argument(
                "backward",
                format!("target must be scalar, got shape {:?}", self.shape(target)),
            ));
        }
        if !self.nodes[target.0].needs_grad {
            return Err(Error::argument(
                "backward",
                "target does not depend on any gradient-requiring leaf",
            ));
        }
        {
            let node = &mut self.nodes[target.0];
            let (_, g) = node.value_and_grad_mut();
            g[0] += T::one();
        }
        for i in (0..=target.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            if !node.needs_grad || node.grad.is_none() {
                continue;
            }
            step_backward(head, node)?;
        }
        Ok(())
    }
}

/// Output extent of a strided, padded convolution.
fn conv_out_extent(
    op: &'static str,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let oh = (h + 2 * padding).checked_sub(kh).map(|v| v / stride + 1);
    let ow = (w + 2 * padding).checked_sub(kw).map(|v| v / stride + 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
        _ => Err(Error::shape(
            op,
            format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * padding, w + 2 * padding),
        )),
    }
}

/// Per-axis interpolation table: source indices and fractional weight
/// for each output position, half-pixel centers, edge clamped.
fn bilinear_axis_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Applies one node's chain rule, scattering into the nodes before it.
fn step_backward<T: Scalar>(head: &mut [Node<T>], node: &mut Node<T>) -> Result<()> {
    use Rule::*;

    let g = node.grad.as_ref().expect("caller checked").clone();
    match &node.rule {
        Leaf | Constant => {}

        Conv2d { x, w, b, stride, padding } => {
            let (n, cin, h, wd) = dims4(&head[x.0].shape);
            let ws = &head[w.0].shape;
            let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
            let (oh, ow) = (node.shape[2], node.shape[3]);
            let xv = &head[x.0].value;
            let wv = &head[w.0].value;
            let mut dx = vec![T::zero(); xv.len()];
            let mut dw = vec![T::zero(); wv.len()];
            let mut db = vec![T::zero(); cout];
            let mut oi = 0;
            for bi in 0..n {
                for co in 0..cout {
                    for oy in 0..oh {
                        let iy0 = (oy * stride) as isize - *padding as isize;
                        for ox in 0..ow {
                            let ix0 = (ox * stride) as isize - *padding as isize;
                            let go = g[oi];
                            oi += 1;
                            db[co] += go;
                            for ci in 0..cin {
                                let xbase = ((bi * cin + ci) * h) * wd;
                                let wbase = (co * cin + ci) * kh * kw;
                                for ky in 0..kh {
                                    let iy = iy0 + ky as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = xbase + iy as usize * wd;
                                    let wrow = wbase + ky * kw;
                                    for kx in 0..kw {
                                        let ix = ix0 + kx as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        dx[xrow + ix as usize] += go * wv[wrow + kx];
                                        dw[wrow + kx] += go * xv[xrow + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            accumulate(head, *x, &dx);
            accumulate(head, *w, &dw);
            accumulate(head, *b, &db);
        }

        DepthwiseConv2d { x, w, b, stride, padding } => {
            let (n, c, h, wd) = dims4(&head[x.0].shape);
            let ws = &head[w.0].shape;
            let (kh, kw) = (ws[2], ws[3]);
            let (oh, ow) = (node.shape[2], node.shape[3]);
            let xv = &head[x.0].value;
            let wv = &head[w.0].value;
            let mut dx = vec![T::zero(); xv.len()];
            let mut dw = vec![T::zero(); wv.len()];
            let mut db = vec![T::zero(); c];
            let mut oi = 0;
            for bi in 0..n {
                for ci in 0..c {
                    let xbase = ((bi * c + ci) * h) * wd;
                    let wbase = ci * kh * kw;
                    for oy in 0..oh {
                        let iy0 = (oy * stride) as isize - *padding as isize;
                        for ox in 0..ow {
                            let ix0 = (ox * stride) as isize - *padding as isize;
                            let go = g[oi];
                            oi += 1;
                            db[ci] += go;
                            for ky in 0..kh {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * wd;
                                let wrow = wbase + ky * kw;
                                for kx in 0..kw {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    dx[xrow + ix as usize] += go * wv[wrow + kx];
                                    dw[wrow + kx] += go * xv[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
            accumulate(head, *x, &dx);
            accumulate(head, *w, &dw);
            accumulate(head, *b, &db);
        }

        BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
            let (n, c, h, w) = dims4(&head[x.0].shape);
            let sp = h * w;
            let m = n * sp;
            let gv = head[gamma.0].value.clone();
            let inv_m = T::from_f64_lossy(1.0 / m as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); xhat.len()];
            for ci in 0..c {
                let mut sum_h = T::zero();
                let mut sum_hx = T::zero();
                for bi in 0..n {
                    let base = (bi * c + ci) * sp;
                    for i in base..base + sp {
                        let gi = g[i];
                        dgamma[ci] += gi * xhat[i];
                        dbeta[ci] += gi;
                        let hi = gv[ci] * gi;
                        sum_h += hi;
                        sum_hx += hi * xhat[i];
                    }
                }
                let (mean_h, mean_hx) = if *training {
                    (sum_h * inv_m, sum_hx * inv_m)
                } else {
                    (T::zero(), T::zero())
                };
                for bi in 0..n {
                    let base = (bi * c + ci) * sp;
                    for i in base..base + sp {
                        let hi = gv[ci] * g[i];
                        dx[i] = inv_std[ci] * (hi - mean_h - xhat[i] * mean_hx);
                    }
                }
            }
            accumulate(head, *x, &dx);
            accumulate(head, *gamma, &dgamma);
            accumulate(head, *beta, &dbeta);
        }

        LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = *node.shape.last().unwrap();
            let rows = xhat.len() / d;
            let gv = head[gamma.0].value.clone();
            let inv_d = T::from_f64_lossy(1.0 / d as f64);
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = vec![T::zero(); xhat.len()];
            for r in 0..rows {
                let base = r * d;
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for i in 0..d {
                    let gi = g[base + i];
                    dgamma[i] += gi * xhat[base + i];
                    dbeta[i] += gi;
                    let hi = gv[i] * gi;
                    s1 += hi;
                    s2 += hi * xhat[base + i];
                }
                let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                for i in 0..d {
                    let hi = gv[i] * g[base + i];
                    dx[base + i] = inv_std[r] * (hi - m1 - xhat[base + i] * m2);
                }
            }
            accumulate(head, *x, &dx);
            accumulate(head, *gamma, &dgamma);
            accumulate(head, *beta, &dbeta);
        }

        Relu { x } => {
            let nx = &mut head[x.0];
            if nx.needs_grad {
                let (xv, dx) = nx.value_and_grad_mut();
                for i in 0..xv.len() {
                    if xv[i] > T::zero() {
                        dx[i] += g[i];
                    }
                }
            }
        }

        Gelu { x } => {
            let nx = &mut head[x.0];
            if nx.needs_grad {
                let half = T::from_f64_lossy(0.5);
                let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64_lossy(0.3989422804014327);
                let (xv, dx) = nx.value_and_grad_mut();
                for i in 0..xv.len() {
                    let xi = xv[i];
                    let cdf = half * (T::one() + (xi * inv_sqrt2).erf());
                    let pdf = (-(xi * xi) * half).exp() * inv_sqrt_2pi;
                    dx[i] += g[i] * (cdf + xi * pdf);
                }
            }
        }

        BilinearUpsample { x } => {
            let (n, c, h, w) = dims4(&head[x.0].shape);
            let (oh, ow) = (node.shape[2], node.shape[3]);
            let ytab = bilinear_axis_table(h, oh);
            let xtab = bilinear_axis_table(w, ow);
            let mut dx = vec![T::zero(); head[x.0].value.len()];
            let mut oi = 0;
            for bi in 0..n {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for &(y0, y1, fy) in &ytab {
                        let fy = T::from_f64_lossy(fy);
                        let gy = T::one() - fy;
                        for &(x0, x1, fx) in &xtab {
                            let fx = T::from_f64_lossy(fx);
                            let gx = T::one() - fx;
                            let go = g[oi];
                            oi += 1;
                            dx[base + y0 * w + x0] += go * gy * gx;
                            dx[base + y0 * w + x1] += go * gy * fx;
                            dx[base + y1 * w + x0] += go * fy * gx;
                            dx[base + y1 * w + x1] += go * fy * fx;
                        }
                    }
                }
            }
            accumulate(head, *x, &dx);
        }

        ConcatChannels { a, b } => {
            let (n, ca, h, w) = dims4(&head[a.0].shape);
            let cb = head[b.0].shape[1];
            let sp = h * w;
            let mut da = vec![T::zero(); n * ca * sp];
            let mut db = vec![T::zero(); n * cb * sp];
            for bi in 0..n {
                let gbase = bi * (ca + cb) * sp;
                da[bi * ca * sp..(bi + 1) * ca * sp]
                    .copy_from_slice(&g[gbase..gbase + ca * sp]);
                db[bi * cb * sp..(bi + 1) * cb * sp]
                    .copy_from_slice(&g[gbase + ca * sp..gbase + (ca + cb) * sp]);
            }
            accumulate(head, *a, &da);
            accumulate(head, *b, &db);
        }

        MatMul { a, b, batch, m, k, n } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let av = &head[a.0].value;
            let bv = &head[b.0].value;
            let mut da = vec![T::zero(); av.len()];
            let mut db = vec![T::zero(); bv.len()];
            for bi in 0..batch {
                let gm = &g[bi * m * n..(bi + 1) * m * n];
                let am = &av[bi * m * k..(bi + 1) * m * k];
                let bm = &bv[bi * k * n..(bi + 1) * k * n];
                let dam = &mut da[bi * m * k..(bi + 1) * m * k];
                for i in 0..m {
                    let grow = &gm[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bm[p * n..(p + 1) * n];
                        let mut acc = T::zero();
                        for (gv, bv) in grow.iter().zip(brow) {
                            acc += *gv * *bv;
                        }
                        dam[i * k + p] += acc;
                    }
                }
                let dbm = &mut db[bi * k * n..(bi + 1) * k * n];
                for i in 0..m {
                    let grow = &gm[i * n..(i + 1) * n];
                    let arow = &am[i * k..(i + 1) * k];
                    for (p, &aip) in arow.iter().enumerate() {
                        let drow = &mut dbm[p * n..(p + 1) * n];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += aip * *gv;
                        }
                    }
                }
            }
            accumulate(head, *a, &da);
            accumulate(head, *b, &db);
        }

        Softmax { x, axis } => {
            let shape = &node.shape;
            let len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let y = &node.value;
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let base = o * len * inner + r;
                    let mut dot = T::zero();
                    for i in 0..len {
                        dot += g[base + i * inner] * y[base + i * inner];
                    }
                    for i in 0..len {
                        let idx = base + i * inner;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            accumulate(head, *x, &dx);
        }

        Linear { x, w, b, rows, in_dim, out_dim } => {
            let (rows, in_dim, out_dim) = (*rows, *in_dim, *out_dim);
            let xv = &head[x.0].value;
            let wv = &head[w.0].value;
            let mut dx = vec![T::zero(); xv.len()];
            let mut dw = vec![T::zero(); wv.len()];
            let mut db = vec![T::zero(); out_dim];
            for r in 0..rows {
                let grow = &g[r * out_dim..(r + 1) * out_dim];
                let xrow = &xv[r * in_dim..(r + 1) * in_dim];
                let dxrow = &mut dx[r * in_dim..(r + 1) * in_dim];
                for i in 0..in_dim {
                    let wrow = &wv[i * out_dim..(i + 1) * out_dim];
                    let mut acc = T::zero();
                    for (gv, wv) in grow.iter().zip(wrow) {
                        acc += *gv * *wv;
                    }
                    dxrow[i] += acc;
                    let dwrow = &mut dw[i * out_dim..(i + 1) * out_dim];
                    let xi = xrow[i];
                    for (dv, gv) in dwrow.iter_mut().zip(grow) {
                        *dv += xi * *gv;
                    }
                }
                for (dv, gv) in db.iter_mut().zip(grow) {
                    *dv += *gv;
                }
            }
            accumulate(head, *x, &dx);
            accumulate(head, *w, &dw);
            accumulate(head, *b, &db);
        }

        Add { a, b } => {
            accumulate(head, *a, &g);
            accumulate(head, *b, &g);
        }

        Mul { a, b } => {
            let da: Vec<T> = g.iter().zip(&head[b.0].value).map(|(gi, bi)| *gi * *bi).collect();
            let db: Vec<T> = g.iter().zip(&head[a.0].value).map(|(gi, ai)| *gi * *ai).collect();
            accumulate(head, *a, &da);
            accumulate(head, *b, &db);
        }

        Div { a, b } => {
            let av = &head[a.0].value;
            let bv = &head[b.0].value;
            let da: Vec<T> = g.iter().zip(bv).map(|(gi, bi)| *gi / *bi).collect();
            let db: Vec<T> = g
                .iter()
                .zip(av.iter().zip(bv))
                .map(|(gi, (ai, bi))| -*gi * *ai / (*bi * *bi))
                .collect();
            accumulate(head, *a, &da);
            accumulate(head, *b, &db);
        }

        Scale { x, c } => {
            let dx: Vec<T> = g.iter().map(|gi| *gi * *c).collect();
            accumulate(head, *x, &dx);
        }

        AddScalar { x } => {
            accumulate(head, *x, &g);
        }

        Ln { x } => {
            let nx = &mut head[x.0];
            if nx.needs_grad {
                let (xv, dx) = nx.value_and_grad_mut();
                for i in 0..xv.len() {
                    dx[i] += g[i] / xv[i];
                }
            }
        }

        PowScalar { x, p } => {
            let nx = &mut head[x.0];
            if nx.needs_grad && *p != T::zero() {
                let pm1 = *p - T::one();
                let (xv, dx) = nx.value_and_grad_mut();
                for i in 0..xv.len() {
                    dx[i] += g[i] * *p * xv[i].powf(pm1);
                }
            }
        }

        Reshape { x } => {
            accumulate(head, *x, &g);
        }

        Permute { x, perm } => {
            let in_shape = &head[x.0].shape;
            let in_strides = strides_of(in_shape);
            let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let out_strides = strides_of(&node.shape);
            let mut dx = vec![T::zero(); head[x.0].value.len()];
            for (oi, gv) in g.iter().enumerate() {
                let mut rem = oi;
                let mut src = 0;
                for d in 0..perm.len() {
                    let idx = rem / out_strides[d];
                    rem %= out_strides[d];
                    src += idx * gather[d];
                }
                dx[src] += *gv;
            }
            accumulate(head, *x, &dx);
        }

        SumAll { x } => {
            let dx = vec![g[0]; head[x.0].value.len()];
            accumulate(head, *x, &dx);
        }

        SumAxis { x, axis } => {
            let shape = &head[x.0].shape;
            let len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let mut dx = vec![T::zero(); head[x.0].value.len()];
            for o in 0..outer {
                for i in 0..len {
                    let base = (o * len + i) * inner;
                    dx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(head, *x, &dx);
        }

        SumPerChannel { x } => {
            let shape = &head[x.0].shape;
            let (n, c) = (shape[0], shape[1]);
            let sp: usize = shape[2..].iter().product();
            let mut dx = vec![T::zero(); head[x.0].value.len()];
            for bi in 0..n {
                for ci in 0..c {
                    let base = (bi * c + ci) * sp;
                    let gc = g[ci];
                    for v in &mut dx[base..base + sp] {
                        *v = gc;
                    }
                }
            }
            accumulate(head, *x, &dx);
        }

        CrossEntropy { x, dlogits } => {
            let g0 = g[0];
            let dx: Vec<T> = dlogits.iter().map(|d| *d * g0).collect();
            accumulate(head, *x, &dx);
        }
    }
    Ok(())
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

/// Adds a gradient contribution into a node that participates in
/// differentiation.
fn accumulate<T: Scalar>(head: &mut [Node<T>], id: TensorId, delta: &[T]) {
    let n = &mut head[id.0];
    if !n.needs_grad {
        return;
    }
    if n.grad.is_none() {
        n.grad = Some(vec![T::zero(); n.value.len()]);
    }
    let g = n.grad.as_mut().unwrap();
    for (gi, di) in g.iter_mut().zip(delta) {
        *gi += *di;
    }
}
