//! Reverse-mode differentiation over a closed set of tensor operations.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. `backward` walks the nodes in exact reverse order.

use std::collections::HashMap;

use num_complex::Complex64;

use super::linalg::gemm;
use super::params::ParamStore;
use crate::fft::{dft2_inplace, real_dft2, Direction};
use crate::tensor::{Tensor, TensorError};

/// Instance-norm stabilizer added to the variance.
pub const NORM_EPS: f64 = 1e-5;

/// Tolerance on the imaginary residue of an inverse transform, relative to
/// `max(1, max |real part|)`.
pub const SPECTRAL_RESIDUE_TOL: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        id: String,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Linear {
        weight: Var,
        x: Var,
        bias: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Upsample2x {
        x: Var,
    },
    MaxPool2x {
        x: Var,
        argmax: Vec<usize>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    ScaleBy {
        x: Var,
        s: Var,
        index: usize,
    },
    Take {
        x: Var,
        index: usize,
    },
    Fft2 {
        x: Var,
        re: Vec<f64>,
        im: Vec<f64>,
    },
    Ifft2 {
        amplitude: Var,
        phase: Var,
    },
    MaskedMean {
        x: Var,
        indices: Vec<usize>,
    },
    SoftDice {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        eps: f64,
    },
    Contrastive {
        anchor: Var,
        protos: Var,
        positives: usize,
        tau: f64,
    },
    SqDist {
        x: Var,
        target: Vec<f64>,
    },
    DotConst {
        x: Var,
        weights: Vec<f64>,
    },
    Sum {
        x: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Upsample2x { .. } => "nearest_upsample2x",
            Op::MaxPool2x { .. } => "maxpool2x",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Take { .. } => "take",
            Op::Fft2 { .. } => "fft2",
            Op::Ifft2 { .. } => "ifft2",
            Op::MaskedMean { .. } => "masked_mean",
            Op::SoftDice { .. } => "soft_dice",
            Op::Contrastive { .. } => "contrastive",
            Op::SqDist { .. } => "sq_dist",
            Op::DotConst { .. } => "dot_const",
            Op::Sum { .. } => "sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param { .. } => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::Linear { weight, x, bias } => vec![*weight, *x, *bias],
            Op::Concat { parts } => parts.clone(),
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ScaleBy { x, s, .. } => vec![*x, *s],
            Op::Ifft2 { amplitude, phase } => vec![*amplitude, *phase],
            Op::Contrastive { anchor, protos, .. } => vec![*anchor, *protos],
            Op::SoftDice { logits, .. } => vec![*logits],
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::GlobalAvgPool { x }
            | Op::Upsample2x { x }
            | Op::MaxPool2x { x, .. }
            | Op::InstanceNorm { x, .. }
            | Op::Scale { x, .. }
            | Op::Take { x, .. }
            | Op::Fft2 { x, .. }
            | Op::MaskedMean { x, .. }
            | Op::SqDist { x, .. }
            | Op::DotConst { x, .. }
            | Op::Sum { x } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<String, Var>,
    checked: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(true)
    }
}

impl Tape {
    /// `checked` enables NaN/Inf guards on every op output and the spectral
    /// consistency guard in `ifft2`.
    pub fn new(checked: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            checked,
            consumed: false,
        }
    }

    pub fn checked(&self) -> bool {
        self.checked
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded operations and gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.param_vars.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param { .. } => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Result<Var, TensorError> {
        self.push(t, Op::Leaf)
    }

    /// A leaf whose gradient is tracked and readable through [`Tape::grad`].
    pub fn variable(&mut self, t: Tensor) -> Result<Var, TensorError> {
        let v = self.push(t, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Bring a parameter onto the tape; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.param_vars.get(id) {
            return Ok(v);
        }
        let value = store.value(id)?.clone();
        let v = self.push(value, Op::Param { id: id.to_string() })?;
        self.param_vars.insert(id.to_string(), v);
        Ok(v)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let (cin, h, w) = self.value(input).chw(OP)?;
        let (cout, wcin, k) = match self.shape(weight) {
            &[co, ci, kh, kw] if kh == kw => (co, ci, kh),
            s => return Err(TensorError::dim(OP, format!("weight must be [Co,Ci,k,k], got {s:?}"))),
        };
        if wcin != cin {
            return Err(TensorError::dim(OP, format!("input has {cin} channels, weight expects {wcin}")));
        }
        if k % 2 == 0 {
            return Err(TensorError::dim(OP, format!("kernel size {k} must be odd")));
        }
        if self.shape(bias) != [cout] {
            return Err(TensorError::dim(OP, format!("bias must be [{cout}], got {:?}", self.shape(bias))));
        }
        if stride == 0 {
            return Err(TensorError::dim(OP, "stride must be positive"));
        }
        let (ho, wo) = conv_out_extent(h, w, k, stride, padding)
            .ok_or_else(|| TensorError::dim(OP, format!("{h}x{w} with k={k} s={stride} p={padding} is not integral")))?;
        let cols = im2col(self.data(input), cin, h, w, k, stride, padding, ho, wo);
        let kk = cin * k * k;
        let p = ho * wo;
        let mut out = vec![0.0; cout * p];
        let b = self.data(bias);
        for (o, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(b[o]);
        }
        gemm(cout, kk, p, self.data(weight), false, &cols, false, &mut out, 1.0);
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
        )?;
        self.push(value, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| sigmoid(v)).collect())?;
        self.push(value, Op::Sigmoid { x })
    }

    /// `weight · x + bias` for `weight: [out, in]`, `x: [in]`.
    pub fn linear(&mut self, weight: Var, x: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "linear";
        let (out_dim, in_dim) = match self.shape(weight) {
            &[o, i] => (o, i),
            s => return Err(TensorError::dim(OP, format!("weight must be 2-D, got {s:?}"))),
        };
        if self.shape(x) != [in_dim] {
            return Err(TensorError::dim(OP, format!("input must be [{in_dim}], got {:?}", self.shape(x))));
        }
        if self.shape(bias) != [out_dim] {
            return Err(TensorError::dim(OP, format!("bias must be [{out_dim}], got {:?}", self.shape(bias))));
        }
        let mut out = self.data(bias).to_vec();
        gemm(out_dim, in_dim, 1, self.data(weight), false, self.data(x), false, &mut out, 1.0);
        self.push(Tensor::vector(out), Op::Linear { weight, x, bias })
    }

    /// `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.value(x).chw("global_avg_pool")?;
        let hw = h * w;
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        debug_assert_eq!(out.len(), c);
        self.push(Tensor::vector(out), Op::GlobalAvgPool { x })
    }

    pub fn nearest_upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.value(x).chw("nearest_upsample2x")?;
        let src = self.data(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let srow = &src[(ch * h + y / 2) * w..][..w];
                let drow = &mut out[(ch * h2 + y) * w2..][..w2];
                for (xx, d) in drow.iter_mut().enumerate() {
                    *d = srow[xx / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, h2, w2], out)?, Op::Upsample2x { x })
    }

    pub fn maxpool2x(&mut self, x: Var) -> Result<Var, TensorError> {
        const OP: &str = "maxpool2x";
        let (c, h, w) = self.value(x).chw(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::dim(OP, format!("extents {h}x{w} must be even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = (ch * h + 2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out)?, Op::MaxPool2x { x, argmax })
    }

    /// Per-channel normalization over the spatial extent with [`NORM_EPS`].
    pub fn instance_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.value(x).chw("instance_norm")?;
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        let mut inv_std = Vec::with_capacity(c);
        for (plane, dst) in self.data(x).chunks_exact(hw).zip(out.chunks_exact_mut(hw)) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (d, v) in dst.iter_mut().zip(plane) {
                *d = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(Tensor::new(vec![c, h, w], out)?, Op::InstanceNorm { x, inv_std })
    }

    /// Concatenate along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        const OP: &str = "concat";
        let first = parts.first().ok_or_else(|| TensorError::dim(OP, "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(TensorError::dim(OP, format!("trailing extents {:?} vs {tail:?}", &s[1..])));
            }
            lead += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec() })
    }

    /// Channel concatenation of `[C_i, H, W]` maps.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        for &p in parts {
            self.value(p).chw("concat_channels")?;
        }
        self.concat(parts)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())?;
        self.push(value, Op::Scale { x, factor })
    }

    /// Multiply every element of `x` by the scalar `s[index]`.
    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var, TensorError> {
        let factor = *self
            .data(s)
            .get(index)
            .ok_or_else(|| TensorError::dim("scale_by", format!("index {index} out of range")))?;
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())?;
        self.push(value, Op::ScaleBy { x, s, index })
    }

    /// Slice `index` of the leading axis.
    pub fn take(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index >= shape[0] {
            return Err(TensorError::dim("take", format!("index {index} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(x)[index * inner..(index + 1) * inner].to_vec();
        self.push(Tensor::new(shape[1..].to_vec(), data)?, Op::Take { x, index })
    }

    /// Per-channel 2D DFT normalized by `1/(HW)`. The output stacks amplitude
    /// and phase as `[2, C, H, W]`.
    pub fn fft2(&mut self, x: Var) -> Result<Var, TensorError> {
        const OP: &str = "fft2";
        let (c, h, w) = self.value(x).chw(OP)?;
        if h < 2 || w < 2 {
            return Err(TensorError::dim(OP, format!("extents {h}x{w} must be at least 2")));
        }
        let hw = h * w;
        let norm = 1.0 / hw as f64;
        let mut re = Vec::with_capacity(c * hw);
        let mut im = Vec::with_capacity(c * hw);
        for plane in self.data(x).chunks_exact(hw) {
            for z in real_dft2(plane, h, w) {
                re.push(z.re * norm);
                im.push(z.im * norm);
            }
        }
        let mut out = Vec::with_capacity(2 * c * hw);
        out.extend(re.iter().zip(&im).map(|(r, i)| r.hypot(*i)));
        out.extend(re.iter().zip(&im).map(|(r, i)| i.atan2(*r)));
        self.push(Tensor::new(vec![2, c, h, w], out)?, Op::Fft2 { x, re, im })
    }

    /// Inverse of [`Tape::fft2`] from an amplitude/phase pair. The imaginary
    /// part of the reconstruction is discarded; in checked mode it must be
    /// below [`SPECTRAL_RESIDUE_TOL`].
    pub fn ifft2(&mut self, amplitude: Var, phase: Var) -> Result<Var, TensorError> {
        const OP: &str = "ifft2";
        let (c, h, w) = self.value(amplitude).chw(OP)?;
        if self.shape(phase) != self.shape(amplitude) {
            return Err(TensorError::dim(OP, "amplitude and phase shapes differ"));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(c * hw);
        let mut residue = 0.0f64;
        let mut scale = 1.0f64;
        let mut buf = vec![Complex64::new(0.0, 0.0); hw];
        for (amp, ph) in self.data(amplitude).chunks_exact(hw).zip(self.data(phase).chunks_exact(hw)) {
            for ((b, a), p) in buf.iter_mut().zip(amp).zip(ph) {
                *b = Complex64::from_polar(*a, *p);
            }
            dft2_inplace(&mut buf, h, w, Direction::Inverse);
            for z in &buf {
                residue = residue.max(z.im.abs());
                scale = scale.max(z.re.abs());
                out.push(z.re);
            }
        }
        if self.checked && residue > SPECTRAL_RESIDUE_TOL * scale {
            return Err(TensorError::SpectralConsistency { residue });
        }
        self.push(Tensor::new(vec![c, h, w], out)?, Op::Ifft2 { amplitude, phase })
    }

    /// Mean over the listed spatial positions of a `[C, h, w]` map, giving `[C]`.
    pub fn masked_mean(&mut self, x: Var, indices: Vec<usize>) -> Result<Var, TensorError> {
        const OP: &str = "masked_mean";
        let (c, h, w) = self.value(x).chw(OP)?;
        let hw = h * w;
        if indices.is_empty() {
            return Err(TensorError::dim(OP, "empty support"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= hw) {
            return Err(TensorError::dim(OP, format!("index {bad} outside {h}x{w}")));
        }
        let n = indices.len() as f64;
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(hw)
            .map(|plane| indices.iter().map(|&i| plane[i]).sum::<f64>() / n)
            .collect();
        debug_assert_eq!(out.len(), c);
        self.push(Tensor::vector(out), Op::MaskedMean { x, indices })
    }

    /// Soft Dice loss over foreground classes `1..c` of channel-softmax
    /// probabilities, averaged over those classes.
    pub fn soft_dice(&mut self, logits: Var, labels: &[usize], eps: f64) -> Result<Var, TensorError> {
        const OP: &str = "soft_dice";
        let (c, h, w) = self.value(logits).chw(OP)?;
        let hw = h * w;
        if labels.len() != hw {
            return Err(TensorError::dim(OP, format!("{} labels for {h}x{w} logits", labels.len())));
        }
        if c < 2 {
            return Err(TensorError::dim(OP, "need at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::dim(OP, format!("label {bad} outside {c} classes")));
        }
        let probs = channel_softmax(self.data(logits), c, hw);
        let mut loss = 0.0;
        for k in 1..c {
            let (inter, psum, gsum) = dice_terms(&probs[k * hw..(k + 1) * hw], labels, k);
            loss += 1.0 - (2.0 * inter + eps) / (psum + gsum + eps);
        }
        loss /= (c - 1) as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                logits,
                labels: labels.to_vec(),
                probs,
                eps,
            },
        )
    }

    /// Prototype contrastive loss. The first `positives` rows of `protos`
    /// (`[n, d]`) are positives, the rest negatives; similarity is cosine / `tau`.
    pub fn contrastive(&mut self, anchor: Var, protos: Var, positives: usize, tau: f64) -> Result<Var, TensorError> {
        const OP: &str = "contrastive";
        let d = match self.shape(anchor) {
            &[d] => d,
            s => return Err(TensorError::dim(OP, format!("anchor must be 1-D, got {s:?}"))),
        };
        let n = match self.shape(protos) {
            &[n, pd] if pd == d => n,
            s => return Err(TensorError::dim(OP, format!("prototypes must be [n,{d}], got {s:?}"))),
        };
        if positives == 0 || positives > n {
            return Err(TensorError::Contract(format!("{positives} positives among {n} prototypes")));
        }
        if !(tau > 0.0) {
            return Err(TensorError::Contract(format!("temperature must be positive, got {tau}")));
        }
        let geo = ContrastGeometry::new(self.data(anchor), self.data(protos), d, tau);
        let loss = geo.loss(positives);
        self.push(
            Tensor::scalar(loss),
            Op::Contrastive {
                anchor,
                protos,
                positives,
                tau,
            },
        )
    }

    /// `Σ (x - target)²` against a constant target.
    pub fn sq_dist(&mut self, x: Var, target: &[f64]) -> Result<Var, TensorError> {
        if self.value(x).len() != target.len() {
            return Err(TensorError::dim("sq_dist", format!("{} vs {}", self.value(x).len(), target.len())));
        }
        let v: f64 = self.data(x).iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
        self.push(
            Tensor::scalar(v),
            Op::SqDist {
                x,
                target: target.to_vec(),
            },
        )
    }

    /// `Σ weights ⊙ x` against constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var, TensorError> {
        if self.value(x).len() != weights.len() {
            return Err(TensorError::dim("dot_const", format!("{} vs {}", self.value(x).len(), weights.len())));
        }
        let v: f64 = self.data(x).iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(
            Tensor::scalar(v),
            Op::DotConst {
                x,
                weights: weights.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.data(x).iter().sum();
        self.push(Tensor::scalar(v), Op::Sum { x })
    }

    // ----------------------------------------------------------- backward

    /// Propagate `∂loss/∂·` through the tape and add parameter gradients
    /// into `store`. May be called once per recording; call [`Tape::reset`]
    /// before recording again.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::Contract("backward called twice without reset".into()));
        }
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g);
            if let Op::Param { id } = &self.nodes[i].op {
                store.accumulate_grad(id, &g)?;
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily detach the op so inputs can be read while grads mutate.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols,
            } => {
                let (cin, h, w) = self.value(*input).chw("conv2d").expect("checked at forward");
                let s = self.shape(*weight).to_vec();
                let (cout, k) = (s[0], s[2]);
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let p = ho * wo;
                let kk = cin * k * k;
                if self.wants(*weight) {
                    let mut gw = vec![0.0; cout * kk];
                    gemm(cout, p, kk, g, false, cols, true, &mut gw, 0.0);
                    self.accumulate(*weight, |acc| add_into(acc, &gw));
                }
                if self.wants(*bias) {
                    let gb: Vec<f64> = g.chunks_exact(p).map(|r| r.iter().sum()).collect();
                    self.accumulate(*bias, |acc| add_into(acc, &gb));
                }
                if self.wants(*input) {
                    let mut gcols = vec![0.0; kk * p];
                    gemm(kk, cout, p, self.data(*weight), true, g, false, &mut gcols, 0.0);
                    let (stride, padding) = (*stride, *padding);
                    self.accumulate(*input, |acc| col2im_add(&gcols, acc, cin, h, w, k, stride, padding, ho, wo));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let gx: Vec<f64> = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| if v > 0.0 { gg } else { slope * gg })
                    .collect();
                self.accumulate(*x, |acc| add_into(acc, &gx));
            }
            Op::Sigmoid { x } => {
                let gx: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gg)| gg * y * (1.0 - y))
                    .collect();
                self.accumulate(*x, |acc| add_into(acc, &gx));
            }
            Op::Linear { weight, x, bias } => {
                let (out_dim, in_dim) = (self.shape(*weight)[0], self.shape(*weight)[1]);
                if self.wants(*weight) {
                    let mut gw = vec![0.0; out_dim * in_dim];
                    gemm(out_dim, 1, in_dim, g, false, self.data(*x), false, &mut gw, 0.0);
                    self.accumulate(*weight, |acc| add_into(acc, &gw));
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; in_dim];
                    gemm(in_dim, out_dim, 1, self.data(*weight), true, g, false, &mut gx, 0.0);
                    self.accumulate(*x, |acc| add_into(acc, &gx));
                }
                self.accumulate(*bias, |acc| add_into(acc, g));
            }
            Op::GlobalAvgPool { x } => {
                let (_, h, w) = self.value(*x).chw("global_avg_pool").expect("checked at forward");
                let hw = h * w;
                self.accumulate(*x, |acc| {
                    for (plane, gg) in acc.chunks_exact_mut(hw).zip(g) {
                        let d = gg / hw as f64;
                        plane.iter_mut().for_each(|a| *a += d);
                    }
                });
            }
            Op::Upsample2x { x } => {
                let (c, h, w) = self.value(*x).chw("nearest_upsample2x").expect("checked at forward");
                let (h2, w2) = (2 * h, 2 * w);
                self.accumulate(*x, |acc| {
                    for ch in 0..c {
                        for y in 0..h2 {
                            let grow = &g[(ch * h2 + y) * w2..][..w2];
                            let arow = &mut acc[(ch * h + y / 2) * w..][..w];
                            for (xx, gg) in grow.iter().enumerate() {
                                arow[xx / 2] += gg;
                            }
                        }
                    }
                });
            }
            Op::MaxPool2x { x, argmax } => {
                self.accumulate(*x, |acc| {
                    for (&idx, gg) in argmax.iter().zip(g) {
                        acc[idx] += gg;
                    }
                });
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, h, w) = self.value(*x).chw("instance_norm").expect("checked at forward");
                let hw = h * w;
                let y = self.nodes[i].value.data();
                let mut gx = vec![0.0; y.len()];
                for (ch, inv) in inv_std.iter().enumerate() {
                    let ys = &y[ch * hw..][..hw];
                    let gs = &g[ch * hw..][..hw];
                    let mean_g = gs.iter().sum::<f64>() / hw as f64;
                    let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for ((dst, gg), yy) in gx[ch * hw..][..hw].iter_mut().zip(gs).zip(ys) {
                        *dst = inv * (gg - mean_g - yy * mean_gy);
                    }
                }
                self.accumulate(*x, |acc| add_into(acc, &gx));
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let slice = &g[offset..offset + n];
                    self.accumulate(p, |acc| add_into(acc, slice));
                    offset += n;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, |acc| add_into(acc, g));
                self.accumulate(*b, |acc| add_into(acc, g));
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, |acc| add_into(acc, g));
                self.accumulate(*b, |acc| acc.iter_mut().zip(g).for_each(|(x, gg)| *x -= gg));
            }
            Op::Mul { a, b } => {
                let ga: Vec<f64> = self.data(*b).iter().zip(g).map(|(v, gg)| v * gg).collect();
                let gb: Vec<f64> = self.data(*a).iter().zip(g).map(|(v, gg)| v * gg).collect();
                self.accumulate(*a, |acc| add_into(acc, &ga));
                self.accumulate(*b, |acc| add_into(acc, &gb));
            }
            Op::Scale { x, factor } => {
                self.accumulate(*x, |acc| acc.iter_mut().zip(g).for_each(|(a, gg)| *a += factor * gg));
            }
            Op::ScaleBy { x, s, index } => {
                let factor = self.data(*s)[*index];
                let gs: f64 = self.data(*x).iter().zip(g).map(|(v, gg)| v * gg).sum();
                self.accumulate(*x, |acc| acc.iter_mut().zip(g).for_each(|(a, gg)| *a += factor * gg));
                self.accumulate(*s, |acc| acc[*index] += gs);
            }
            Op::Take { x, index } => {
                let n = g.len();
                self.accumulate(*x, |acc| add_into(&mut acc[index * n..(index + 1) * n], g));
            }
            Op::Fft2 { x, re, im } => {
                let (_, h, w) = self.value(*x).chw("fft2").expect("checked at forward");
                let hw = h * w;
                let n = re.len();
                let (g_amp, g_phase) = g.split_at(n);
                let norm = 1.0 / hw as f64;
                let mut gx = Vec::with_capacity(n);
                let mut buf = vec![Complex64::new(0.0, 0.0); hw];
                for start in (0..n).step_by(hw) {
                    for (j, b) in buf.iter_mut().enumerate() {
                        let k = start + j;
                        let (r, im_) = (re[k], im[k]);
                        let a2 = r * r + im_ * im_;
                        *b = if a2 > 0.0 {
                            let a = a2.sqrt();
                            Complex64::new(
                                g_amp[k] * r / a - g_phase[k] * im_ / a2,
                                g_amp[k] * im_ / a + g_phase[k] * r / a2,
                            )
                        } else {
                            Complex64::new(0.0, 0.0)
                        };
                    }
                    dft2_inplace(&mut buf, h, w, Direction::Inverse);
                    gx.extend(buf.iter().map(|z| z.re * norm));
                }
                self.accumulate(*x, |acc| add_into(acc, &gx));
            }
            Op::Ifft2 { amplitude, phase } => {
                let (_, h, w) = self.value(*amplitude).chw("ifft2").expect("checked at forward");
                let hw = h * w;
                let n = g.len();
                let mut g_amp = Vec::with_capacity(n);
                let mut g_phase = Vec::with_capacity(n);
                for start in (0..n).step_by(hw) {
                    let spec = real_dft2(&g[start..start + hw], h, w);
                    for (j, z) in spec.iter().enumerate() {
                        let a = self.data(*amplitude)[start + j];
                        let (sin, cos) = self.data(*phase)[start + j].sin_cos();
                        g_amp.push(z.re * cos + z.im * sin);
                        g_phase.push(a * (z.im * cos - z.re * sin));
                    }
                }
                self.accumulate(*amplitude, |acc| add_into(acc, &g_amp));
                self.accumulate(*phase, |acc| add_into(acc, &g_phase));
            }
            Op::MaskedMean { x, indices } => {
                let (_, h, w) = self.value(*x).chw("masked_mean").expect("checked at forward");
                let hw = h * w;
                let n = indices.len() as f64;
                self.accumulate(*x, |acc| {
                    for (plane, gg) in acc.chunks_exact_mut(hw).zip(g) {
                        let d = gg / n;
                        for &idx in indices {
                            plane[idx] += d;
                        }
                    }
                });
            }
            Op::SoftDice {
                logits,
                labels,
                probs,
                eps,
            } => {
                let c = self.shape(*logits)[0];
                let hw = labels.len();
                let scale = g[0] / (c - 1) as f64;
                let mut gp = vec![0.0; c * hw];
                for k in 1..c {
                    let pk = &probs[k * hw..(k + 1) * hw];
                    let (inter, psum, gsum) = dice_terms(pk, labels, k);
                    let den = psum + gsum + eps;
                    let num = 2.0 * inter + eps;
                    for (j, &l) in labels.iter().enumerate() {
                        let gk = if l == k { 1.0 } else { 0.0 };
                        gp[k * hw + j] = -scale * (2.0 * gk / den - num / (den * den));
                    }
                }
                let mut gl = vec![0.0; c * hw];
                for j in 0..hw {
                    let dot: f64 = (0..c).map(|m| probs[m * hw + j] * gp[m * hw + j]).sum();
                    for m in 0..c {
                        gl[m * hw + j] = probs[m * hw + j] * (gp[m * hw + j] - dot);
                    }
                }
                self.accumulate(*logits, |acc| add_into(acc, &gl));
            }
            Op::Contrastive {
                anchor,
                protos,
                positives,
                tau,
            } => {
                let d = self.value(*anchor).len();
                let geo = ContrastGeometry::new(self.data(*anchor), self.data(*protos), d, *tau);
                let (ga, gq) = geo.grads(*positives, g[0]);
                self.accumulate(*anchor, |acc| add_into(acc, &ga));
                self.accumulate(*protos, |acc| add_into(acc, &gq));
            }
            Op::SqDist { x, target } => {
                let gx: Vec<f64> = self
                    .data(*x)
                    .iter()
                    .zip(target)
                    .map(|(a, b)| 2.0 * (a - b) * g[0])
                    .collect();
                self.accumulate(*x, |acc| add_into(acc, &gx));
            }
            Op::DotConst { x, weights } => {
                self.accumulate(*x, |acc| acc.iter_mut().zip(weights).for_each(|(a, w)| *a += w * g[0]));
            }
            Op::Sum { x } => {
                self.accumulate(*x, |acc| acc.iter_mut().for_each(|a| *a += g[0]));
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Output extents of a convolution, or `None` when not integral.
pub fn conv_out_extent(h: usize, w: usize, k: usize, stride: usize, padding: usize) -> Option<(usize, usize)> {
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < k || wp < k || (hp - k) % stride != 0 || (wp - k) % stride != 0 {
        return None;
    }
    Some(((hp - k) / stride + 1, (wp - k) / stride + 1))
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut cols = vec![0.0; cin * k * k * p];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * wo + ox] = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    dst: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let p = ho * wo;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Softmax across the leading (class) axis of a `[c, hw]` buffer.
pub(crate) fn channel_softmax(logits: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut probs = vec![0.0; c * hw];
    for j in 0..hw {
        let m = (0..c).map(|k| logits[k * hw + j]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (logits[k * hw + j] - m).exp();
            probs[k * hw + j] = e;
            z += e;
        }
        for k in 0..c {
            probs[k * hw + j] /= z;
        }
    }
    probs
}

/// `(Σ p·g, Σ p, Σ g)` for class `k`.
fn dice_terms(p: &[f64], labels: &[usize], k: usize) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (pv, &l) in p.iter().zip(labels) {
        psum += pv;
        if l == k {
            inter += pv;
            gsum += 1.0;
        }
    }
    (inter, psum, gsum)
}

const NORM_FLOOR: f64 = 1e-12;

/// Cosine similarities between an anchor and a prototype matrix.
struct ContrastGeometry<'a> {
    anchor: &'a [f64],
    protos: &'a [f64],
    d: usize,
    tau: f64,
    anchor_norm: f64,
    proto_norms: Vec<f64>,
    cos: Vec<f64>,
}

impl<'a> ContrastGeometry<'a> {
    fn new(anchor: &'a [f64], protos: &'a [f64], d: usize, tau: f64) -> Self {
        let anchor_norm = anchor.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        let proto_norms: Vec<f64> = protos
            .chunks_exact(d)
            .map(|q| q.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR))
            .collect();
        let cos = protos
            .chunks_exact(d)
            .zip(&proto_norms)
            .map(|(q, qn)| q.iter().zip(anchor).map(|(a, b)| a * b).sum::<f64>() / (qn * anchor_norm))
            .collect();
        ContrastGeometry {
            anchor,
            protos,
            d,
            tau,
            anchor_norm,
            proto_norms,
            cos,
        }
    }

    /// Max-shifted `(log Σ_pos e^s, log Σ_all e^s, softmax_all, softmax_pos)`.
    fn softmaxes(&self, positives: usize) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let s: Vec<f64> = self.cos.iter().map(|c| c / self.tau).collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z_pos: f64 = e[..positives].iter().sum();
        let z_all: f64 = e.iter().sum();
        let p_all = e.iter().map(|v| v / z_all).collect();
        let p_pos = e[..positives].iter().map(|v| v / z_pos).collect();
        (z_pos.ln() + m, z_all.ln() + m, p_all, p_pos)
    }

    fn loss(&self, positives: usize) -> f64 {
        let (lp, la, _, _) = self.softmaxes(positives);
        la - lp
    }

    fn grads(&self, positives: usize, upstream: f64) -> (Vec<f64>, Vec<f64>) {
        let (_, _, p_all, p_pos) = self.softmaxes(positives);
        let mut ga = vec![0.0; self.d];
        let mut gq = vec![0.0; self.protos.len()];
        let an = self.anchor_norm;
        for (j, q) in self.protos.chunks_exact(self.d).enumerate() {
            let pos = if j < positives { p_pos[j] } else { 0.0 };
            let gs = upstream * (p_all[j] - pos) / self.tau;
            if gs == 0.0 {
                continue;
            }
            let qn = self.proto_norms[j];
            let c = self.cos[j];
            for t in 0..self.d {
                ga[t] += gs * (q[t] / (an * qn) - c * self.anchor[t] / (an * an));
                gq[j * self.d + t] = gs * (self.anchor[t] / (an * qn) - c * q[t] / (qn * qn));
            }
        }
        (ga, gq)
    }
}
