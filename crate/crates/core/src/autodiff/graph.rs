use std::collections::HashMap;

use super::kernels::{self, ConvDims};
use super::{AutodiffError, BatchNormParams, ParamId, ParamStore, Tensor};

const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Relu6,
    HSwish,
    Sigmoid,
    Log,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic function.
pub fn sigmoid_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

pub fn h_swish(x: f64) -> f64 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Relu6 => "relu6",
            Unary::HSwish => "h_swish",
            Unary::Sigmoid => "sigmoid",
            Unary::Log => "log",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Relu6 => x.clamp(0.0, 6.0),
            Unary::HSwish => h_swish(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Log => x.ln(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => f64::from(u8::from(x > 0.0)),
            Unary::Relu6 => f64::from(u8::from(x > 0.0 && x < 6.0)),
            Unary::HSwish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Log => 1.0 / x,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize },
    DwConv2d { x: Var, w: Var, stride: usize },
    Pointwise { x: Var, w: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Unary { x: Var, kind: Unary },
    GlobalAvgPool { x: Var },
    ChannelMul { x: Var, s: Var },
    ChannelScale { x: Var, g: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddN { xs: Vec<Var> },
    Scale { x: Var, s: Var },
    MulConst { x: Var, c: Tensor },
    Affine { x: Var, a: f64 },
    SquaredNorm { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    HardIndicator { x: Var, t: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, training: bool },
    Concat { xs: Vec<Var> },
    SliceChannels { x: Var, start: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub params: BatchNormParams,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A single-use computation graph. Values are computed eagerly as ops are
/// added; [`Graph::backward`] walks the nodes in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_of: Vec<Option<ParamId>>,
    param_vars: HashMap<ParamId, Var>,
    batch_stats: Vec<BatchStats>,
}

/// Gradients of one scalar with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when `v` does not influence the output.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        self.param_of.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.push("constant", value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var, AutodiffError> {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, AutodiffError> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Leaf)?;
        self.param_of[v.0] = Some(id);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running_stats(&self, store: &mut ParamStore, momentum: f64) {
        for s in &self.batch_stats {
            let n = s.mean.len();
            for (i, (&m, &v)) in s.mean.iter().zip(&s.var).enumerate().take(n) {
                let rm = &mut store.value_mut(s.params.running_mean).data_mut()[i];
                *rm = (1.0 - momentum) * *rm + momentum * m;
                let rv = &mut store.value_mut(s.params.running_var).data_mut()[i];
                *rv = (1.0 - momentum) * *rv + momentum * v;
            }
        }
    }

    fn nchw(&self, op: &'static str, v: Var) -> Result<[usize; 4], AutodiffError> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(mismatch(op, format!("expected NCHW input, got {s:?}"))),
        }
    }

    fn scalar_of(&self, op: &'static str, v: Var) -> Result<f64, AutodiffError> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(mismatch(op, format!("expected a scalar, got shape {:?}", t.shape())));
        }
        Ok(t.data()[0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Full 2-D convolution with "same" padding; `w` is `[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, AutodiffError> {
        let [n, c, h, wd] = self.nchw("conv2d", x)?;
        let (co, k) = match *self.shape(w) {
            [co, ci, k, k2] if ci == c && k == k2 && k % 2 == 1 => (co, k),
            ref s => return Err(mismatch("conv2d", format!("weight {s:?} for {c} input channels"))),
        };
        let d = ConvDims::new(n, c, co, h, wd, k, stride.max(1));
        let mut out = vec![0.0; n * co * d.ho * d.wo];
        kernels::conv2d_forward(&d, self.value(x).data(), self.value(w).data(), &mut out);
        let t = Tensor::new(vec![n, co, d.ho, d.wo], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, stride: d.stride })
    }

    /// Per-channel convolution with "same" padding; `w` is `[c, k, k]`.
    pub fn dwconv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, AutodiffError> {
        let [n, c, h, wd] = self.nchw("dwconv2d", x)?;
        let k = match *self.shape(w) {
            [cw, k, k2] if cw == c && k == k2 && k % 2 == 1 => k,
            ref s => return Err(mismatch("dwconv2d", format!("weight {s:?} for {c} channels"))),
        };
        let d = ConvDims::new(n, c, c, h, wd, k, stride.max(1));
        let mut out = vec![0.0; n * c * d.ho * d.wo];
        kernels::dwconv_forward(&d, self.value(x).data(), self.value(w).data(), &mut out);
        let t = Tensor::new(vec![n, c, d.ho, d.wo], out)?;
        self.push("dwconv2d", t, Op::DwConv2d { x, w, stride: d.stride })
    }

    /// 1×1 convolution; `w` is `[c_out, c_in]`.
    pub fn pointwise(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        let [n, c, h, wd] = self.nchw("pointwise", x)?;
        let co = match *self.shape(w) {
            [co, ci] if ci == c => co,
            ref s => return Err(mismatch("pointwise", format!("weight {s:?} for {c} input channels"))),
        };
        let mut out = vec![0.0; n * co * h * wd];
        kernels::pointwise_forward(n, c, co, h * wd, self.value(x).data(), self.value(w).data(), &mut out);
        let t = Tensor::new(vec![n, co, h, wd], out)?;
        self.push("pointwise", t, Op::Pointwise { x, w })
    }

    /// Fully connected layer: `x` `[n, c_in]`, `w` `[c_out, c_in]`, `b` `[c_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (n, ci) = match *self.shape(x) {
            [n, ci] => (n, ci),
            ref s => return Err(mismatch("linear", format!("expected [n, c] input, got {s:?}"))),
        };
        let co = match *self.shape(w) {
            [co, c] if c == ci => co,
            ref s => return Err(mismatch("linear", format!("weight {s:?} for {ci} inputs"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(mismatch("linear", format!("bias {:?} for {co} outputs", self.shape(b))));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * co];
        for r in 0..n {
            for o in 0..co {
                let mut acc = b.map(|b| self.value(b).data()[o]).unwrap_or(0.0);
                for i in 0..ci {
                    acc += wv[o * ci + i] * xv[r * ci + i];
                }
                out[r * co + o] = acc;
            }
        }
        let t = Tensor::new(vec![n, co], out)?;
        self.push("linear", t, Op::Linear { x, w, b })
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var, AutodiffError> {
        let t = self.value(x).map(|v| kind.apply(v));
        self.push(kind.name(), t, Op::Unary { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Unary::Relu)
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Unary::Relu6)
    }

    pub fn h_swish(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Unary::HSwish)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu_scalar(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.scalar_of("relu_scalar", x)?;
        self.unary(x, Unary::Relu)
    }

    /// Natural logarithm of a scalar.
    pub fn log_scalar(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.scalar_of("log_scalar", x)?;
        self.unary(x, Unary::Log)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.nchw("global_avg_pool", x)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..n * c).map(|i| xv[i * hw..][..hw].iter().sum::<f64>() / hw as f64).collect();
        let t = Tensor::new(vec![n, c], out)?;
        self.push("global_avg_pool", t, Op::GlobalAvgPool { x })
    }

    /// `x[n, c, :, :] * s[n, c]`.
    pub fn channelwise_mul(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.nchw("channelwise_mul", x)?;
        if self.shape(s) != [n, c] {
            return Err(mismatch("channelwise_mul", format!("scale {:?} for [{n}, {c}]", self.shape(s))));
        }
        let hw = h * w;
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= sv[i]);
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        self.push("channelwise_mul", t, Op::ChannelMul { x, s })
    }

    /// `x[n, c, :, :] * g[c]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.nchw("channel_scale", x)?;
        if self.shape(g) != [c] {
            return Err(mismatch("channel_scale", format!("gate {:?} for {c} channels", self.shape(g))));
        }
        let hw = h * w;
        let gv = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let gc = gv[i % c];
            chunk.iter_mut().for_each(|v| *v *= gc);
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        self.push("channel_scale", t, Op::ChannelScale { x, g })
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutodiffError> {
        self.same_shape(op, a, b)?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub { a, b })
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul { a, b })
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        let first = *xs.first().ok_or_else(|| mismatch("add_n", "no inputs".into()))?;
        let mut acc = self.value(first).clone();
        for &x in &xs[1..] {
            self.same_shape("add_n", first, x)?;
            acc.add_assign(self.value(x));
        }
        self.push("add_n", acc, Op::AddN { xs: xs.to_vec() })
    }

    /// `s * x` for a scalar node `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        let sv = self.scalar_of("scale", s)?;
        let t = self.value(x).map(|v| v * sv);
        self.push("scale", t, Op::Scale { x, s })
    }

    /// Elementwise product with a constant tensor (e.g. a mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var, AutodiffError> {
        if self.shape(x) != c.shape() {
            return Err(mismatch("mul_const", format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(c.shape().to_vec(), data)?;
        self.push("mul_const", t, Op::MulConst { x, c })
    }

    /// `a * x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var, AutodiffError> {
        let t = self.value(x).map(|v| a * v + b);
        self.push("affine", t, Op::Affine { x, a })
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn squared_norm(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = Tensor::scalar(self.value(x).squared_norm());
        self.push("squared_norm", t, Op::SquaredNorm { x })
    }

    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let (n, k) = match *self.shape(logits) {
            [n, k] if n == labels.len() && n > 0 => (n, k),
            ref s => return Err(mismatch("softmax_cross_entropy", format!("logits {s:?}, {} labels", labels.len()))),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(mismatch("softmax_cross_entropy", format!("label {bad} out of {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * k..][..k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (p, v) in probs[r * k..][..k].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[r]];
        }
        let probs = Tensor::new(vec![n, k], probs)?;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Forward `1(x > t)`; backward as if it were `sigmoid(x - t)`.
    pub fn hard_indicator_st(&mut self, x: Var, t: Var) -> Result<Var, AutodiffError> {
        let xv = self.scalar_of("hard_indicator_st", x)?;
        let tv = self.scalar_of("hard_indicator_st", t)?;
        let out = if xv > tv { 1.0 } else { 0.0 };
        self.push("hard_indicator_st", Tensor::scalar(out), Op::HardIndicator { x, t })
    }

    /// Per-channel batch norm over `[n, c, ...]`. Training mode normalizes
    /// with batch statistics and records them; eval mode uses running stats.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        bn: &BatchNormParams,
        x: Var,
        training: bool,
    ) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(mismatch("batch_norm", format!("input {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if store.value(bn.gamma).shape() != [c] {
            return Err(mismatch("batch_norm", format!("{c} channels vs gamma {:?}", store.value(bn.gamma).shape())));
        }
        let gamma = self.param(store, bn.gamma)?;
        let beta = self.param(store, bn.beta)?;
        let xv = self.value(x).data();
        let count = (n * inner) as f64;
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    mean[ch] += xv[(b * c + ch) * inner..][..inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for b in 0..n {
                for ch in 0..c {
                    let m = mean[ch];
                    var[ch] += xv[(b * c + ch) * inner..][..inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            (mean, var)
        } else {
            (store.value(bn.running_mean).data().to_vec(), store.value(bn.running_var).data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        if training {
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            self.batch_stats.push(BatchStats {
                params: *bn,
                mean,
                var: var.iter().map(|v| v * unbiased).collect(),
            });
        }
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let t = Tensor::new(shape, out)?;
        self.push("batch_norm", t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training })
    }

    /// Concatenates NCHW tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        let first = *xs.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let [n, _, h, w] = self.nchw("concat", first)?;
        let mut total = 0;
        for &x in xs {
            let [n2, c, h2, w2] = self.nchw("concat", x)?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(mismatch("concat", format!("{:?} vs {:?}", self.shape(first), self.shape(x))));
            }
            total += c;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.value(x).data()[b * c * hw..][..c * hw]);
            }
        }
        let t = Tensor::new(vec![n, total, h, w], out)?;
        self.push("concat", t, Op::Concat { xs: xs.to_vec() })
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.nchw("slice_channels", x)?;
        if start + len > c || len == 0 {
            return Err(mismatch("slice_channels", format!("{start}..{} of {c}", start + len)));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&xv[(b * c + start) * hw..][..len * hw]);
        }
        let t = Tensor::new(vec![n, len, h, w], out)?;
        self.push("slice_channels", t, Op::SliceChannels { x, start })
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        if self.value(output).len() != 1 {
            return Err(mismatch("backward", format!("output shape {:?} is not scalar", self.shape(output))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, p) in self.param_of.iter().enumerate() {
            if let (Some(id), Some(g)) = (p, &grads.grads[i]) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, stride } => {
                let [n, c, h, wd] = [val(*x).shape()[0], val(*x).shape()[1], val(*x).shape()[2], val(*x).shape()[3]];
                let ws = val(*w).shape();
                let d = ConvDims::new(n, c, ws[0], h, wd, ws[2], *stride);
                let mut gx = Tensor::zeros(val(*x).shape());
                let mut gw = Tensor::zeros(ws);
                kernels::conv2d_backward(&d, val(*x).data(), val(*w).data(), gd, gx.data_mut(), gw.data_mut());
                send(*x, gx);
                send(*w, gw);
            }
            Op::DwConv2d { x, w, stride } => {
                let xs = val(*x).shape();
                let d = ConvDims::new(xs[0], xs[1], xs[1], xs[2], xs[3], val(*w).shape()[1], *stride);
                let mut gx = Tensor::zeros(xs);
                let mut gw = Tensor::zeros(val(*w).shape());
                kernels::dwconv_backward(&d, val(*x).data(), val(*w).data(), gd, gx.data_mut(), gw.data_mut());
                send(*x, gx);
                send(*w, gw);
            }
            Op::Pointwise { x, w } => {
                let xs = val(*x).shape();
                let co = val(*w).shape()[0];
                let mut gx = Tensor::zeros(xs);
                let mut gw = Tensor::zeros(val(*w).shape());
                kernels::pointwise_backward(
                    xs[0],
                    xs[1],
                    co,
                    xs[2] * xs[3],
                    val(*x).data(),
                    val(*w).data(),
                    gd,
                    gx.data_mut(),
                    gw.data_mut(),
                );
                send(*x, gx);
                send(*w, gw);
            }
            Op::Linear { x, w, b } => {
                let (n, ci) = (val(*x).shape()[0], val(*x).shape()[1]);
                let co = val(*w).shape()[0];
                let (xv, wv) = (val(*x).data(), val(*w).data());
                let mut gx = Tensor::zeros(&[n, ci]);
                let mut gw = Tensor::zeros(&[co, ci]);
                let mut gb = Tensor::zeros(&[co]);
                for r in 0..n {
                    for o in 0..co {
                        let go = gd[r * co + o];
                        gb.data_mut()[o] += go;
                        for k in 0..ci {
                            gx.data_mut()[r * ci + k] += go * wv[o * ci + k];
                            gw.data_mut()[o * ci + k] += go * xv[r * ci + k];
                        }
                    }
                }
                send(*x, gx);
                send(*w, gw);
                if let Some(b) = b {
                    send(*b, gb);
                }
            }
            Op::Unary { x, kind } => {
                let xv = val(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(gd)
                    .map(|((&a, &y), &go)| go * kind.derivative(a, y))
                    .collect();
                send(*x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::GlobalAvgPool { x } => {
                let xs = val(*x).shape();
                let hw = xs[2] * xs[3];
                let mut gx = Tensor::zeros(xs);
                for (i, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = gd[i] / hw as f64);
                }
                send(*x, gx);
            }
            Op::ChannelMul { x, s } => {
                let xs = val(*x).shape();
                let hw = xs[2] * xs[3];
                let (xv, sv) = (val(*x).data(), val(*s).data());
                let mut gx = Tensor::zeros(xs);
                let mut gs = Tensor::zeros(val(*s).shape());
                for (i, (gxc, (xc, gc))) in
                    gx.data_mut().chunks_mut(hw).zip(xv.chunks(hw).zip(gd.chunks(hw))).enumerate()
                {
                    let mut acc = 0.0;
                    for ((gxv, xvv), go) in gxc.iter_mut().zip(xc).zip(gc) {
                        *gxv = go * sv[i];
                        acc += go * xvv;
                    }
                    gs.data_mut()[i] = acc;
                }
                send(*x, gx);
                send(*s, gs);
            }
            Op::ChannelScale { x, g: gate } => {
                let xs = val(*x).shape();
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                let (xv, gv) = (val(*x).data(), val(*gate).data());
                let mut gx = Tensor::zeros(xs);
                let mut gg = Tensor::zeros(&[c]);
                for (i, (gxc, (xc, gc))) in
                    gx.data_mut().chunks_mut(hw).zip(xv.chunks(hw).zip(gd.chunks(hw))).enumerate()
                {
                    let ch = i % c;
                    let mut acc = 0.0;
                    for ((gxv, xvv), go) in gxc.iter_mut().zip(xc).zip(gc) {
                        *gxv = go * gv[ch];
                        acc += go * xvv;
                    }
                    gg.data_mut()[ch] += acc;
                }
                send(*x, gx);
                send(*gate, gg);
            }
            Op::Add { a, b } => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub { a, b } => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let ga = gd.iter().zip(bv.data()).map(|(go, y)| go * y).collect();
                let gb = gd.iter().zip(av.data()).map(|(go, x)| go * x).collect();
                send(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                send(*b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
            Op::AddN { xs } => {
                for &x in xs {
                    send(x, g.clone());
                }
            }
            Op::Scale { x, s } => {
                let sv = val(*s).data()[0];
                let gs: f64 = gd.iter().zip(val(*x).data()).map(|(go, v)| go * v).sum();
                send(*x, g.map(|v| v * sv));
                send(*s, Tensor::new(val(*s).shape().to_vec(), vec![gs]).unwrap());
            }
            Op::MulConst { x, c } => {
                let data = gd.iter().zip(c.data()).map(|(go, m)| go * m).collect();
                send(*x, Tensor::new(c.shape().to_vec(), data).unwrap());
            }
            Op::Affine { x, a } => send(*x, g.map(|v| v * a)),
            Op::SquaredNorm { x } => {
                let go = gd[0];
                send(*x, val(*x).map(|v| 2.0 * v * go));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.shape()[1];
                let scale = gd[0] / n as f64;
                let mut gl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gl.data_mut()[r * k + l] -= 1.0;
                }
                gl.data_mut().iter_mut().for_each(|v| *v *= scale);
                send(*logits, gl);
            }
            Op::HardIndicator { x, t } => {
                let z = val(*x).data()[0] - val(*t).data()[0];
                let d = sigmoid_prime(z) * gd[0];
                send(*x, Tensor::new(val(*x).shape().to_vec(), vec![d]).unwrap());
                send(*t, Tensor::new(val(*t).shape().to_vec(), vec![-d]).unwrap());
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let shape = val(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gv = val(*gamma).data();
                let xh = xhat.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xh[i];
                        }
                    }
                }
                let m = (n * inner) as f64;
                let mut gx = Tensor::zeros(shape);
                let gxd = gx.data_mut();
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        let k = gv[ch] * inv_std[ch];
                        for i in base..base + inner {
                            gxd[i] = if *training {
                                k * (gd[i] - sum_g[ch] / m - xh[i] * sum_gx[ch] / m)
                            } else {
                                k * gd[i]
                            };
                        }
                    }
                }
                send(*x, gx);
                send(*gamma, Tensor::new(vec![c], sum_gx).unwrap());
                send(*beta, Tensor::new(vec![c], sum_g).unwrap());
            }
            Op::Concat { xs } => {
                let s = node.value.shape();
                let (n, total, hw) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for &x in xs {
                    let c = val(x).shape()[1];
                    let mut gx = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        gx.extend_from_slice(&gd[(b * total + offset) * hw..][..c * hw]);
                    }
                    send(x, Tensor::new(val(x).shape().to_vec(), gx).unwrap());
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = val(*x).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let len = node.value.shape()[1];
                let mut gx = Tensor::zeros(xs);
                for b in 0..n {
                    gx.data_mut()[(b * c + start) * hw..][..len * hw].copy_from_slice(&gd[b * len * hw..][..len * hw]);
                }
                send(*x, gx);
            }
        }
    }
}
