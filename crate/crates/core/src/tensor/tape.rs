use super::ops::{self, AttnDims, ConvDims, OpKind};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean `queries × keys` matrix; `true` lets the query attend to the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != queries * keys {
            return Err(shape_err!(
                "attention mask of {} entries for {queries}x{keys}",
                allowed.len()
            ));
        }
        for q in 0..queries {
            if !allowed[q * keys..(q + 1) * keys].iter().any(|&a| a) {
                return Err(Error::InvalidArgument(format!(
                    "attention mask row {q} excludes every key"
                )));
            }
        }
        Ok(AttentionMask { queries, keys, allowed })
    }

    pub fn full(tokens: usize) -> Self {
        AttentionMask {
            queries: tokens,
            keys: tokens,
            allowed: vec![true; tokens * tokens],
        }
    }

    /// Every query may attend exactly to the present keys.
    pub fn from_key_presence(present: &[bool]) -> Result<Self> {
        let n = present.len();
        let allowed = (0..n).flat_map(|_| present.iter().copied()).collect();
        Self::new(n, n, allowed)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Gelu {
        x: Var,
        cdf: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Transpose(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        mask: Option<Vec<bool>>,
        probs: Vec<F>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<F>,
    },
    StackTokens {
        cls: Var,
        feats: Vec<Var>,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Affine { .. } => OpKind::Affine,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Attention { .. } => OpKind::Attention,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxCrossEntropy,
            Op::StackTokens { .. } => OpKind::StackTokens,
            Op::SelectToken { .. } => OpKind::SelectToken,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
        }
    }
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse creation order is a
/// valid topological order for the backward sweep. A tape is confined to one
/// thread; independent tapes may run concurrently.
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    grad_enabled: bool,
    fault: Option<OpKind>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            fault: None,
        }
    }

    /// A tape that never tracks gradients; intermediates may be released early.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Test hook: corrupts the backward pass of one primitive kind.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a tensor; it is differentiated iff it requests gradients.
    pub fn leaf(&mut self, tensor: &Tensor<F>) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.values().to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a trainable tensor.
    pub fn param(&mut self, tensor: &Tensor<F>) -> Var {
        let v = self.leaf(tensor);
        self.nodes[v.0].requires_grad = self.grad_enabled;
        v
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: tensor.into_values(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value (and its gradient, if populated) out of the tape.
    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone())
            .expect("tape node shape is consistent")
            .with_requires_grad(n.requires_grad);
        t.set_grad(self.grad(v).map(|g| g.to_vec()))
            .expect("gradient shape matches");
        t
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Frees the storage of an intermediate on an inference tape. No-op when
    /// gradients are tracked, since backward needs every value.
    pub fn release(&mut self, v: Var) {
        if !self.grad_enabled {
            self.nodes[v.0].value = Vec::new();
        }
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    // ---- primitives -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("mul: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<F>();
        self.push(vec![], vec![s], Op::Sum(x), &[x])
    }

    /// Adds a `[d]` vector to every trailing row of `x[..., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| shape_err!("add_bias on a scalar"))?;
        if self.shape(bias) != [d] {
            return Err(shape_err!("add_bias: bias {:?} for rows of {d}", self.shape(bias)));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x[..., d_in] · w[d_in, d_out] + b[d_out]` over all leading dimensions.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let din = *xs.last().ok_or_else(|| shape_err!("affine on a scalar"))?;
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != din {
            return Err(shape_err!("affine: input {:?} with weights {:?}", xs, ws));
        }
        let dout = ws[1];
        if self.shape(b) != [dout] {
            return Err(shape_err!("affine: bias {:?} for {dout} outputs", self.shape(b)));
        }
        let rows = self.numel(x) / din.max(1);
        let value = ops::affine_forward(self.value(x), self.value(w), self.value(b), rows, din, dout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(shape, value, Op::Affine { x, w, b }, &[x, w, b]))
    }

    /// Same-length 1-D convolution: `x[B, Cin, L]`, `w[Cout, Cin, K]`, `b[Cout]`,
    /// odd `K`, symmetric zero padding of `(K-1)/2 · dilation`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 3 {
            return Err(shape_err!("conv1d: input {:?}, weights {:?}", xs, ws));
        }
        if xs[1] != ws[1] {
            return Err(shape_err!(
                "conv1d: input has {} channels, weights expect {}",
                xs[1],
                ws[1]
            ));
        }
        if self.shape(b) != [ws[0]] {
            return Err(shape_err!("conv1d: bias {:?} for {} outputs", self.shape(b), ws[0]));
        }
        let dims = ConvDims {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            len: xs[2],
            kernel: ws[2],
            dilation,
        };
        if dims.kernel.is_multiple_of(2) || dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv1d needs an odd kernel and positive dilation (kernel {}, dilation {dilation})",
                dims.kernel
            )));
        }
        if (dims.kernel - 1) * dilation + 1 > dims.len {
            return Err(Error::InvalidArgument(format!(
                "conv1d span {} exceeds length {}",
                (dims.kernel - 1) * dilation + 1,
                dims.len
            )));
        }
        let value = ops::conv1d_forward(self.value(x), self.value(w), self.value(b), dims);
        let shape = vec![dims.batch, dims.cout, dims.len];
        Ok(self.push(shape, value, Op::Conv1d { x, w, b, dims }, &[x, w, b]))
    }

    /// Width-2, stride-2 max pooling over the last axis of `x[B, C, L]`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err!("maxpool1d expects [B, C, L], got {:?}", xs));
        }
        if !xs[2].is_multiple_of(2) {
            return Err(shape_err!("maxpool1d needs an even length, got {}", xs[2]));
        }
        let xv = self.value(x);
        let half = xv.len() / 2;
        let mut value = Vec::with_capacity(half);
        let mut argmax = Vec::with_capacity(half);
        for i in 0..half {
            let (a, b) = (xv[2 * i], xv[2 * i + 1]);
            // First index wins ties.
            if b > a {
                value.push(b);
                argmax.push(2 * i + 1);
            } else {
                value.push(a);
                argmax.push(2 * i);
            }
        }
        let shape = vec![xs[0], xs[1], xs[2] / 2];
        Ok(self.push(shape, value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let cdf: Vec<F> = self.value(x).iter().map(|&v| ops::normal_cdf(v)).collect();
        let value = self.value(x).iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let cdf = if self.grad_enabled { cdf } else { Vec::new() };
        self.push(self.shape(x).to_vec(), value, Op::Gelu { x, cdf }, &[x])
    }

    /// Multiplies by a precomputed mask (entries `0` or `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.numel(x) {
            return Err(shape_err!(
                "dropout mask of {} for {} values",
                mask.len(),
                self.numel(x)
            ));
        }
        let value = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, &[x]))
    }

    /// Per-(batch, channel) normalisation of `x[B, C, L]` with per-channel scale/shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] == 0 {
            return Err(shape_err!("instance_norm expects [B, C, L>0], got {:?}", xs));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("instance_norm: scale/shift must be [{c}]"));
        }
        let (value, xhat, inv_std) = ops::normalize_forward(
            self.value(x),
            xs[2],
            eps,
            self.value(gamma),
            self.value(beta),
            |g, _| g % c,
        );
        let op = Op::InstanceNorm {
            x,
            gamma,
            beta,
            channels: c,
            xhat,
            inv_std,
        };
        Ok(self.push(xs, value, op, &[x, gamma, beta]))
    }

    /// Normalisation over the trailing feature axis of `x[..., d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
        if d == 0 {
            return Err(shape_err!("layer_norm over an empty axis"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!("layer_norm: scale/shift must be [{d}]"));
        }
        let (value, xhat, inv_std) =
            ops::normalize_forward(self.value(x), d, eps, self.value(gamma), self.value(beta), |_, i| i);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(xs, value, op, &[x, gamma, beta]))
    }

    /// Swaps the last two axes of `x[B, M, N]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err!("transpose expects rank 3, got {:?}", xs));
        }
        let (b, m, n) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let mut value = vec![F::zero(); xv.len()];
        for bi in 0..b {
            let src = &xv[bi * m * n..][..m * n];
            let dst = &mut value[bi * m * n..][..m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        Ok(self.push(vec![b, n, m], value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Multi-head scaled dot-product attention core over `[G, N, D]` groups.
    /// `masks` holds either one mask per group or a single shared mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, masks: Option<&[AttentionMask]>) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(shape_err!(
                "attention: q {:?}, k {:?}, v {:?}",
                qs,
                self.shape(k),
                self.shape(v)
            ));
        }
        let dims = AttnDims {
            groups: qs[0],
            tokens: qs[1],
            dim: qs[2],
            heads,
        };
        if heads == 0 || !dims.dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "feature width {} not divisible into {heads} heads",
                dims.dim
            )));
        }
        let mask = match masks {
            None => None,
            Some(ms) => {
                if ms.len() != 1 && ms.len() != dims.groups {
                    return Err(shape_err!("{} masks for {} groups", ms.len(), dims.groups));
                }
                let mut flat = Vec::with_capacity(dims.groups * dims.tokens * dims.tokens);
                for g in 0..dims.groups {
                    let m = &ms[if ms.len() == 1 { 0 } else { g }];
                    if m.queries() != dims.tokens || m.keys() != dims.tokens {
                        return Err(shape_err!(
                            "mask {}x{} for {} tokens",
                            m.queries(),
                            m.keys(),
                            dims.tokens
                        ));
                    }
                    flat.extend_from_slice(m.as_slice());
                }
                Some(flat)
            }
        };
        let (value, probs) = ops::attention_forward(self.value(q), self.value(k), self.value(v), mask.as_deref(), dims);
        let op = Op::Attention {
            q,
            k,
            v,
            dims,
            mask,
            probs,
        };
        Ok(self.push(qs, value, op, &[q, k, v]))
    }

    /// Summed cross-entropy of `logits[R, C]` against class indices; `None`
    /// rows are ignored and contribute nothing.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(shape_err!(
                "cross-entropy: logits {:?} with {} labels",
                ls,
                labels.len()
            ));
        }
        let c = ls[1];
        let lv = self.value(logits);
        if let Some(i) = lv.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {} of cross-entropy input", i)));
        }
        let mut probs = vec![F::zero(); lv.len()];
        let mut loss = F::zero();
        for (r, label) in labels.iter().enumerate() {
            let row = &lv[r * c..][..c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let denom: F = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[r * c..][..c].iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            if let Some(y) = *label {
                if y >= c {
                    return Err(Error::InvalidArgument(format!("label {y} for {c} classes")));
                }
                loss += denom.ln() + max - row[y];
            }
        }
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![], vec![loss], op, &[logits]))
    }

    /// Builds `[G, 1 + n, d]` token sets: a shared `cls[d]` then one row from each `feats[i]: [G, d]`.
    pub fn stack_tokens(&mut self, cls: Var, feats: &[Var]) -> Result<Var> {
        let d = match self.shape(cls) {
            [d] => *d,
            s => return Err(shape_err!("stack_tokens: cls must be a vector, got {:?}", s)),
        };
        let g = match feats.first() {
            Some(&f) => self.shape(f).first().copied().unwrap_or(0),
            None => return Err(shape_err!("stack_tokens needs at least one feature set")),
        };
        for &f in feats {
            if self.shape(f) != [g, d] {
                return Err(shape_err!(
                    "stack_tokens: feature {:?}, expected [{g}, {d}]",
                    self.shape(f)
                ));
            }
        }
        let n = feats.len() + 1;
        let mut value = vec![F::zero(); g * n * d];
        for gi in 0..g {
            value[gi * n * d..][..d].copy_from_slice(self.value(cls));
            for (j, &f) in feats.iter().enumerate() {
                value[(gi * n + j + 1) * d..][..d].copy_from_slice(&self.value(f)[gi * d..][..d]);
            }
        }
        let mut inputs = vec![cls];
        inputs.extend_from_slice(feats);
        let op = Op::StackTokens {
            cls,
            feats: feats.to_vec(),
        };
        Ok(self.push(vec![g, n, d], value, op, &inputs))
    }

    /// Extracts token `index` from `x[G, N, d]` as `[G, d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || index >= xs[1] {
            return Err(shape_err!("select_token {index} from {:?}", xs));
        }
        let (g, n, d) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let value = (0..g)
            .flat_map(|gi| xv[(gi * n + index) * d..][..d].iter().copied())
            .collect();
        Ok(self.push(vec![g, d], value, Op::SelectToken { x, index }, &[x]))
    }

    /// Places the rows of `x[R, ...]` at positions `rows` of a zero `[total, ...]` tensor.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || xs[0] != rows.len() {
            return Err(shape_err!("scatter_rows: {:?} for {} rows", xs, rows.len()));
        }
        let mut seen = vec![false; total];
        for &r in rows {
            if r >= total || std::mem::replace(&mut seen[r], true) {
                return Err(Error::InvalidArgument(format!(
                    "scatter_rows: row {r} repeated or out of range {total}"
                )));
            }
        }
        let width: usize = xs[1..].iter().product();
        let mut value = vec![F::zero(); total * width];
        let xv = self.value(x);
        for (i, &r) in rows.iter().enumerate() {
            value[r * width..][..width].copy_from_slice(&xv[i * width..][..width]);
        }
        let mut shape = xs;
        shape[0] = total;
        let op = Op::ScatterRows { x, rows: rows.to_vec() };
        Ok(self.push(shape, value, op, &[x]))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.grad_enabled {
            return Err(Error::InvalidArgument("backward on an inference tape".into()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(idx, &gy);
            // Only leaves keep their gradient; intermediates are freed as soon as they propagate.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gy);
            }
            let factor = if self.fault == Some(self.nodes[idx].op.kind()) {
                F::lit(1.5)
            } else {
                F::one()
            };
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(&g) {
                            *a += b * factor;
                        }
                    }
                    slot @ None => {
                        *slot = Some(if factor == F::one() {
                            g
                        } else {
                            g.into_iter().map(|b| b * factor).collect()
                        });
                    }
                }
            }
        }
        // Tracked nodes that the loss does not depend on get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![F::zero(); node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, idx: usize, gy: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, gy.iter().zip(bv).map(|(&g, &y)| g * y).collect()),
                    (*b, gy.iter().zip(av).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(*x, gy.iter().map(|&g| g * *c).collect())],
            Op::Sum(x) => vec![(*x, vec![gy[0]; self.numel(*x)])],
            Op::AddBias { x, bias } => {
                let d = self.numel(*bias);
                let mut gb = vec![F::zero(); d];
                for row in gy.chunks(d) {
                    for (a, &g) in gb.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                vec![(*x, gy.to_vec()), (*bias, gb)]
            }
            Op::Affine { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = self.numel(*x) / din.max(1);
                let (dx, dw, db) = ops::affine_backward(self.value(*x), self.value(*w), gy, rows, din, dout);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Conv1d { x, w, b, dims } => {
                let (dx, dw, db) = ops::conv1d_backward(self.value(*x), self.value(*w), gy, *dims);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![F::zero(); self.numel(*x)];
                for (&i, &g) in argmax.iter().zip(gy) {
                    dx[i] += g;
                }
                vec![(*x, dx)]
            }
            Op::Gelu { x, cdf } => vec![(
                *x,
                self.value(*x)
                    .iter()
                    .zip(cdf)
                    .zip(gy)
                    .map(|((&v, &c), &g)| g * ops::gelu_grad_from_cdf(v, c))
                    .collect(),
            )],
            Op::Dropout { x, mask } => {
                vec![(*x, gy.iter().zip(mask).map(|(&g, &m)| g * m).collect())]
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                channels,
                xhat,
                inv_std,
            } => {
                let c = *channels;
                let len = self.shape(*x)[2];
                let (dx, dg, db) = ops::normalize_backward(gy, xhat, inv_std, len, self.value(*gamma), |g, _| g % c);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.numel(*gamma);
                let (dx, dg, db) = ops::normalize_backward(gy, xhat, inv_std, d, self.value(*gamma), |_, i| i);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Transpose(x) => {
                let xs = self.shape(*x);
                let (b, m, n) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![F::zero(); gy.len()];
                for bi in 0..b {
                    let src = &gy[bi * m * n..][..m * n];
                    let dst = &mut dx[bi * m * n..][..m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] = src[j * m + i];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, gy.to_vec())],
            Op::Attention {
                q,
                k,
                v,
                dims,
                mask,
                probs,
            } => {
                let (dq, dk, dv) = ops::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    gy,
                    mask.as_deref(),
                    *dims,
                );
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let mut dl = vec![F::zero(); probs.len()];
                for (r, label) in labels.iter().enumerate() {
                    if let Some(y) = *label {
                        for j in 0..c {
                            let t = if j == y { F::one() } else { F::zero() };
                            dl[r * c + j] = gy[0] * (probs[r * c + j] - t);
                        }
                    }
                }
                vec![(*logits, dl)]
            }
            Op::StackTokens { cls, feats } => {
                let d = self.numel(*cls);
                let n = feats.len() + 1;
                let g = gy.len() / (n * d);
                let mut dcls = vec![F::zero(); d];
                let mut dfeats: Vec<Vec<F>> = feats.iter().map(|_| vec![F::zero(); g * d]).collect();
                for gi in 0..g {
                    for (a, &b) in dcls.iter_mut().zip(&gy[gi * n * d..][..d]) {
                        *a += b;
                    }
                    for (j, df) in dfeats.iter_mut().enumerate() {
                        df[gi * d..][..d].copy_from_slice(&gy[(gi * n + j + 1) * d..][..d]);
                    }
                }
                let mut out = vec![(*cls, dcls)];
                out.extend(feats.iter().copied().zip(dfeats));
                out
            }
            Op::SelectToken { x, index } => {
                let xs = self.shape(*x);
                let (g, n, d) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![F::zero(); g * n * d];
                for gi in 0..g {
                    dx[(gi * n + index) * d..][..d].copy_from_slice(&gy[gi * d..][..d]);
                }
                vec![(*x, dx)]
            }
            Op::ScatterRows { x, rows } => {
                let width = self.numel(*x) / rows.len().max(1);
                let mut dx = vec![F::zero(); self.numel(*x)];
                for (i, &r) in rows.iter().enumerate() {
                    dx[i * width..][..width].copy_from_slice(&gy[r * width..][..width]);
                }
                vec![(*x, dx)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tracked(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(values.to_vec()).with_requires_grad(true)
    }

    #[test]
    fn mask_rows_must_allow_some_key() {
        assert!(AttentionMask::new(2, 2, vec![true, false, false, false]).is_err());
        assert!(AttentionMask::new(2, 2, vec![true; 3]).is_err());
        let m = AttentionMask::from_key_presence(&[true, false, true]).unwrap();
        assert!((0..3).all(|q| m.allows(q, 0) && !m.allows(q, 1) && m.allows(q, 2)));
    }

    #[test]
    fn reused_variable_accumulates_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tracked(&[3.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0, -3.0]);
    }

    #[test]
    fn only_tracked_leaves_keep_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tracked(&[1.0, 2.0]));
        let unused = tape.param(&Tensor::from_vec(vec![5.0]));
        let c = tape.constant(Tensor::from_vec(vec![4.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 4.0]);
        assert_eq!(tape.grad(unused).unwrap(), &[0.0]);
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn backward_needs_a_scalar_on_a_recording_tape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tracked(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());

        let mut frozen = Tape::<f64>::inference();
        let p = frozen.param(&Tensor::from_vec(vec![1.0]));
        let s = frozen.sum(p);
        assert!(!frozen.requires_grad(p));
        assert!(frozen.backward(s).is_err());
        frozen.release(p);
        assert!(frozen.value(p).is_empty());
    }
}
