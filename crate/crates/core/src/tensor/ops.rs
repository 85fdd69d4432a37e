//! Numeric kernels for the tape primitives. All loops write each output
//! element from exactly one thread in a fixed order, so results do not depend
//! on the worker count.

use rayon::prelude::*;

use super::Scalar;

/// Primitive operation kinds, used for diagnostics and gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    Sum,
    AddBias,
    Affine,
    Conv1d,
    MaxPool,
    Gelu,
    Dropout,
    InstanceNorm,
    LayerNorm,
    Transpose,
    Reshape,
    Attention,
    SoftmaxCrossEntropy,
    StackTokens,
    SelectToken,
    ScatterRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::AddBias => "add_bias",
            OpKind::Affine => "affine",
            OpKind::Conv1d => "conv1d",
            OpKind::MaxPool => "maxpool1d",
            OpKind::Gelu => "gelu",
            OpKind::Dropout => "dropout",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Attention => "attention",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::StackTokens => "stack_tokens",
            OpKind::SelectToken => "select_token",
            OpKind::ScatterRows => "scatter_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

pub(crate) const ALL_KINDS: [OpKind; 20] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::Sum,
    OpKind::AddBias,
    OpKind::Affine,
    OpKind::Conv1d,
    OpKind::MaxPool,
    OpKind::Gelu,
    OpKind::Dropout,
    OpKind::InstanceNorm,
    OpKind::LayerNorm,
    OpKind::Transpose,
    OpKind::Reshape,
    OpKind::Attention,
    OpKind::SoftmaxCrossEntropy,
    OpKind::StackTokens,
    OpKind::SelectToken,
    OpKind::ScatterRows,
];

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub len: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvDims {
    /// Signed offset of tap `kk` relative to the output position.
    fn offset(&self, kk: usize) -> isize {
        (kk as isize - ((self.kernel - 1) / 2) as isize) * self.dilation as isize
    }

    /// Output positions `t` for which `t + off` is a valid input index.
    fn valid(&self, off: isize) -> (usize, usize) {
        let l = self.len as isize;
        let t0 = (-off).max(0).min(l);
        let t1 = (l - off).min(l).max(t0);
        (t0 as usize, t1 as usize)
    }
}

pub(crate) fn conv1d_forward<F: Scalar>(x: &[F], w: &[F], bias: &[F], d: ConvDims) -> Vec<F> {
    let mut out = vec![F::zero(); d.batch * d.cout * d.len];
    out.par_chunks_mut(d.len).enumerate().for_each(|(row, o)| {
        let b = row / d.cout;
        let co = row % d.cout;
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..d.cin {
            let xr = &x[(b * d.cin + ci) * d.len..][..d.len];
            for kk in 0..d.kernel {
                let wv = w[(co * d.cin + ci) * d.kernel + kk];
                let off = d.offset(kk);
                let (t0, t1) = d.valid(off);
                let src = &xr[(t0 as isize + off) as usize..(t1 as isize + off) as usize];
                for (o, &xv) in o[t0..t1].iter_mut().zip(src) {
                    *o += wv * xv;
                }
            }
        }
    });
    out
}

/// Returns (dx, dw, dbias).
pub(crate) fn conv1d_backward<F: Scalar>(x: &[F], w: &[F], dy: &[F], d: ConvDims) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dx = vec![F::zero(); d.batch * d.cin * d.len];
    dx.par_chunks_mut(d.len).enumerate().for_each(|(row, dxr)| {
        let b = row / d.cin;
        let ci = row % d.cin;
        for co in 0..d.cout {
            let dyr = &dy[(b * d.cout + co) * d.len..][..d.len];
            for kk in 0..d.kernel {
                let wv = w[(co * d.cin + ci) * d.kernel + kk];
                let off = d.offset(kk);
                let (t0, t1) = d.valid(off);
                // out[t] used x[t + off]; scatter back.
                let s0 = (t0 as isize + off) as usize;
                let s1 = (t1 as isize + off) as usize;
                for (g, &dv) in dxr[s0..s1].iter_mut().zip(&dyr[t0..t1]) {
                    *g += wv * dv;
                }
            }
        }
    });

    let mut dw = vec![F::zero(); d.cout * d.cin * d.kernel];
    dw.par_chunks_mut(d.cin * d.kernel).enumerate().for_each(|(co, dwr)| {
        for b in 0..d.batch {
            let dyr = &dy[(b * d.cout + co) * d.len..][..d.len];
            for ci in 0..d.cin {
                let xr = &x[(b * d.cin + ci) * d.len..][..d.len];
                for kk in 0..d.kernel {
                    let off = d.offset(kk);
                    let (t0, t1) = d.valid(off);
                    let src = &xr[(t0 as isize + off) as usize..(t1 as isize + off) as usize];
                    dwr[ci * d.kernel + kk] += dot(&dyr[t0..t1], src);
                }
            }
        }
    });

    let mut db = vec![F::zero(); d.cout];
    for b in 0..d.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            let dyr = &dy[(b * d.cout + co) * d.len..][..d.len];
            *acc += dyr.iter().copied().sum::<F>();
        }
    }
    (dx, dw, db)
}

/// Dot product with eight independent partial sums so the loop vectorises.
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// `x[rows, din] · w[din, dout] + b`.
pub(crate) fn affine_forward<F: Scalar>(x: &[F], w: &[F], b: &[F], rows: usize, din: usize, dout: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * dout];
    out.par_chunks_mut(dout).enumerate().for_each(|(m, o)| {
        o.copy_from_slice(b);
        let xr = &x[m * din..][..din];
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &w[i * dout..][..dout];
            for (o, &wv) in o.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    });
    out
}

pub(crate) fn affine_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    rows: usize,
    din: usize,
    dout: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dx = vec![F::zero(); rows * din];
    dx.par_chunks_mut(din).enumerate().for_each(|(m, dxr)| {
        let dyr = &dy[m * dout..][..dout];
        for (i, g) in dxr.iter_mut().enumerate() {
            let wr = &w[i * dout..][..dout];
            let mut acc = F::zero();
            for (&a, &bv) in dyr.iter().zip(wr) {
                acc += a * bv;
            }
            *g = acc;
        }
    });
    let mut dw = vec![F::zero(); din * dout];
    dw.par_chunks_mut(dout).enumerate().for_each(|(i, dwr)| {
        for m in 0..rows {
            let xv = x[m * din + i];
            let dyr = &dy[m * dout..][..dout];
            for (g, &dv) in dwr.iter_mut().zip(dyr) {
                *g += xv * dv;
            }
        }
    });
    let mut db = vec![F::zero(); dout];
    for m in 0..rows {
        for (g, &dv) in db.iter_mut().zip(&dy[m * dout..][..dout]) {
            *g += dv;
        }
    }
    (dx, dw, db)
}

/// Standard normal CDF Φ(x).
pub(crate) fn normal_cdf<F: Scalar>(x: F) -> F {
    F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx [x · Φ(x)] given Φ(x).
pub(crate) fn gelu_grad_from_cdf<F: Scalar>(x: F, cdf: F) -> F {
    let pdf = (F::lit(-0.5) * x * x).exp() * F::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Normalises contiguous groups of `group` elements; returns (y, xhat, inv_std).
/// `param_index(g, i)` selects the scale/shift entry for element `i` of group `g`.
pub(crate) fn normalize_forward<F: Scalar>(
    x: &[F],
    group: usize,
    eps: F,
    gamma: &[F],
    beta: &[F],
    param_index: impl Fn(usize, usize) -> usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let groups = x.len() / group;
    let n = F::from_usize(group).unwrap();
    let mut xhat = vec![F::zero(); x.len()];
    let mut y = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); groups];
    for g in 0..groups {
        let xs = &x[g * group..][..group];
        let mean = xs.iter().copied().sum::<F>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[g] = inv;
        for i in 0..group {
            let h = (xs[i] - mean) * inv;
            xhat[g * group + i] = h;
            let p = param_index(g, i);
            y[g * group + i] = gamma[p] * h + beta[p];
        }
    }
    (y, xhat, inv_std)
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn normalize_backward<F: Scalar>(
    dy: &[F],
    xhat: &[F],
    inv_std: &[F],
    group: usize,
    gamma: &[F],
    param_index: impl Fn(usize, usize) -> usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let groups = dy.len() / group;
    let n = F::from_usize(group).unwrap();
    let mut dx = vec![F::zero(); dy.len()];
    let mut dgamma = vec![F::zero(); gamma.len()];
    let mut dbeta = vec![F::zero(); gamma.len()];
    let mut dxhat = vec![F::zero(); group];
    for g in 0..groups {
        let mut sum_d = F::zero();
        let mut sum_dh = F::zero();
        for i in 0..group {
            let idx = g * group + i;
            let p = param_index(g, i);
            dgamma[p] += dy[idx] * xhat[idx];
            dbeta[p] += dy[idx];
            dxhat[i] = dy[idx] * gamma[p];
            sum_d += dxhat[i];
            sum_dh += dxhat[i] * xhat[idx];
        }
        let scale = inv_std[g] / n;
        for i in 0..group {
            let idx = g * group + i;
            dx[idx] = scale * (n * dxhat[i] - sum_d - xhat[idx] * sum_dh);
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub groups: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

/// Scaled dot-product attention per group and head. Disallowed keys are
/// skipped outright, which equals an additive -inf before the softmax.
/// Returns (output, probabilities[groups, heads, tokens, tokens]).
pub(crate) fn attention_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    mask: Option<&[bool]>,
    a: AttnDims,
) -> (Vec<F>, Vec<F>) {
    let (n, dm, h) = (a.tokens, a.dim, a.heads);
    let dh = dm / h;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut out = vec![F::zero(); a.groups * n * dm];
    let mut probs = vec![F::zero(); a.groups * h * n * n];
    out.par_chunks_mut(n * dm)
        .zip(probs.par_chunks_mut(h * n * n))
        .enumerate()
        .for_each(|(g, (o, p))| {
            let base = g * n * dm;
            let allowed = |qi: usize, kj: usize| mask.is_none_or(|m| m[(g * n + qi) * n + kj]);
            for head in 0..h {
                let col = head * dh;
                for qi in 0..n {
                    let qrow = &q[base + qi * dm + col..][..dh];
                    let prow = &mut p[(head * n + qi) * n..][..n];
                    let mut max = F::neg_infinity();
                    for kj in 0..n {
                        if !allowed(qi, kj) {
                            continue;
                        }
                        let krow = &k[base + kj * dm + col..][..dh];
                        let s = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<F>() * scale;
                        prow[kj] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut denom = F::zero();
                    for kj in 0..n {
                        if allowed(qi, kj) {
                            let e = (prow[kj] - max).exp();
                            prow[kj] = e;
                            denom += e;
                        }
                    }
                    let orow = &mut o[qi * dm + col..][..dh];
                    for kj in 0..n {
                        if !allowed(qi, kj) {
                            continue;
                        }
                        prow[kj] = prow[kj] / denom;
                        let w = prow[kj];
                        let vrow = &v[base + kj * dm + col..][..dh];
                        for (ov, &vv) in orow.iter_mut().zip(vrow) {
                            *ov += w * vv;
                        }
                    }
                }
            }
        });
    (out, probs)
}

/// Returns (dq, dk, dv).
pub(crate) fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    mask: Option<&[bool]>,
    a: AttnDims,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (n, dm, h) = (a.tokens, a.dim, a.heads);
    let dh = dm / h;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![F::zero(); q.len()];
    let mut dk = vec![F::zero(); k.len()];
    let mut dv = vec![F::zero(); v.len()];
    dq.par_chunks_mut(n * dm)
        .zip(dk.par_chunks_mut(n * dm))
        .zip(dv.par_chunks_mut(n * dm))
        .enumerate()
        .for_each(|(g, ((dq, dk), dv))| {
            let base = g * n * dm;
            let allowed = |qi: usize, kj: usize| mask.is_none_or(|m| m[(g * n + qi) * n + kj]);
            let mut dp = vec![F::zero(); n];
            for head in 0..h {
                let col = head * dh;
                for qi in 0..n {
                    let prow = &probs[((g * h + head) * n + qi) * n..][..n];
                    let dorow = &dout[base + qi * dm + col..][..dh];
                    let mut dot = F::zero();
                    for kj in 0..n {
                        if !allowed(qi, kj) {
                            dp[kj] = F::zero();
                            continue;
                        }
                        let vrow = &v[base + kj * dm + col..][..dh];
                        dp[kj] = dorow.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<F>();
                        dot += prow[kj] * dp[kj];
                        let dvrow = &mut dv[kj * dm + col..][..dh];
                        for (d, &g) in dvrow.iter_mut().zip(dorow) {
                            *d += prow[kj] * g;
                        }
                    }
                    for kj in 0..n {
                        if !allowed(qi, kj) {
                            continue;
                        }
                        let ds = prow[kj] * (dp[kj] - dot) * scale;
                        let krow = &k[base + kj * dm + col..][..dh];
                        let qrow = &q[base + qi * dm + col..][..dh];
                        {
                            let dqrow = &mut dq[qi * dm + col..][..dh];
                            for (d, &kv) in dqrow.iter_mut().zip(krow) {
                                *d += ds * kv;
                            }
                        }
                        let dkrow = &mut dk[kj * dm + col..][..dh];
                        for (d, &qv) in dkrow.iter_mut().zip(qrow) {
                            *d += ds * qv;
                        }
                    }
                }
            }
        });
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], dilation: usize) -> Vec<f64> {
        let k = w.len() as isize;
        let half = (k - 1) / 2;
        (0..x.len() as isize)
            .map(|t| {
                (0..k)
                    .map(|kk| {
                        let s = t + (kk - half) * dilation as isize;
                        if s >= 0 && (s as usize) < x.len() {
                            w[kk as usize] * x[s as usize]
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn conv_kernel_matches_direct_sum() {
        let x: Vec<f64> = (0..11).map(|v| ((v * 7) % 5) as f64 - 2.0).collect();
        let w = [0.5, -1.0, 2.0, 0.25, 1.5];
        for dil in 1..=2 {
            let d = ConvDims {
                batch: 1,
                cin: 1,
                cout: 1,
                len: 11,
                kernel: 5,
                dilation: dil,
            };
            let got = conv1d_forward(&x, &w, &[0.0], d);
            assert_eq!(got, naive_conv(&x, &w, dil));
        }
    }

    #[test]
    fn op_names_round_trip() {
        for kind in ALL_KINDS {
            assert_eq!(OpKind::from_name(kind.name()), Some(kind));
        }
    }
}
