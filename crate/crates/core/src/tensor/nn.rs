//! Composite layers built from tape primitives.

use rand::Rng;

use super::{AttentionMask, Scalar, Tape, Var};
use crate::error::Result;

/// Projection parameters of one multi-head attention block, already on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query_w: Var,
    pub query_b: Var,
    pub key_w: Var,
    pub key_b: Var,
    pub value_w: Var,
    pub value_b: Var,
    pub output_w: Var,
    pub output_b: Var,
}

/// Projects queries/keys/values, runs masked scaled dot-product attention per
/// head and applies the output projection. Inputs are `[G, N, d]` (a plain
/// `[N, d]` token set is `G = 1`). Keys masked out for a query receive zero
/// weight and cannot influence its output.
pub fn masked_multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    masks: Option<&[AttentionMask]>,
    p: &AttentionVars,
) -> Result<Var> {
    let q = tape.affine(queries, p.query_w, p.query_b)?;
    let k = tape.affine(keys, p.key_w, p.key_b)?;
    let v = tape.affine(values, p.value_w, p.value_b)?;
    let a = tape.attention(q, k, v, heads, masks)?;
    tape.affine(a, p.output_w, p.output_b)
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<F: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<F> {
    let keep = F::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
        .collect()
}
