//! Set fusion: a pre-norm transformer encoder over `[CLS, modality tokens…]`
//! for every epoch, reading out the CLS position.

use super::config::ModelConfig;
use super::params::Bound;
use super::ForwardCtx;
use crate::error::Result;
use crate::tensor::{masked_multi_head_attention, AttentionMask, AttentionVars, Scalar, Tape, Var};

/// `tokens: [G, N, d]` with the CLS token at position 0; returns `[G, d]`.
pub fn mix<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    config: &ModelConfig,
    ctx: &mut ForwardCtx,
    tokens: Var,
    masks: Option<&[AttentionMask]>,
) -> Result<Var> {
    let eps = F::lit(config.norm_epsilon);
    let mut x = tokens;
    for l in 1..=config.mixer_layers {
        let layer = format!("epoch_mixer.layer{l}");
        let v = |name: &str| p.var(&format!("{layer}.{name}"));
        let a = tape.layer_norm(x, v("norm1.scale")?, v("norm1.shift")?, eps)?;
        let attn = AttentionVars {
            query_w: v("attention.query.weights")?,
            query_b: v("attention.query.bias")?,
            key_w: v("attention.key.weights")?,
            key_b: v("attention.key.bias")?,
            value_w: v("attention.value.weights")?,
            value_b: v("attention.value.bias")?,
            output_w: v("attention.output.weights")?,
            output_b: v("attention.output.bias")?,
        };
        let att = masked_multi_head_attention(tape, a, a, a, config.mixer_heads, masks, &attn)?;
        let att = ctx.dropout(tape, att)?;
        x = tape.add(x, att)?;

        let b = tape.layer_norm(x, v("norm2.scale")?, v("norm2.shift")?, eps)?;
        let hidden = tape.affine(b, v("ffn.hidden.weights")?, v("ffn.hidden.bias")?)?;
        let hidden = tape.gelu(hidden);
        let hidden = ctx.dropout(tape, hidden)?;
        let out = tape.affine(hidden, v("ffn.output.weights")?, v("ffn.output.bias")?)?;
        let out = ctx.dropout(tape, out)?;
        x = tape.add(x, out)?;
    }
    let cls = tape.select_token(x, 0)?;
    tape.layer_norm(
        cls,
        p.var("epoch_mixer.final_norm.scale")?,
        p.var("epoch_mixer.final_norm.shift")?,
        eps,
    )
}
