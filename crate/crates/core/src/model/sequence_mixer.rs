//! Dilated CNN over the fused sequence: `[B, T, d]` to `[B, T, classes]` logits.

use super::config::ModelConfig;
use super::params::Bound;
use super::ForwardCtx;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tape, Var};

pub fn mix<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    config: &ModelConfig,
    ctx: &mut ForwardCtx,
    z: Var,
) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    if zs.len() != 3 || zs[1] != config.epochs || zs[2] != config.feature_dim {
        return Err(shape_err!(
            "sequence mixer expects [B, {}, {}], got {:?}",
            config.epochs,
            config.feature_dim,
            zs
        ));
    }
    let eps = F::lit(config.norm_epsilon);
    // Channels-first for the convolutions.
    let mut h = tape.transpose(z)?;
    for b in 1..=config.seq_blocks {
        let residual = h;
        for (l, &dilation) in config.seq_dilations.iter().enumerate() {
            let layer = format!("sequence_mixer.block{b}.layer{}", l + 1);
            let c = tape.conv1d(
                h,
                p.var(&format!("{layer}.conv.weights"))?,
                p.var(&format!("{layer}.conv.bias"))?,
                dilation,
            )?;
            let c = tape.transpose(c)?;
            let c = tape.layer_norm(
                c,
                p.var(&format!("{layer}.norm.scale"))?,
                p.var(&format!("{layer}.norm.shift"))?,
                eps,
            )?;
            let c = tape.gelu(c);
            let c = ctx.dropout(tape, c)?;
            h = tape.transpose(c)?;
        }
        h = tape.add(h, residual)?;
    }
    let out = tape.transpose(h)?;
    tape.affine(
        out,
        p.var("sequence_mixer.head.weights")?,
        p.var("sequence_mixer.head.bias")?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::tensor::Tensor;

    #[test]
    fn logits_ignore_epochs_beyond_the_radius() {
        let config = ModelConfig::gradcheck_tiny();
        let (t, d) = (config.epochs, config.feature_dim);
        let radius = config.sequence_radius();
        assert!(radius < t - 1);
        let params = init_params::<f64>(&config, 3).unwrap();
        let run = |far: f64| {
            let mut tape = Tape::<f64>::inference();
            let p = params.bind(&mut tape);
            let mut z: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.37).sin()).collect();
            z[(t - 1) * d..].iter_mut().for_each(|v| *v = far);
            let z = tape.constant(Tensor::new(vec![1, t, d], z).unwrap());
            let out = mix(&mut tape, &p, &config, &mut ForwardCtx::eval(), z).unwrap();
            assert_eq!(tape.shape(out), &[1, t, config.classes]);
            tape.value(out).to_vec()
        };
        let (a, b) = (run(0.0), run(9.0));
        let c = config.classes;
        assert_eq!(a[..(t - 1 - radius) * c], b[..(t - 1 - radius) * c]);
        assert_ne!(a[(t - 1 - radius) * c..], b[(t - 1 - radius) * c..]);
    }

    #[test]
    fn rejects_wrong_sequence_length() {
        let config = ModelConfig::gradcheck_tiny();
        let params = init_params::<f64>(&config, 0).unwrap();
        let mut tape = Tape::<f64>::inference();
        let p = params.bind(&mut tape);
        let z = tape.constant(Tensor::zeros(&[1, config.epochs + 1, config.feature_dim]));
        assert!(mix(&mut tape, &p, &config, &mut ForwardCtx::eval(), z).is_err());
    }
}
