//! Per-modality residual CNN: `[R, 1, k·T]` samples to `[R, T, d]` features.

use super::config::{ModelConfig, SignalKind};
use super::params::Bound;
use super::ForwardCtx;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tape, Var};

pub fn encode<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Bound,
    config: &ModelConfig,
    ctx: &mut ForwardCtx,
    kind: SignalKind,
    x: Var,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let expected = config.signal_len(kind);
    if shape.len() != 3 || shape[1] != 1 || shape[2] != expected {
        return Err(shape_err!(
            "{kind} encoder expects [R, 1, {expected}] (k = {}, T = {}), got {:?}",
            config.k(kind),
            config.epochs,
            shape
        ));
    }
    let rows = shape[0];
    let eps = F::lit(config.norm_epsilon);
    let mut h = x;
    let mut cin = 1;
    for (i, &c) in config.channels(kind).iter().enumerate() {
        let block = format!("encoder.{kind}.block{}", i + 1);
        let input = h;
        for j in 1..=3 {
            let conv = tape.conv1d(
                h,
                p.var(&format!("{block}.conv{j}.weights"))?,
                p.var(&format!("{block}.conv{j}.bias"))?,
                1,
            )?;
            if h != input {
                tape.release(h);
            }
            let normed = tape.instance_norm(
                conv,
                p.var(&format!("{block}.norm{j}.scale"))?,
                p.var(&format!("{block}.norm{j}.shift"))?,
                eps,
            )?;
            tape.release(conv);
            let act = tape.gelu(normed);
            tape.release(normed);
            h = ctx.dropout(tape, act)?;
        }
        let shortcut = if cin != c {
            tape.conv1d(
                input,
                p.var(&format!("{block}.shortcut.weights"))?,
                p.var(&format!("{block}.shortcut.bias"))?,
                1,
            )?
        } else {
            input
        };
        let sum = tape.add(h, shortcut)?;
        tape.release(h);
        tape.release(shortcut);
        if input != x {
            tape.release(input);
        }
        h = tape.maxpool2(sum)?;
        tape.release(sum);
        cin = c;
    }
    // [R, C, 4T] -> [R, 4T, C] -> [R, T, 4C]
    let t = tape.transpose(h)?;
    tape.release(h);
    let flat = tape.reshape(t, &[rows, config.epochs, config.pre_dense_width(kind)])?;
    tape.release(t);
    tape.affine(
        flat,
        p.var(&format!("encoder.{kind}.dense.weights"))?,
        p.var(&format!("encoder.{kind}.dense.bias"))?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::tensor::Tensor;

    #[test]
    fn one_feature_row_per_epoch() {
        let config = ModelConfig::gradcheck_tiny();
        let params = init_params::<f64>(&config, 1).unwrap();
        for kind in SignalKind::ALL {
            let len = config.signal_len(kind);
            let mut tape = Tape::<f64>::inference();
            let p = params.bind(&mut tape);
            let samples = (0..2 * len).map(|i| (i as f64 * 0.3).sin()).collect();
            let x = tape.constant(Tensor::new(vec![2, 1, len], samples).unwrap());
            let out = encode(&mut tape, &p, &config, &mut ForwardCtx::eval(), kind, x).unwrap();
            assert_eq!(tape.shape(out), &[2, config.epochs, config.feature_dim]);
            assert!(tape.value(out).iter().all(|v| v.is_finite()));

            let short = tape.constant(Tensor::zeros(&[2, 1, len - 1]));
            assert!(encode(&mut tape, &p, &config, &mut ForwardCtx::eval(), kind, short).is_err());
        }
    }
}
