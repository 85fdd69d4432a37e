use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{shape_err, Error, Result};
use crate::model::Params;
use crate::tensor::{Scalar, Tensor};

/// Warm-up then half-life decay: linear from 0 to `max_lr` over `warmup_steps`,
/// then `max_lr · 0.5^((step − warmup) / half_life)`.
pub fn lr_at(step: u64, c: &TrainConfig) -> f64 {
    if step <= c.warmup_steps {
        if c.warmup_steps == 0 {
            return c.max_lr;
        }
        return c.max_lr * (step as f64 / c.warmup_steps as f64);
    }
    let past = (step - c.warmup_steps) as f64;
    c.max_lr * 0.5f64.powf(past / c.decay_half_life_steps as f64)
}

/// First and second moments, shaped like the parameters, plus the Adam timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Scalar = f32> {
    pub t: u64,
    pub m: Params<F>,
    pub v: Params<F>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &Params<F>) -> Self {
        let zeros: Params<F> = {
            let mut z = Params::default();
            for (name, t) in params.iter() {
                z.insert(name, Tensor::zeros(t.shape()));
            }
            z
        };
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Adam hyper-parameters, split out so the update can be tested on its own.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        AdamW {
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.adam_epsilon,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update. Decoupled decay `θ ← θ − lr·wd·θ` comes first, then the
/// bias-corrected Adam step. A non-finite gradient aborts before any parameter
/// changes.
pub fn adamw_step<F: Scalar>(
    params: &mut Params<F>,
    grads: &[Vec<F>],
    state: &mut AdamState<F>,
    lr: f64,
    opt: AdamW,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(shape_err!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.len() != p.numel() {
            return Err(shape_err!("gradient of {name}: {} values for {}", g.len(), p.numel()));
        }
        if let Some(i) = g.iter().position(|v| !v.as_f64().is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name}[{i}] is {} at optimizer step {}; step aborted",
                g[i].as_f64(),
                state.t + 1
            )));
        }
    }
    state.t += 1;
    let c1 = 1.0 - opt.beta1.powi(state.t as i32);
    let c2 = 1.0 - opt.beta2.powi(state.t as i32);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), g), ((_, m), (_, v))) in params.iter_mut().zip(grads).zip(moments) {
        let (m, v) = (m.values_mut(), v.values_mut());
        for (i, (p, &g)) in p.values_mut().iter_mut().zip(g).enumerate() {
            let g = g.as_f64();
            let mut x = p.as_f64();
            x -= lr * opt.weight_decay * x;
            let mi = opt.beta1 * m[i].as_f64() + (1.0 - opt.beta1) * g;
            let vi = opt.beta2 * v[i].as_f64() + (1.0 - opt.beta2) * g * g;
            m[i] = F::lit(mi);
            v[i] = F::lit(vi);
            x -= lr * (mi / c1) / ((vi / c2).sqrt() + opt.epsilon);
            *p = F::lit(x);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> Params<f64> {
        let mut p = Params::default();
        p.insert("w", Tensor::new(vec![1], vec![value]).unwrap());
        p
    }

    #[test]
    fn schedule_points() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(1000, &c), 5e-4);
        assert_eq!(lr_at(2000, &c), 1e-3);
        assert!((lr_at(2000 + c.decay_half_life_steps, &c) - 5e-4).abs() < 1e-18);
        // No jump at the end of warm-up: the first decay step moves less than one warm-up increment.
        let increment = c.max_lr / c.warmup_steps as f64;
        assert!((lr_at(2001, &c) - lr_at(2000, &c)).abs() < increment);
        assert!(lr_at(2001, &c) < lr_at(2000, &c));
    }

    #[test]
    fn one_step_by_hand() {
        // m̂ = g, v̂ = g², so the Adam step is lr·g/(|g|+ε).
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        };
        adamw_step(&mut p, &[vec![1.0]], &mut s, 0.1, opt).unwrap();
        let expected = 1.0 - 0.1 * 0.01 * 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().values()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.899).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = single(0.37);
        let mut s = AdamState::new(&p);
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        };
        for _ in 0..3 {
            adamw_step(&mut p, &[vec![0.0]], &mut s, 0.1, opt).unwrap();
        }
        assert_eq!(p.get("w").unwrap().values()[0], 0.37);
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut p = single(2.0);
        let mut s = AdamState::new(&p);
        let err = adamw_step(
            &mut p,
            &[vec![f64::NAN]],
            &mut s,
            0.1,
            AdamW::from(&TrainConfig::default()),
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p.get("w").unwrap().values()[0], 2.0);
        assert_eq!(s.t, 0);
    }
}
