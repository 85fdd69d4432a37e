//! Finite-difference verification of the tape's analytic gradients.
//!
//! Every check runs in `f64`. The scalar objective is `Σ y ⊙ r` for a fixed
//! random `r`, so every output element carries a distinct weight. The error
//! of an element is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::{AttentionMask, AttentionVars, OpKind, Tape, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub trials: usize,
    pub seed: u64,
    /// Corrupt the backward pass of this primitive (negative control).
    pub fault: Option<OpKind>,
    /// Restrict to checks whose name contains this string.
    pub filter: Option<String>,
    /// Include the end-to-end check of the tiny model.
    pub model: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            trials: 20,
            seed: 0,
            fault: None,
            filter: None,
            model: true,
        }
    }
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), values).expect("shape matches")
}

/// Maximum relative error between backward gradients of `build` and central
/// differences, taken over every element of every input.
pub fn max_relative_error<B>(inputs: &[Tensor<f64>], build: B, weight_seed: u64, fault: Option<OpKind>) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let objective = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let y = build(tape, vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
        let w = random_tensor(tape.shape(y), 1.0, &mut rng);
        let w = tape.constant(w);
        let prod = tape.mul(y, w)?;
        Ok(tape.sum(prod))
    };

    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = objective(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x)).collect();
        let l = objective(&mut t, &vs)?;
        Ok(t.value(l)[0])
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].values()[j];
            work[i].values_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work[i].values_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work[i].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grads[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub(crate) type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn case<B>(shapes: Vec<Vec<usize>>, scale: f64, fault: Option<OpKind>, build: B) -> Case
where
    B: Fn(&mut Tape<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var> + Clone + 'static,
{
    Box::new(move |rng: &mut ChaCha8Rng| {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(s, scale, rng)).collect();
        let structure_seed: u64 = rng.gen();
        let weight_seed: u64 = rng.gen();
        let build = build.clone();
        max_relative_error(
            &inputs,
            move |tape, vars| {
                let mut srng = ChaCha8Rng::seed_from_u64(structure_seed);
                build(tape, vars, &mut srng)
            },
            weight_seed,
            fault,
        )
    })
}

fn random_mask(groups: usize, tokens: usize, rng: &mut ChaCha8Rng) -> Vec<AttentionMask> {
    (0..groups)
        .map(|_| {
            let mut present: Vec<bool> = (0..tokens).map(|_| rng.gen_bool(0.6)).collect();
            present[0] = true;
            AttentionMask::from_key_presence(&present).expect("token 0 is present")
        })
        .collect()
}

fn primitive_cases(fault: Option<OpKind>) -> Vec<(&'static str, Case)> {
    vec![
        (
            "conv1d",
            case(vec![vec![2, 3, 9], vec![4, 3, 3], vec![4]], 1.0, fault, |t, v, r| {
                t.conv1d(v[0], v[1], v[2], r.gen_range(1..=3))
            }),
        ),
        (
            "conv1d_gelu_sum",
            case(vec![vec![1, 2, 8], vec![3, 2, 5], vec![3]], 1.0, fault, |t, v, _| {
                let y = t.conv1d(v[0], v[1], v[2], 1)?;
                let g = t.gelu(y);
                Ok(t.sum(g))
            }),
        ),
        (
            "maxpool1d",
            case(vec![vec![2, 2, 8]], 1.0, fault, |t, v, _| t.maxpool2(v[0])),
        ),
        (
            "affine",
            case(vec![vec![3, 4, 5], vec![5, 3], vec![3]], 1.0, fault, |t, v, _| {
                t.affine(v[0], v[1], v[2])
            }),
        ),
        ("gelu", case(vec![vec![12]], 4.0, fault, |t, v, _| Ok(t.gelu(v[0])))),
        (
            "instance_norm",
            case(vec![vec![2, 3, 7], vec![3], vec![3]], 1.0, fault, |t, v, _| {
                t.instance_norm(v[0], v[1], v[2], 1e-5)
            }),
        ),
        (
            "layer_norm",
            case(vec![vec![4, 6], vec![6], vec![6]], 1.0, fault, |t, v, _| {
                t.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
        ),
        (
            "attention",
            case(vec![vec![3, 4, 8]; 3], 1.0, fault, |t, v, r| {
                let masks = random_mask(3, 4, r);
                t.attention(v[0], v[1], v[2], 2, Some(&masks))
            }),
        ),
        (
            "masked_multi_head_attention",
            case(
                {
                    let mut s = vec![vec![2, 3, 8]];
                    for _ in 0..4 {
                        s.push(vec![8, 8]);
                        s.push(vec![8]);
                    }
                    s
                },
                1.0,
                fault,
                |t, v, r| {
                    let masks = random_mask(2, 3, r);
                    let p = AttentionVars {
                        query_w: v[1],
                        query_b: v[2],
                        key_w: v[3],
                        key_b: v[4],
                        value_w: v[5],
                        value_b: v[6],
                        output_w: v[7],
                        output_b: v[8],
                    };
                    crate::tensor::masked_multi_head_attention(t, v[0], v[0], v[0], 2, Some(&masks), &p)
                },
            ),
        ),
        (
            "softmax_cross_entropy",
            case(vec![vec![6, 4]], 3.0, fault, |t, v, r| {
                let labels: Vec<Option<usize>> = (0..6).map(|_| r.gen_bool(0.8).then(|| r.gen_range(0..4))).collect();
                t.softmax_cross_entropy(v[0], &labels)
            }),
        ),
        (
            "dropout",
            case(vec![vec![10]], 1.0, fault, |t, v, r| {
                let mask = crate::tensor::dropout_mask(10, 0.3, r);
                t.dropout(v[0], mask)
            }),
        ),
        (
            "add_mul_scale",
            case(vec![vec![2, 5], vec![2, 5]], 1.0, fault, |t, v, _| {
                let a = t.add(v[0], v[1])?;
                let m = t.mul(a, v[1])?;
                Ok(t.scale(m, -0.7))
            }),
        ),
        (
            "add_bias",
            case(vec![vec![3, 4], vec![4]], 1.0, fault, |t, v, _| t.add_bias(v[0], v[1])),
        ),
        (
            "transpose_reshape",
            case(vec![vec![2, 3, 4]], 1.0, fault, |t, v, _| {
                let x = t.transpose(v[0])?;
                t.reshape(x, &[4, 6])
            }),
        ),
        (
            "stack_select_scatter",
            case(
                vec![vec![5], vec![3, 5], vec![3, 5], vec![2, 5]],
                1.0,
                fault,
                |t, v, _| {
                    let spread = t.scatter_rows(v[3], &[2, 0], 3)?;
                    let tokens = t.stack_tokens(v[0], &[v[1], v[2], spread])?;
                    let first = t.select_token(tokens, 0)?;
                    let last = t.select_token(tokens, 3)?;
                    let mixed = t.mul(tokens, tokens)?;
                    let s = t.sum(mixed);
                    let pair = t.add(first, last)?;
                    let ps = t.sum(pair);
                    t.add(s, ps)
                },
            ),
        ),
    ]
}

/// Runs the primitive suite plus the end-to-end tiny model check.
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<CheckReport>> {
    let mut cases = primitive_cases(opts.fault);
    if opts.model {
        cases.push(("tiny_model", crate::model::gradcheck_case(opts.fault)));
    }
    let mut reports = Vec::new();
    for (name, check) in cases {
        if let Some(f) = &opts.filter {
            if !name.contains(f.as_str()) {
                continue;
            }
        }
        let trials = if name == "tiny_model" {
            opts.trials.clamp(1, 2)
        } else {
            opts.trials
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ fxhash(name));
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(check(&mut rng)?);
        }
        reports.push(CheckReport {
            name: name.to_string(),
            trials,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(reports)
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}
