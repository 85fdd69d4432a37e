use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, SignalKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named model parameters in a fixed enumeration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F = f32> {
    tensors: IndexMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for Params<F> {
    fn default() -> Self {
        Params {
            tensors: IndexMap::new(),
        }
    }
}

impl<F: Scalar> Params<F> {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Marks every tensor as trainable.
    pub fn with_requires_grad(mut self) -> Self {
        self.tensors = self
            .tensors
            .into_iter()
            .map(|(k, t)| (k, t.with_requires_grad(true)))
            .collect();
        self
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(k, t)| (k.clone(), tape.param(t))).collect(),
        }
    }
}

/// Parameter handles on a particular tape, in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients after a backward pass, one tensor per parameter in order.
    pub fn grads<F: Scalar>(&self, tape: &Tape<F>) -> Vec<Vec<F>> {
        self.vars
            .values()
            .map(|&v| {
                tape.grad(v)
                    .map(<[F]>::to_vec)
                    .unwrap_or_else(|| vec![F::zero(); tape.value(v).len()])
            })
            .collect()
    }
}

/// Shape of every parameter in enumeration order; the single source for
/// initialisation, checkpoint validation and parameter counting.
pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let d = config.feature_dim;
    let conv = |out: &mut Vec<_>, prefix: String, cout: usize, cin: usize, k: usize| {
        let fan_in = cin * k;
        out.push((format!("{prefix}.weights"), vec![cout, cin, k], Init::FanIn(fan_in)));
        out.push((format!("{prefix}.bias"), vec![cout], Init::FanIn(fan_in)));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: String, c: usize| {
        out.push((format!("{prefix}.scale"), vec![c], Init::Ones));
        out.push((format!("{prefix}.shift"), vec![c], Init::Zeros));
    };
    let dense = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: String, din: usize, dout: usize| {
        out.push((format!("{prefix}.weights"), vec![din, dout], Init::FanIn(din)));
        out.push((format!("{prefix}.bias"), vec![dout], Init::FanIn(din)));
    };

    for kind in SignalKind::ALL {
        let mut cin = 1;
        for (i, &c) in config.channels(kind).iter().enumerate() {
            let block = format!("encoder.{kind}.block{}", i + 1);
            for j in 1..=3 {
                let input = if j == 1 { cin } else { c };
                conv(&mut out, format!("{block}.conv{j}"), c, input, config.encoder_kernel);
                norm(&mut out, format!("{block}.norm{j}"), c);
            }
            if cin != c {
                conv(&mut out, format!("{block}.shortcut"), c, cin, 1);
            }
            cin = c;
        }
        dense(
            &mut out,
            format!("encoder.{kind}.dense"),
            config.pre_dense_width(kind),
            d,
        );
    }

    out.push(("epoch_mixer.cls".into(), vec![d], Init::Embedding));
    if config.modality_embeddings {
        for kind in SignalKind::ALL {
            out.push((format!("epoch_mixer.embedding.{kind}"), vec![d], Init::Embedding));
        }
    }
    for l in 1..=config.mixer_layers {
        let layer = format!("epoch_mixer.layer{l}");
        norm(&mut out, format!("{layer}.norm1"), d);
        for proj in ["query", "key", "value", "output"] {
            dense(&mut out, format!("{layer}.attention.{proj}"), d, d);
        }
        norm(&mut out, format!("{layer}.norm2"), d);
        dense(&mut out, format!("{layer}.ffn.hidden"), d, config.mixer_hidden);
        dense(&mut out, format!("{layer}.ffn.output"), config.mixer_hidden, d);
    }
    norm(&mut out, "epoch_mixer.final_norm".into(), d);

    for b in 1..=config.seq_blocks {
        for l in 1..=config.seq_dilations.len() {
            let layer = format!("sequence_mixer.block{b}.layer{l}");
            conv(&mut out, format!("{layer}.conv"), d, d, config.seq_kernel);
            norm(&mut out, format!("{layer}.norm"), d);
        }
    }
    dense(&mut out, "sequence_mixer.head".into(), d, config.classes);
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Ones,
    Zeros,
    /// Normal with standard deviation 0.02.
    Embedding,
}

/// Deterministic parameter initialisation.
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<Params<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    let mut params = Params::default();
    for (name, shape, init) in layout(config) {
        let n: usize = shape.iter().product();
        let values: Vec<F> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect()
            }
            Init::Ones => vec![F::one(); n],
            Init::Zeros => vec![F::zero(); n],
            Init::Embedding => (0..n).map(|_| F::lit(normal.sample(&mut rng))).collect(),
        };
        params.insert(name, Tensor::new(shape, values)?.with_requires_grad(true));
    }
    Ok(params)
}

/// Checks that `params` has exactly the names and shapes `config` implies.
pub fn check_layout<F: Scalar>(config: &ModelConfig, params: &Params<F>) -> Result<()> {
    let expected = layout(config);
    if expected.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            params.len()
        )));
    }
    for ((name, shape, _), (pname, t)) in expected.iter().zip(params.iter()) {
        if name != pname || shape.as_slice() != t.shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter mismatch: expected {name} {shape:?}, found {pname} {:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}
