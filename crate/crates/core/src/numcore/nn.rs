//! Dense layers and multilayer perceptrons on top of the tape.

use indexmap::IndexMap;
use rand::Rng as _;

use super::params::ParameterSet;
use super::tape::{Activation, Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `activation(x @ weight + bias)` recorded on `tape`.
pub fn dense(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>, act: Activation) -> Result<Var> {
    let (_, in_dim) = tape.value(x)?.expect_matrix("dense")?;
    let (w_in, w_out) = tape.value(weight)?.expect_matrix("dense")?;
    if in_dim != w_in {
        return Err(Error::shape(
            "dense",
            format!("input {:?}, weights {:?}", tape.value(x)?.shape(), [w_in, w_out]),
        ));
    }
    let mut h = tape.matmul(x, weight)?;
    if let Some(b) = bias {
        h = tape.add_bias(h, b)?;
    }
    tape.activate(h, act)
}

/// Tape-free convenience wrapper around [`dense`].
pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, act: Activation) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(weight.clone());
    let bv = tape.constant(bias.clone());
    let out = dense(&mut tape, xv, wv, Some(bv), act)?;
    Ok(tape.value(out)?.clone())
}

/// Glorot-uniform matrix: entries in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

/// Which parameters of a forward pass receive gradients.
///
/// Parameters rejected by the filter are placed on the tape as constants.
pub struct Binding<'f> {
    trainable: Box<dyn Fn(&str) -> bool + 'f>,
    vars: IndexMap<String, Var>,
}

impl<'f> Binding<'f> {
    pub fn new(trainable: impl Fn(&str) -> bool + 'f) -> Self {
        Self {
            trainable: Box::new(trainable),
            vars: IndexMap::new(),
        }
    }

    /// Everything frozen; for inference.
    pub fn frozen() -> Binding<'static> {
        Binding::new(|_| false)
    }

    pub fn all() -> Binding<'static> {
        Binding::new(|_| true)
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        if (self.trainable)(name) {
            let v = tape.variable(value.clone());
            self.vars.insert(name.to_string(), v);
            v
        } else {
            tape.constant(value.clone())
        }
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every trainable parameter bound so far; parameters with
    /// no path to the loss get zeros.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> Result<ParameterSet> {
        let mut out = ParameterSet::new();
        for (name, &var) in &self.vars {
            let g = match grads.get(var)? {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.value(var)?.shape()),
            };
            out.insert(name.clone(), g)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Layer widths `dims[0] -> dims[1] -> ... -> dims[n]`; every layer but the
    /// last uses `hidden`, the last uses `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, bias: bool, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least one layer");
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense {
                weight: glorot_uniform(w[0], w[1], rng),
                bias: bias.then(|| Tensor::zeros(&[w[1]])),
                activation: if i + 1 == n { output } else { hidden },
            })
            .collect();
        Self { layers }
    }

    /// Single width-preserving linear layer close to the identity.
    pub fn near_identity(width: usize, jitter: f64, rng: &mut Rng) -> Self {
        let mut weight = Tensor::zeros(&[width, width]);
        for i in 0..width {
            for j in 0..width {
                let base = if i == j { 1.0 } else { 0.0 };
                weight.data_mut()[i * width + j] = base + rng.random_range(-jitter..=jitter);
            }
        }
        Self {
            layers: vec![Dense {
                weight,
                bias: Some(Tensor::zeros(&[width])),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn export(&self, prefix: &str, into: &mut ParameterSet) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            into.insert(format!("{prefix}.{i}.weight"), layer.weight.clone())?;
            if let Some(b) = &layer.bias {
                into.insert(format!("{prefix}.{i}.bias"), b.clone())?;
            }
        }
        Ok(())
    }

    pub fn import(&mut self, prefix: &str, from: &ParameterSet) -> Result<()> {
        let fetch = |name: String, like: &Tensor| -> Result<Tensor> {
            let t = from
                .get(&name)
                .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
            if t.shape() != like.shape() {
                return Err(Error::Incompatible(format!(
                    "{name}: {:?} vs {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.weight = fetch(format!("{prefix}.{i}.weight"), &layer.weight)?;
            if let Some(b) = &layer.bias {
                layer.bias = Some(fetch(format!("{prefix}.{i}.bias"), b)?);
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, binding: &mut Binding<'_>, prefix: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = binding.bind(tape, &format!("{prefix}.{i}.weight"), &layer.weight);
            let b = layer
                .bias
                .as_ref()
                .map(|b| binding.bind(tape, &format!("{prefix}.{i}.bias"), b));
            h = dense(tape, h, w, b, layer.activation)?;
        }
        Ok(h)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &mut Binding::frozen(), "m", xv)?;
        Ok(tape.value(out)?.clone())
    }
}
