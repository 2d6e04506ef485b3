//! Layers the backbone and the tuners are assembled from.

mod attention;
pub mod init;

pub use attention::{attention, merge_heads, split_qkv, MhaConfig, MhaOutput, MultiHeadAttention};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// A named tensor with a trainable flag.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Parameter {
            name: name.into(),
            value,
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Replace the value; the shape must not change.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::TensorShape {
                name: self.name.clone(),
                expected: self.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        self.value.data_mut()
    }
}

/// Name, shape and trainable flag of a parameter, without its values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamInfo {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>) -> Self {
        ParamInfo {
            name: name.into(),
            shape: shape.into(),
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, shape: impl Into<Vec<usize>>) -> Self {
        ParamInfo {
            trainable: false,
            ..Self::new(name, shape)
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl From<&Parameter> for ParamInfo {
    fn from(p: &Parameter) -> Self {
        ParamInfo {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            trainable: p.trainable(),
        }
    }
}

/// `x · W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl LinearLayer {
    pub fn new(weight: Parameter, bias: Option<Parameter>) -> Result<Self> {
        let ws = weight.value().shape();
        if ws.len() != 2 {
            return Err(Error::invalid("linear", format!("weight must be 2-d, got {ws:?}")));
        }
        if let Some(b) = &bias {
            if b.value().shape() != [ws[1]] {
                return Err(Error::shape("linear", ws, b.value().shape()));
            }
        }
        Ok(LinearLayer { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.linear(x, w, b)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.weight.set_trainable(trainable);
        if let Some(b) = &mut self.bias {
            b.set_trainable(trainable);
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(prefix: &str, dim: usize, trainable: bool) -> Self {
        LayerNorm {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor::ones([dim]), trainable),
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros([dim]), trainable),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Two-layer feed-forward network, `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl Mlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}
