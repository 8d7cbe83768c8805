use crate::error::Result;
use crate::init::init_uniform;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Binding, ParamId, ParamStore, Tensor};

/// Two-layer fully connected network: `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
}

impl Mlp2 {
    /// `zero_output` initialises the second layer to zeros so the network
    /// starts out emitting exactly `b2 = 0`.
    pub fn new(
        params: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        zero_output: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w1 = params.insert(format!("{prefix}.w1"), init_uniform(&[input_dim, hidden], 1.0, rng)?);
        let b1 = params.insert(format!("{prefix}.b1"), Tensor::zeros(vec![hidden])?);
        let gain = if zero_output { 0.0 } else { 1.0 };
        let w2 = params.insert(format!("{prefix}.w2"), init_uniform(&[hidden, output_dim], gain, rng)?);
        let b2 = params.insert(format!("{prefix}.b2"), Tensor::zeros(vec![output_dim])?);
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            input_dim,
            hidden,
            output_dim,
        })
    }

    pub fn num_params(input_dim: usize, hidden: usize, output_dim: usize) -> usize {
        hidden * (input_dim + 1) + output_dim * (hidden + 1)
    }

    pub fn bind(&self, binding: &Binding) -> BoundMlp {
        BoundMlp {
            w1: binding.var(self.w1),
            b1: binding.var(self.b1),
            w2: binding.var(self.w2),
            b2: binding.var(self.b2),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundMlp {
    /// `x: [B, input_dim] -> [B, output_dim]`
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, self.w2)?;
        tape.add_row(out, self.b2)
    }
}
