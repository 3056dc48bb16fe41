use rand::Rng;

use super::Ctx;
use crate::autodiff::{Init, ParamBuilder, ParamId, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Default init for learned embedding vectors.
pub const EMBED_INIT: Init = Init::Normal { mean: 0.0, std: 0.02 };

/// `y = x W + b` on the last axis. Weight and bias start uniform in
/// `±1/sqrt(in_dim)`; a zero bias would map zero inputs to the zero vector,
/// where a following layer norm is singular.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.param("weight", &[in_dim, out_dim], Init::Uniform { a: -bound, b: bound })?;
        let bias = Some(pb.param("bias", &[out_dim], Init::Uniform { a: -bound, b: bound })?);
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.weight))?;
        match self.bias {
            Some(b) => ctx.tape.add_broadcast(y, ctx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: pb.param("gamma", &[dim], Init::Ones)?,
            beta: pb.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.tape.layer_norm(x, ctx.p(self.gamma), ctx.p(self.beta), T::from_f64c(self.eps))
    }
}

/// Linear -> GELU -> (dropout) -> Linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout_p: f64,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        dropout_p: f64,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&mut pb.sub("fc1"), in_dim, hidden)?,
            fc2: Linear::new(&mut pb.sub("fc2"), hidden, out_dim)?,
            dropout_p,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h)?;
        let h = ctx.dropout(h, self.dropout_p)?;
        self.fc2.forward(ctx, h)
    }
}
