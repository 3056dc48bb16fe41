//! Latent chain-of-thought recurrence.
//!
//! A pass runs the stack over `[E0; Z0; ...; Z(r-1)]`. Between passes the
//! hidden states at the query positions are compressed into feedback tokens
//! `Z(r)` and appended. Predictions are always read from the original query
//! positions of the final pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamBuilder, ParamId, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mlp, TokenGroup, EMBED_INIT};
use crate::scalar::Scalar;

/// How many recurrences run while training and at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrenceConfig {
    pub r_train: usize,
    pub r_eval: usize,
    /// Learned step embeddings; later steps reuse the last one.
    pub max_step_embeddings: usize,
}

impl Default for RecurrenceConfig {
    fn default() -> Self {
        RecurrenceConfig { r_train: 0, r_eval: 0, max_step_embeddings: 4 }
    }
}

impl RecurrenceConfig {
    pub fn new(r_train: usize, r_eval: usize) -> Self {
        RecurrenceConfig { r_train, r_eval, max_step_embeddings: r_train.max(1) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_step_embeddings == 0 {
            return Err(Error::config("recurrence.max_step_embeddings", "must be positive"));
        }
        Ok(())
    }
}

/// Two-layer GELU MLP mapping query hidden states to feedback tokens, plus
/// a learned embedding per recurrence step.
#[derive(Clone, Debug)]
pub struct FeedbackMlp {
    pub mlp: Mlp,
    pub step_embedding: ParamId,
    pub max_steps: usize,
    pub dim: usize,
}

impl FeedbackMlp {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, dim: usize, hidden: usize, max_steps: usize) -> Result<Self> {
        if max_steps == 0 {
            return Err(Error::config("recurrence.max_step_embeddings", "must be positive"));
        }
        Ok(FeedbackMlp {
            mlp: Mlp::new(&mut pb.sub("mlp"), dim, hidden, dim, 0.0)?,
            step_embedding: pb.param("step_embedding", &[max_steps, dim], EMBED_INIT)?,
            max_steps,
            dim,
        })
    }

    /// `Z = mlp(h_q) + step_embedding[min(step, max_steps - 1)]`.
    pub fn compress<T: Scalar>(&self, ctx: &Ctx<'_, T>, h_q: Var, step: usize) -> Result<Var> {
        let t = ctx.tape;
        let shape = t.shape(h_q);
        if shape.len() < 2 || shape[shape.len() - 2] == 0 || *shape.last().unwrap() != self.dim {
            return Err(Error::shape("compress", format!("query states {shape:?}, dim {}", self.dim)));
        }
        let z = self.mlp.forward(ctx, h_q)?;
        let idx = step.min(self.max_steps - 1);
        let emb = t.index_select(ctx.p(self.step_embedding), 0, &[idx])?;
        let emb = t.reshape(emb, &[self.dim])?;
        t.add_broadcast(z, emb)
    }
}

/// Bookkeeping of one recurrent invocation.
#[derive(Clone, Debug)]
pub struct RecurrenceState {
    pub base_len: usize,
    /// Positions (within the base sequence) decoded by the head.
    pub query_index: Vec<usize>,
    /// Sequence length seen by each pass, `passes + 1` entries.
    pub pass_lengths: Vec<usize>,
    /// Query positions used at every pass (identical across passes).
    pub query_index_per_pass: Vec<Vec<usize>>,
    pub feedback: Vec<Var>,
}

fn pass_error(pass: usize) -> impl Fn(Error) -> Error {
    move |e| if e.is_numeric() { Error::NonFinitePass { pass } } else { e }
}

/// Runs `passes` latent recurrences.
///
/// * `base` yields the embedded base sequence `[B, S0, E]`; it may return a
///   cached value or recompute it.
/// * `run_stack` maps a `[B, S, E]` sequence and its token groups to hidden
///   states of the same shape (the caller picks the mask for the groups).
///
/// Returns the hidden states of the final pass over the full sequence.
pub fn recur<T: Scalar>(
    ctx: &Ctx<'_, T>,
    base: &mut dyn FnMut() -> Result<Var>,
    base_groups: &[TokenGroup],
    query_index: &[usize],
    feedback: &FeedbackMlp,
    passes: usize,
    run_stack: &mut dyn FnMut(Var, &[TokenGroup]) -> Result<Var>,
) -> Result<(Var, RecurrenceState)> {
    let t = ctx.tape;
    if query_index.is_empty() {
        return Err(Error::Input("recurrence needs at least one query position".into()));
    }
    let e0 = base()?;
    let shape = t.shape(e0);
    if shape.len() != 3 || shape[1] != base_groups.len() || query_index.iter().any(|&q| q >= shape[1]) {
        return Err(Error::shape("recur", format!("base {shape:?} with {} groups", base_groups.len())));
    }
    let base_len = shape[1];
    let mut state = RecurrenceState {
        base_len,
        query_index: query_index.to_vec(),
        pass_lengths: vec![base_len],
        query_index_per_pass: vec![query_index.to_vec()],
        feedback: Vec::with_capacity(passes),
    };
    let mut hidden = run_stack(e0, base_groups).map_err(pass_error(0))?;
    let mut groups = base_groups.to_vec();
    for r in 0..passes {
        let h_q = t.index_select(hidden, 1, query_index)?;
        let z = feedback.compress(ctx, h_q, r).map_err(pass_error(r + 1))?;
        state.feedback.push(z);
        groups.extend(std::iter::repeat_n(TokenGroup::Feedback, query_index.len()));
        let mut parts = vec![base()?];
        parts.extend(&state.feedback);
        let seq = t.concat(&parts, 1)?;
        let len = t.shape(seq)[1];
        debug_assert_eq!(len, base_len + (r + 1) * query_index.len());
        state.pass_lengths.push(len);
        state.query_index_per_pass.push(query_index.to_vec());
        hidden = run_stack(seq, &groups).map_err(pass_error(r + 1))?;
    }
    Ok((hidden, state))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{ParamStore, Tape, Tensor};

    #[test]
    fn zero_weights_compress_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let fb = FeedbackMlp::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 16, 2).unwrap();
        store.fill(0.0);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let h = tape.constant(Tensor::from_fn(&[1, 3, 8], |i| i as f64));
        let z = fb.compress(&ctx, h, 5).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compress_keeps_model_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let fb = FeedbackMlp::new(&mut ParamBuilder::new(&mut store, &mut rng), 256, 256, 4).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let h = tape.constant(Tensor::zeros(&[6, 256]));
        assert_eq!(tape.shape(fb.compress(&ctx, h, 0).unwrap()), vec![6, 256]);
    }
}
