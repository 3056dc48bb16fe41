use std::cell::{Cell, RefCell};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Post-softmax attention weights captured during a forward pass.
#[derive(Clone, Debug)]
pub struct CapturedAttention<T> {
    pub tag: String,
    /// `[batch, heads, S, S]`
    pub probs: Tensor<T>,
}

/// Per-forward-pass state: the tape, bound parameters, train/eval mode,
/// the dropout RNG stream and instrumentation counters.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    params: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
    block_calls: Cell<usize>,
    capture: Option<RefCell<Vec<CapturedAttention<T>>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Evaluation mode: dropout off.
    pub fn eval(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self::build(tape, params, false, 0)
    }

    /// Training mode with a dropout stream seeded by `seed`.
    pub fn train(tape: &'a Tape<T>, params: &'a ParamStore<T>, seed: u64) -> Self {
        Self::build(tape, params, true, seed)
    }

    fn build(tape: &'a Tape<T>, params: &'a ParamStore<T>, train: bool, seed: u64) -> Self {
        Ctx {
            tape,
            params,
            bound: RefCell::new(vec![None; params.len()]),
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            block_calls: Cell::new(0),
            capture: None,
        }
    }

    /// Records every attention probability tensor.
    pub fn with_capture(mut self) -> Self {
        self.capture = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    /// Tape variable for parameter `id`, created on first use.
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.index()] {
            return v;
        }
        let v = self.tape.leaf(self.params.value(id).clone(), true);
        self.bound.borrow_mut()[id.index()] = Some(v);
        v
    }

    /// True if parameter `id` took part in this forward pass.
    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound.borrow()[id.index()].is_some()
    }

    /// Gradient for every parameter in store order; parameters that did not
    /// take part in the pass get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        let bound = self.bound.borrow();
        self.params
            .iter()
            .map(|(id, p)| match bound[id.index()] {
                Some(v) => grads.get_or_zero(v),
                None => Tensor::zeros(p.value.shape()),
            })
            .collect()
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        let n = self.tape.value(x).numel();
        let keep = T::from_f64c(1.0 / (1.0 - p));
        let mut rng = self.rng.borrow_mut();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.tape.dropout_with_mask(x, mask)
    }

    pub(crate) fn count_block(&self) {
        self.block_calls.set(self.block_calls.get() + 1);
    }

    /// Number of transformer-block applications so far.
    pub fn block_calls(&self) -> usize {
        self.block_calls.get()
    }

    pub(crate) fn capturing(&self) -> bool {
        self.capture.is_some()
    }

    pub(crate) fn record_attention(&self, tag: &str, probs: Tensor<T>) {
        if let Some(c) = &self.capture {
            c.borrow_mut().push(CapturedAttention { tag: tag.to_string(), probs });
        }
    }

    pub fn captured(&self) -> Vec<CapturedAttention<T>> {
        self.capture.as_ref().map(|c| c.borrow().clone()).unwrap_or_default()
    }
}
