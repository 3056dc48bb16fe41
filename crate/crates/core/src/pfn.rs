//! PFN-style row layout with latent recurrence.
//!
//! Each table row is `d + 1` cell vectors (features, then the label slot).
//! Blocks alternate attention across the cells of a row and attention
//! across rows within each column; the latter is masked by row group.
//! A recurrence step appends one feedback row per query: the compressed
//! query state goes into the label slot and a learned marker fills the
//! feature slots, both scaled by the gate `g = tanh(g0)`. The output is
//! `H0 + g (H_R - H0)` over the original rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Init, ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionMask, BlockConfig, Ctx, GroupRule, LayerNorm, Linear, Mlp, MultiHeadAttention, StackKind, TokenGroup};
use crate::scalar::Scalar;
use crate::tabular::{TabularTask, TaskKind};

pub const MARKER_INIT: Init = Init::Normal { mean: 0.0, std: 0.02 };
pub const GATE_INIT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfnConfig {
    pub block: BlockConfig,
    /// Block layout; looped layouts tie weights across repeats.
    pub stack: StackKind,
    pub n_classes: usize,
    pub feedback_hidden: usize,
    pub decoder_hidden: usize,
    pub r_train: usize,
    /// Defaults to `r_train` when absent.
    #[serde(default)]
    pub r_eval: Option<usize>,
}

impl Default for PfnConfig {
    fn default() -> Self {
        PfnConfig {
            block: BlockConfig::pfn(),
            stack: StackKind::Plain { layers: 3 },
            n_classes: 2,
            feedback_hidden: 96,
            decoder_hidden: 192,
            r_train: 1,
            r_eval: None,
        }
    }
}

impl PfnConfig {
    pub fn eval_passes(&self) -> usize {
        self.r_eval.unwrap_or(self.r_train)
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.stack.distinct_blocks() == 0 || self.stack.loops() == 0 {
            return Err(Error::config("model.stack", "depth must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("model.n_classes", "need at least two classes"));
        }
        Ok(())
    }
}

/// Row-group membership of a grid, in row order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowGroups(pub Vec<TokenGroup>);

/// Feature attention, group-masked datapoint attention, FFN (pre-norm).
#[derive(Clone, Debug)]
pub struct PfnBlock {
    norm_feature: LayerNorm,
    pub feature_attn: MultiHeadAttention,
    norm_datapoint: LayerNorm,
    pub datapoint_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: Mlp,
}

impl PfnBlock {
    fn new<T: Scalar, R: rand::Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &BlockConfig) -> Result<Self> {
        let mut feature_attn = MultiHeadAttention::new(&mut pb.sub("feature_attn"), cfg)?;
        feature_attn.tag = "feature";
        let mut datapoint_attn = MultiHeadAttention::new(&mut pb.sub("datapoint_attn"), cfg)?;
        datapoint_attn.tag = "datapoint";
        Ok(PfnBlock {
            norm_feature: LayerNorm::new(&mut pb.sub("norm_feature"), cfg.model_dim)?,
            feature_attn,
            norm_datapoint: LayerNorm::new(&mut pb.sub("norm_datapoint"), cfg.model_dim)?,
            datapoint_attn,
            norm_ffn: LayerNorm::new(&mut pb.sub("norm_ffn"), cfg.model_dim)?,
            ffn: Mlp::new(&mut pb.sub("ffn"), cfg.model_dim, cfg.ffn_dim, cfg.model_dim, cfg.dropout_p)?,
        })
    }

    /// `grid: [B, N, C, E]` with one group per row.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, grid: Var, groups: &RowGroups) -> Result<Var> {
        ctx.count_block();
        let t = ctx.tape;
        let shape = t.shape(grid);
        let [b, n, c, e] = shape[..] else {
            return Err(Error::shape("pfn_block", format!("grid {shape:?}")));
        };
        if groups.0.len() != n {
            return Err(Error::shape("pfn_block", format!("{} groups for {n} rows", groups.0.len())));
        }
        let mask = AttentionMask::from_groups(&groups.0, &GroupRule::IN_CONTEXT)?;

        let rows = t.reshape(grid, &[b * n, c, e])?;
        let a = self.feature_attn.forward(ctx, self.norm_feature.forward(ctx, rows)?, None)?;
        let rows = t.add(rows, a)?;

        let cols = t.permute(t.reshape(rows, &[b, n, c, e])?, &[0, 2, 1, 3])?;
        let cols = t.reshape(cols, &[b * c, n, e])?;
        let a = self.datapoint_attn.forward(ctx, self.norm_datapoint.forward(ctx, cols)?, Some(&mask))?;
        let cols = t.add(cols, a)?;

        let f = self.ffn.forward(ctx, self.norm_ffn.forward(ctx, cols)?)?;
        let cols = t.add(cols, f)?;
        let out = t.permute(t.reshape(cols, &[b, c, n, e])?, &[0, 2, 1, 3])?;
        t.reshape(out, &[b, n, c, e])
    }
}

/// `H0 + g (HR - H0)`.
pub fn gated_combine<T: Scalar>(tape: &Tape<T>, h0: Var, hr: Var, gate: Var) -> Result<Var> {
    let delta = tape.sub(hr, h0)?;
    let scaled = tape.mul_scalar_var(delta, gate)?;
    tape.add(h0, scaled)
}

pub struct PfnPass {
    /// Logits `[n_q, classes]`.
    pub logits: Var,
    pub h0: Var,
    pub h_final: Var,
    pub h_out: Var,
    /// Row count of every stack pass.
    pub pass_rows: Vec<usize>,
    pub feedback_rows: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct PfnModel<T> {
    pub cfg: PfnConfig,
    pub params: ParamStore<T>,
    feature_encoder: Linear,
    target_encoder: Linear,
    pub blocks: Vec<PfnBlock>,
    feedback: Mlp,
    pub marker: ParamId,
    pub gate_raw: ParamId,
    norm: LayerNorm,
    decoder: Mlp,
    /// Replaces `tanh(g0)` by a constant (tests and ablations).
    pub gate_override: Option<f64>,
}

impl<T: Scalar> PfnModel<T> {
    pub fn new(cfg: PfnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let e = cfg.block.model_dim;
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let feature_encoder = Linear::new(&mut pb.sub("feature_encoder"), 1, e)?;
        let target_encoder = Linear::new(&mut pb.sub("target_encoder"), 1, e)?;
        let blocks = (0..cfg.stack.distinct_blocks())
            .map(|i| PfnBlock::new(&mut pb.sub(&format!("block{i}")), &cfg.block))
            .collect::<Result<_>>()?;
        let feedback = Mlp::new(&mut pb.sub("feedback"), e, cfg.feedback_hidden, e, 0.0)?;
        let marker = pb.param("marker", &[e], MARKER_INIT)?;
        let gate_raw = pb.param("gate", &[1], Init::Constant { value: GATE_INIT })?;
        let norm = LayerNorm::new(&mut pb.sub("norm"), e)?;
        let decoder = Mlp::new(&mut pb.sub("decoder"), e, cfg.decoder_hidden, cfg.n_classes, 0.0)?;
        Ok(PfnModel {
            cfg,
            params,
            feature_encoder,
            target_encoder,
            blocks,
            feedback,
            marker,
            gate_raw,
            norm,
            decoder,
            gate_override: None,
        })
    }

    /// Current gate value `g`.
    pub fn gate_value(&self) -> f64 {
        self.gate_override.unwrap_or_else(|| self.params.value(self.gate_raw).item().to_f64c().tanh())
    }

    fn gate(&self, ctx: &Ctx<'_, T>) -> Result<Var> {
        match self.gate_override {
            Some(g) => Ok(ctx.tape.constant(Tensor::scalar(T::from_f64c(g)))),
            None => ctx.tape.tanh(ctx.p(self.gate_raw)),
        }
    }

    fn check_task(&self, task: &TabularTask) -> Result<()> {
        task.validate()?;
        match task.kind {
            TaskKind::Classification { n_classes } if n_classes == self.cfg.n_classes => Ok(()),
            _ => Err(Error::Input("PFN model expects classification with the configured class count".into())),
        }
    }

    /// Encoded grid `[1, n_c + n_q, d + 1, E]`. Features are standardized
    /// with context statistics; query label slots carry the context label mean.
    pub fn encode(&self, ctx: &Ctx<'_, T>, task: &TabularTask) -> Result<Var> {
        self.check_task(task)?;
        let t = ctx.tape;
        let (nc, nq, d) = (task.n_context(), task.n_query(), task.n_features());
        let n = nc + nq;
        let e = self.cfg.block.model_dim;
        let stats = task.context_feature_stats();
        let cells = Tensor::from_fn(&[n, d, 1], |i| {
            let (r, j) = (i / d, i % d);
            let x = if r < nc { task.x_context.at(&[r, j]) } else { task.x_query.at(&[r - nc, j]) };
            T::from_f64c((x - stats[j].0) / stats[j].1)
        });
        let feats = self.feature_encoder.forward(ctx, t.constant(cells))?;
        let mean_label = task.y_context.iter().sum::<f64>() / nc as f64;
        let labels = Tensor::from_fn(&[n, 1, 1], |r| T::from_f64c(if r < nc { task.y_context[r] } else { mean_label }));
        let labels = self.target_encoder.forward(ctx, t.constant(labels))?;
        let grid = t.concat(&[feats, labels], 1)?;
        t.reshape(grid, &[1, n, d + 1, e])
    }

    pub fn run_stack(&self, ctx: &Ctx<'_, T>, mut grid: Var, groups: &RowGroups) -> Result<Var> {
        for _ in 0..self.cfg.stack.loops() {
            for b in &self.blocks {
                grid = b.forward(ctx, grid, groups)?;
            }
        }
        Ok(grid)
    }

    /// Feedback rows `[B, n_q, d + 1, E]` from label-slot states `h_q: [B, n_q, E]`.
    pub fn build_feedback_rows(&self, ctx: &Ctx<'_, T>, h_q: Var, n_features: usize) -> Result<Var> {
        let t = ctx.tape;
        let shape = t.shape(h_q);
        let [b, nq, e] = shape[..] else {
            return Err(Error::shape("build_feedback_rows", format!("h_q {shape:?}")));
        };
        let g = self.gate(ctx)?;
        let label = self.feedback.forward(ctx, h_q)?;
        let label = t.mul_scalar_var(label, g)?;
        let label = t.reshape(label, &[b, nq, 1, e])?;
        let marker = t.mul_scalar_var(ctx.p(self.marker), g)?;
        let feats = t.broadcast_to(marker, &[b, nq, n_features, e])?;
        t.concat(&[feats, label], 2)
    }

    /// Full differentiable forward with `passes` recurrences.
    pub fn forward(&self, ctx: &Ctx<'_, T>, task: &TabularTask, passes: usize) -> Result<PfnPass> {
        let t = ctx.tape;
        let (nc, nq, d) = (task.n_context(), task.n_query(), task.n_features());
        let n = nc + nq;
        let e = self.cfg.block.model_dim;
        let query_rows: Vec<usize> = (nc..n).collect();
        let grid0 = self.encode(ctx, task)?;
        let mut groups = RowGroups(task.groups());
        let wrap = |pass: usize| move |err: Error| if err.is_numeric() { Error::NonFinitePass { pass } } else { err };

        let h0 = self.run_stack(ctx, grid0, &groups).map_err(wrap(0))?;
        let mut hidden = h0;
        let mut pass_rows = vec![n];
        let mut feedback_rows = Vec::with_capacity(passes);
        for r in 1..=passes {
            let h_q = t.index_select(hidden, 1, &query_rows)?;
            let h_q = t.narrow(h_q, 2, d, 1)?;
            let h_q = t.reshape(h_q, &[1, nq, e])?;
            let z = self.build_feedback_rows(ctx, h_q, d).map_err(wrap(r))?;
            feedback_rows.push(z);
            groups.0.extend(std::iter::repeat_n(TokenGroup::Feedback, nq));
            let mut parts = vec![grid0];
            parts.extend(&feedback_rows);
            let grid = t.concat(&parts, 1)?;
            pass_rows.push(t.shape(grid)[1]);
            hidden = self.run_stack(ctx, grid, &groups).map_err(wrap(r))?;
        }
        let h_out = if passes == 0 {
            h0
        } else {
            let h_r = t.narrow(hidden, 1, 0, n)?;
            gated_combine(t, h0, h_r, self.gate(ctx)?)?
        };
        let q = t.index_select(h_out, 1, &query_rows)?;
        let q = t.narrow(q, 2, d, 1)?;
        let q = t.reshape(q, &[nq, e])?;
        let logits = self.decoder.forward(ctx, self.norm.forward(ctx, q)?)?;
        Ok(PfnPass { logits, h0, h_final: hidden, h_out, pass_rows, feedback_rows })
    }

    pub fn task_loss(&self, ctx: &Ctx<'_, T>, task: &TabularTask, passes: usize) -> Result<Var> {
        let pass = self.forward(ctx, task, passes)?;
        crate::tabular::tabular_loss(ctx.tape, pass.logits, &task.y_query, task.kind)
    }

    /// Class probabilities `[n_q, classes]`.
    pub fn predict(&self, task: &TabularTask, passes: usize) -> Result<Tensor<f64>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        let pass = self.forward(&ctx, task, passes)?;
        Ok(tape.tensor(tape.softmax(pass.logits)?).cast())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PfnConfig {
        PfnConfig {
            block: BlockConfig { model_dim: 16, n_heads: 2, ffn_dim: 32, dropout_p: 0.0 },
            stack: StackKind::Plain { layers: 2 },
            feedback_hidden: 16,
            decoder_hidden: 16,
            ..PfnConfig::default()
        }
    }

    fn task(nc: usize, nq: usize, d: usize) -> TabularTask {
        TabularTask {
            x_context: Tensor::from_fn(&[nc, d], |i| ((i * 7 % 5) as f64) - 2.0),
            y_context: (0..nc).map(|i| (i % 2) as f64).collect(),
            x_query: Tensor::from_fn(&[nq, d], |i| (i as f64) * 0.3),
            y_query: (0..nq).map(|i| (i % 2) as f64).collect(),
            kind: TaskKind::Classification { n_classes: 2 },
        }
    }

    #[test]
    fn feedback_rows_shape_and_broadcast() {
        let m = PfnModel::<f64>::new(PfnConfig::default(), 0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        let h = tape.constant(Tensor::from_fn(&[1, 2, 96], |i| (i as f64 * 0.01).sin()));
        let z = tape.tensor(m.build_feedback_rows(&ctx, h, 3).unwrap());
        assert_eq!(z.shape(), &[1, 2, 4, 96]);
        let g = m.gate_value();
        let marker = m.params.value(m.marker);
        for q in 0..2 {
            for col in 0..3 {
                for k in 0..96 {
                    assert_eq!(z.at(&[0, q, col, k]), marker.data()[k] * g);
                }
            }
        }
    }

    #[test]
    fn zero_gate_annihilates_feedback_rows() {
        let mut m = PfnModel::<f64>::new(small(), 0).unwrap();
        m.gate_override = Some(0.0);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        let h = tape.constant(Tensor::from_fn(&[1, 3, 16], |i| i as f64));
        let z = tape.tensor(m.build_feedback_rows(&ctx, h, 2).unwrap());
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_gate_is_tanh_two() {
        let m = PfnModel::<f64>::new(small(), 3).unwrap();
        assert_eq!(m.params.value(m.gate_raw).item(), 2.0);
        assert!((m.gate_value() - 0.964_027_580_075_816_9).abs() < 1e-12);
    }

    #[test]
    fn zero_passes_output_is_first_pass() {
        let m = PfnModel::<f64>::new(small(), 4).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        let p = m.forward(&ctx, &task(4, 2, 3), 0).unwrap();
        assert_eq!(p.h_out, p.h0);
        assert_eq!(p.pass_rows, vec![6]);
    }

    #[test]
    fn rows_grow_by_query_count_per_pass() {
        let m = PfnModel::<f64>::new(small(), 5).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        let p = m.forward(&ctx, &task(5, 3, 2), 3).unwrap();
        assert_eq!(p.pass_rows, vec![8, 11, 14, 17]);
        assert_eq!(tape.shape(p.h_final), vec![1, 17, 3, 16]);
    }
}
