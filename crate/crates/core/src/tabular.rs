//! Three-stage tabular in-context learner.
//!
//! Stage 1 attends down each column, stage 2 attends across the cells of a
//! row and mean-pools them into one embedding per row, stage 3 attends
//! across rows. Latent recurrence runs only in stage 3; stages 1-2 are
//! computed once per task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Init, ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::cot::{recur, FeedbackMlp, RecurrenceConfig, RecurrenceState};
use crate::error::{Error, Result};
use crate::nn::{AttentionMask, Block, BlockConfig, Ctx, GroupRule, LayerNorm, Linear, Stack, StackConfig, TokenGroup};
use crate::scalar::Scalar;

/// Column, label and no-label embeddings start at unit scale so that
/// column identity is visible to the cell stages from the first step.
pub const TABLE_EMBED_INIT: Init = Init::Normal { mean: 0.0, std: 1.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { n_classes: usize },
    Regression,
}

impl TaskKind {
    fn head_width(&self) -> usize {
        match *self {
            TaskKind::Classification { n_classes } => n_classes,
            TaskKind::Regression => 1,
        }
    }
}

/// Context rows with labels plus unlabeled query rows. Labels are class ids
/// (as reals) or regression targets.
#[derive(Clone, Debug)]
pub struct TabularTask {
    pub x_context: Tensor<f64>,
    pub y_context: Vec<f64>,
    pub x_query: Tensor<f64>,
    /// Ground truth for the query rows (used for losses and metrics).
    pub y_query: Vec<f64>,
    pub kind: TaskKind,
}

impl TabularTask {
    pub fn n_context(&self) -> usize {
        self.x_context.shape()[0]
    }

    pub fn n_query(&self) -> usize {
        self.x_query.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.x_context.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_context.rank() != 2 || self.x_query.rank() != 2 || self.x_context.shape()[1] != self.x_query.shape()[1] {
            return Err(Error::Input(format!(
                "feature matrices {:?} and {:?} disagree",
                self.x_context.shape(),
                self.x_query.shape()
            )));
        }
        if self.y_context.len() != self.n_context() {
            return Err(Error::Input("context labels do not match context rows".into()));
        }
        if !self.y_query.is_empty() && self.y_query.len() != self.n_query() {
            return Err(Error::Input("query labels do not match query rows".into()));
        }
        if let TaskKind::Classification { n_classes } = self.kind {
            let bad = self
                .y_context
                .iter()
                .chain(&self.y_query)
                .any(|&y| y < 0.0 || y.fract() != 0.0 || y as usize >= n_classes);
            if bad {
                return Err(Error::Input(format!("class ids must lie in [0, {n_classes})")));
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> Vec<TokenGroup> {
        let mut g = vec![TokenGroup::Context; self.n_context()];
        g.extend(std::iter::repeat_n(TokenGroup::Query, self.n_query()));
        g
    }

    /// Column-wise (mean, std) over the context rows.
    pub fn context_feature_stats(&self) -> Vec<(f64, f64)> {
        column_stats(&self.x_context)
    }
}

pub(crate) fn column_stats(x: &Tensor<f64>) -> Vec<(f64, f64)> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    (0..d)
        .map(|j| {
            let mean = (0..n).map(|i| x.at(&[i, j])).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.at(&[i, j]) - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt().max(1e-6))
        })
        .collect()
}

fn target_stats(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularConfig {
    pub task: TaskKind,
    pub max_features: usize,
    /// Block shape of the column and row stages (one block each).
    pub cell_block: BlockConfig,
    /// The in-context stage; recurrence applies here.
    pub icl: StackConfig,
    pub feedback_hidden: usize,
    pub recurrence: RecurrenceConfig,
}

impl TabularConfig {
    pub fn validate(&self) -> Result<()> {
        self.cell_block.validate()?;
        self.icl.validate()?;
        self.recurrence.validate()?;
        if self.cell_block.model_dim != self.icl.block.model_dim {
            return Err(Error::config("model.icl.block.model_dim", "must equal the cell block width"));
        }
        if self.max_features == 0 {
            return Err(Error::config("model.max_features", "must be positive"));
        }
        if let TaskKind::Classification { n_classes } = self.task {
            if n_classes < 2 {
                return Err(Error::config("model.task.n_classes", "need at least two classes"));
            }
        }
        Ok(())
    }
}

/// How stage 1-2 outputs are supplied to the recurrent passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageCache {
    /// Computed once and reused by every pass.
    Reuse,
    /// Recomputed for every pass (reference path for cache checks).
    Recompute,
}

pub struct TabularPass {
    /// Logits `[n_q, classes]` or standardized regression outputs `[n_q, 1]`.
    pub output: Var,
    pub state: RecurrenceState,
    pub target_stats: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct TabularModel<T> {
    pub cfg: TabularConfig,
    pub params: ParamStore<T>,
    cell_embed: Linear,
    column_embedding: ParamId,
    label_embed: LabelEmbed,
    no_label: ParamId,
    pub col_stage: Block,
    pub row_stage: Block,
    pub icl: Stack,
    pub feedback: FeedbackMlp,
    norm: LayerNorm,
    head: Linear,
}

#[derive(Clone, Debug)]
enum LabelEmbed {
    Table(ParamId),
    Linear(Linear),
}

impl<T: Scalar> TabularModel<T> {
    pub fn new(cfg: TabularConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let e = cfg.cell_block.model_dim;
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let cell_embed = Linear::new(&mut pb.sub("cell_embed"), 1, e)?;
        let column_embedding = pb.param("column_embedding", &[cfg.max_features, e], TABLE_EMBED_INIT)?;
        let label_embed = match cfg.task {
            TaskKind::Classification { n_classes } => LabelEmbed::Table(pb.param("label_embedding", &[n_classes, e], TABLE_EMBED_INIT)?),
            TaskKind::Regression => LabelEmbed::Linear(Linear::new(&mut pb.sub("label_embed"), 1, e)?),
        };
        let no_label = pb.param("no_label", &[e], TABLE_EMBED_INIT)?;
        let mut col_stage = Block::new(&mut pb.sub("col_stage"), &cfg.cell_block)?;
        col_stage.attn.tag = "column";
        let mut row_stage = Block::new(&mut pb.sub("row_stage"), &cfg.cell_block)?;
        row_stage.attn.tag = "cell";
        let mut icl = Stack::new(&mut pb.sub("icl"), &cfg.icl)?;
        for b in &mut icl.blocks {
            b.attn.tag = "icl";
        }
        let feedback = FeedbackMlp::new(&mut pb.sub("feedback"), e, cfg.feedback_hidden, cfg.recurrence.max_step_embeddings)?;
        let norm = LayerNorm::new(&mut pb.sub("norm"), e)?;
        let head = Linear::new(&mut pb.sub("head"), e, cfg.task.head_width())?;
        Ok(TabularModel {
            cfg,
            params,
            cell_embed,
            column_embedding,
            label_embed,
            no_label,
            col_stage,
            row_stage,
            icl,
            feedback,
            norm,
            head,
        })
    }

    fn check_task(&self, task: &TabularTask) -> Result<()> {
        task.validate()?;
        if task.kind != self.cfg.task {
            return Err(Error::Input("task kind differs from the model configuration".into()));
        }
        if task.n_features() > self.cfg.max_features {
            return Err(Error::config(
                "model.max_features",
                format!("task has {} features, model supports {}", task.n_features(), self.cfg.max_features),
            ));
        }
        Ok(())
    }

    /// Cell tokens `[n_c + n_q, d + 1, E]`; the last column is the label.
    pub fn embed_table(&self, ctx: &Ctx<'_, T>, task: &TabularTask) -> Result<Var> {
        self.check_task(task)?;
        let t = ctx.tape;
        let (nc, nq, d) = (task.n_context(), task.n_query(), task.n_features());
        let n = nc + nq;
        let e = self.cfg.cell_block.model_dim;
        let stats = task.context_feature_stats();
        let cells = Tensor::from_fn(&[n, d, 1], |i| {
            let (r, j) = (i / d, i % d);
            let x = if r < nc { task.x_context.at(&[r, j]) } else { task.x_query.at(&[r - nc, j]) };
            T::from_f64c((x - stats[j].0) / stats[j].1)
        });
        let feats = self.cell_embed.forward(ctx, t.constant(cells))?;
        let cols = t.narrow(ctx.p(self.column_embedding), 0, 0, d)?;
        let feats = t.add_broadcast(feats, cols)?;

        let ctx_labels = match &self.label_embed {
            LabelEmbed::Table(table) => {
                let ids: Vec<usize> = task.y_context.iter().map(|&y| y as usize).collect();
                t.index_select(ctx.p(*table), 0, &ids)?
            }
            LabelEmbed::Linear(lin) => {
                let (m, s) = target_stats(&task.y_context);
                let y = Tensor::from_fn(&[nc, 1], |i| T::from_f64c((task.y_context[i] - m) / s));
                lin.forward(ctx, t.constant(y))?
            }
        };
        let query_labels = t.broadcast_to(ctx.p(self.no_label), &[nq, e])?;
        let labels = t.concat(&[ctx_labels, query_labels], 0)?;
        let labels = t.reshape(labels, &[n, 1, e])?;
        t.concat(&[feats, labels], 1)
    }

    /// Stages 1-2: row embeddings `[1, n_c + n_q, E]`.
    pub fn col_row_pass(&self, ctx: &Ctx<'_, T>, task: &TabularTask) -> Result<Var> {
        let t = ctx.tape;
        let cells = self.embed_table(ctx, task)?;
        let shape = t.shape(cells);
        let (n, e) = (shape[0], shape[2]);
        // Column stage: every row sees the context rows; query rows also see themselves.
        let col_mask = AttentionMask::context_plus_self(&task.groups())?;
        let by_col = t.permute(cells, &[1, 0, 2])?;
        let by_col = self.col_stage.forward(ctx, by_col, Some(&col_mask))?;
        let cells = t.permute(by_col, &[1, 0, 2])?;
        let cells = self.row_stage.forward(ctx, cells, None)?;
        let rows = t.mean_axis(cells, 1)?;
        t.reshape(rows, &[1, n, e])
    }

    /// Stage 3 with `passes` recurrences on precomputed row embeddings.
    pub fn icl_predict(&self, ctx: &Ctx<'_, T>, task: &TabularTask, passes: usize, cache: StageCache) -> Result<TabularPass> {
        let t = ctx.tape;
        let groups = task.groups();
        let (nc, nq) = (task.n_context(), task.n_query());
        let query_index: Vec<usize> = (nc..nc + nq).collect();
        let cached = self.col_row_pass(ctx, task)?;
        let mut base = || match cache {
            StageCache::Reuse => Ok(cached),
            StageCache::Recompute => self.col_row_pass(ctx, task),
        };
        let (hidden, state) = recur(
            ctx,
            &mut base,
            &groups,
            &query_index,
            &self.feedback,
            passes,
            &mut |seq, g| {
                let mask = AttentionMask::from_groups(g, &GroupRule::IN_CONTEXT)?;
                self.icl.forward(ctx, seq, Some(&mask))
            },
        )?;
        let h_q = t.index_select(hidden, 1, &query_index)?;
        let h_q = t.reshape(h_q, &[nq, self.cfg.cell_block.model_dim])?;
        let output = self.head.forward(ctx, self.norm.forward(ctx, h_q)?)?;
        let target_stats = match self.cfg.task {
            TaskKind::Regression => target_stats(&task.y_context),
            TaskKind::Classification { .. } => (0.0, 1.0),
        };
        Ok(TabularPass { output, state, target_stats })
    }

    /// Training loss for one task (labels of the query rows required).
    pub fn task_loss(&self, ctx: &Ctx<'_, T>, task: &TabularTask, passes: usize) -> Result<Var> {
        let pass = self.icl_predict(ctx, task, passes, StageCache::Reuse)?;
        let (m, s) = pass.target_stats;
        let targets: Vec<f64> = match task.kind {
            TaskKind::Regression => task.y_query.iter().map(|y| (y - m) / s).collect(),
            TaskKind::Classification { .. } => task.y_query.clone(),
        };
        tabular_loss(ctx.tape, pass.output, &targets, task.kind)
    }

    /// Class probabilities `[n_q, classes]`, or regression predictions
    /// `[n_q, 1]` on the original scale.
    pub fn predict(&self, task: &TabularTask, passes: usize) -> Result<Tensor<f64>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        let pass = self.icl_predict(&ctx, task, passes, StageCache::Reuse)?;
        let out = match task.kind {
            TaskKind::Classification { .. } => tape.tensor(tape.softmax(pass.output)?).cast::<f64>(),
            TaskKind::Regression => {
                let (m, s) = pass.target_stats;
                tape.tensor(pass.output).cast::<f64>().map(|v| v * s + m)
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "icl_predict" });
        }
        Ok(out)
    }
}

/// Mean cross-entropy (classification) or RMSE (regression).
///
/// The RMSE is returned as the plain mean squared error when that is
/// exactly zero, which pins the gradient at the optimum to zero.
pub fn tabular_loss<T: Scalar>(tape: &Tape<T>, pred: Var, targets: &[f64], kind: TaskKind) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Input("empty query set".into()));
    }
    match kind {
        TaskKind::Classification { n_classes } => {
            let shape = tape.shape(pred);
            if shape != [targets.len(), n_classes] {
                return Err(Error::shape("cross_entropy", format!("logits {shape:?} vs {} targets", targets.len())));
            }
            let idx: Vec<usize> = targets.iter().map(|&y| y as usize).collect();
            let logp = tape.log_softmax(pred)?;
            let picked = tape.gather_last(logp, &idx)?;
            tape.neg(tape.mean(picked)?)
        }
        TaskKind::Regression => {
            let n = tape.value(pred).numel();
            if n != targets.len() {
                return Err(Error::shape("rmse", format!("{n} predictions vs {} targets", targets.len())));
            }
            let p = tape.reshape(pred, &[n])?;
            let y = tape.constant(Tensor::from_fn(&[n], |i| T::from_f64c(targets[i])));
            let mse = tape.mean(tape.square(tape.sub(p, y)?)?)?;
            if tape.value(mse).item() == T::zero() {
                Ok(mse)
            } else {
                tape.sqrt(mse)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::StackKind;

    fn tiny(kind: TaskKind) -> TabularConfig {
        let block = BlockConfig { model_dim: 16, n_heads: 2, ffn_dim: 32, dropout_p: 0.0 };
        TabularConfig {
            task: kind,
            max_features: 8,
            cell_block: block,
            icl: StackConfig { kind: StackKind::Plain { layers: 2 }, block },
            feedback_hidden: 16,
            recurrence: RecurrenceConfig::new(1, 1),
        }
    }

    fn task(nc: usize, nq: usize, d: usize, kind: TaskKind) -> TabularTask {
        TabularTask {
            x_context: Tensor::from_fn(&[nc, d], |i| ((i * 7 % 11) as f64) * 0.3 - 1.0),
            y_context: (0..nc).map(|i| (i % 2) as f64).collect(),
            x_query: Tensor::from_fn(&[nq, d], |i| ((i * 5 % 7) as f64) * 0.2),
            y_query: (0..nq).map(|i| (i % 2) as f64).collect(),
            kind,
        }
    }

    #[test]
    fn embed_shape_and_no_label_token() {
        let kind = TaskKind::Classification { n_classes: 2 };
        let m = TabularModel::<f64>::new(tiny(kind), 0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        let mut tk = task(8, 2, 3, kind);
        let cells = tape.tensor(m.embed_table(&ctx, &tk).unwrap());
        assert_eq!(cells.shape(), &[10, 4, 16]);
        let no_label = m.params.value(m.no_label).clone();
        for q in 8..10 {
            let cell: Vec<f64> = (0..16).map(|k| cells.at(&[q, 3, k])).collect();
            assert_eq!(cell, no_label.data());
        }
        // independent of X_q
        tk.x_query = tk.x_query.map(|v| v * 3.0 + 1.0);
        let tape2 = Tape::new();
        let ctx2 = Ctx::eval(&tape2, &m.params);
        let cells2 = tape2.tensor(m.embed_table(&ctx2, &tk).unwrap());
        for k in 0..16 {
            assert_eq!(cells.at(&[9, 3, k]), cells2.at(&[9, 3, k]));
        }
    }

    #[test]
    fn too_many_features_is_config_error() {
        let kind = TaskKind::Classification { n_classes: 2 };
        let m = TabularModel::<f64>::new(tiny(kind), 0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        assert!(matches!(m.embed_table(&ctx, &task(4, 1, 9, kind)), Err(Error::Config { .. })));
    }

    #[test]
    fn uniform_logits_give_log_three() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[4, 3]));
        let l = tabular_loss(&tape, logits, &[0.0, 1.0, 2.0, 1.0], TaskKind::Classification { n_classes: 3 }).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_regression_is_zero_with_zero_gradient() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap(), true);
        let l = tabular_loss(&tape, p, &[1.0, 2.0, 3.0], TaskKind::Regression).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get_or_zero(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_query_set_is_input_error() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(&[1, 1]));
        assert!(matches!(tabular_loss(&tape, p, &[], TaskKind::Regression), Err(Error::Input(_))));
    }

    #[test]
    fn regression_predictions_are_finite() {
        let m = TabularModel::<f64>::new(tiny(TaskKind::Regression), 1).unwrap();
        let mut tk = task(6, 3, 2, TaskKind::Regression);
        tk.y_context = vec![1.0, 4.0, 2.5, -1.0, 0.0, 3.0];
        tk.y_query = vec![0.0; 3];
        let p = m.predict(&tk, 2).unwrap();
        assert_eq!(p.shape(), &[3, 1]);
        assert!(p.is_finite());
    }
}
