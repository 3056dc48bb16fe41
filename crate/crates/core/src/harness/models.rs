use super::config::ModelSection;
use crate::autodiff::{ParamStore, Var};
use crate::cot::RecurrenceConfig;
use crate::data::{accuracy, auc, binary_scores, neg_rmse, MethodId, MetricName};
use crate::error::{Error, Result};
use crate::nn::{Ctx, StackKind};
use crate::pfn::PfnModel;
use crate::scalar::Scalar;
use crate::tabular::{TabularModel, TabularTask, TaskKind};
use crate::train::{Score, Trainable};
use crate::ts::{evaluate_windows, Forecaster, Window};

#[derive(Clone, Debug)]
pub enum Examples {
    Windows(Vec<Window>),
    Tasks(Vec<TabularTask>),
}

impl Examples {
    pub fn len(&self) -> usize {
        match self {
            Examples::Windows(w) => w.len(),
            Examples::Tasks(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub enum AnyModel<T> {
    Ts(Forecaster<T>),
    Tabular(TabularModel<T>),
    Pfn(PfnModel<T>),
}

/// Model configuration for one compared method, derived from the base
/// configuration (whose stack must be plain).
pub fn method_model(base: &ModelSection, method: MethodId) -> Result<ModelSection> {
    let layers = match base {
        ModelSection::Ts(c) => c.stack.kind,
        ModelSection::Tabular(c) => c.icl.kind,
        ModelSection::Pfn(c) => c.stack,
    };
    let StackKind::Plain { layers } = layers else {
        return Err(Error::config("model.stack.kind", "sweeps need a plain base stack"));
    };
    let (kind, r_train, r_eval) = match method {
        MethodId::Baseline => (StackKind::Plain { layers }, 0, 0),
        MethodId::Deeper => (StackKind::Deeper { layers }, 0, 0),
        MethodId::Looped { blocks, loops } => (StackKind::Looped { blocks, loops }, 0, 0),
        MethodId::Cot { r_train, r_eval } => (StackKind::Plain { layers }, r_train, r_eval),
    };
    let mut out = base.clone();
    let rec = |old: &RecurrenceConfig| RecurrenceConfig {
        r_train,
        r_eval,
        max_step_embeddings: if r_train > 0 { r_train } else { old.max_step_embeddings },
    };
    match &mut out {
        ModelSection::Ts(c) => {
            c.stack.kind = kind;
            c.recurrence = rec(&c.recurrence);
        }
        ModelSection::Tabular(c) => {
            c.icl.kind = kind;
            c.recurrence = rec(&c.recurrence);
        }
        ModelSection::Pfn(c) => {
            c.stack = kind;
            c.r_train = r_train;
            c.r_eval = Some(r_eval);
        }
    }
    out.validate()?;
    Ok(out)
}

impl<T: Scalar> AnyModel<T> {
    pub fn new(cfg: &ModelSection, seed: u64) -> Result<Self> {
        Ok(match cfg {
            ModelSection::Ts(c) => AnyModel::Ts(Forecaster::new(c.clone(), seed)?),
            ModelSection::Tabular(c) => AnyModel::Tabular(TabularModel::new(c.clone(), seed)?),
            ModelSection::Pfn(c) => AnyModel::Pfn(PfnModel::new(c.clone(), seed)?),
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            AnyModel::Ts(m) => &m.params,
            AnyModel::Tabular(m) => &m.params,
            AnyModel::Pfn(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            AnyModel::Ts(m) => &mut m.params,
            AnyModel::Tabular(m) => &mut m.params,
            AnyModel::Pfn(m) => &mut m.params,
        }
    }

    /// Mean loss of one example.
    fn example_loss(&self, ctx: &Ctx<'_, T>, ex: ExampleRef<'_>, passes: usize) -> Result<Var> {
        match (self, ex) {
            (AnyModel::Ts(m), ExampleRef::Window(w)) => m.window_loss(ctx, w, passes),
            (AnyModel::Tabular(m), ExampleRef::Task(t)) => m.task_loss(ctx, t, passes),
            (AnyModel::Pfn(m), ExampleRef::Task(t)) => m.task_loss(ctx, t, passes),
            _ => Err(Error::Input("examples do not match the model family".into())),
        }
    }

    fn mean_loss(&self, examples: &[ExampleRef<'_>], passes: usize) -> Result<f64> {
        let mut total = 0.0;
        for &ex in examples {
            let tape = crate::autodiff::Tape::new();
            let ctx = Ctx::eval(&tape, self.params());
            let loss = self.example_loss(&ctx, ex, passes)?;
            total += tape.value(loss).item().to_f64c();
        }
        Ok(total / examples.len() as f64)
    }

    fn classification_outputs(&self, tasks: &[&TabularTask], passes: usize) -> Result<(Vec<crate::autodiff::Tensor<f64>>, Vec<f64>)> {
        let mut probs = Vec::with_capacity(tasks.len());
        let mut targets = Vec::new();
        for t in tasks {
            probs.push(match self {
                AnyModel::Tabular(m) => m.predict(t, passes)?,
                AnyModel::Pfn(m) => m.predict(t, passes)?,
                AnyModel::Ts(_) => return Err(Error::Input("tabular tasks given to a forecaster".into())),
            });
            targets.extend_from_slice(&t.y_query);
        }
        Ok((probs, targets))
    }

    /// Selection score used for early stopping: validation loss for
    /// forecasting and regression, accuracy for classification.
    pub fn selection_score(&self, val: &Examples, passes: usize) -> Result<Score> {
        self.selection_score_of(&ExampleRef::all(val), passes)
    }

    fn selection_score_of(&self, val: &[ExampleRef<'_>], passes: usize) -> Result<Score> {
        let classification = match self {
            AnyModel::Tabular(m) => matches!(m.cfg.task, TaskKind::Classification { .. }),
            AnyModel::Pfn(_) => true,
            AnyModel::Ts(_) => false,
        };
        if classification {
            let tasks = val
                .iter()
                .map(|e| match e {
                    ExampleRef::Task(t) => Ok(*t),
                    ExampleRef::Window(_) => Err(Error::Input("windows given to a tabular model".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Score::higher(self.pooled_accuracy(&tasks, passes)?))
        } else {
            Ok(Score::lower(self.mean_loss(val, passes)?))
        }
    }

    fn pooled_accuracy(&self, tasks: &[&TabularTask], passes: usize) -> Result<f64> {
        let (probs, targets) = self.classification_outputs(tasks, passes)?;
        let c = probs[0].shape()[1];
        let flat: Vec<f64> = probs.iter().flat_map(|p| p.data().iter().copied()).collect();
        accuracy(&crate::autodiff::Tensor::new(vec![targets.len(), c], flat)?, &targets)
    }

    /// Reported metrics on a split.
    pub fn metrics(&self, examples: &Examples, passes: usize) -> Result<Vec<(MetricName, f64)>> {
        match (self, examples) {
            (AnyModel::Ts(m), Examples::Windows(w)) => {
                let s = evaluate_windows(m, w, passes)?;
                Ok(vec![(MetricName::MseMedian, s.mse_median), (MetricName::Pinball, s.pinball)])
            }
            (AnyModel::Tabular(m), Examples::Tasks(tasks)) if m.cfg.task == TaskKind::Regression => {
                let mut pred = Vec::new();
                let mut target = Vec::new();
                for t in tasks {
                    pred.extend_from_slice(m.predict(t, passes)?.data());
                    target.extend_from_slice(&t.y_query);
                }
                Ok(vec![(MetricName::NegRmse, neg_rmse(&pred, &target)?)])
            }
            (AnyModel::Tabular(_) | AnyModel::Pfn(_), Examples::Tasks(tasks)) => {
                let tasks: Vec<&TabularTask> = tasks.iter().collect();
                let (probs, targets) = self.classification_outputs(&tasks, passes)?;
                let c = probs[0].shape()[1];
                let flat: Vec<f64> = probs.iter().flat_map(|p| p.data().iter().copied()).collect();
                let all = crate::autodiff::Tensor::new(vec![targets.len(), c], flat)?;
                let mut out = vec![(MetricName::Accuracy, accuracy(&all, &targets)?)];
                if c == 2 {
                    let positive: Vec<bool> = targets.iter().map(|&y| y == 1.0).collect();
                    out.push((MetricName::Auc, auc(&binary_scores(&all)?, &positive)?));
                }
                Ok(out)
            }
            _ => Err(Error::Input("examples do not match the model family".into())),
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) enum ExampleRef<'a> {
    Window(&'a Window),
    Task(&'a TabularTask),
}

impl<'a> ExampleRef<'a> {
    pub(crate) fn all(examples: &'a Examples) -> Vec<ExampleRef<'a>> {
        match examples {
            Examples::Windows(w) => w.iter().map(ExampleRef::Window).collect(),
            Examples::Tasks(t) => t.iter().map(ExampleRef::Task).collect(),
        }
    }
}

/// Adapter handing an [`AnyModel`] to `fit`.
pub(crate) struct Fitting<'m, 'e, T> {
    pub model: &'m mut AnyModel<T>,
    pub examples: std::marker::PhantomData<ExampleRef<'e>>,
    pub r_train: usize,
    pub r_eval: usize,
}

impl<'e, T: Scalar> Trainable<T> for Fitting<'_, 'e, T> {
    type Example = ExampleRef<'e>;

    fn params(&self) -> &ParamStore<T> {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.model.params_mut()
    }

    fn batch_loss(&self, ctx: &Ctx<'_, T>, batch: &[&ExampleRef<'e>]) -> Result<Var> {
        let t = ctx.tape;
        let mut total: Option<Var> = None;
        for ex in batch {
            let l = self.model.example_loss(ctx, **ex, self.r_train)?;
            total = Some(match total {
                None => l,
                Some(acc) => t.add(acc, l)?,
            });
        }
        let total = total.ok_or_else(|| Error::Input("empty batch".into()))?;
        t.scale(total, T::from_f64c(1.0 / batch.len() as f64))
    }

    fn validate(&self, val: &[ExampleRef<'e>]) -> Result<Score> {
        self.model.selection_score_of(val, self.r_eval)
    }
}
