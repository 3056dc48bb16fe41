//! End-to-end parameter gradients of the three model families at R = 1.

#[macro_use]
mod common;

use common::*;
use latentloop::pfn::PfnModel;
use latentloop::tabular::{TabularModel, TaskKind};
use latentloop::ts::Forecaster;

const TOL: f64 = 1e-4;

pub fn forecaster_with_one_recurrence() {
    let cfg = ts_config(1);
    let w = window(3, &cfg, 2);
    let m = Forecaster::<f64>::new(cfg, 7).unwrap();
    let err = param_grad_check(&m.params, 1e-5, |ctx| m.window_loss(ctx, &w, 1)).unwrap();
    assert!(err < TOL, "max relative error {err:e}");
}

pub fn tabular_classifier_with_one_recurrence() {
    let kind = TaskKind::Classification { n_classes: 3 };
    let task = class_task(5, 5, 2, 3, 3);
    let m = TabularModel::<f64>::new(tab_config(kind, 1), 11).unwrap();
    let err = param_grad_check(&m.params, 1e-5, |ctx| m.task_loss(ctx, &task, 1)).unwrap();
    assert!(err < TOL, "max relative error {err:e}");
}

pub fn tabular_regressor_with_one_recurrence() {
    let mut task = class_task(6, 5, 2, 3, 3);
    task.kind = TaskKind::Regression;
    task.y_context = vec![0.3, -1.2, 2.0, 0.7, 1.1];
    task.y_query = vec![0.1, -0.4];
    let m = TabularModel::<f64>::new(tab_config(TaskKind::Regression, 1), 12).unwrap();
    let err = param_grad_check(&m.params, 1e-5, |ctx| m.task_loss(ctx, &task, 1)).unwrap();
    assert!(err < TOL, "max relative error {err:e}");
}

pub fn pfn_with_one_recurrence() {
    let task = class_task(9, 4, 2, 2, 3);
    let m = PfnModel::<f64>::new(pfn_config(1), 13).unwrap();
    let err = param_grad_check(&m.params, 1e-5, |ctx| m.task_loss(ctx, &task, 1)).unwrap();
    assert!(err < TOL, "max relative error {err:e}");
}

tests!(forecaster_with_one_recurrence, tabular_classifier_with_one_recurrence, tabular_regressor_with_one_recurrence, pfn_with_one_recurrence);
