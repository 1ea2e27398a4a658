//! Losses, optimizer, learning-rate schedule, early stopping, and the
//! epoch loop.

mod adam;
mod controller;
mod loss;
mod trainer;

pub use adam::{adam_step, OptimizerState};
pub use controller::{early_stop_check, reduce_on_plateau_schedule, Action, TrainController};
pub use loss::{bce_loss, cce_loss};
pub use trainer::{evaluate, predict, train_model, TrainItem, TrainOutcome};

use crate::model::Task;
use crate::{CoreError, Result};

/// Loss selector; must agree with the task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Cce,
}

impl LossKind {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Detection => LossKind::Bce,
            Task::Severity => LossKind::Cce,
        }
    }
}

/// Training hyperparameters. `paper` pins the published constants:
/// Adam at 1e-4, plateau patience 5, early-stop patience 3.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn paper(task: Task, seed: u64) -> Self {
        Self {
            lr: 1e-4,
            plateau_patience: 5,
            plateau_factor: 0.5,
            early_stop_patience: 3,
            min_delta: 1e-4,
            max_epochs: 100,
            batch_size: 32,
            seed,
            loss: LossKind::for_task(task),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(CoreError::InvalidArgument("patience must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.plateau_factor) || self.plateau_factor == 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "plateau factor {} outside (0, 1)",
                self.plateau_factor
            )));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidArgument(
                "max_epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn is_paper_faithful(&self) -> bool {
        self.lr == 1e-4 && self.plateau_patience == 5 && self.early_stop_patience == 3
    }
}

/// One epoch's record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Per-epoch training history.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: TrainLogRow) {
        if let Some(last) = self.rows.last() {
            assert!(row.epoch > last.epoch, "epochs must increase");
            assert!(row.lr <= last.lr, "lr must be non-increasing");
        }
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[TrainLogRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc,lr,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6e},{:.3}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr, r.seconds
            ));
        }
        out
    }
}
