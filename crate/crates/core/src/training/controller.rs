//! Plateau scheduling and early stopping.
//!
//! Both counters measure consecutive epochs without a validation-loss
//! improvement of at least `min_delta` (an improvement of exactly
//! `min_delta` counts). The integrated controller reduces the learning
//! rate after `plateau_patience` flat epochs and stops only once a
//! reduction has been tried since the last improvement and a further
//! `early_stop_patience` flat epochs have passed, so the reduced rate
//! always gets its chance before training ends.

/// Controller verdict after an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Continue,
    /// Learning rate was multiplied by the plateau factor.
    Reduced(f64),
    Stop,
}

#[derive(Debug, Clone)]
pub struct TrainController {
    plateau_patience: usize,
    plateau_factor: f64,
    early_stop_patience: usize,
    min_delta: f64,
    lr: f64,
    best: f64,
    best_epoch: usize,
    plateau_count: usize,
    stop_count: usize,
    reduced_since_improvement: bool,
}

impl TrainController {
    pub fn new(
        lr: f64,
        plateau_patience: usize,
        plateau_factor: f64,
        early_stop_patience: usize,
        min_delta: f64,
    ) -> Self {
        Self {
            plateau_patience,
            plateau_factor,
            early_stop_patience,
            min_delta,
            lr,
            best: f64::INFINITY,
            best_epoch: 0,
            plateau_count: 0,
            stop_count: 0,
            reduced_since_improvement: false,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    /// Record one epoch's validation loss. Returns whether it improved on
    /// the best so far and what to do next.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, Action) {
        let improved = self.best - val_loss >= self.min_delta || self.best.is_infinite();
        if improved {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.plateau_count = 0;
            self.stop_count = 0;
            self.reduced_since_improvement = false;
            return (true, Action::Continue);
        }
        self.plateau_count += 1;
        self.stop_count += 1;
        if self.plateau_count >= self.plateau_patience {
            self.lr *= self.plateau_factor;
            self.plateau_count = 0;
            self.stop_count = 0;
            self.reduced_since_improvement = true;
            return (false, Action::Reduced(self.lr));
        }
        if self.reduced_since_improvement && self.stop_count >= self.early_stop_patience {
            return (false, Action::Stop);
        }
        (false, Action::Continue)
    }
}

/// Standalone early-stopping rule: stop once the validation loss has gone
/// `patience` consecutive epochs without improving by at least `min_delta`.
pub fn early_stop_check(val_losses: &[f64], patience: usize, min_delta: f64) -> bool {
    let mut best = f64::INFINITY;
    let mut count = 0;
    for &loss in val_losses {
        if best - loss >= min_delta || best.is_infinite() {
            best = loss;
            count = 0;
        } else {
            count += 1;
            if count >= patience {
                return true;
            }
        }
    }
    false
}

/// Standalone plateau schedule: the learning rate in effect after each
/// epoch, given the validation-loss history.
pub fn reduce_on_plateau_schedule(
    val_losses: &[f64],
    patience: usize,
    factor: f64,
    min_delta: f64,
    initial_lr: f64,
) -> Vec<f64> {
    let mut lr = initial_lr;
    let mut best = f64::INFINITY;
    let mut count = 0;
    let mut out = Vec::with_capacity(val_losses.len());
    for &loss in val_losses {
        if best - loss >= min_delta || best.is_infinite() {
            best = loss;
            count = 0;
        } else {
            count += 1;
            if count >= patience {
                lr *= factor;
                count = 0;
            }
        }
        out.push(lr);
    }
    out
}
