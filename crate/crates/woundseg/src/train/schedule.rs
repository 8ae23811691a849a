//! Learning-rate plateau scheduling and early stopping. Both machines
//! watch the same validation metric in max mode: an observation counts
//! as improvement only when it exceeds the best seen by more than the
//! threshold, and the first observation always improves.

use crate::{Error, Result};

/// Multiplies the learning rate by `factor` once the metric has gone
/// `patience` consecutive observations without improvement. One
/// plateau triggers one reduction however long it lasts: the stale
/// counter resets only on improvement, so the scheduler re-arms only
/// after the metric moves again.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    threshold: f64,
    lr: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, threshold: f64) -> Result<Self> {
        if !(0.0 < factor && factor < 1.0) {
            return Err(Error::argument("plateau", format!("factor {factor} outside (0,1)")));
        }
        if patience == 0 {
            return Err(Error::argument("plateau", "patience must be positive"));
        }
        if !(initial_lr > 0.0) || !(threshold >= 0.0) {
            return Err(Error::argument("plateau", "lr must be positive, threshold nonnegative"));
        }
        Ok(PlateauScheduler { factor, patience, threshold, lr: initial_lr, best: None, stale: 0 })
    }

    /// Feeds one validation metric; returns the learning rate in force
    /// afterwards.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if self.best.map_or(true, |b| metric > b + self.threshold) {
            self.best = Some(metric);
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale == self.patience {
                self.lr *= self.factor;
            }
        }
        self.lr
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }
}

/// Outcome of feeding one metric to [`EarlyStop`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopVerdict {
    pub improved: bool,
    pub stop: bool,
}

/// Signals stop once the metric has gone `patience` consecutive
/// observations without improvement.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    patience: usize,
    threshold: f64,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, threshold: f64) -> Result<Self> {
        if patience == 0 {
            return Err(Error::argument("early_stop", "patience must be positive"));
        }
        if !(threshold >= 0.0) {
            return Err(Error::argument("early_stop", "threshold must be nonnegative"));
        }
        Ok(EarlyStop { patience, threshold, best: None, stale: 0 })
    }

    pub fn observe(&mut self, metric: f64) -> StopVerdict {
        if self.best.map_or(true, |b| metric > b + self.threshold) {
            self.best = Some(metric);
            self.stale = 0;
            StopVerdict { improved: true, stop: false }
        } else {
            self.stale += 1;
            StopVerdict { improved: false, stop: self.stale >= self.patience }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}
