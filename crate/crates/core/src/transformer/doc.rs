//! Degree of convergence: the averaged slope of the recent training loss.

use crate::error::{Error, Result};

/// Mean of the last `gamma` loss slopes, each taken over `delta` rounds and
/// anchored at index `current`. Positive while the loss is still falling.
///
/// Returns `None` until `gamma + delta` losses have been observed.
pub fn compute_doc(losses: &[f64], gamma: usize, delta: usize, current: usize) -> Option<f64> {
    if gamma == 0 || delta == 0 || current >= losses.len() {
        return None;
    }
    if current + 1 < gamma + delta {
        return None;
    }
    let sum: f64 = (0..gamma)
        .map(|k| (losses[current - k - delta] - losses[current - k]) / delta as f64)
        .sum();
    Some(sum / gamma as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocTracker {
    losses: Vec<f64>,
    gamma: usize,
    delta: usize,
    beta: f64,
}

impl DocTracker {
    pub fn new(gamma: usize, delta: usize, beta: f64) -> Result<Self> {
        if gamma == 0 || delta == 0 {
            return Err(Error::Config("gamma and delta must be at least 1".into()));
        }
        if beta.is_nan() {
            return Err(Error::Config("beta must be a number".into()));
        }
        Ok(Self {
            losses: Vec::new(),
            gamma,
            delta,
            beta,
        })
    }

    pub fn record(&mut self, loss: f64) {
        self.losses.push(loss);
    }

    pub fn history(&self) -> &[f64] {
        &self.losses
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// DoC at the most recent observation.
    pub fn doc(&self) -> Option<f64> {
        let last = self.losses.len().checked_sub(1)?;
        compute_doc(&self.losses, self.gamma, self.delta, last)
    }

    pub fn reset(&mut self) {
        self.losses.clear();
    }
}
