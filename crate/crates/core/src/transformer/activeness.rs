//! Cell activeness: aggregate gradient norm relative to weight norm.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::model::{CellId, Gradients, Model, WeightSet};

#[derive(Debug, Clone, PartialEq)]
pub struct ActivenessTracker {
    window: usize,
    scores: BTreeMap<CellId, VecDeque<f64>>,
}

impl ActivenessTracker {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("activeness window must be at least 1".into()));
        }
        Ok(Self {
            window,
            scores: BTreeMap::new(),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Pushes `||grad_w|| / ||w||` for every cell (weight tensors only, biases
    /// excluded) computed from one round's aggregate gradient.
    pub fn record(&mut self, grads: &Gradients, weights: &WeightSet) -> Result<()> {
        for (id, p) in &weights.cells {
            let g = grads.get(*id)?;
            let wn = p.weight.norm();
            let score = if wn > 0.0 { g.weight.norm() / wn } else { 0.0 };
            let buf = self.scores.entry(*id).or_default();
            if buf.len() == self.window {
                buf.pop_front();
            }
            buf.push_back(score);
        }
        Ok(())
    }

    /// Mean over the buffered rounds for every tracked cell.
    pub fn means(&self) -> BTreeMap<CellId, f64> {
        self.scores
            .iter()
            .filter(|(_, b)| !b.is_empty())
            .map(|(id, b)| (*id, b.iter().sum::<f64>() / b.len() as f64))
            .collect()
    }

    pub fn cell_activeness(
        &mut self,
        grads: &Gradients,
        weights: &WeightSet,
    ) -> Result<BTreeMap<CellId, f64>> {
        self.record(grads, weights)?;
        Ok(self.means())
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn reset(&mut self) {
        self.scores.clear();
    }
}

/// Cells whose activeness reaches `alpha` times the largest activeness,
/// in model order. The final cell is never returned.
///
/// If the threshold excludes every non-final cell, the most active non-final
/// cell is returned alone (ties go to the earlier cell).
pub fn select_cells(
    model: &Model,
    activeness: &BTreeMap<CellId, f64>,
    alpha: f64,
) -> Result<Vec<CellId>> {
    let candidates = &model.cells[..model.cells.len().saturating_sub(1)];
    if candidates.is_empty() {
        return Err(Error::Transform(format!(
            "model {} has no transformable cells",
            model.id
        )));
    }
    let score = |id: CellId| activeness.get(&id).copied().unwrap_or(0.0);
    let max = model
        .cells
        .iter()
        .map(|c| score(c.id))
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = alpha * max;
    let selected: Vec<CellId> = candidates
        .iter()
        .filter(|c| score(c.id) >= threshold)
        .map(|c| c.id)
        .collect();
    if !selected.is_empty() {
        return Ok(selected);
    }
    let mut best = candidates[0].id;
    for c in &candidates[1..] {
        if score(c.id) > score(best) {
            best = c.id;
        }
    }
    Ok(vec![best])
}
