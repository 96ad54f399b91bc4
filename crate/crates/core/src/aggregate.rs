//! Per-model FedAvg followed by similarity-weighted, round-decayed
//! aggregation across models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clients::ClientId;
use crate::error::{Error, Result};
use crate::model::{CellId, CellParams, Model, ModelId, WeightSet};
use crate::tensor::Tensor;
use crate::transformer::{find_model, is_ancestor, matched_cell, model_similarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    /// Decay base for cross-model influence.
    pub eta: f64,
    pub enable_soft: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            eta: 0.98,
            enable_soft: true,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("eta must be in (0, 1), got {}", self.eta)));
        }
        Ok(())
    }
}

/// One participant's trained weights for a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: ClientId,
    pub weights: WeightSet,
    pub sample_count: usize,
}

pub type RoundUpdates = BTreeMap<ModelId, Vec<ClientUpdate>>;

/// Sample-count-weighted mean. Returns `None` for an empty update list.
pub fn fedavg(updates: &[(&WeightSet, usize)]) -> Result<Option<WeightSet>> {
    let Some((first, _)) = updates.first() else {
        return Ok(None);
    };
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Config("fedavg needs a positive sample count".into()));
    }
    let mut acc = WeightSet {
        model_id: first.model_id,
        cells: first
            .cells
            .iter()
            .map(|(id, p)| {
                let mut z = p.clone();
                z.weight.scale(0.0);
                z.bias.scale(0.0);
                (*id, z)
            })
            .collect(),
    };
    for (w, n) in updates {
        acc.add_scaled(w, *n as f64 / total as f64)?;
    }
    Ok(Some(acc))
}

/// Leading sub-tensors of `source` (a model in `models`) shaped to the
/// lineage-matched cells of `target`. Target cells with no matching source
/// cell, such as inserted identities, are left out of the result.
pub fn crop_weights(models: &[Model], source: &WeightSet, target: &Model) -> Result<WeightSet> {
    let mut out = WeightSet {
        model_id: target.id,
        cells: BTreeMap::new(),
    };
    for (tcell, scell) in cell_matches(models, source.model_id, target) {
        let cell = target.cell(tcell).ok_or(Error::UnknownCell(tcell))?;
        let p = source.get(scell)?;
        out.cells.insert(
            tcell,
            CellParams {
                weight: p.weight.leading_block(cell.out_dim, cell.in_dim)?,
                bias: p.bias.leading_block(cell.out_dim, 1)?,
            },
        );
    }
    Ok(out)
}

/// Pairs (target cell, source cell) linked by lineage in either direction.
fn cell_matches(models: &[Model], source: ModelId, target: &Model) -> Vec<(CellId, CellId)> {
    if source == target.id {
        return target.cells.iter().map(|c| (c.id, c.id)).collect();
    }
    if is_ancestor(models, source, target.id) {
        return target
            .cells
            .iter()
            .filter_map(|c| matched_cell(models, target, c.id, source).map(|s| (c.id, s)))
            .collect();
    }
    let Some(src_model) = find_model(models, source) else {
        return Vec::new();
    };
    if is_ancestor(models, target.id, source) {
        return src_model
            .cells
            .iter()
            .filter_map(|c| matched_cell(models, src_model, c.id, target.id).map(|t| (t, c.id)))
            .collect();
    }
    Vec::new()
}

/// Adds `coef * source` into the overlapping leading block of `num`, and
/// `coef` into the same entries of `den`. Works for rank-1 and rank-2 tensors.
fn accumulate(num: &mut Tensor, den: &mut Tensor, source: &Tensor, coef: f64) {
    let rows = num.rows().min(source.rows());
    let cols = num.cols().min(source.cols());
    let (ncols, scols) = (num.cols(), source.cols());
    let sd = source.data();
    let numd = num.data_mut();
    for r in 0..rows {
        for c in 0..cols {
            numd[r * ncols + c] += coef * sd[r * scols + c];
        }
    }
    let dd = den.data_mut();
    for r in 0..rows {
        for c in 0..cols {
            dd[r * ncols + c] += coef;
        }
    }
}

/// Similarity-weighted aggregation of every model with the models created
/// before it.
///
/// For model `j` and each entry of its parameters,
/// `w_j <- sum_i c_ij * w_i / sum_i c_ij` over `i <= j` with
/// `c_ij = eta^([i != j] * round) * sim(M_i, M_j)`. Smaller sources are
/// matched cell-by-cell through lineage and cover only the leading block they
/// overlap; entries no source covers keep `w_j`. Larger models never
/// contribute to smaller ones.
pub fn soft_aggregate(
    models: &[Model],
    weights: &BTreeMap<ModelId, WeightSet>,
    round: usize,
    config: &AggregationConfig,
) -> Result<BTreeMap<ModelId, WeightSet>> {
    let decay = config.eta.powf(round as f64);
    let mut out = BTreeMap::new();
    for target in models {
        let own = weights
            .get(&target.id)
            .ok_or_else(|| Error::Config(format!("no weights for model {}", target.id)))?;
        let sources: Vec<(&WeightSet, f64)> = models
            .iter()
            .filter(|m| m.id < target.id)
            .filter_map(|m| {
                let coef = decay * model_similarity(models, m.id, target.id);
                (coef > 0.0).then(|| weights.get(&m.id).map(|w| (w, coef)))?
            })
            .collect();
        if sources.is_empty() {
            out.insert(target.id, own.clone());
            continue;
        }
        let mut result = own.clone();
        for cell in &target.cells {
            let mine = own.get(cell.id)?;
            let mut wn = mine.weight.clone();
            let mut bn = mine.bias.clone();
            let mut wd = Tensor::new(mine.weight.shape().to_vec(), vec![1.0; mine.weight.len()])?;
            let mut bd = Tensor::new(mine.bias.shape().to_vec(), vec![1.0; mine.bias.len()])?;
            let mut touched = false;
            for (src, coef) in &sources {
                let Some(scell) = matched_cell(models, target, cell.id, src.model_id) else {
                    continue;
                };
                let sp = src.get(scell)?;
                accumulate(&mut wn, &mut wd, &sp.weight, *coef);
                accumulate(&mut bn, &mut bd, &sp.bias, *coef);
                touched = true;
            }
            if !touched {
                continue;
            }
            let p = result.get_mut(cell.id)?;
            for ((o, n), d) in p.weight.data_mut().iter_mut().zip(wn.data()).zip(wd.data()) {
                *o = n / d;
            }
            for ((o, n), d) in p.bias.data_mut().iter_mut().zip(bn.data()).zip(bd.data()) {
                *o = n / d;
            }
        }
        out.insert(target.id, result);
    }
    Ok(out)
}

/// FedAvg per model (models without participants keep `previous`), then
/// soft aggregation across models when enabled.
pub fn update_weights(
    models: &[Model],
    previous: &BTreeMap<ModelId, WeightSet>,
    updates: &RoundUpdates,
    round: usize,
    config: &AggregationConfig,
) -> Result<BTreeMap<ModelId, WeightSet>> {
    let mut averaged = BTreeMap::new();
    for model in models {
        let list: Vec<(&WeightSet, usize)> = updates
            .get(&model.id)
            .map(|u| u.iter().map(|c| (&c.weights, c.sample_count)).collect())
            .unwrap_or_default();
        let w = match fedavg(&list)? {
            Some(w) => w,
            None => previous
                .get(&model.id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no weights for model {}", model.id)))?,
        };
        averaged.insert(model.id, w);
    }
    if config.enable_soft {
        soft_aggregate(models, &averaged, round, config)
    } else {
        Ok(averaged)
    }
}
