//! Architectural similarity between models of one lineage.

use crate::model::{CellId, CellOrigin, Model, ModelId};

pub fn find_model(models: &[Model], id: ModelId) -> Option<&Model> {
    models.get(id).filter(|m| m.id == id).or_else(|| models.iter().find(|m| m.id == id))
}

/// Whether `ancestor` lies on `descendant`'s parent chain (or is the same model).
pub fn is_ancestor(models: &[Model], ancestor: ModelId, descendant: ModelId) -> bool {
    let mut cur = find_model(models, descendant);
    while let Some(m) = cur {
        if m.id == ancestor {
            return true;
        }
        cur = m.parent_id.and_then(|p| find_model(models, p));
    }
    false
}

/// Follows one cell of `descendant` back to `ancestor`, returning the id it
/// descends from there and the composed matching degree.
///
/// The id is `None` when the cell was inserted on the way, or cannot be
/// traced.
fn trace(models: &[Model], descendant: &Model, cell: CellId, ancestor: ModelId) -> (Option<CellId>, f64) {
    let mut mc = 1.0;
    let mut cur = cell;
    let mut generation = descendant;
    while generation.id != ancestor {
        mc *= generation.per_cell_mc.get(&cur).copied().unwrap_or(1.0);
        let Some(parent) = generation.parent_id.and_then(|p| find_model(models, p)) else {
            return (None, mc);
        };
        if !parent.contains(cur) {
            match generation.cell(cur).map(|c| c.origin) {
                Some(CellOrigin::WidenedFrom(src)) if parent.contains(src) => cur = src,
                _ => return (None, mc),
            }
        }
        generation = parent;
    }
    (Some(cur), mc)
}

/// The cell of `ancestor` that `cell` of `descendant` descends from.
pub fn matched_cell(
    models: &[Model],
    descendant: &Model,
    cell: CellId,
    ancestor: ModelId,
) -> Option<CellId> {
    if !is_ancestor(models, ancestor, descendant.id) {
        return None;
    }
    trace(models, descendant, cell, ancestor).0
}

/// Mean composed matching degree over the descendant's cells, clamped at 0.
///
/// Matching degrees compose multiplicatively across generations. Models
/// without a lineage path between them have similarity 0.
pub fn model_similarity(models: &[Model], a: ModelId, b: ModelId) -> f64 {
    if a == b {
        return 1.0;
    }
    let (anc, desc) = if is_ancestor(models, a, b) {
        (a, b)
    } else if is_ancestor(models, b, a) {
        (b, a)
    } else {
        return 0.0;
    };
    let Some(d) = find_model(models, desc) else {
        return 0.0;
    };
    if d.cells.is_empty() {
        return 0.0;
    }
    let total: f64 = d
        .cells
        .iter()
        .map(|c| trace(models, d, c.id, anc).1)
        .sum();
    (total / d.cells.len() as f64).clamp(0.0, 1.0)
}

/// Pairwise similarities indexed by position in `models`.
pub fn similarity_matrix(models: &[Model]) -> Vec<Vec<f64>> {
    models
        .iter()
        .map(|a| models.iter().map(|b| model_similarity(models, a.id, b.id)).collect())
        .collect()
}
