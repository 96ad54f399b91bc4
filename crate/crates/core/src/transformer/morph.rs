//! Function-preserving widen/deepen morphisms and the per-cell alternation
//! that drives model growth.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activeness::select_cells;
use crate::error::{Error, Result};
use crate::model::{
    mac_count, Activation, Cell, CellId, CellOrigin, CellParams, Model, ModelId, WeightSet,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOp {
    Widen,
    Deepen,
}

impl CellOp {
    pub fn flipped(self) -> Self {
        match self {
            CellOp::Widen => CellOp::Deepen,
            CellOp::Deepen => CellOp::Widen,
        }
    }
}

/// How cells are picked for transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSelection {
    #[default]
    Activeness,
    /// One uniformly random non-final cell.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub alpha: f64,
    pub widen_factor: usize,
    pub deepen_count: usize,
    pub selection: CellSelection,
    /// Relative zero-sum perturbation of the successor's split columns after
    /// a widen. Duplicated units otherwise receive identical updates forever.
    pub split_jitter: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            widen_factor: 2,
            deepen_count: 1,
            selection: CellSelection::Activeness,
            split_jitter: 0.3,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if self.widen_factor < 2 {
            return Err(Error::Config("widen_factor must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.split_jitter) {
            return Err(Error::Config("split_jitter must be in [0, 1)".into()));
        }
        if self.deepen_count < 1 {
            return Err(Error::Config("deepen_count must be at least 1".into()));
        }
        Ok(())
    }
}

fn successor_index(model: &Model, id: CellId) -> Result<(usize, usize)> {
    let pos = model.position(id).ok_or(Error::UnknownCell(id))?;
    if pos + 1 >= model.cells.len() {
        return Err(Error::Transform(format!("cell {id} is the final cell")));
    }
    Ok((pos, pos + 1))
}

/// Widens a cell by duplicating units according to `unit_map`.
///
/// `unit_map[k]` names the original unit that new unit `k` copies. The first
/// `out_dim` entries must be the identity so the original units keep their
/// leading positions. The successor's columns are divided by the replication
/// count of their source unit, which keeps the network function unchanged.
///
/// The widened cell and its successor receive fresh ids (`next_id`,
/// `next_id + 1`) with `WidenedFrom` origins.
pub fn widen_cell_with_map(
    model: &Model,
    weights: &WeightSet,
    cell_id: CellId,
    unit_map: &[usize],
    next_id: u64,
) -> Result<(Model, WeightSet)> {
    let (pos, succ) = successor_index(model, cell_id)?;
    let cell = &model.cells[pos];
    let out_dim = cell.out_dim;
    if unit_map.len() < out_dim
        || unit_map[..out_dim].iter().enumerate().any(|(i, &u)| i != u)
        || unit_map.iter().any(|&u| u >= out_dim)
    {
        return Err(Error::Transform(
            "unit map must start with the identity and reference existing units".into(),
        ));
    }
    let new_out = unit_map.len();
    let mut counts = vec![0usize; out_dim];
    for &u in unit_map {
        counts[u] += 1;
    }

    let old = weights.get(cell.id)?;
    let mut w = Vec::with_capacity(new_out * cell.in_dim);
    let mut b = Vec::with_capacity(new_out);
    for &u in unit_map {
        w.extend_from_slice(old.weight.row(u));
        b.push(old.bias.data()[u]);
    }

    let next = &model.cells[succ];
    let old_next = weights.get(next.id)?;
    let mut sw = Vec::with_capacity(next.out_dim * new_out);
    for r in 0..next.out_dim {
        for &u in unit_map {
            sw.push(old_next.weight.at(r, u) / counts[u] as f64);
        }
    }

    let widened_id = CellId(next_id);
    let succ_id = CellId(next_id + 1);
    let mut child = model.clone();
    child.cells[pos] = Cell {
        id: widened_id,
        in_dim: cell.in_dim,
        out_dim: new_out,
        activation: cell.activation,
        origin: CellOrigin::WidenedFrom(cell.id),
    };
    child.cells[succ] = Cell {
        id: succ_id,
        in_dim: new_out,
        out_dim: next.out_dim,
        activation: next.activation,
        origin: CellOrigin::WidenedFrom(next.id),
    };

    let mut cw = weights.clone();
    cw.cells.remove(&cell.id);
    cw.cells.remove(&next.id);
    cw.cells.insert(
        widened_id,
        CellParams {
            weight: Tensor::new(vec![new_out, cell.in_dim], w)?,
            bias: Tensor::vector(b),
        },
    );
    cw.cells.insert(
        succ_id,
        CellParams {
            weight: Tensor::new(vec![next.out_dim, new_out], sw)?,
            bias: old_next.bias.clone(),
        },
    );
    Ok((child, cw))
}

/// Samples the unit map for widening `out_dim` units by `factor`: originals
/// first, then `(factor - 1) * out_dim` units drawn uniformly with replacement.
pub fn sample_unit_map<R: Rng + ?Sized>(out_dim: usize, factor: usize, rng: &mut R) -> Vec<usize> {
    let mut map: Vec<usize> = (0..out_dim).collect();
    for _ in 0..(factor - 1) * out_dim {
        map.push(rng.random_range(0..out_dim));
    }
    map
}

/// Rescales the successor columns that share a source unit by factors
/// `1 + scale * (e_j - mean(e))`, `e_j ~ U(-1, 1)`. The factors of each group
/// sum to its size, so the successor still sees the same total contribution.
pub fn jitter_split<R: Rng + ?Sized>(
    weights: &mut WeightSet,
    successor: CellId,
    unit_map: &[usize],
    scale: f64,
    rng: &mut R,
) -> Result<()> {
    let p = weights.get_mut(successor)?;
    if p.weight.cols() != unit_map.len() {
        return Err(Error::Dimension(format!(
            "successor {successor} has {} inputs, unit map has {}",
            p.weight.cols(),
            unit_map.len()
        )));
    }
    let units = unit_map.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); units];
    for (k, &u) in unit_map.iter().enumerate() {
        groups[u].push(k);
    }
    for r in 0..p.weight.rows() {
        for g in groups.iter().filter(|g| g.len() > 1) {
            let e: Vec<f64> = g.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean = e.iter().sum::<f64>() / e.len() as f64;
            for (&k, ej) in g.iter().zip(&e) {
                let v = p.weight.at(r, k);
                p.weight.set(r, k, v * (1.0 + scale * (ej - mean)));
            }
        }
    }
    Ok(())
}

/// Multiplies a cell's output width by `factor`, preserving the function.
pub fn widen_cell<R: Rng + ?Sized>(
    model: &Model,
    weights: &WeightSet,
    cell_id: CellId,
    factor: usize,
    rng: &mut R,
) -> Result<(Model, WeightSet)> {
    if factor < 2 {
        return Err(Error::Transform("widen factor must be at least 2".into()));
    }
    let (pos, _) = successor_index(model, cell_id)?;
    let map = sample_unit_map(model.cells[pos].out_dim, factor, rng);
    widen_cell_with_map(model, weights, cell_id, &map, model.next_cell_id())
}

/// Inserts `count` identity cells with ReLU right after a ReLU cell.
pub fn deepen_cell(
    model: &Model,
    weights: &WeightSet,
    cell_id: CellId,
    count: usize,
) -> Result<(Model, WeightSet)> {
    if count == 0 {
        return Err(Error::Transform("deepen count must be at least 1".into()));
    }
    let pos = model.position(cell_id).ok_or(Error::UnknownCell(cell_id))?;
    let cell = &model.cells[pos];
    if cell.activation != Activation::Relu {
        return Err(Error::Transform(format!(
            "cell {cell_id} is linear; an identity cell after it would clip negative outputs"
        )));
    }
    let d = cell.out_dim;
    let mut child = model.clone();
    let mut cw = weights.clone();
    let first = model.next_cell_id();
    for k in 0..count {
        let id = CellId(first + k as u64);
        child.cells.insert(
            pos + 1 + k,
            Cell {
                id,
                in_dim: d,
                out_dim: d,
                activation: Activation::Relu,
                origin: CellOrigin::InsertedIdentity,
            },
        );
        child.per_cell_mc.insert(id, 0.0);
        cw.cells.insert(
            id,
            CellParams {
                weight: Tensor::identity(d),
                bias: Tensor::zeros(vec![d]),
            },
        );
    }
    Ok((child, cw))
}

/// One applied cell operation, as recorded in the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedOp {
    pub cell: CellId,
    pub op: CellOp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformation {
    pub child: Model,
    pub weights: WeightSet,
    pub ops: Vec<AppliedOp>,
}

/// Owns the per-cell widen/deepen alternation state for the growing lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: TransformConfig,
    next_op: BTreeMap<CellId, CellOp>,
}

impl Transformer {
    pub fn new(config: TransformConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            next_op: BTreeMap::new(),
        })
    }

    pub fn next_op(&self, id: CellId) -> CellOp {
        self.next_op.get(&id).copied().unwrap_or(CellOp::Widen)
    }

    /// Whether the cheapest single widening of `model` still fits `max_capacity`.
    pub fn has_headroom(&self, model: &Model, max_capacity: u64) -> bool {
        let f = self.config.widen_factor as u64;
        let base = mac_count(model);
        model
            .cells
            .windows(2)
            .map(|p| base + (f - 1) * p[0].out_dim as u64 * (p[0].in_dim + p[1].out_dim) as u64)
            .min()
            .is_some_and(|m| m <= max_capacity)
    }

    /// Transformation gate: DoC has fallen to `beta` and there is room to grow.
    pub fn should_transform(
        &self,
        doc: Option<f64>,
        beta: f64,
        largest: &Model,
        max_capacity: u64,
    ) -> bool {
        match doc {
            Some(d) => d <= beta && self.has_headroom(largest, max_capacity),
            None => false,
        }
    }

    fn pick_cells<R: Rng + ?Sized>(
        &self,
        parent: &Model,
        activeness: &BTreeMap<CellId, f64>,
        rng: &mut R,
    ) -> Result<Vec<CellId>> {
        match self.config.selection {
            CellSelection::Activeness => select_cells(parent, activeness, self.config.alpha),
            CellSelection::Random => {
                let n = parent.cells.len().saturating_sub(1);
                if n == 0 {
                    return Err(Error::Transform("no transformable cells".into()));
                }
                Ok(vec![parent.cells[rng.random_range(0..n)].id])
            }
        }
    }

    /// Grows `parent` into a new model by applying each selected cell's
    /// pending operation, then flips those cells' next operation.
    ///
    /// Returns `Ok(None)` when the result would exceed `max_capacity`; the
    /// alternation state is left untouched in that case.
    #[allow(clippy::too_many_arguments)]
    pub fn transform_model<R: Rng + ?Sized>(
        &mut self,
        parent: &Model,
        parent_weights: &WeightSet,
        activeness: &BTreeMap<CellId, f64>,
        child_id: ModelId,
        round: usize,
        max_capacity: u64,
        rng: &mut R,
    ) -> Result<Option<Transformation>> {
        let selected = self.pick_cells(parent, activeness, rng)?;

        let mut model = parent.clone();
        let mut weights = parent_weights.clone();
        // parent cell id -> current id in the model under construction
        let mut current: BTreeMap<CellId, CellId> =
            parent.cells.iter().map(|c| (c.id, c.id)).collect();
        // fresh id -> parent cell it was reshaped from
        let mut reshaped: BTreeMap<CellId, CellId> = BTreeMap::new();
        let mut inserted: BTreeSet<CellId> = BTreeSet::new();
        let mut ops = Vec::with_capacity(selected.len());
        let mut next_fresh = parent.next_cell_id();

        for &pid in &selected {
            let cur = current[&pid];
            let op = self.next_op(pid);
            match op {
                CellOp::Widen => {
                    let pos = model.position(cur).ok_or(Error::UnknownCell(cur))?;
                    let succ_cur = model.cells[pos + 1].id;
                    let map = sample_unit_map(
                        model.cells[pos].out_dim,
                        self.config.widen_factor,
                        rng,
                    );
                    let (m, mut w) =
                        widen_cell_with_map(&model, &weights, cur, &map, next_fresh)?;
                    let (new_cell, new_succ) = (CellId(next_fresh), CellId(next_fresh + 1));
                    if self.config.split_jitter > 0.0 {
                        jitter_split(&mut w, new_succ, &map, self.config.split_jitter, rng)?;
                    }
                    next_fresh += 2;
                    for (old, new) in [(cur, new_cell), (succ_cur, new_succ)] {
                        let origin = reshaped.remove(&old).unwrap_or(old);
                        if inserted.remove(&old) {
                            inserted.insert(new);
                        } else {
                            reshaped.insert(new, origin);
                            current.insert(origin, new);
                        }
                    }
                    model = m;
                    weights = w;
                }
                CellOp::Deepen => {
                    let (mut m, w) = deepen_cell(&model, &weights, cur, self.config.deepen_count)?;
                    // deepen_cell allocates from the model's own max id; keep
                    // ids unique with respect to cells already replaced here.
                    let fresh: Vec<CellId> = m
                        .cells
                        .iter()
                        .filter(|c| !model.contains(c.id))
                        .map(|c| c.id)
                        .collect();
                    let mut w = w;
                    for old in fresh {
                        let new = CellId(next_fresh);
                        next_fresh += 1;
                        let pos = m.position(old).unwrap();
                        m.cells[pos].id = new;
                        let p = w.cells.remove(&old).unwrap();
                        w.cells.insert(new, p);
                        inserted.insert(new);
                    }
                    model = m;
                    weights = w;
                }
            }
            ops.push(AppliedOp { cell: pid, op });
        }

        if mac_count(&model) > max_capacity {
            return Ok(None);
        }

        model.id = child_id;
        model.parent_id = Some(parent.id);
        model.created_round = round;
        model.per_cell_mc.clear();
        let mut next_op = BTreeMap::new();
        let flipped: BTreeSet<CellId> = selected.iter().copied().collect();
        for cell in &mut model.cells {
            let (mc, state) = if parent.contains(cell.id) {
                (1.0, self.next_op(cell.id))
            } else if inserted.contains(&cell.id) {
                cell.origin = CellOrigin::InsertedIdentity;
                (0.0, CellOp::Widen)
            } else {
                let src = reshaped[&cell.id];
                cell.origin = CellOrigin::WidenedFrom(src);
                let p = parent.cell(src).unwrap();
                (
                    p.param_count() as f64 / cell.param_count() as f64,
                    self.next_op(src),
                )
            };
            model.per_cell_mc.insert(cell.id, mc);
            next_op.insert(cell.id, state);
        }
        for pid in &flipped {
            let cur = current[pid];
            next_op.insert(cur, self.next_op(*pid).flipped());
        }
        weights.model_id = child_id;
        self.next_op = next_op;
        Ok(Some(Transformation {
            child: model,
            weights,
            ops,
        }))
    }
}
