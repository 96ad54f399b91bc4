//! Cell-structured dense networks: topology, parameters and MAC accounting.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ModelId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId(pub u64);

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// How a cell came into existence. Cells that pass unchanged from a parent
/// model into its child keep both their id and their origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOrigin {
    Initial,
    /// Reshaped from a parent cell, either by widening its output or by
    /// growing its input after the predecessor was widened.
    WidenedFrom(CellId),
    InsertedIdentity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: CellId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub origin: CellOrigin,
}

impl Cell {
    pub fn dense(id: CellId, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            id,
            in_dim,
            out_dim,
            activation,
            origin: CellOrigin::Initial,
        }
    }

    pub fn macs(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub id: ModelId,
    pub cells: Vec<Cell>,
    pub parent_id: Option<ModelId>,
    /// Matching degree of every cell against the parent model.
    pub per_cell_mc: BTreeMap<CellId, f64>,
    pub created_round: usize,
}

impl Model {
    /// A ReLU MLP with the given hidden widths and a linear output cell.
    pub fn initial(feature_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mut cells = Vec::with_capacity(hidden.len() + 1);
        let mut in_dim = feature_dim;
        for (i, &h) in hidden.iter().enumerate() {
            cells.push(Cell::dense(CellId(i as u64), in_dim, h, Activation::Relu));
            in_dim = h;
        }
        cells.push(Cell::dense(
            CellId(hidden.len() as u64),
            in_dim,
            classes,
            Activation::None,
        ));
        let per_cell_mc = cells.iter().map(|c| (c.id, 1.0)).collect();
        Self {
            id: 0,
            cells,
            parent_id: None,
            per_cell_mc,
            created_round: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.cells.first().map_or(0, |c| c.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.cells.last().map_or(0, |c| c.out_dim)
    }

    pub fn cell(&self, id: CellId) -> Option<&Cell> {
        self.cells.iter().find(|c| c.id == id)
    }

    pub fn position(&self, id: CellId) -> Option<usize> {
        self.cells.iter().position(|c| c.id == id)
    }

    pub fn contains(&self, id: CellId) -> bool {
        self.cells.iter().any(|c| c.id == id)
    }

    pub fn is_final(&self, id: CellId) -> bool {
        self.cells.last().is_some_and(|c| c.id == id)
    }

    pub fn param_count(&self) -> usize {
        self.cells.iter().map(Cell::param_count).sum()
    }

    /// Smallest id not used by any cell of this model.
    pub fn next_cell_id(&self) -> u64 {
        self.cells.iter().map(|c| c.id.0 + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Dimension("model has no cells".into()));
        }
        for pair in self.cells.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Dimension(format!(
                    "cell {} outputs {} but cell {} expects {}",
                    pair[0].id, pair[0].out_dim, pair[1].id, pair[1].in_dim
                )));
            }
        }
        if self.cells.last().unwrap().activation != Activation::None {
            return Err(Error::Dimension("final cell must be linear".into()));
        }
        Ok(())
    }
}

/// Forward multiply-accumulates per sample.
pub fn mac_count(model: &Model) -> u64 {
    model.cells.iter().map(Cell::macs).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters of one model, keyed by cell. Gradients use the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub model_id: ModelId,
    pub cells: BTreeMap<CellId, CellParams>,
}

pub type Gradients = WeightSet;

impl WeightSet {
    pub fn zeros_like(model: &Model) -> Self {
        let cells = model
            .cells
            .iter()
            .map(|c| {
                (
                    c.id,
                    CellParams {
                        weight: Tensor::zeros(vec![c.out_dim, c.in_dim]),
                        bias: Tensor::zeros(vec![c.out_dim]),
                    },
                )
            })
            .collect();
        Self {
            model_id: model.id,
            cells,
        }
    }

    /// He-uniform weights scaled by fan-in, zero biases.
    pub fn init<R: Rng + ?Sized>(model: &Model, rng: &mut R) -> Self {
        let mut ws = Self::zeros_like(model);
        for cell in &model.cells {
            let limit = (6.0 / cell.in_dim as f64).sqrt();
            let p = ws.cells.get_mut(&cell.id).unwrap();
            for v in p.weight.data_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        ws
    }

    pub fn get(&self, id: CellId) -> Result<&CellParams> {
        self.cells.get(&id).ok_or(Error::UnknownCell(id))
    }

    pub fn get_mut(&mut self, id: CellId) -> Result<&mut CellParams> {
        self.cells.get_mut(&id).ok_or(Error::UnknownCell(id))
    }

    /// Checks that this set covers exactly the model's cells with matching shapes.
    pub fn check_matches(&self, model: &Model) -> Result<()> {
        if self.cells.len() != model.cells.len() {
            return Err(Error::Dimension(format!(
                "weight set has {} cells, model {} has {}",
                self.cells.len(),
                model.id,
                model.cells.len()
            )));
        }
        for cell in &model.cells {
            let p = self.get(cell.id)?;
            if p.weight.shape() != [cell.out_dim, cell.in_dim] || p.bias.shape() != [cell.out_dim]
            {
                return Err(Error::Dimension(format!(
                    "cell {} expects [{}, {}], got weight {:?} bias {:?}",
                    cell.id,
                    cell.out_dim,
                    cell.in_dim,
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn same_shapes(&self, other: &WeightSet) -> bool {
        self.cells.len() == other.cells.len()
            && self.cells.iter().all(|(id, p)| {
                other
                    .cells
                    .get(id)
                    .is_some_and(|q| p.weight.same_shape(&q.weight) && p.bias.same_shape(&q.bias))
            })
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &WeightSet, scale: f64) -> Result<()> {
        if !self.same_shapes(other) {
            return Err(Error::Dimension("weight sets differ in shape".into()));
        }
        for (id, p) in &mut self.cells {
            let q = &other.cells[id];
            p.weight.add_scaled(&q.weight, scale)?;
            p.bias.add_scaled(&q.bias, scale)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.cells.values_mut() {
            p.weight.scale(factor);
            p.bias.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cells
            .values()
            .all(|p| p.weight.is_finite() && p.bias.is_finite())
    }

    pub fn param_count(&self) -> usize {
        self.cells
            .values()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }
}

/// Labelled samples. Used both for mini-batches and for whole client splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            features: Tensor::new(vec![indices.len(), d], data).expect("consistent shape"),
            labels,
        }
    }
}
