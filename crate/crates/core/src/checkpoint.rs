//! Versioned JSON checkpoints: one file per model holding its topology and
//! flat weight arrays in cell order. Floats round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CellId, CellParams, Model, WeightSet};
use crate::tensor::Tensor;

pub const FORMAT: &str = "fedmorph-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CellWeights {
    cell: CellId,
    /// Row-major `[out_dim, in_dim]`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Model,
    weights: Vec<CellWeights>,
}

pub fn to_json(model: &Model, weights: &WeightSet) -> Result<String> {
    weights.check_matches(model)?;
    if !weights.is_finite() {
        return Err(Error::Numeric(format!("model {} has non-finite weights", model.id)));
    }
    let weights = model
        .cells
        .iter()
        .map(|c| {
            let p = weights.get(c.id)?;
            Ok(CellWeights {
                cell: c.id,
                weight: p.weight.data().to_vec(),
                bias: p.bias.data().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ckpt = Checkpoint {
        format: FORMAT.into(),
        version: VERSION,
        model: model.clone(),
        weights,
    };
    Ok(serde_json::to_string_pretty(&ckpt)?)
}

pub fn from_json(text: &str) -> Result<(Model, WeightSet)> {
    let ckpt: Checkpoint = serde_json::from_str(text)?;
    if ckpt.format != FORMAT {
        return Err(Error::Checkpoint(format!("unexpected format tag {:?}", ckpt.format)));
    }
    if ckpt.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
    }
    let model = ckpt.model;
    model.validate()?;
    if ckpt.weights.len() != model.cells.len() {
        return Err(Error::Checkpoint(format!(
            "{} weight entries for {} cells",
            ckpt.weights.len(),
            model.cells.len()
        )));
    }
    let mut ws = WeightSet {
        model_id: model.id,
        cells: Default::default(),
    };
    for (cell, w) in model.cells.iter().zip(ckpt.weights) {
        if w.cell != cell.id {
            return Err(Error::Checkpoint(format!(
                "weights for {} found where {} was declared",
                w.cell, cell.id
            )));
        }
        let params = CellParams {
            weight: Tensor::new(vec![cell.out_dim, cell.in_dim], w.weight)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", cell.id)))?,
            bias: Tensor::new(vec![cell.out_dim], w.bias)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", cell.id)))?,
        };
        ws.cells.insert(cell.id, params);
    }
    Ok((model, ws))
}

pub fn save(path: &Path, model: &Model, weights: &WeightSet) -> Result<()> {
    fs::write(path, to_json(model, weights)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, WeightSet)> {
    from_json(&fs::read_to_string(path)?)
}
