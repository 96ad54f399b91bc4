//! When, where and how models grow.

mod activeness;
mod doc;
mod morph;
mod similarity;

pub use activeness::{select_cells, ActivenessTracker};
pub use doc::{compute_doc, DocTracker};
pub use morph::{
    deepen_cell, jitter_split, sample_unit_map, widen_cell, widen_cell_with_map, AppliedOp, CellOp,
    CellSelection, TransformConfig, Transformation, Transformer,
};
pub use similarity::{find_model, is_ancestor, matched_cell, model_similarity, similarity_matrix};

#[cfg(test)]
mod tests;
