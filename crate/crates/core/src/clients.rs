//! Client registry, utility-driven model assignment and joint utility updates.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mac_count, Batch, Model, ModelId};

pub type ClientId = usize;

/// Utilities are clipped to this magnitude before exponentiation.
pub const UTILITY_CLIP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub id: ClientId,
    /// Largest per-sample MAC count the device supports.
    pub capacity: u64,
    /// MACs per second, used for round-time simulation.
    pub speed: f64,
    pub train: Batch,
    pub test: Batch,
}

/// Uniformly samples `n` distinct clients.
pub fn select_clients<R: Rng + ?Sized>(
    registry: &[ClientRecord],
    n: usize,
    rng: &mut R,
) -> Result<Vec<ClientId>> {
    if n > registry.len() {
        return Err(Error::Selection {
            requested: n,
            available: registry.len(),
        });
    }
    Ok(index::sample(rng, registry.len(), n)
        .into_iter()
        .map(|i| registry[i].id)
        .collect())
}

/// Ids of models the client can run, in creation order.
pub fn compatible_models(capacity: u64, models: &[Model]) -> Vec<ModelId> {
    models
        .iter()
        .filter(|m| mac_count(m) <= capacity)
        .map(|m| m.id)
        .collect()
}

/// Softmax over (clipped) utilities, computed with max-subtraction.
pub fn assignment_probabilities(utilities: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = utilities
        .iter()
        .map(|u| u.clamp(-UTILITY_CLIP, UTILITY_CLIP))
        .collect();
    let max = clipped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = clipped.iter().map(|u| (u - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Draws an index with probability `exp(U_k) / sum_j exp(U_j)`.
///
/// A single candidate is returned without consuming randomness.
pub fn sample_model<R: Rng + ?Sized>(utilities: &[f64], rng: &mut R) -> Result<usize> {
    match utilities.len() {
        0 => Err(Error::Config("no compatible models to sample from".into())),
        1 => Ok(0),
        _ => {
            let probs = assignment_probabilities(utilities);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
        }
    }
}

/// Z-scores the round's losses over its participants (population std).
/// A spread below 1e-12 standardizes everything to 0.
pub fn standardize_losses(losses: &BTreeMap<ClientId, f64>) -> BTreeMap<ClientId, f64> {
    if losses.is_empty() {
        return BTreeMap::new();
    }
    let n = losses.len() as f64;
    let mean = losses.values().sum::<f64>() / n;
    let var = losses.values().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    losses
        .iter()
        .map(|(&c, &l)| (c, if std < 1e-12 { 0.0 } else { (l - mean) / std }))
        .collect()
}

/// Per-client utility rows over compatible models.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilityTable {
    rows: BTreeMap<ClientId, BTreeMap<ModelId, f64>>,
}

impl UtilityTable {
    /// Zero utility on the initial model for every client.
    pub fn new(clients: &[ClientRecord], initial: ModelId) -> Self {
        let rows = clients
            .iter()
            .map(|c| (c.id, BTreeMap::from([(initial, 0.0)])))
            .collect();
        Self { rows }
    }

    pub fn get(&self, client: ClientId, model: ModelId) -> Option<f64> {
        self.rows.get(&client)?.get(&model).copied()
    }

    pub fn set(&mut self, client: ClientId, model: ModelId, value: f64) {
        self.rows.entry(client).or_default().insert(model, value);
    }

    pub fn row(&self, client: ClientId) -> Option<&BTreeMap<ModelId, f64>> {
        self.rows.get(&client)
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.rows.keys().copied()
    }

    /// Utilities of the given models for one client (missing entries read as 0).
    pub fn utilities(&self, client: ClientId, models: &[ModelId]) -> Vec<f64> {
        models
            .iter()
            .map(|&m| self.get(client, m).unwrap_or(0.0))
            .collect()
    }

    /// `U_k -= L * sim(M_k, M*)` for every model `k` the client holds a
    /// utility for. `similarity(k)` gives `sim(M_k, M*)`.
    pub fn update_utilities(
        &mut self,
        client: ClientId,
        std_loss: f64,
        similarity: impl Fn(ModelId) -> f64,
    ) {
        if let Some(row) = self.rows.get_mut(&client) {
            for (&k, u) in row.iter_mut() {
                *u -= std_loss * similarity(k);
            }
        }
    }

    /// Copies the parent's column into a new model's column, for clients whose
    /// capacity admits the child.
    pub fn register_model(&mut self, clients: &[ClientRecord], child: &Model, parent: ModelId) {
        let macs = mac_count(child);
        for c in clients {
            if c.capacity < macs {
                continue;
            }
            if let Some(row) = self.rows.get_mut(&c.id) {
                if let Some(&u) = row.get(&parent) {
                    row.insert(child.id, u);
                }
            }
        }
    }
}
