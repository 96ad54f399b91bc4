//! The federated round loop: selection, assignment, local training, utility
//! and weight updates, convergence tracking and model growth.

mod output;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{fedavg, update_weights, AggregationConfig, ClientUpdate, RoundUpdates};
use crate::clients::{
    compatible_models, sample_model, select_clients, standardize_losses, ClientId, ClientRecord,
    UtilityTable,
};
use crate::datagen::{
    generate_dataset, partition_dirichlet, sample_capacities, split_probe, CapacityConfig,
    ClientSplit, DataConfig,
};
use crate::error::{Error, Result};
use crate::model::{mac_count, Batch, CellId, Model, ModelId, WeightSet};
use crate::nn::{accuracy, local_train, loss};
use crate::rng::{stream, Stream};
use crate::transformer::{
    model_similarity, ActivenessTracker, AppliedOp, DocTracker, TransformConfig, Transformer,
};

pub use output::{
    assignments_csv, metrics_csv, write_run, Summary, SummaryModel, ASSIGNMENTS_HEADER,
    METRICS_HEADER,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub participants_per_round: usize,
    pub max_rounds: usize,
    pub lr: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    /// Hidden widths of the initial model.
    pub initial_hidden: Vec<usize>,
    pub gamma: usize,
    pub delta: usize,
    pub beta: f64,
    pub activeness_window: usize,
    pub transform: TransformConfig,
    pub aggregation: AggregationConfig,
    /// Child weights come from the parent when set, fresh initialization otherwise.
    pub warmup: bool,
    /// Training cost per sample as a multiple of forward MACs.
    pub backward_multiplier: u64,
    /// Probe-set validation runs every this many rounds.
    pub eval_every: usize,
    /// Number of consecutive evaluations inspected by the convergence rule.
    pub convergence_window: usize,
    /// Accuracy gain (as a fraction) below which a model counts as converged.
    pub convergence_threshold: f64,
    pub data: DataConfig,
    pub capacity: CapacityConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            participants_per_round: 10,
            max_rounds: 300,
            lr: 0.05,
            local_steps: 20,
            batch_size: 10,
            initial_hidden: vec![2],
            gamma: 10,
            delta: 5,
            beta: 0.003,
            activeness_window: 5,
            transform: TransformConfig::default(),
            aggregation: AggregationConfig::default(),
            warmup: true,
            backward_multiplier: 3,
            eval_every: 5,
            convergence_window: 10,
            convergence_threshold: 0.01,
            data: DataConfig::default(),
            capacity: CapacityConfig {
                cap_min: 80,
                cap_max: 2400,
                speed_min: 1e5,
                speed_max: 1e6,
            },
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn initial_model(&self) -> Model {
        Model::initial(self.data.feature_dim, &self.initial_hidden, self.data.classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.participants_per_round < 1 {
            return Err(Error::Config("participants_per_round must be at least 1".into()));
        }
        if self.participants_per_round > self.data.num_clients {
            return Err(Error::Config(format!(
                "participants_per_round {} exceeds num_clients {}",
                self.participants_per_round, self.data.num_clients
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.local_steps < 1 || self.batch_size < 1 {
            return Err(Error::Config("local_steps and batch_size must be at least 1".into()));
        }
        if self.initial_hidden.contains(&0) {
            return Err(Error::Config("initial_hidden widths must be positive".into()));
        }
        if self.gamma < 1 || self.delta < 1 {
            return Err(Error::Config("gamma and delta must be at least 1".into()));
        }
        if self.beta.is_nan() || self.beta == f64::INFINITY {
            return Err(Error::Config("beta must be finite or -inf".into()));
        }
        if self.activeness_window < 1 || self.eval_every < 1 || self.convergence_window < 1 {
            return Err(Error::Config(
                "activeness_window, eval_every and convergence_window must be at least 1".into(),
            ));
        }
        if !(self.convergence_threshold >= 0.0) {
            return Err(Error::Config("convergence_threshold must be non-negative".into()));
        }
        if self.backward_multiplier < 1 {
            return Err(Error::Config("backward_multiplier must be at least 1".into()));
        }
        self.transform.validate()?;
        self.aggregation.validate()?;
        self.data.validate()?;
        self.capacity.validate(mac_count(&self.initial_model()))
    }
}

/// Client registry plus the held-out probe set used for validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub clients: Vec<ClientRecord>,
    pub probe: Batch,
}

/// Generates data, partitions it and samples device capabilities, all from
/// `config.seed`.
pub fn build_population(config: &RunConfig) -> Result<Population> {
    let data_cfg = DataConfig {
        seed: config.seed,
        ..config.data.clone()
    };
    let global = generate_dataset(&data_cfg)?;
    let (pool, probe) = split_probe(
        &global,
        data_cfg.probe_fraction,
        &mut stream(config.seed, Stream::Partition, 0, 0),
    );
    let splits = partition_dirichlet(
        &pool,
        data_cfg.num_clients,
        data_cfg.dirichlet_h,
        data_cfg.samples_per_client,
        &mut stream(config.seed, Stream::Partition, 0, 1),
    )?;
    let caps = sample_capacities(
        &config.capacity,
        data_cfg.num_clients,
        &mut stream(config.seed, Stream::Capacity, 0, 0),
    );
    Ok(Population {
        clients: assemble_clients(splits, &caps),
        probe,
    })
}

pub fn assemble_clients(splits: Vec<ClientSplit>, caps: &[(u64, f64)]) -> Vec<ClientRecord> {
    splits
        .into_iter()
        .zip(caps)
        .enumerate()
        .map(|(id, (s, &(capacity, speed)))| ClientRecord {
            id,
            capacity,
            speed,
            train: s.train,
            test: s.test,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Assign {
        round: usize,
        client: ClientId,
        model: ModelId,
        macs: u64,
        capacity: u64,
    },
    Transform {
        round: usize,
        parent: ModelId,
        child: ModelId,
        ops: Vec<AppliedOp>,
        macs: u64,
        probe_loss_parent: f64,
        probe_loss_child: f64,
    },
    Evaluate {
        client: ClientId,
        model: ModelId,
        macs: u64,
        capacity: u64,
        accuracy: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformEvent {
    pub parent: ModelId,
    pub child: ModelId,
    pub ops: Vec<AppliedOp>,
    pub macs: u64,
    pub probe_loss_parent: f64,
    pub probe_loss_child: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub model_count: usize,
    pub largest_macs: u64,
    /// Mean local training loss per model that had participants.
    pub model_loss: BTreeMap<ModelId, f64>,
    /// Mean local training loss over all participants.
    pub mean_loss: f64,
    pub doc: Option<f64>,
    pub transformation: Option<TransformEvent>,
    pub round_macs: u64,
    pub cum_macs: u64,
    pub participants: BTreeMap<ModelId, usize>,
    /// Mean utility per model over the clients holding one, after the update.
    pub mean_utility: BTreeMap<ModelId, f64>,
    pub round_time_s: f64,
    pub comm_mb: f64,
    /// Probe accuracy per model, on evaluation rounds.
    pub validation: Option<BTreeMap<ModelId, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientEval {
    pub model: ModelId,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub models: Vec<Model>,
    pub weights: BTreeMap<ModelId, WeightSet>,
    pub utilities: UtilityTable,
    pub accuracies: BTreeMap<ClientId, ClientEval>,
    pub mean_acc: f64,
    pub iqr_acc: f64,
    pub total_macs: u64,
    pub reports: Vec<RoundReport>,
    pub events: Vec<Event>,
    /// Round at which the convergence rule ended the run, if it did.
    pub converged_at: Option<usize>,
}

/// Mutable state of a run between rounds.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: RunConfig,
    clients: Vec<ClientRecord>,
    probe: Batch,
    models: Vec<Model>,
    weights: BTreeMap<ModelId, WeightSet>,
    utilities: UtilityTable,
    doc: DocTracker,
    activeness: ActivenessTracker,
    transformer: Transformer,
    max_capacity: u64,
    cum_macs: u64,
    round: usize,
    validation: BTreeMap<ModelId, Vec<f64>>,
    events: Vec<Event>,
    reports: Vec<RoundReport>,
}

struct Trained {
    client: ClientId,
    model: ModelId,
    update: ClientUpdate,
    grad: WeightSet,
    loss: f64,
}

impl Simulation {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let population = build_population(&config)?;
        Self::with_population(config, population)
    }

    pub fn with_population(config: RunConfig, population: Population) -> Result<Self> {
        config.validate()?;
        let Population { clients, probe } = population;
        if clients.len() < config.participants_per_round {
            return Err(Error::Selection {
                requested: config.participants_per_round,
                available: clients.len(),
            });
        }
        let initial = config.initial_model();
        let macs = mac_count(&initial);
        if let Some(c) = clients.iter().find(|c| c.capacity < macs) {
            return Err(Error::Config(format!(
                "client {} (capacity {}) cannot run the initial model ({} MACs)",
                c.id, c.capacity, macs
            )));
        }
        let weights = WeightSet::init(&initial, &mut stream(config.seed, Stream::Init, 0, 0));
        let utilities = UtilityTable::new(&clients, initial.id);
        let max_capacity = clients.iter().map(|c| c.capacity).max().unwrap_or(0);
        Ok(Self {
            doc: DocTracker::new(config.gamma, config.delta, config.beta)?,
            activeness: ActivenessTracker::new(config.activeness_window)?,
            transformer: Transformer::new(config.transform.clone())?,
            weights: BTreeMap::from([(initial.id, weights)]),
            models: vec![initial],
            utilities,
            max_capacity,
            clients,
            probe,
            cum_macs: 0,
            round: 0,
            validation: BTreeMap::new(),
            events: Vec::new(),
            reports: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientRecord] {
        &self.clients
    }

    pub fn probe(&self) -> &Batch {
        &self.probe
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn weights(&self) -> &BTreeMap<ModelId, WeightSet> {
        &self.weights
    }

    pub fn utilities(&self) -> &UtilityTable {
        &self.utilities
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn cum_macs(&self) -> u64 {
        self.cum_macs
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn largest(&self) -> &Model {
        self.models.last().expect("at least one model")
    }

    fn transform_possible(&self) -> bool {
        self.config.beta != f64::NEG_INFINITY
            && self.transformer.has_headroom(self.largest(), self.max_capacity)
    }

    /// Runs one round and returns its report.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.round;
        let cfg = &self.config;
        let seed = cfg.seed;
        let selected = select_clients(
            &self.clients,
            cfg.participants_per_round,
            &mut stream(seed, Stream::Select, t as u64, 0),
        )?;

        let models = &self.models;
        let weights = &self.weights;
        let utilities = &self.utilities;
        let clients = &self.clients;
        let trained: Vec<Trained> = selected
            .par_iter()
            .map(|&cid| -> Result<Trained> {
                let client = &clients[cid];
                let mut rng = stream(seed, Stream::Client, t as u64, cid as u64);
                let compatible = compatible_models(client.capacity, models);
                let utils = utilities.utilities(cid, &compatible);
                let model_id = compatible[sample_model(&utils, &mut rng)?];
                let model = &models[model_id];
                let out = local_train(
                    model,
                    &weights[&model_id],
                    &client.train,
                    cfg.local_steps,
                    cfg.batch_size,
                    cfg.lr,
                    &mut rng,
                )?;
                Ok(Trained {
                    client: cid,
                    model: model_id,
                    update: ClientUpdate {
                        client: cid,
                        weights: out.weights,
                        sample_count: client.train.len(),
                    },
                    grad: out.avg_grad,
                    loss: out.avg_loss,
                })
            })
            .collect::<Result<_>>()?;

        // cost, time and traffic
        let mut round_macs = 0u64;
        let mut round_time = 0.0f64;
        let mut comm_bytes = 0u64;
        let per_client = (cfg.batch_size * cfg.local_steps) as u64 * cfg.backward_multiplier;
        for tr in &trained {
            let model = &self.models[tr.model];
            let client = &self.clients[tr.client];
            let macs = mac_count(model);
            let cost = macs * per_client;
            round_macs += cost;
            round_time = round_time.max(cost as f64 / client.speed);
            comm_bytes += 2 * model.param_count() as u64 * 8 + 8;
            self.events.push(Event::Assign {
                round: t,
                client: tr.client,
                model: tr.model,
                macs,
                capacity: client.capacity,
            });
        }
        self.cum_macs += round_macs;

        // utilities
        let losses: BTreeMap<ClientId, f64> = trained.iter().map(|tr| (tr.client, tr.loss)).collect();
        let standardized = standardize_losses(&losses);
        for tr in &trained {
            let models = &self.models;
            self.utilities
                .update_utilities(tr.client, standardized[&tr.client], |k| {
                    model_similarity(models, k, tr.model)
                });
        }

        // weights
        let mut updates: RoundUpdates = BTreeMap::new();
        let mut participants: BTreeMap<ModelId, usize> = BTreeMap::new();
        let mut loss_sums: BTreeMap<ModelId, f64> = BTreeMap::new();
        for tr in &trained {
            updates.entry(tr.model).or_default().push(tr.update.clone());
            *participants.entry(tr.model).or_default() += 1;
            *loss_sums.entry(tr.model).or_default() += tr.loss;
        }
        let model_loss: BTreeMap<ModelId, f64> = loss_sums
            .iter()
            .map(|(k, s)| (*k, s / participants[k] as f64))
            .collect();
        let mean_loss = trained.iter().map(|tr| tr.loss).sum::<f64>() / trained.len() as f64;
        self.weights = update_weights(&self.models, &self.weights, &updates, t, &cfg.aggregation)?;

        // convergence signal and activeness of the largest model
        let largest_id = self.largest().id;
        if let Some(&l) = model_loss.get(&largest_id) {
            self.doc.record(l);
            let grads: Vec<(&WeightSet, usize)> = trained
                .iter()
                .filter(|tr| tr.model == largest_id)
                .map(|tr| (&tr.grad, tr.update.sample_count))
                .collect();
            if let Some(g) = fedavg(&grads)? {
                self.activeness.record(&g, &self.weights[&largest_id])?;
            }
        }
        let doc = self.doc.doc();

        let transformation = if self.config.beta != f64::NEG_INFINITY
            && self
                .transformer
                .should_transform(doc, self.config.beta, self.largest(), self.max_capacity)
        {
            self.grow(t)?
        } else {
            None
        };

        let validation = if (t + 1).is_multiple_of(self.config.eval_every) {
            let mut v = BTreeMap::new();
            for m in &self.models {
                let acc = accuracy(m, &self.weights[&m.id], &self.probe)?;
                self.validation.entry(m.id).or_default().push(acc);
                v.insert(m.id, acc);
            }
            Some(v)
        } else {
            None
        };

        let report = RoundReport {
            round: t,
            model_count: self.models.len(),
            largest_macs: mac_count(self.largest()),
            model_loss,
            mean_loss,
            doc,
            transformation,
            round_macs,
            cum_macs: self.cum_macs,
            participants,
            mean_utility: self.mean_utilities(),
            round_time_s: round_time,
            comm_mb: comm_bytes as f64 / 1e6,
            validation,
        };
        self.reports.push(report.clone());
        self.round += 1;
        Ok(report)
    }

    fn mean_utilities(&self) -> BTreeMap<ModelId, f64> {
        let mut sums: BTreeMap<ModelId, (f64, usize)> = BTreeMap::new();
        for c in self.utilities.clients() {
            for (&k, &u) in self.utilities.row(c).into_iter().flatten() {
                let e = sums.entry(k).or_default();
                e.0 += u;
                e.1 += 1;
            }
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Transforms the largest model. When the selected cells overshoot the
    /// capacity ceiling, retries with the single most active cell.
    fn grow(&mut self, t: usize) -> Result<Option<TransformEvent>> {
        let parent = self.largest().clone();
        let parent_w = self.weights[&parent.id].clone();
        let child_id = self.models.len();
        let mut rng = stream(self.config.seed, Stream::Transform, t as u64, 0);
        let act = self.activeness.means();
        let mut result = self.transformer.transform_model(
            &parent,
            &parent_w,
            &act,
            child_id,
            t,
            self.max_capacity,
            &mut rng,
        )?;
        if result.is_none() {
            let candidates = &parent.cells[..parent.cells.len() - 1];
            let top = candidates
                .iter()
                .map(|c| (c.id, act.get(&c.id).copied().unwrap_or(0.0)))
                .fold(None::<(CellId, f64)>, |best, (id, a)| match best {
                    Some((_, b)) if b >= a => best,
                    _ => Some((id, a)),
                });
            if let Some((id, a)) = top {
                let only = BTreeMap::from([(id, a.max(f64::MIN_POSITIVE))]);
                result = self.transformer.transform_model(
                    &parent,
                    &parent_w,
                    &only,
                    child_id,
                    t,
                    self.max_capacity,
                    &mut rng,
                )?;
            }
        }
        let Some(tr) = result else {
            return Ok(None);
        };
        let child_w = if self.config.warmup {
            tr.weights
        } else {
            let mut w = WeightSet::init(
                &tr.child,
                &mut stream(self.config.seed, Stream::Init, t as u64, child_id as u64),
            );
            w.model_id = child_id;
            w
        };
        let probe_loss_parent = loss(&parent, &parent_w, &self.probe)?;
        let probe_loss_child = loss(&tr.child, &child_w, &self.probe)?;
        let macs = mac_count(&tr.child);
        self.utilities.register_model(&self.clients, &tr.child, parent.id);
        self.weights.insert(child_id, child_w);
        self.models.push(tr.child);
        self.doc.reset();
        self.activeness.reset();
        let event = TransformEvent {
            parent: parent.id,
            child: child_id,
            ops: tr.ops,
            macs,
            probe_loss_parent,
            probe_loss_child,
        };
        self.events.push(Event::Transform {
            round: t,
            parent: event.parent,
            child: event.child,
            ops: event.ops.clone(),
            macs,
            probe_loss_parent,
            probe_loss_child,
        });
        Ok(Some(event))
    }

    /// No transformation is possible and every model's probe accuracy has
    /// stayed within the threshold over the last `convergence_window`
    /// evaluations.
    pub fn converged(&self) -> bool {
        if self.transform_possible() {
            return false;
        }
        let w = self.config.convergence_window;
        self.models.iter().all(|m| match self.validation.get(&m.id) {
            Some(h) if h.len() > w => {
                let (before, window) = h.split_at(h.len() - w);
                let best_before = before.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let best_now = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                best_now - best_before <= self.config.convergence_threshold
            }
            _ => false,
        })
    }

    /// Per client: the compatible model with the highest utility (ties to the
    /// smaller id), scored on the client's local test split.
    pub fn final_evaluate(&mut self) -> Result<BTreeMap<ClientId, ClientEval>> {
        let mut out = BTreeMap::new();
        for c in &self.clients {
            let compatible = compatible_models(c.capacity, &self.models);
            let utils = self.utilities.utilities(c.id, &compatible);
            let mut best = 0;
            for (i, &u) in utils.iter().enumerate() {
                if u > utils[best] {
                    best = i;
                }
            }
            let model_id = *compatible
                .get(best)
                .ok_or_else(|| Error::Config(format!("client {} has no compatible model", c.id)))?;
            let model = &self.models[model_id];
            let acc = if c.test.is_empty() {
                0.0
            } else {
                accuracy(model, &self.weights[&model_id], &c.test)?
            };
            self.events.push(Event::Evaluate {
                client: c.id,
                model: model_id,
                macs: mac_count(model),
                capacity: c.capacity,
                accuracy: acc,
            });
            out.insert(
                c.id,
                ClientEval {
                    model: model_id,
                    accuracy: acc,
                },
            );
        }
        Ok(out)
    }

    /// Runs rounds until `max_rounds` or convergence, then evaluates.
    pub fn run(mut self) -> Result<RunResult> {
        let mut converged_at = None;
        while self.round < self.config.max_rounds {
            self.run_round()?;
            if self.converged() {
                converged_at = Some(self.round - 1);
                break;
            }
        }
        let accuracies = self.final_evaluate()?;
        let accs: Vec<f64> = accuracies.values().map(|e| e.accuracy).collect();
        Ok(RunResult {
            mean_acc: accs.iter().sum::<f64>() / accs.len().max(1) as f64,
            iqr_acc: interquartile_range(&accs),
            total_macs: self.cum_macs,
            accuracies,
            converged_at,
            models: self.models,
            weights: self.weights,
            utilities: self.utilities,
            reports: self.reports,
            events: self.events,
        })
    }
}

pub fn run_training(config: &RunConfig) -> Result<RunResult> {
    Simulation::new(config.clone())?.run()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

pub fn interquartile_range(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.75) - quantile(&v, 0.25)
}
