//! Flat JSON experiment configuration and its mapping onto `RunConfig`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use fedmorph_core::aggregate::AggregationConfig;
use fedmorph_core::datagen::{CapacityConfig, DataConfig};
use fedmorph_core::runtime::RunConfig;
use fedmorph_core::transformer::{CellSelection, TransformConfig};

pub const SEED_ENV: &str = "FEDTRANS_SEED";

/// Transformation threshold; `"-inf"` disables growth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beta(pub f64);

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Beta;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Beta, E> {
                Ok(Beta(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Beta, E> {
                Ok(Beta(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Beta, E> {
                Ok(Beta(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Beta, E> {
                match v {
                    "-inf" => Ok(Beta(f64::NEG_INFINITY)),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Every key is optional in the file except `run_name` and `max_rounds`;
/// absent keys take the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_name: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_rounds: Option<usize>,

    pub participants_per_round: usize,
    pub lr: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub initial_hidden: Vec<usize>,
    pub warmup: bool,
    pub backward_multiplier: u64,

    pub gamma: usize,
    pub delta: usize,
    pub beta: Beta,
    pub activeness_window: usize,
    pub alpha: f64,
    pub widen_factor: usize,
    pub deepen_count: usize,
    pub split_jitter: f64,
    pub cell_selection: CellSelection,

    pub eta: f64,
    pub enable_soft: bool,

    pub eval_every: usize,
    pub convergence_window: usize,
    pub convergence_threshold: f64,

    pub num_clients: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub samples_per_client_min: usize,
    pub samples_per_client_max: usize,
    pub dirichlet_h: f64,
    pub blob_spread: f64,
    pub clusters_per_class: usize,
    pub probe_fraction: f64,

    pub cap_min: u64,
    pub cap_max: u64,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r = RunConfig::default();
        Self {
            run_name: None,
            out_dir: None,
            seed: None,
            max_rounds: None,
            participants_per_round: r.participants_per_round,
            lr: r.lr,
            local_steps: r.local_steps,
            batch_size: r.batch_size,
            initial_hidden: r.initial_hidden,
            warmup: r.warmup,
            backward_multiplier: r.backward_multiplier,
            gamma: r.gamma,
            delta: r.delta,
            beta: Beta(r.beta),
            activeness_window: r.activeness_window,
            alpha: r.transform.alpha,
            widen_factor: r.transform.widen_factor,
            deepen_count: r.transform.deepen_count,
            split_jitter: r.transform.split_jitter,
            cell_selection: r.transform.selection,
            eta: r.aggregation.eta,
            enable_soft: r.aggregation.enable_soft,
            eval_every: r.eval_every,
            convergence_window: r.convergence_window,
            convergence_threshold: r.convergence_threshold,
            num_clients: r.data.num_clients,
            classes: r.data.classes,
            feature_dim: r.data.feature_dim,
            samples_per_client_min: r.data.samples_per_client.0,
            samples_per_client_max: r.data.samples_per_client.1,
            dirichlet_h: r.data.dirichlet_h,
            blob_spread: r.data.blob_spread,
            clusters_per_class: r.data.clusters_per_class,
            probe_fraction: r.data.probe_fraction,
            cap_min: r.capacity.cap_min,
            cap_max: r.capacity.cap_max,
            speed_min: r.capacity.speed_min,
            speed_max: r.capacity.speed_max,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file. `//` line comments are allowed. Errors carry
    /// `path:line:column`.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: cannot read config: {e}", path.display()))?;
        let cfg: Self = serde_json::from_str(&strip_comments(&text)).map_err(|e| {
            format!("{}:{}:{}: {}", path.display(), e.line(), e.column(), strip_position(&e))
        })?;
        if cfg.run_name.as_deref().is_none_or(str::is_empty) {
            return Err(format!("{}: missing required key `run_name`", path.display()));
        }
        if cfg.max_rounds.is_none() {
            return Err(format!("{}: missing required key `max_rounds`", path.display()));
        }
        Ok(cfg)
    }

    pub fn run_name(&self) -> &str {
        self.run_name.as_deref().unwrap_or("run")
    }

    /// `--seed`, then the config's `seed`, then `FEDTRANS_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, String> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
            Err(_) => Ok(0),
        }
    }

    pub fn to_run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            participants_per_round: self.participants_per_round,
            max_rounds: self.max_rounds.unwrap_or(0),
            lr: self.lr,
            local_steps: self.local_steps,
            batch_size: self.batch_size,
            initial_hidden: self.initial_hidden.clone(),
            gamma: self.gamma,
            delta: self.delta,
            beta: self.beta.0,
            activeness_window: self.activeness_window,
            transform: TransformConfig {
                alpha: self.alpha,
                widen_factor: self.widen_factor,
                deepen_count: self.deepen_count,
                selection: self.cell_selection,
                split_jitter: self.split_jitter,
            },
            aggregation: AggregationConfig {
                eta: self.eta,
                enable_soft: self.enable_soft,
            },
            warmup: self.warmup,
            backward_multiplier: self.backward_multiplier,
            eval_every: self.eval_every,
            convergence_window: self.convergence_window,
            convergence_threshold: self.convergence_threshold,
            data: DataConfig {
                num_clients: self.num_clients,
                classes: self.classes,
                feature_dim: self.feature_dim,
                samples_per_client: (self.samples_per_client_min, self.samples_per_client_max),
                dirichlet_h: self.dirichlet_h,
                blob_spread: self.blob_spread,
                clusters_per_class: self.clusters_per_class,
                probe_fraction: self.probe_fraction,
                seed,
            },
            capacity: CapacityConfig {
                cap_min: self.cap_min,
                cap_max: self.cap_max,
                speed_min: self.speed_min,
                speed_max: self.speed_max,
            },
            seed,
        }
    }
}

/// Blanks `//` comments outside string literals, keeping line and column
/// positions intact.
pub fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    let (mut in_string, mut escaped) = (false, false);
    while let Some(c) = chars.next() {
        if in_string {
            out.push(c);
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
        } else if c == '/' && chars.peek() == Some(&'/') {
            out.push(' ');
            while let Some(&n) = chars.peek() {
                if n == '\n' {
                    break;
                }
                out.push(if n == '\t' { '\t' } else { ' ' });
                chars.next();
            }
        } else {
            if c == '"' {
                in_string = true;
            }
            out.push(c);
        }
    }
    out
}

fn strip_position(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg,
    }
}
