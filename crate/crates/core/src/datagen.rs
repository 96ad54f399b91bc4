//! Seeded synthetic data: Gaussian class blobs, Dirichlet label skew across
//! clients and log-uniform device capacities.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Every client ends up with at least this many samples.
pub const MIN_CLIENT_SAMPLES: usize = 10;
/// Fraction of a client's samples held out as its local test split.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_clients: usize,
    pub classes: usize,
    pub feature_dim: usize,
    /// Inclusive range of samples per client.
    pub samples_per_client: (usize, usize),
    pub dirichlet_h: f64,
    /// Standard deviation of the per-sample noise around each cluster mean.
    pub blob_spread: f64,
    /// Gaussian clusters per class. One cluster per class gives a linear
    /// Bayes boundary; more make the task nonlinear.
    pub clusters_per_class: usize,
    /// Share of the generated data held back as a global probe set.
    pub probe_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_clients: 40,
            classes: 5,
            feature_dim: 32,
            samples_per_client: (40, 100),
            dirichlet_h: 0.5,
            blob_spread: 2.0,
            clusters_per_class: 1,
            probe_fraction: 0.1,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.samples_per_client;
        if self.num_clients < 1 {
            return Err(Error::Config("num_clients must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.feature_dim < 1 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        if !(self.dirichlet_h > 0.0) {
            return Err(Error::Config("dirichlet_h must be positive".into()));
        }
        if lo < MIN_CLIENT_SAMPLES || hi < lo {
            return Err(Error::Config(format!(
                "samples_per_client must satisfy {MIN_CLIENT_SAMPLES} <= min <= max"
            )));
        }
        if self.clusters_per_class < 1 {
            return Err(Error::Config("clusters_per_class must be at least 1".into()));
        }
        if !(self.blob_spread >= 0.0) {
            return Err(Error::Config("blob_spread must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.probe_fraction) {
            return Err(Error::Config("probe_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Samples available for partitioning plus the probe share.
    pub fn global_size(&self) -> usize {
        let pool = self.num_clients * self.samples_per_client.1;
        (pool as f64 / (1.0 - self.probe_fraction)).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityConfig {
    pub cap_min: u64,
    pub cap_max: u64,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl CapacityConfig {
    pub fn validate(&self, initial_macs: u64) -> Result<()> {
        if self.cap_min < initial_macs {
            return Err(Error::Config(format!(
                "cap_min {} cannot run the initial model ({} MACs)",
                self.cap_min, initial_macs
            )));
        }
        if (self.cap_max as f64) < 29.0 * self.cap_min as f64 {
            return Err(Error::Config(format!(
                "cap_max / cap_min must be at least 29, got {}",
                self.cap_max as f64 / self.cap_min as f64
            )));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return Err(Error::Config("speed range must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// Balanced Gaussian blobs. Every cluster mean is drawn once from a standard
/// normal; samples sit at `mean + blob_spread * noise` and cycle through the
/// classes, then through each class's clusters.
pub fn generate_dataset(config: &DataConfig) -> Result<Batch> {
    config.validate()?;
    let mut rng = stream(config.seed, Stream::Data, 0, 0);
    let d = config.feature_dim;
    let k = config.clusters_per_class;
    let means: Vec<Vec<f64>> = (0..config.classes * k)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let n = config.global_size();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % config.classes;
        let cluster = (i / config.classes) % k;
        for &mu in &means[c * k + cluster] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + config.blob_spread * z);
        }
        labels.push(c);
    }
    Batch::new(Tensor::new(vec![n, d], data)?, labels)
}

/// Splits off a random `fraction` of the samples as a probe set.
/// Returns `(rest, probe)`.
pub fn split_probe<R: Rng + ?Sized>(data: &Batch, fraction: f64, rng: &mut R) -> (Batch, Batch) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let k = (data.len() as f64 * fraction).round() as usize;
    (data.select(&idx[k..]), data.select(&idx[..k]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSplit {
    pub train: Batch,
    pub test: Batch,
}

impl ClientSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in self.train.labels.iter().chain(&self.test.labels) {
            counts[l] += 1;
        }
        counts
    }
}

/// Label proportions from a symmetric Dirichlet, via normalized Gamma draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(h: f64, classes: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(h, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Integer counts summing to `n`, proportional to `props`, never above `stock`.
fn allocate(props: &[f64], n: usize, stock: &[usize]) -> Vec<usize> {
    let mut counts = vec![0usize; props.len()];
    let mut remaining = n;
    let mut weights: Vec<f64> = props.to_vec();
    while remaining > 0 {
        let open: Vec<usize> = (0..props.len()).filter(|&c| counts[c] < stock[c]).collect();
        if open.is_empty() {
            break;
        }
        let mut total: f64 = open.iter().map(|&c| weights[c]).sum();
        if total <= 0.0 {
            for &c in &open {
                weights[c] = 1.0;
            }
            total = open.len() as f64;
        }
        // largest-remainder rounding over the open classes
        let target: Vec<(usize, f64)> = open
            .iter()
            .map(|&c| (c, weights[c] / total * remaining as f64))
            .collect();
        let mut given = 0;
        let mut fracs = Vec::with_capacity(target.len());
        for &(c, t) in &target {
            let take = (t.floor() as usize).min(stock[c] - counts[c]);
            counts[c] += take;
            given += take;
            fracs.push((c, t - t.floor()));
        }
        fracs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (c, _) in fracs {
            if given == remaining {
                break;
            }
            if counts[c] < stock[c] {
                counts[c] += 1;
                given += 1;
            }
        }
        if given == 0 {
            // every open class rounded to zero and none could absorb a unit
            break;
        }
        remaining -= given;
        for c in 0..props.len() {
            if counts[c] >= stock[c] {
                weights[c] = 0.0;
            }
        }
    }
    counts
}

/// Partitions `data` across `num_clients` with Dirichlet(h) label skew.
///
/// Samples are assigned without replacement. Each client draws its size from
/// `samples_per_client`, receives at least [`MIN_CLIENT_SAMPLES`], and keeps
/// its trailing 20% as a local test split.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    data: &Batch,
    num_clients: usize,
    h: f64,
    samples_per_client: (usize, usize),
    rng: &mut R,
) -> Result<Vec<ClientSplit>> {
    if !(h > 0.0) {
        return Err(Error::Config("dirichlet_h must be positive".into()));
    }
    let required = num_clients * MIN_CLIENT_SAMPLES;
    if data.len() < required {
        return Err(Error::DatasetTooSmall {
            available: data.len(),
            required,
        });
    }
    let classes = data.labels.iter().max().map_or(0, |m| m + 1);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in data.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for p in &mut pools {
        p.shuffle(rng);
    }

    let (lo, hi) = samples_per_client;
    let mut left = data.len();
    let mut splits = Vec::with_capacity(num_clients);
    for k in 0..num_clients {
        let reserve = (num_clients - k - 1) * MIN_CLIENT_SAMPLES;
        let n = rng
            .random_range(lo.max(MIN_CLIENT_SAMPLES)..=hi.max(MIN_CLIENT_SAMPLES))
            .min(left - reserve)
            .max(MIN_CLIENT_SAMPLES);
        let props = sample_dirichlet(h, classes, rng);
        let stock: Vec<usize> = pools.iter().map(Vec::len).collect();
        let counts = allocate(&props, n, &stock);
        let mut idx = Vec::with_capacity(n);
        for (c, &take) in counts.iter().enumerate() {
            let at = pools[c].len() - take;
            idx.extend(pools[c].drain(at..));
        }
        left -= idx.len();
        idx.shuffle(rng);
        splits.push(split_client(data, &idx));
    }
    Ok(splits)
}

fn test_size(n: usize) -> usize {
    ((n as f64 * TEST_FRACTION).round() as usize).clamp(1.min(n), n.saturating_sub(1).max(1))
}

fn split_client(data: &Batch, idx: &[usize]) -> ClientSplit {
    let cut = idx.len() - test_size(idx.len());
    ClientSplit {
        train: data.select(&idx[..cut]),
        test: data.select(&idx[cut..]),
    }
}

/// Log-uniform capacities and speeds. Two clients are pinned to `cap_min`
/// and `cap_max` (a single client gets `cap_min`).
pub fn sample_capacities<R: Rng + ?Sized>(
    config: &CapacityConfig,
    m: usize,
    rng: &mut R,
) -> Vec<(u64, f64)> {
    let log_uniform = |lo: f64, hi: f64, rng: &mut R| -> f64 {
        if hi <= lo {
            lo
        } else {
            (rng.random_range(lo.ln()..hi.ln())).exp()
        }
    };
    let mut out: Vec<(u64, f64)> = (0..m)
        .map(|_| {
            let cap = log_uniform(config.cap_min as f64, config.cap_max as f64, rng)
                .round()
                .clamp(config.cap_min as f64, config.cap_max as f64) as u64;
            let speed = log_uniform(config.speed_min, config.speed_max, rng);
            (cap, speed)
        })
        .collect();
    if m >= 1 {
        let positions = rand::seq::index::sample(rng, m, m.min(2));
        let pinned: Vec<usize> = positions.into_iter().collect();
        out[pinned[0]].0 = config.cap_min;
        if let Some(&p) = pinned.get(1) {
            out[p].0 = config.cap_max;
        }
    }
    out
}

/// Writes one CSV per client (`client_<id>.csv`, header `f0..f{d-1},label`).
/// Training rows come first; the trailing rows are the test split.
pub fn export_clients(dir: &Path, splits: &[ClientSplit]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, split) in splits.iter().enumerate() {
        let d = split.train.feature_dim();
        let mut w = csv::Writer::from_path(dir.join(format!("client_{id:04}.csv")))
            .map_err(csv_err)?;
        let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_err)?;
        for b in [&split.train, &split.test] {
            for r in 0..b.len() {
                let mut rec: Vec<String> = b.features.row(r).iter().map(|v| v.to_string()).collect();
                rec.push(b.labels[r].to_string());
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Reads a client CSV written by [`export_clients`] or prepared externally.
pub fn import_client(path: &Path) -> Result<ClientSplit> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let d = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
        Error::Config(format!("{}: header must list features then label", path.display()))
    })?;
    if header.get(d) != Some("label") {
        return Err(Error::Config(format!("{}: last column must be `label`", path.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = || Error::Config(format!("{}: bad value on data row {}", path.display(), line + 1));
        for i in 0..d {
            data.push(rec.get(i).ok_or_else(bad)?.trim().parse::<f64>().map_err(|_| bad())?);
        }
        labels.push(rec.get(d).ok_or_else(bad)?.trim().parse::<usize>().map_err(|_| bad())?);
    }
    let n = labels.len();
    let all = Batch::new(Tensor::new(vec![n, d], data)?, labels)?;
    let idx: Vec<usize> = (0..n).collect();
    Ok(split_client(&all, &idx))
}

/// Two-column CSV: `capacity_macs,speed`.
pub fn export_capacities(path: &Path, caps: &[(u64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["capacity_macs", "speed"]).map_err(csv_err)?;
    for (c, s) in caps {
        w.write_record([c.to_string(), s.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_capacities(path: &Path) -> Result<Vec<(u64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = || Error::Config(format!("{}: bad row {}", path.display(), line + 1));
        let cap = rec.get(0).ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let speed = rec.get(1).ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        out.push((cap, speed));
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}
