//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run with `cargo test --release -p fedmorph-core --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use fedmorph_core::aggregate::{fedavg, soft_aggregate, AggregationConfig};
use fedmorph_core::clients::{assignment_probabilities, sample_model, select_clients, UtilityTable};
use fedmorph_core::nn::{accuracy, forward, local_train, loss, loss_and_grads};
use fedmorph_core::rng::{seeded, stream, Stream};
use fedmorph_core::runtime::{
    build_population, metrics_csv, run_training, Event, RunConfig, RunResult, Simulation,
};
use fedmorph_core::transformer::{compute_doc, CellSelection, TransformConfig, Transformer};
use fedmorph_core::{Batch, CellId, Model, Tensor, WeightSet};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn gaussian_batch<R: Rng>(n: usize, d: usize, classes: usize, rng: &mut R) -> Batch {
    let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Tensor::new(vec![n, d], data).unwrap(), labels).unwrap()
}

fn random_model<R: Rng>(rng: &mut R, max_width: usize) -> (Model, WeightSet) {
    let d = rng.random_range(1..=8);
    let depth = rng.random_range(1..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=max_width)).collect();
    let classes = rng.random_range(2..=5);
    let model = Model::initial(d, &hidden, classes);
    let mut w = WeightSet::init(&model, rng);
    for p in w.cells.values_mut() {
        for b in p.bias.data_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    (model, w)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(101);
    let mut worst = 0.0f64;
    let mut chains = 0;
    for _ in 0..50 {
        let (mut model, mut w) = random_model(&mut rng, 8);
        let inputs = gaussian_batch(100, model.input_dim(), model.output_dim(), &mut rng);
        let reference = forward(&model, &w, &inputs).unwrap();
        let mut transformer = Transformer::new(TransformConfig::default()).unwrap();
        let len = rng.random_range(1..=4);
        for step in 0..len {
            let act: BTreeMap<CellId, f64> =
                model.cells.iter().map(|c| (c.id, rng.random::<f64>())).collect();
            let t = transformer
                .transform_model(&model, &w, &act, step + 1, step, u64::MAX, &mut rng)
                .unwrap()
                .expect("unbounded capacity");
            model = t.child;
            w = t.weights;
            let out = forward(&model, &w, &inputs).unwrap();
            for (a, b) in out.data().iter().zip(reference.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        chains += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "function preservation",
        pass: worst <= 1e-9 && secs < 30.0,
        detail: format!("max |child - parent| = {worst:.2e} over {chains} chains, {secs:.2}s"),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = seeded(202);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (model, w) = random_model(&mut rng, 6);
        let batch = gaussian_batch(6, model.input_dim(), model.output_dim(), &mut rng);
        let (_, grads) = loss_and_grads(&model, &w, &batch).unwrap();
        for cell in &model.cells {
            for which in 0..2 {
                let n = {
                    let p = w.get(cell.id).unwrap();
                    if which == 0 { p.weight.len() } else { p.bias.len() }
                };
                for i in 0..n {
                    let eval = |delta: f64| {
                        let mut v = w.clone();
                        let p = v.get_mut(cell.id).unwrap();
                        let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                        t.data_mut()[i] += delta;
                        loss(&model, &v, &batch).unwrap()
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let g = grads.get(cell.id).unwrap();
                    let analytic = if which == 0 { g.weight.data()[i] } else { g.bias.data()[i] };
                    // relative error, with an absolute floor for entries near zero
                    let scale = analytic.abs().max(numeric.abs()).max(1e-4);
                    worst = worst.max((analytic - numeric).abs() / scale);
                }
            }
        }
    }
    Outcome {
        id: 2,
        name: "gradient oracle",
        pass: worst <= 1e-5,
        detail: format!("max relative error {worst:.2e} over 20 instances"),
    }
}

fn criterion_3() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |label: &str, got: f64, want: f64, tol: f64| {
        let ok = (got - want).abs() <= tol;
        pass &= ok;
        notes.push(format!("{label}={got}"));
    };
    check("doc_const", compute_doc(&[2.5; 3], 2, 1, 2).unwrap(), 0.0, 0.0);
    let affine: Vec<f64> = (0..20).map(|i| 10.0 - 0.1 * i as f64).collect();
    check("doc_affine", compute_doc(&affine, 4, 3, 19).unwrap(), 0.1, 1e-12);
    check("doc_hand", compute_doc(&[1.0, 0.8, 0.7], 2, 1, 2).unwrap(), 0.15, 1e-12);

    let p = assignment_probabilities(&[std::f64::consts::LN_2, 0.0]);
    check("p0", p[0], 2.0 / 3.0, 1e-12);
    check("p1", p[1], 1.0 / 3.0, 1e-12);

    let mut table = UtilityTable::default();
    table.set(0, 0, 0.5);
    table.update_utilities(0, -0.5, |_| 0.5);
    check("utility", table.get(0, 0).unwrap(), 0.75, 0.0);

    let model = Model::initial(3, &[4], 2);
    let mut child = model.clone();
    child.id = 1;
    child.parent_id = Some(0);
    let mut rng = seeded(303);
    let w0 = WeightSet::init(&model, &mut rng);
    let mut w1 = WeightSet::init(&child, &mut rng);
    w1.model_id = 1;
    let weights = BTreeMap::from([(0, w0.clone()), (1, w1.clone())]);
    let out = soft_aggregate(&[model, child], &weights, 0, &AggregationConfig::default()).unwrap();
    let mut dev = 0.0f64;
    for (id, p) in &out[&1].cells {
        let (a, b) = (w0.get(*id).unwrap(), w1.get(*id).unwrap());
        for ((o, x), y) in p.weight.data().iter().zip(a.weight.data()).zip(b.weight.data()) {
            dev = dev.max((o - (x + y) / 2.0).abs());
        }
        for ((o, x), y) in p.bias.data().iter().zip(a.bias.data()).zip(b.bias.data()) {
            dev = dev.max((o - (x + y) / 2.0).abs());
        }
    }
    check("soft_mean_dev", dev, 0.0, 1e-12);
    Outcome {
        id: 3,
        name: "formula oracles",
        pass,
        detail: notes.join(" "),
    }
}

fn criterion_4() -> Outcome {
    let mut rng = seeded(404);
    let mut counts = [0usize; 4];
    let n = 100_000;
    for _ in 0..n {
        counts[sample_model(&[0.0; 4], &mut rng).unwrap()] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Outcome {
        id: 4,
        name: "sampling fidelity",
        pass: freqs.iter().all(|f| (0.24..=0.26).contains(f)),
        detail: format!("frequencies {freqs:?}"),
    }
}

fn criterion_5() -> Outcome {
    let cfg = RunConfig { seed: 0, ..RunConfig::default() };
    let mut sim = Simulation::new(cfg.clone()).unwrap();
    let mut flow_checks = 0;
    let mut flow_ok = true;
    let mut rng = seeded(505);
    while sim.round() < cfg.max_rounds {
        sim.run_round().unwrap();
        if sim.models().len() > 1 && sim.round().is_multiple_of(10) {
            let models = sim.models().to_vec();
            let t = sim.round();
            let base = soft_aggregate(&models, sim.weights(), t, &cfg.aggregation).unwrap();
            let mut perturbed = sim.weights().clone();
            let largest = models.last().unwrap().id;
            for p in perturbed.get_mut(&largest).unwrap().cells.values_mut() {
                for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
                    *v += rng.random_range(-1.0..1.0);
                }
            }
            let after = soft_aggregate(&models, &perturbed, t, &cfg.aggregation).unwrap();
            for m in models.iter().filter(|m| m.id != largest) {
                flow_ok &= bits(&base[&m.id]) == bits(&after[&m.id]);
            }
            flow_checks += 1;
        }
    }
    sim.final_evaluate().unwrap();
    let mut violations = 0;
    let mut entries = 0;
    for e in sim.events() {
        match e {
            Event::Assign { macs, capacity, .. } | Event::Evaluate { macs, capacity, .. } => {
                entries += 1;
                if macs > capacity {
                    violations += 1;
                }
            }
            Event::Transform { .. } => {}
        }
    }
    Outcome {
        id: 5,
        name: "capacity safety + no upward flow",
        pass: violations == 0 && flow_ok && flow_checks > 0 && sim.round() == cfg.max_rounds,
        detail: format!(
            "{violations} violations in {entries} log entries over {} rounds, {} models; \
             {flow_checks} perturbation checks {}",
            sim.round(),
            sim.models().len(),
            if flow_ok { "bitwise clean" } else { "LEAKED" }
        ),
    }
}

fn bits(w: &WeightSet) -> Vec<u64> {
    w.cells
        .values()
        .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).map(|v| v.to_bits()))
        .collect()
}

fn criterion_6() -> Outcome {
    let cfg = RunConfig {
        beta: f64::NEG_INFINITY,
        seed: 6,
        ..RunConfig::default()
    };
    let result = run_training(&cfg).unwrap();
    let rounds = result.reports.len();

    // independent single-model FedAvg loop on the same random streams
    let pop = build_population(&cfg).unwrap();
    let model = cfg.initial_model();
    let mut w = WeightSet::init(&model, &mut stream(cfg.seed, Stream::Init, 0, 0));
    for t in 0..rounds as u64 {
        let chosen = select_clients(
            &pop.clients,
            cfg.participants_per_round,
            &mut stream(cfg.seed, Stream::Select, t, 0),
        )
        .unwrap();
        let trained: Vec<(WeightSet, usize)> = chosen
            .iter()
            .map(|&c| {
                let client = &pop.clients[c];
                let mut rng = stream(cfg.seed, Stream::Client, t, c as u64);
                let out = local_train(
                    &model,
                    &w,
                    &client.train,
                    cfg.local_steps,
                    cfg.batch_size,
                    cfg.lr,
                    &mut rng,
                )
                .unwrap();
                (out.weights, client.train.len())
            })
            .collect();
        let refs: Vec<(&WeightSet, usize)> = trained.iter().map(|(w, n)| (w, *n)).collect();
        w = fedavg(&refs).unwrap().unwrap();
    }
    let same = result.models.len() == 1 && bits(&result.weights[&0]) == bits(&w);
    Outcome {
        id: 6,
        name: "FedAvg degeneration",
        pass: same,
        detail: format!("{rounds} rounds, weights bitwise {}", if same { "equal" } else { "DIFFERENT" }),
    }
}

/// Probe accuracy of a model trained centrally on the union of client
/// training splits.
fn central_accuracy(cfg: &RunConfig, hidden: &[usize]) -> f64 {
    let pop = build_population(cfg).unwrap();
    let rows: Vec<Vec<f64>> = pop
        .clients
        .iter()
        .flat_map(|c| (0..c.train.len()).map(move |r| c.train.features.row(r).to_vec()))
        .collect();
    let labels: Vec<usize> = pop.clients.iter().flat_map(|c| c.train.labels.clone()).collect();
    let data = Batch::new(Tensor::from_rows(&rows).unwrap(), labels).unwrap();
    let model = Model::initial(cfg.data.feature_dim, hidden, cfg.data.classes);
    let mut rng = seeded(cfg.seed);
    let w = WeightSet::init(&model, &mut rng);
    let out = local_train(&model, &w, &data, 4000, 32, cfg.lr, &mut rng).unwrap();
    accuracy(&model, &out.weights, &pop.probe).unwrap()
}

struct Variants {
    full: Vec<RunResult>,
    baseline: Vec<RunResult>,
    random_cells: Vec<RunResult>,
    no_warmup: Vec<RunResult>,
}

fn run_variants() -> Variants {
    let mut v = Variants {
        full: vec![],
        baseline: vec![],
        random_cells: vec![],
        no_warmup: vec![],
    };
    for seed in SEEDS {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        v.full.push(run_training(&cfg).unwrap());
        v.baseline.push(run_training(&RunConfig { beta: f64::NEG_INFINITY, ..cfg.clone() }).unwrap());
        let mut rc = cfg.clone();
        rc.transform.selection = CellSelection::Random;
        v.random_cells.push(run_training(&rc).unwrap());
        v.no_warmup.push(run_training(&RunConfig { warmup: false, ..cfg }).unwrap());
    }
    v
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn transformations(r: &RunResult) -> usize {
    r.reports.iter().filter(|x| x.transformation.is_some()).count()
}

fn criterion_7(v: &Variants, secs: f64) -> Outcome {
    let cfg = RunConfig::default();
    let small = central_accuracy(&cfg, &cfg.initial_hidden);
    let wide = central_accuracy(&cfg, &[64]);
    let full = mean(v.full.iter().map(|r| r.mean_acc));
    let base = mean(v.baseline.iter().map(|r| r.mean_acc));
    let fired = v.full.iter().all(|r| transformations(r) >= 1);
    let per_seed: Vec<String> = v
        .full
        .iter()
        .zip(&v.baseline)
        .map(|(f, b)| format!("{:.3}/{:.3}", f.mean_acc, b.mean_acc))
        .collect();
    Outcome {
        id: 7,
        name: "end-to-end gain over single model",
        pass: wide - small >= 0.10 && full - base >= 0.05 && fired && secs < 600.0,
        detail: format!(
            "central underfit {:.1} pts ({small:.3} vs {wide:.3}); mean acc {full:.3} vs baseline {base:.3} \
             (+{:.1} pts; per seed {}); transformations {:?}; {secs:.0}s for 12 runs",
            100.0 * (wide - small),
            100.0 * (full - base),
            per_seed.join(" "),
            v.full.iter().map(transformations).collect::<Vec<_>>()
        ),
    }
}

/// Trailing 10-round mean of the per-round training loss.
fn smoothed_loss(r: &RunResult) -> Vec<f64> {
    (0..r.reports.len())
        .map(|i| {
            let lo = i.saturating_sub(9);
            mean(r.reports[lo..=i].iter().map(|x| x.mean_loss))
        })
        .collect()
}

/// Cumulative MACs at the first round whose smoothed loss reaches `target`.
/// Runs that never reach it report their total MACs, a lower bound.
fn macs_to_reach(r: &RunResult, target: f64) -> (f64, bool) {
    match smoothed_loss(r).iter().position(|&l| l <= target) {
        Some(i) => (r.reports[i].cum_macs as f64, true),
        None => (r.total_macs as f64, false),
    }
}

fn criterion_8(v: &Variants) -> Outcome {
    let full = mean(v.full.iter().map(|r| r.mean_acc));
    let random = mean(v.random_cells.iter().map(|r| r.mean_acc));
    let cold = mean(v.no_warmup.iter().map(|r| r.mean_acc));
    let mut full_macs = Vec::new();
    let mut cold_macs = Vec::new();
    let mut unreached = 0;
    for (f, n) in v.full.iter().zip(&v.no_warmup) {
        let target = smoothed_loss(f)[99.min(f.reports.len() - 1)];
        full_macs.push(macs_to_reach(f, target).0);
        let (m, reached) = macs_to_reach(n, target);
        unreached += usize::from(!reached);
        cold_macs.push(m);
    }
    let fm = mean(full_macs.into_iter());
    let cm = mean(cold_macs.into_iter());
    let order = full >= random && random >= cold;
    Outcome {
        id: 8,
        name: "ablation direction",
        pass: order && cm > fm,
        detail: format!(
            "mean acc full {full:.3} / random_cells {random:.3} / no_warmup {cold:.3} (ordering {}); \
             MACs to full's round-100 loss: full {fm:.3e} vs no_warmup {cm:.3e} ({unreached} seeds never reached)",
            if order { "holds" } else { "VIOLATED" }
        ),
    }
}

fn criterion_9(v: &Variants) -> Outcome {
    let gaps = |runs: &[RunResult]| -> Vec<f64> {
        runs.iter()
            .flat_map(|r| r.reports.iter().filter_map(|x| x.transformation.as_ref()))
            .map(|t| (t.probe_loss_parent - t.probe_loss_child).abs())
            .collect()
    };
    let warm = gaps(&v.full);
    let cold = gaps(&v.no_warmup);
    let warm_max = warm.iter().copied().fold(0.0, f64::max);
    let cold_min = cold.iter().copied().fold(f64::INFINITY, f64::min);
    Outcome {
        id: 9,
        name: "warm start",
        pass: !warm.is_empty() && !cold.is_empty() && warm_max <= 1e-6 && cold_min > 0.1,
        detail: format!(
            "{} warm transformations, max gap {warm_max:.2e}; {} cold transformations, min gap {cold_min:.3}",
            warm.len(),
            cold.len()
        ),
    }
}

fn criterion_10() -> Outcome {
    let cfg = RunConfig { seed: 10, ..RunConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut written = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let path = dir.path().join(name);
        std::fs::write(&path, metrics_csv(&run_training(&cfg).unwrap().reports)).unwrap();
        written.push(std::fs::read(&path).unwrap());
    }
    let same = written[0] == written[1];
    Outcome {
        id: 10,
        name: "reproducibility",
        pass: same && !written[0].is_empty(),
        detail: format!(
            "metrics CSVs of {} bytes {}",
            written[0].len(),
            if same { "identical" } else { "DIFFER" }
        ),
    }
}

#[test]
fn acceptance() {
    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    outcomes.push(criterion_5());
    outcomes.push(criterion_6());
    let start = Instant::now();
    let variants = run_variants();
    let secs = start.elapsed().as_secs_f64();
    outcomes.push(criterion_7(&variants, secs));
    outcomes.push(criterion_8(&variants));
    outcomes.push(criterion_9(&variants));
    outcomes.push(criterion_10());

    for o in &outcomes {
        println!(
            "criterion {:>2} [{}] {}: {}",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
