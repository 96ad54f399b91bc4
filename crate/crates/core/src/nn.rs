//! Forward pass, softmax cross-entropy gradients, SGD and client-side training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Activation, Batch, CellParams, Gradients, Model, WeightSet};
use crate::tensor::Tensor;

fn check_input(model: &Model, weights: &WeightSet, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    if batch.feature_dim() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "batch has {} features, model {} expects {}",
            batch.feature_dim(),
            model.id,
            model.input_dim()
        )));
    }
    weights.check_matches(model)
}

/// `x W^T + b` for a batch `x` of shape (batch, in).
fn dense(x: &Tensor, p: &CellParams) -> Tensor {
    let (n, in_dim) = (x.rows(), x.cols());
    let out_dim = p.weight.rows();
    let w = p.weight.data();
    let b = p.bias.data();
    let mut out = vec![0.0; n * out_dim];
    for r in 0..n {
        let xr = x.row(r);
        let orow = &mut out[r * out_dim..(r + 1) * out_dim];
        for (o, slot) in orow.iter_mut().enumerate() {
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for (wi, xi) in wrow.iter().zip(xr) {
                acc += wi * xi;
            }
            *slot = acc;
        }
    }
    Tensor::new(vec![n, out_dim], out).expect("dense output shape")
}

fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Logits of shape (batch, classes).
pub fn forward(model: &Model, weights: &WeightSet, batch: &Batch) -> Result<Tensor> {
    check_input(model, weights, batch)?;
    let mut x = batch.features.clone();
    for cell in &model.cells {
        x = dense(&x, weights.get(cell.id)?);
        if cell.activation == Activation::Relu {
            relu_in_place(&mut x);
        }
    }
    Ok(x)
}

pub fn predict(model: &Model, weights: &WeightSet, batch: &Batch) -> Result<Vec<usize>> {
    let logits = forward(model, weights, batch)?;
    Ok((0..logits.rows())
        .map(|r| argmax(logits.row(r)))
        .collect())
}

pub fn accuracy(model: &Model, weights: &WeightSet, batch: &Batch) -> Result<f64> {
    let preds = predict(model, weights, batch)?;
    let correct = preds
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Index of the first maximal entry.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy of logits against labels, plus d(loss)/d(logits).
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, classes) = (logits.rows(), logits.cols());
    let mut total = 0.0;
    let mut grad = Tensor::zeros(vec![n, classes]);
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Dimension(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        for (c, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            grad.set(r, c, (p - target) / n as f64);
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross-entropy loss is {loss}")));
    }
    Ok((loss, grad))
}

pub fn loss(model: &Model, weights: &WeightSet, batch: &Batch) -> Result<f64> {
    let logits = forward(model, weights, batch)?;
    cross_entropy(&logits, &batch.labels).map(|(l, _)| l)
}

/// Mean cross-entropy and its exact gradient with respect to every parameter.
pub fn loss_and_grads(
    model: &Model,
    weights: &WeightSet,
    batch: &Batch,
) -> Result<(f64, Gradients)> {
    check_input(model, weights, batch)?;

    // inputs[i] is the input to cell i; the last entry holds the logits.
    let mut inputs = Vec::with_capacity(model.cells.len() + 1);
    inputs.push(batch.features.clone());
    for cell in &model.cells {
        let mut z = dense(inputs.last().unwrap(), weights.get(cell.id)?);
        if cell.activation == Activation::Relu {
            relu_in_place(&mut z);
        }
        inputs.push(z);
    }

    let (loss, mut delta) = cross_entropy(inputs.last().unwrap(), &batch.labels)?;
    let mut grads = WeightSet::zeros_like(model);

    for (idx, cell) in model.cells.iter().enumerate().rev() {
        let x = &inputs[idx];
        let out = &inputs[idx + 1];
        if cell.activation == Activation::Relu {
            // relu'(z) is 1 exactly where the stored activation is positive.
            for (d, a) in delta.data_mut().iter_mut().zip(out.data()) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let n = x.rows();
        let (in_dim, out_dim) = (cell.in_dim, cell.out_dim);
        let g = grads.get_mut(cell.id)?;
        {
            let gw = g.weight.data_mut();
            for r in 0..n {
                let xr = x.row(r);
                let dr = delta.row(r);
                for o in 0..out_dim {
                    let d = dr[o];
                    if d == 0.0 {
                        continue;
                    }
                    let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
                    for (gi, xi) in grow.iter_mut().zip(xr) {
                        *gi += d * xi;
                    }
                }
            }
        }
        {
            let gb = g.bias.data_mut();
            for r in 0..n {
                for (b, d) in gb.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
        }
        if idx > 0 {
            let w = weights.get(cell.id)?.weight.data();
            let mut prev = vec![0.0; n * in_dim];
            for r in 0..n {
                let dr = delta.row(r);
                let pr = &mut prev[r * in_dim..(r + 1) * in_dim];
                for o in 0..out_dim {
                    let d = dr[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wi) in pr.iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                        *p += d * wi;
                    }
                }
            }
            delta = Tensor::new(vec![n, in_dim], prev)?;
        }
    }
    Ok((loss, grads))
}

/// `w - lr * g`
pub fn sgd_step(weights: &WeightSet, grads: &Gradients, lr: f64) -> Result<WeightSet> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let mut next = weights.clone();
    next.add_scaled(grads, -lr)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub weights: WeightSet,
    /// Mean of the per-step gradients.
    pub avg_grad: Gradients,
    /// Mean of the per-step losses, each measured before its step.
    pub avg_loss: f64,
}

/// Runs `steps` mini-batch SGD steps on a client's training split.
///
/// Mini-batches are drawn with replacement. When `batch_size` covers the
/// whole split every step uses the full split in order instead.
pub fn local_train<R: Rng + ?Sized>(
    model: &Model,
    weights: &WeightSet,
    data: &Batch,
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<LocalUpdate> {
    if data.is_empty() {
        return Err(Error::Dimension("client has no training samples".into()));
    }
    if steps == 0 || batch_size == 0 {
        return Err(Error::Config("steps and batch_size must be at least 1".into()));
    }
    let mut w = weights.clone();
    let mut grad_sum = WeightSet::zeros_like(model);
    let mut loss_sum = 0.0;
    let full_batch = batch_size >= data.len();
    let mut indices = vec![0usize; batch_size];
    for _ in 0..steps {
        let (loss, grads) = if full_batch {
            loss_and_grads(model, &w, data)?
        } else {
            for slot in indices.iter_mut() {
                *slot = rng.random_range(0..data.len());
            }
            loss_and_grads(model, &w, &data.select(&indices))?
        };
        w = sgd_step(&w, &grads, lr)?;
        grad_sum.add_scaled(&grads, 1.0)?;
        loss_sum += loss;
    }
    if !w.is_finite() {
        return Err(Error::Numeric("weights diverged during local training".into()));
    }
    grad_sum.scale(1.0 / steps as f64);
    Ok(LocalUpdate {
        weights: w,
        avg_grad: grad_sum,
        avg_loss: loss_sum / steps as f64,
    })
}
