//! Training loop: cross-entropy on time-averaged logits plus an optional
//! firing-rate penalty, SGD with momentum, cosine learning-rate schedule,
//! per-epoch gradient health reports.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{gradient_report, GradientReport};
use crate::error::{Error, Result};
use crate::network::{ForwardOptions, Layer, Network, WindowRecord};
use crate::tensor::{Scalar, Tensor};

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub t_steps: usize,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the (rate - target)^2 penalty per spiking layer; 0 disables.
    #[serde(default)]
    pub sparsity_lambda: f64,
    #[serde(default)]
    pub sparsity_target: f64,
    #[serde(default)]
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_steps: 4,
            epochs: 10,
            lr: 0.1,
            weight_decay: 0.0,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            sparsity_lambda: 0.0,
            sparsity_target: 0.0,
            verbose: false,
        }
    }
}

/// Half-cosine decay from `base` at epoch 0 to exactly 0 at `total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()) / 2.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub report: GradientReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_penalty: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    /// Firing rate per spiking layer, last batch of the epoch.
    pub rates: Vec<(String, f64)>,
    /// Gradient health per spiking layer, last batch of the epoch.
    pub reports: Vec<LayerReport>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Set when training halted on a non-finite membrane, loss, or gradient;
    /// the epochs recorded so far stay valid.
    pub diverged: Option<String>,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_accuracy)
    }

    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.eval_accuracy)
    }
}

struct BatchLoss {
    loss_node: crate::tape::NodeId,
    loss: f64,
    ce: f64,
    penalty: f64,
    accuracy: f64,
}

/// CE over the T-averaged logits, plus lambda * sum_l (rate_l - target)^2
/// with rates built on the tape so the penalty trains through the surrogate.
fn build_loss<S: Scalar>(
    rec: &mut WindowRecord<S>,
    labels: &[usize],
    lambda: f64,
    target: f64,
) -> Result<BatchLoss> {
    let t_steps = rec.logits.len();
    let mut acc = rec.logits[0];
    for t in 1..t_steps {
        acc = rec.tape.add(acc, rec.logits[t])?;
    }
    let mean_logits = rec.tape.scalar_mul(acc, S::from_f64(1.0 / t_steps as f64));
    let accuracy = accuracy_of(rec.tape.value(mean_logits), labels)?;
    let ce_node = rec.tape.softmax_cross_entropy(mean_logits, labels)?;
    let ce = rec.tape.value(ce_node).scalar_value().as_f64();

    let mut loss_node = ce_node;
    let mut penalty = 0.0;
    if lambda != 0.0 && !rec.lif.is_empty() {
        let spike_nodes: Vec<Vec<crate::tape::NodeId>> =
            rec.lif.iter().map(|tr| tr.spike_nodes.clone()).collect();
        let mut pen_node = None;
        for nodes in &spike_nodes {
            let mut rate = rec.tape.mean(nodes[0]);
            for &sn in &nodes[1..] {
                let m = rec.tape.mean(sn);
                rate = rec.tape.add(rate, m)?;
            }
            rate = rec.tape.scalar_mul(rate, S::from_f64(1.0 / t_steps as f64));
            let tgt = rec.tape.leaf(Tensor::scalar_tensor(S::from_f64(target)));
            let diff = rec.tape.sub(rate, tgt)?;
            let sq = rec.tape.mul(diff, diff)?;
            pen_node = Some(match pen_node {
                None => sq,
                Some(p) => rec.tape.add(p, sq)?,
            });
        }
        let pen = rec.tape.scalar_mul(pen_node.expect("lif list nonempty"), S::from_f64(lambda));
        penalty = rec.tape.value(pen).scalar_value().as_f64();
        loss_node = rec.tape.add(loss_node, pen)?;
    }

    let loss = rec.tape.value(loss_node).scalar_value().as_f64();
    Ok(BatchLoss {
        loss_node,
        loss,
        ce,
        penalty,
        accuracy,
    })
}

fn accuracy_of<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    let (b, c) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::shape("accuracy", "batch / label count mismatch"));
    }
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / b as f64)
}

/// v <- momentum v + (g + wd theta); theta <- theta - lr v.
/// Decay applies only where the binding says so; non-trainable entries and
/// entries without a gradient in `grads` are left alone.
pub fn sgd_step<S: Scalar>(
    net: &mut Network<S>,
    grads: &HashMap<String, Tensor<S>>,
    velocities: &mut HashMap<String, Vec<S>>,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
) {
    let lr = S::from_f64(lr);
    let wd = S::from_f64(weight_decay);
    let mom = S::from_f64(momentum);
    net.for_each_param_mut(|name, theta, decay, trainable| {
        if !trainable {
            return;
        }
        let Some(g) = grads.get(name) else { return };
        let v = velocities
            .entry(name.to_string())
            .or_insert_with(|| vec![S::zero(); theta.len()]);
        let td = theta.data_mut();
        for ((vi, &gi), ti) in v.iter_mut().zip(g.data()).zip(td.iter_mut()) {
            let mut step = gi;
            if decay {
                step = step + wd * *ti;
            }
            *vi = mom * *vi + step;
            *ti = *ti - lr * *vi;
        }
    });
}

/// Name of the nearest weighted layer before `idx`, the one whose weight
/// gradients describe what the spiking layer at `idx` passes upstream.
fn preceding_weighted_name<S: Scalar>(net: &Network<S>, idx: usize) -> Option<String> {
    net.layers[..idx].iter().rev().find_map(|l| match l {
        Layer::Conv2d(c) => Some(c.name.clone()),
        Layer::Linear(l) => Some(l.name.clone()),
        _ => None,
    })
}

fn layer_reports<S: Scalar>(
    net: &Network<S>,
    rec: &WindowRecord<S>,
) -> Result<Vec<LayerReport>> {
    let mut out = Vec::new();
    for tr in &rec.lif {
        let Some(wname) = preceding_weighted_name(net, tr.layer_index) else {
            continue;
        };
        let binding = rec
            .params
            .iter()
            .find(|b| b.name == format!("{}.weight", wname));
        let Some(binding) = binding else { continue };
        let Some(g) = rec.tape.grad(binding.node) else {
            continue;
        };
        let grads = g.to_f64_vec();
        let mut args = Vec::new();
        for a in &tr.sg_args {
            args.extend(a.to_f64_vec());
        }
        out.push(LayerReport {
            name: tr.name.clone(),
            report: gradient_report(&grads, &args, tr.gamma)?,
        });
    }
    Ok(out)
}

fn divergence_message(e: &Error) -> Option<String> {
    match e {
        Error::Divergence { .. } => Some(e.to_string()),
        _ => None,
    }
}

/// One full run over `(images, labels)`. Shuffling, dropout masks, and the
/// update order are all driven by `cfg.seed`, so a rerun reproduces the same
/// parameters bit for bit. Divergence ends the run early and is reported in
/// the result rather than as an error.
pub fn train<S: Scalar>(
    net: &mut Network<S>,
    images: &Tensor<S>,
    labels: &[usize],
    cfg: &TrainConfig,
    eval_set: Option<(&Tensor<S>, &[usize])>,
) -> Result<TrainReport> {
    let n = images.shape()[0];
    if n == 0 || n != labels.len() {
        return Err(Error::invalid("train", "images / labels length mismatch"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || cfg.t_steps == 0 {
        return Err(Error::invalid(
            "train",
            "batch_size, epochs, and t_steps must be positive",
        ));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::invalid("train", "lr must be finite and non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocities: HashMap<String, Vec<S>> = HashMap::new();
    let mut report = TrainReport::default();
    let mut indices: Vec<usize> = (0..n).collect();

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        indices.shuffle(&mut rng);

        let mut sum_loss = 0.0;
        let mut sum_ce = 0.0;
        let mut sum_pen = 0.0;
        let mut sum_acc = 0.0;
        let mut batches = 0.0;
        let mut last_rates = Vec::new();
        let mut last_reports = Vec::new();

        for chunk in indices.chunks(cfg.batch_size) {
            let batch = images.select_rows(chunk)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let mut opts = ForwardOptions {
                train: true,
                rng: Some(&mut rng),
            };
            let mut rec = match net.forward_static(&batch, cfg.t_steps, &mut opts) {
                Ok(r) => r,
                Err(e) => match divergence_message(&e) {
                    Some(msg) => {
                        report.diverged = Some(msg);
                        break 'epochs;
                    }
                    None => return Err(e),
                },
            };

            let bl = build_loss(&mut rec, &batch_labels, cfg.sparsity_lambda, cfg.sparsity_target)?;
            if !bl.loss.is_finite() {
                report.diverged = Some(format!("non-finite loss {} at epoch {}", bl.loss, epoch));
                break 'epochs;
            }
            rec.tape.backward(bl.loss_node)?;

            let mut grads: HashMap<String, Tensor<S>> = HashMap::new();
            for b in &rec.params {
                if !b.trainable {
                    continue;
                }
                let Some(g) = rec.tape.grad(b.node) else { continue };
                if !g.all_finite() {
                    report.diverged =
                        Some(format!("non-finite gradient for `{}` at epoch {}", b.name, epoch));
                    break 'epochs;
                }
                grads.insert(b.name.clone(), g.clone());
            }

            last_rates = Network::firing_rates(&rec);
            last_reports = layer_reports(net, &rec)?;

            sgd_step(net, &grads, &mut velocities, lr, cfg.weight_decay, cfg.momentum);

            sum_loss += bl.loss;
            sum_ce += bl.ce;
            sum_pen += bl.penalty;
            sum_acc += bl.accuracy;
            batches += 1.0;
        }

        if batches == 0.0 {
            break;
        }
        let eval_accuracy = match eval_set {
            Some((im, lb)) => Some(evaluate(net, im, lb, cfg.t_steps, cfg.batch_size)?),
            None => None,
        };
        let log = EpochLog {
            epoch,
            lr,
            mean_loss: sum_loss / batches,
            mean_ce: sum_ce / batches,
            mean_penalty: sum_pen / batches,
            train_accuracy: sum_acc / batches,
            eval_accuracy,
            rates: last_rates,
            reports: last_reports,
        };
        if cfg.verbose {
            let eval_part = match log.eval_accuracy {
                Some(a) => format!(" eval_acc {:.4}", a),
                None => String::new(),
            };
            println!(
                "epoch {:>3}  lr {:.5}  loss {:.5}  acc {:.4}{}",
                log.epoch, log.lr, log.mean_loss, log.train_accuracy, eval_part
            );
        }
        report.epochs.push(log);
    }
    Ok(report)
}

/// Accuracy by argmax of the T-averaged logits, eval mode.
pub fn evaluate<S: Scalar>(
    net: &mut Network<S>,
    images: &Tensor<S>,
    labels: &[usize],
    t_steps: usize,
    batch_size: usize,
) -> Result<f64> {
    let n = images.shape()[0];
    if n == 0 || n != labels.len() {
        return Err(Error::invalid("evaluate", "images / labels length mismatch"));
    }
    let idxs: Vec<usize> = (0..n).collect();
    let mut hits = 0.0;
    for chunk in idxs.chunks(batch_size.max(1)) {
        let batch = images.select_rows(chunk)?;
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let rec = net.forward_static(&batch, t_steps, &mut ForwardOptions::eval())?;
        let mut mean = rec.tape.value(rec.logits[0]).clone();
        for &l in &rec.logits[1..] {
            mean.add_assign(rec.tape.value(l));
        }
        let mean = mean.scale(S::from_f64(1.0 / t_steps as f64));
        hits += accuracy_of(&mean, &batch_labels)? * chunk.len() as f64;
    }
    Ok(hits / n as f64)
}
