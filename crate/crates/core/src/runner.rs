//! Experiment runner: one config, one mode, one artifact directory.
//!
//! Every run writes `resolved.json` (the config with defaults baked in,
//! enough to reproduce the run byte for byte), `summary.json`, and a
//! `metrics.csv` whose header is fixed per mode:
//!
//!   train   epoch,lr,mean_loss,mean_ce,mean_penalty,train_accuracy,eval_accuracy
//!   eval    split,n,accuracy
//!   drift   layer,t,tv
//!   theory  tau,vthr,reset,t,tv,rate,r2
//!   stress  sg_mode,vthr,reset,status,train_accuracy,test_accuracy
//!
//! Train adds `gradients.csv` (epoch,layer,abs_str,ratio_ag,grad_cv),
//! `rates.csv` (epoch,layer,rate) and `model.ckpt`; stress adds a
//! final-epoch `gradients.csv` keyed by cell (sg_mode,vthr,reset,layer,...).
//! Accuracies and rates are fractions in [0,1].

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{DatasetSpec, ExperimentConfig, Mode, NetSpec, Precision};
use crate::data::{load_idx, synth_gaussian_blobs_sep, Dataset};
use crate::diagnostics::{boundedness_ratio, drift_report, energy_estimate};
use crate::error::{Error, Result};
use crate::network::{small_net, tiny_net, Network, NeuronConfig};
use crate::surrogate::SurrogateConfig;
use crate::tensor::Scalar;
use crate::theory::{lemma1_check, parameter_sweep, simulate_chain, split_half_tv};
use crate::train::{evaluate, train, EpochLog, TrainConfig, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Map an error to the documented process exit code. Anything that smells of
/// the filesystem or a damaged artifact is I/O; the rest is a usage problem.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Io(_) | Error::Idx(_) | Error::Checkpoint(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Honor SNN_FORGE_THREADS before any parallel work spins up worker threads.
/// Unparseable values are ignored rather than fatal.
pub fn init_thread_pool() {
    if let Ok(raw) = env::var("SNN_FORGE_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

pub struct RunOutcome {
    /// 0 on success, 3 when a train run diverged. Artifacts exist either way.
    pub exit_code: i32,
    pub out_dir: PathBuf,
    pub summary: Value,
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

fn run_typed<S: Scalar>(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let resolved = cfg.resolved()?;
    write_json(&out_dir.join("resolved.json"), &resolved)?;

    let (exit_code, mut summary) = match cfg.mode {
        Mode::Train => run_train::<S>(cfg, &out_dir, &resolved)?,
        Mode::Eval => run_eval::<S>(cfg, &out_dir)?,
        Mode::Drift => run_drift::<S>(cfg, &out_dir)?,
        Mode::Theory => run_theory(cfg, &out_dir)?,
        Mode::Stress => run_stress::<S>(cfg, &out_dir)?,
    };

    summary["mode"] = json!(cfg.mode.as_str());
    summary["precision"] = json!(S::DTYPE);
    summary["seed"] = json!(cfg.seed);
    summary["elapsed_sec"] = json!(started.elapsed().as_secs_f64());
    summary["exit_code"] = json!(exit_code);
    write_json(&out_dir.join("summary.json"), &summary)?;

    Ok(RunOutcome {
        exit_code,
        out_dir,
        summary,
    })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(header.len() + 1 + rows.len() * 32);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn fmt_f(x: f64) -> String {
    format!("{}", x)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

/// Train/test pair. IDX pairs load from disk (optionally subsampled); blob
/// sets are generated. Without an explicit test pair the train set is split.
pub fn build_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::SynthBlobs {
            num_classes,
            n,
            dims,
            separation,
            seed,
            train_fraction,
        } => {
            let ds = synth_gaussian_blobs_sep(
                *num_classes,
                *n,
                (dims[0], dims[1], dims[2]),
                *separation,
                *seed,
            )?;
            ds.split(*train_fraction, seed.wrapping_add(1))
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            subsample,
            seed,
            train_fraction,
        } => {
            let mut train = load_idx(Path::new(train_images), Path::new(train_labels))?;
            if let Some(k) = subsample {
                train = train.subsample(*k, *seed)?;
            }
            match (test_images, test_labels) {
                (Some(ti), Some(tl)) => Ok((train, load_idx(Path::new(ti), Path::new(tl))?)),
                _ => train.split(*train_fraction, seed.wrapping_add(1)),
            }
        }
    }
}

pub fn build_net<S: Scalar>(
    spec: &NetSpec,
    neuron: &NeuronConfig,
    in_shape: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<Network<S>> {
    match spec {
        NetSpec::Small {
            dropout_p,
            readout_tau,
        } => small_net(in_shape, num_classes, neuron, *dropout_p, *readout_tau, seed),
        NetSpec::Tiny {
            hidden,
            readout_tau,
        } => tiny_net(in_shape, *hidden, num_classes, neuron, *readout_tau, seed),
    }
}

fn dataset_summary(train: &Dataset, test: &Dataset) -> Value {
    let (c, h, w) = train.shape_chw();
    json!({
        "train_n": train.len(),
        "test_n": test.len(),
        "num_classes": train.num_classes,
        "dims": [c, h, w],
    })
}

fn train_metric_rows(report: &TrainReport) -> Vec<String> {
    report
        .epochs
        .iter()
        .map(|e| {
            format!(
                "{},{},{},{},{},{},{}",
                e.epoch,
                fmt_f(e.lr),
                fmt_f(e.mean_loss),
                fmt_f(e.mean_ce),
                fmt_f(e.mean_penalty),
                fmt_f(e.train_accuracy),
                fmt_opt(e.eval_accuracy),
            )
        })
        .collect()
}

fn gradient_rows<'a>(
    epochs: impl Iterator<Item = &'a EpochLog>,
    key_of: impl Fn(&EpochLog) -> String,
) -> Vec<String> {
    let mut rows = Vec::new();
    for e in epochs {
        let key = key_of(e);
        for lr in &e.reports {
            rows.push(format!(
                "{},{},{},{},{}",
                key,
                lr.name,
                fmt_f(lr.report.abs_str),
                fmt_f(lr.report.ratio_ag),
                fmt_opt(lr.report.grad_cv),
            ));
        }
    }
    rows
}

fn run_train<S: Scalar>(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    resolved: &Value,
) -> Result<(i32, Value)> {
    let (train_ds, test_ds) = build_dataset(cfg.dataset.as_ref().expect("validated"))?;
    let neuron = cfg.neuron.as_ref().expect("validated");
    let net_spec = cfg.net.as_ref().expect("validated");
    let tc = cfg.train.as_ref().expect("validated");
    let mut net = build_net::<S>(
        net_spec,
        neuron,
        train_ds.shape_chw(),
        train_ds.num_classes,
        cfg.seed,
    )?;
    let x_train = train_ds.normalized_images::<S>();
    let x_test = test_ds.normalized_images_with::<S>(&train_ds.mean, &train_ds.std)?;

    let report = train(
        &mut net,
        &x_train,
        &train_ds.labels,
        tc,
        Some((&x_test, &test_ds.labels)),
    )?;

    write_csv(
        &out_dir.join("metrics.csv"),
        "epoch,lr,mean_loss,mean_ce,mean_penalty,train_accuracy,eval_accuracy",
        &train_metric_rows(&report),
    )?;
    write_csv(
        &out_dir.join("gradients.csv"),
        "epoch,layer,abs_str,ratio_ag,grad_cv",
        &gradient_rows(report.epochs.iter(), |e| e.epoch.to_string()),
    )?;
    let rate_rows: Vec<String> = report
        .epochs
        .iter()
        .flat_map(|e| {
            e.rates
                .iter()
                .map(move |(name, r)| format!("{},{},{}", e.epoch, name, fmt_f(*r)))
        })
        .collect();
    write_csv(&out_dir.join("rates.csv"), "epoch,layer,rate", &rate_rows)?;
    save_checkpoint(&net, resolved, &out_dir.join("model.ckpt"))?;

    // spike-driven energy from the last epoch's observed firing rates
    let energy = report.epochs.last().map(|e| -> Result<Value> {
        let (c, h, w) = train_ds.shape_chw();
        let counts = net.count_ops(&[c, h, w], tc.t_steps, &e.rates)?;
        Ok(json!({
            "ac": counts.ac,
            "mac": counts.mac,
            "mj": energy_estimate(counts.ac, counts.mac),
        }))
    });
    let energy = match energy {
        Some(e) => e?,
        None => Value::Null,
    };

    let summary = json!({
        "dataset": dataset_summary(&train_ds, &test_ds),
        "epochs_run": report.epochs.len(),
        "final_train_accuracy": report.final_accuracy(),
        "final_eval_accuracy": report.final_eval_accuracy(),
        "diverged": report.diverged,
        "energy": energy,
        "checkpoint": out_dir.join("model.ckpt").display().to_string(),
    });
    let exit = if report.diverged.is_some() {
        EXIT_DIVERGENCE
    } else {
        EXIT_OK
    };
    Ok((exit, summary))
}

fn run_eval<S: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(i32, Value)> {
    let (train_ds, test_ds) = build_dataset(cfg.dataset.as_ref().expect("validated"))?;
    let tc = cfg.train.as_ref().expect("validated");
    let ckpt_path = cfg.checkpoint.as_ref().expect("validated");
    let (mut net, _echo) = load_checkpoint::<S>(Path::new(ckpt_path))?;

    let x_train = train_ds.normalized_images::<S>();
    let x_test = test_ds.normalized_images_with::<S>(&train_ds.mean, &train_ds.std)?;
    let acc_train = evaluate(&mut net, &x_train, &train_ds.labels, tc.t_steps, tc.batch_size)?;
    let acc_test = evaluate(&mut net, &x_test, &test_ds.labels, tc.t_steps, tc.batch_size)?;

    write_csv(
        &out_dir.join("metrics.csv"),
        "split,n,accuracy",
        &[
            format!("train,{},{}", train_ds.len(), fmt_f(acc_train)),
            format!("test,{},{}", test_ds.len(), fmt_f(acc_test)),
        ],
    )?;
    let summary = json!({
        "dataset": dataset_summary(&train_ds, &test_ds),
        "checkpoint": ckpt_path,
        "train_accuracy": acc_train,
        "test_accuracy": acc_test,
    });
    Ok((EXIT_OK, summary))
}

fn run_drift<S: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(i32, Value)> {
    let (train_ds, test_ds) = build_dataset(cfg.dataset.as_ref().expect("validated"))?;
    let tc = cfg.train.as_ref().expect("validated");
    let mut net: Network<S> = match &cfg.checkpoint {
        Some(p) => load_checkpoint::<S>(Path::new(p))?.0,
        None => build_net::<S>(
            cfg.net.as_ref().expect("validated"),
            cfg.neuron.as_ref().expect("validated"),
            train_ds.shape_chw(),
            train_ds.num_classes,
            cfg.seed,
        )?,
    };

    let x_test = test_ds.normalized_images_with::<S>(&train_ds.mean, &train_ds.std)?;
    let take = tc.batch_size.min(test_ds.len());
    let idxs: Vec<usize> = (0..take).collect();
    let batch = x_test.select_rows(&idxs)?;
    let report = drift_report(&mut net, &batch, tc.t_steps, None)?;

    let mut rows = Vec::new();
    for layer in &report.layers {
        for (i, tv) in layer.tv_to_reference.iter().enumerate() {
            rows.push(format!("{},{},{}", layer.name, i + 1, fmt_f(*tv)));
        }
    }
    write_csv(&out_dir.join("metrics.csv"), "layer,t,tv", &rows)?;

    let summary = json!({
        "dataset": dataset_summary(&train_ds, &test_ds),
        "batch_n": take,
        "reference_t": report.reference_t,
        "checkpoint": cfg.checkpoint,
        "layers": report.layers.iter().map(|l| json!({
            "name": l.name,
            "tv_first_step": l.tv_to_reference.first(),
            "empty": l.empty,
        })).collect::<Vec<_>>(),
    });
    Ok((EXIT_OK, summary))
}

fn run_theory(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(i32, Value)> {
    let spec = cfg.theory.as_ref().expect("validated");
    let chain = spec.chain;
    let taus = if spec.taus.is_empty() {
        vec![chain.tau]
    } else {
        spec.taus.clone()
    };
    let vthrs = if spec.vthrs.is_empty() {
        vec![chain.vthr]
    } else {
        spec.vthrs.clone()
    };

    let cells = parameter_sweep(&chain, &taus, &vthrs, spec.fit_floor)?;
    let mut rows = Vec::new();
    for cell in &cells {
        let (rate, r2) = match &cell.fit {
            Some(f) => (Some(f.rate), Some(f.r_squared)),
            None => (None, None),
        };
        for (i, tv) in cell.tvs.iter().enumerate() {
            rows.push(format!(
                "{},{},{},{},{},{},{}",
                fmt_f(cell.tau),
                fmt_f(cell.vthr),
                cell.reset.label(),
                i + 1,
                fmt_f(*tv),
                fmt_opt(rate),
                fmt_opt(r2),
            ));
        }
    }
    write_csv(
        &out_dir.join("metrics.csv"),
        "tau,vthr,reset,t,tv,rate,r2",
        &rows,
    )?;

    // the configured chain itself: fixed-point and mixing diagnostics
    let trace = simulate_chain(&chain)?;
    let finals = trace.final_samples();
    let lemma = lemma1_check(finals, spec.lemma_grid_step)?;
    let (within1, within2) = boundedness_ratio(finals, chain.vthr)?;
    let noise = split_half_tv(finals, 8, chain.seed.wrapping_add(1))?;

    let summary = json!({
        "chain": serde_json::to_value(chain)?,
        "u0_used": trace.u0_used,
        "mean_rate": trace.rate,
        "lemma1": {
            "c_star": lemma.c_star,
            "sample_mean": lemma.sample_mean,
            "grid_step": lemma.grid_step,
            "agrees_within_one_step": (lemma.c_star - lemma.sample_mean).abs() <= lemma.grid_step,
        },
        "boundedness": {"within_1vthr": within1, "within_2vthr": within2},
        "split_half_tv_noise": noise,
        "cells": cells.iter().map(|c| json!({
            "tau": c.tau,
            "vthr": c.vthr,
            "reset": c.reset.label(),
            "mean_rate": c.mean_rate,
            "fit": c.fit.as_ref().map(|f| json!({
                "rate": f.rate,
                "intercept": f.intercept,
                "r_squared": f.r_squared,
            })),
        })).collect::<Vec<_>>(),
    });
    Ok((EXIT_OK, summary))
}

fn run_stress<S: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(i32, Value)> {
    let (train_ds, test_ds) = build_dataset(cfg.dataset.as_ref().expect("validated"))?;
    let base_neuron = cfg.neuron.as_ref().expect("validated");
    let net_spec = cfg.net.as_ref().expect("validated");
    let tc: TrainConfig = cfg.train.as_ref().expect("validated").clone();
    let grid = cfg.stress.clone().unwrap_or_default();

    let x_train = train_ds.normalized_images::<S>();
    let x_test = test_ds.normalized_images_with::<S>(&train_ds.mean, &train_ds.std)?;

    let mut rows = Vec::new();
    let mut grad_rows = Vec::new();
    let mut cell_summaries = Vec::new();
    for mode in &grid.modes {
        for vthr in &grid.vthrs {
            for reset in &grid.resets {
                let mut neuron = base_neuron.clone();
                neuron.sg = SurrogateConfig::new(neuron.sg.shape, *mode, neuron.sg.gamma)?;
                neuron.init_vthr = *vthr;
                neuron.reset = *reset;
                let mut net = build_net::<S>(
                    net_spec,
                    &neuron,
                    train_ds.shape_chw(),
                    train_ds.num_classes,
                    cfg.seed,
                )?;
                let report = train(
                    &mut net,
                    &x_train,
                    &train_ds.labels,
                    &tc,
                    Some((&x_test, &test_ds.labels)),
                )?;
                let key = format!("{},{},{}", mode.label(), fmt_f(*vthr), reset.label());
                let status = if report.diverged.is_some() { "div." } else { "ok" };
                rows.push(format!(
                    "{},{},{},{}",
                    key,
                    status,
                    fmt_opt(report.final_accuracy()),
                    fmt_opt(report.final_eval_accuracy()),
                ));
                if let Some(last) = report.epochs.last() {
                    grad_rows.extend(gradient_rows(std::iter::once(last), |_| key.clone()));
                }
                cell_summaries.push(json!({
                    "sg_mode": mode.label(),
                    "vthr": vthr,
                    "reset": reset.label(),
                    "status": status,
                    "epochs_run": report.epochs.len(),
                    "train_accuracy": report.final_accuracy(),
                    "test_accuracy": report.final_eval_accuracy(),
                    "diverged": report.diverged,
                }));
            }
        }
    }

    write_csv(
        &out_dir.join("metrics.csv"),
        "sg_mode,vthr,reset,status,train_accuracy,test_accuracy",
        &rows,
    )?;
    write_csv(
        &out_dir.join("gradients.csv"),
        "sg_mode,vthr,reset,layer,abs_str,ratio_ag,grad_cv",
        &grad_rows,
    )?;

    let summary = json!({
        "dataset": dataset_summary(&train_ds, &test_ds),
        "grid": {
            "modes": grid.modes.iter().map(|m| m.label()).collect::<Vec<_>>(),
            "vthrs": grid.vthrs,
            "resets": grid.resets.iter().map(|r| r.label()).collect::<Vec<_>>(),
        },
        "cells": cell_summaries,
    });
    Ok((EXIT_OK, summary))
}
