//! Monte-Carlo lab for the single-neuron membrane chain: geometric decay of
//! the state distribution toward stationarity, the mean-minimizes-squared-
//! deviation check, and tau / threshold sweeps of the fitted decay rate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diagnostics::{histogram, tv_distance, DRIFT_BINS};
use crate::error::{Error, Result};
use crate::lif::{scalar_step, ResetMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDist {
    Gaussian { mean: f64, std: f64 },
    Uniform { a: f64, b: f64 },
}

impl InputDist {
    fn validate(&self) -> Result<()> {
        match *self {
            InputDist::Gaussian { mean, std } => {
                if !mean.is_finite() || !std.is_finite() || std < 0.0 {
                    return Err(Error::invalid("input_dist", "gaussian needs finite mean, std >= 0"));
                }
            }
            InputDist::Uniform { a, b } => {
                if !a.is_finite() || !b.is_finite() || a > b {
                    return Err(Error::invalid("input_dist", "uniform needs finite a <= b"));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            InputDist::Gaussian { mean, std } => {
                if std == 0.0 {
                    mean
                } else {
                    Normal::new(mean, std).expect("validated").sample(rng)
                }
            }
            InputDist::Uniform { a, b } => {
                if a == b {
                    a
                } else {
                    rng.random_range(a..b)
                }
            }
        }
    }
}

/// Starting state: a fixed value, or the chain's own stationary mean
/// (estimated in a separate burn-in run that does not disturb the main
/// sample stream, so paired runs see identical inputs).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitMode {
    Value(f64),
    StationaryMean,
}

impl Serialize for InitMode {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        match self {
            InitMode::Value(v) => serializer.serialize_f64(*v),
            InitMode::StationaryMean => serializer.serialize_str("stationary-mean"),
        }
    }
}

struct InitModeVisitor;

impl Visitor<'_> for InitModeVisitor {
    type Value = InitMode;

    fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str("a number or the string \"stationary-mean\"")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<InitMode, E> {
        Ok(InitMode::Value(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<InitMode, E> {
        Ok(InitMode::Value(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<InitMode, E> {
        Ok(InitMode::Value(v as f64))
    }

    fn visit_str<E: de::Error>(self, s: &str) -> std::result::Result<InitMode, E> {
        if s == "stationary-mean" {
            Ok(InitMode::StationaryMean)
        } else {
            Err(E::custom(format!("unknown init mode `{}`", s)))
        }
    }
}

impl<'de> Deserialize<'de> for InitMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        d.deserialize_any(InitModeVisitor)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChainConfig {
    pub dist: InputDist,
    pub tau: f64,
    pub vthr: f64,
    pub reset: ResetMode,
    pub t_steps: usize,
    pub n_samples: usize,
    pub u0: InitMode,
    pub seed: u64,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dist.validate()?;
        if !(self.tau > 1.0) || !self.tau.is_finite() {
            return Err(Error::invalid("chain_config", "tau must be finite and > 1"));
        }
        if !(self.vthr > 0.0) || !self.vthr.is_finite() {
            return Err(Error::invalid("chain_config", "vthr must be finite and > 0"));
        }
        if self.t_steps == 0 || self.n_samples == 0 {
            return Err(Error::invalid("chain_config", "t_steps and n_samples must be positive"));
        }
        Ok(())
    }
}

/// Post-reset states of `n_samples` independent trajectories.
#[derive(Clone, Debug)]
pub struct ChainTrace {
    /// u[t-1][s] is trajectory s after step t, t = 1..=T.
    pub u: Vec<Vec<f64>>,
    /// Spike fraction per step.
    pub rate: Vec<f64>,
    /// Resolved starting value (the estimate, when u0 was stationary-mean).
    pub u0_used: f64,
}

impl ChainTrace {
    pub fn final_samples(&self) -> &[f64] {
        self.u.last().expect("t_steps >= 1")
    }

    /// Trajectory of one sample across time, for serial-dependence tests.
    pub fn series(&self, sample: usize) -> Vec<f64> {
        self.u.iter().map(|ut| ut[sample]).collect()
    }
}

const BURN_IN_STEPS: usize = 100;
const AVERAGE_STEPS: usize = 100;
// Offsets the burn-in estimator onto its own stream so a stationary-mean
// start consumes no draws from the main run.
const ESTIMATOR_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Mean of the stationary law: run past the transient, then average the next
/// window over time and samples.
pub fn stationary_mean(
    dist: InputDist,
    tau: f64,
    vthr: f64,
    reset: ResetMode,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    dist.validate()?;
    if !(tau > 1.0) || !(vthr > 0.0) || n_samples == 0 {
        return Err(Error::invalid("stationary_mean", "need tau > 1, vthr > 0, samples > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let mut u = 0.0;
        for _ in 0..BURN_IN_STEPS {
            let i = dist.sample(&mut rng);
            u = scalar_step(u, i, tau, vthr, reset).2;
        }
        for _ in 0..AVERAGE_STEPS {
            let i = dist.sample(&mut rng);
            u = scalar_step(u, i, tau, vthr, reset).2;
            acc += u;
        }
    }
    Ok(acc / (n_samples * AVERAGE_STEPS) as f64)
}

/// Run the chain. Same config and seed give bit-identical samples, and the
/// input stream does not depend on the choice of u0.
pub fn simulate_chain(cfg: &ChainConfig) -> Result<ChainTrace> {
    cfg.validate()?;
    let u0 = match cfg.u0 {
        InitMode::Value(v) => {
            if !v.is_finite() {
                return Err(Error::invalid("simulate_chain", "u0 must be finite"));
            }
            v
        }
        InitMode::StationaryMean => stationary_mean(
            cfg.dist,
            cfg.tau,
            cfg.vthr,
            cfg.reset,
            cfg.n_samples.min(10_000).max(1_000),
            cfg.seed.wrapping_add(ESTIMATOR_SEED_OFFSET),
        )?,
    };
    let mut u = vec![vec![0.0; cfg.n_samples]; cfg.t_steps];
    let mut spikes = vec![0.0; cfg.t_steps];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for s in 0..cfg.n_samples {
        let mut state = u0;
        for t in 0..cfg.t_steps {
            let i = cfg.dist.sample(&mut rng);
            let (_, sp, next) = scalar_step(state, i, cfg.tau, cfg.vthr, cfg.reset);
            u[t][s] = next;
            spikes[t] += sp;
            state = next;
        }
    }
    for sp in &mut spikes {
        *sp /= cfg.n_samples as f64;
    }
    Ok(ChainTrace {
        u,
        rate: spikes,
        u0_used: u0,
    })
}

/// Geometric-decay fit of the TV curve: slope and intercept of the
/// least-squares line through (t, ln TV[t]).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecayFit {
    /// Per-step slope of ln TV; negative means contraction.
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub const TV_FIT_FLOOR: f64 = 1e-3;

/// TV of each step's distribution against the final step's, all on one shared
/// 64-bin grid, plus the log-linear fit over the points above `floor`. The
/// final step compares to itself (TV exactly 0) and so never enters the fit.
/// Fewer than two usable points leaves the fit as None.
pub fn tv_decay_curve(u: &[Vec<f64>], floor: f64) -> Result<(Vec<f64>, Option<DecayFit>)> {
    if u.len() < 4 {
        return Err(Error::invalid("tv_decay_curve", "need at least 4 timesteps"));
    }
    if !(floor > 0.0) {
        return Err(Error::invalid("tv_decay_curve", "floor must be positive"));
    }
    let lo = u
        .iter()
        .flatten()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = u
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let href = histogram(u.last().expect("nonempty"), lo, hi, DRIFT_BINS)?;
    let mut tvs = Vec::with_capacity(u.len());
    for ut in u {
        let h = histogram(ut, lo, hi, DRIFT_BINS)?;
        tvs.push(tv_distance(&h, &href)?);
    }
    let pts: Vec<(f64, f64)> = tvs
        .iter()
        .enumerate()
        .filter(|(_, tv)| **tv > floor)
        .map(|(i, tv)| ((i + 1) as f64, tv.ln()))
        .collect();
    let fit = fit_line(&pts);
    Ok((tvs, fit))
}

fn fit_line(pts: &[(f64, f64)]) -> Option<DecayFit> {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let e = p.1 - (intercept + slope * p.0);
            e * e
        })
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Some(DecayFit {
        rate: slope,
        intercept,
        r_squared,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Lemma1Outcome {
    pub c_star: f64,
    pub sample_mean: f64,
    pub grid_step: f64,
}

/// Brute-force check that the sample mean minimizes mean squared deviation:
/// scan c over a grid spanning the sample range and return the argmin of
/// mean((U - c)^2).
pub fn lemma1_check(samples: &[f64], grid_step: f64) -> Result<Lemma1Outcome> {
    if samples.is_empty() {
        return Err(Error::invalid("lemma1_check", "no samples"));
    }
    if !(grid_step > 0.0) || !grid_step.is_finite() {
        return Err(Error::invalid("lemma1_check", "grid step must be positive"));
    }
    let lo = samples.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = samples.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let start = (lo / grid_step).floor() * grid_step;
    let cells = (((hi - start) / grid_step).ceil() as usize).max(1);
    let mut best_c = start;
    let mut best_val = f64::INFINITY;
    for k in 0..=cells {
        let c = start + k as f64 * grid_step;
        let val = samples.iter().map(|u| (u - c) * (u - c)).sum::<f64>() / samples.len() as f64;
        if val < best_val {
            best_val = val;
            best_c = c;
        }
    }
    let sample_mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(Lemma1Outcome {
        c_star: best_c,
        sample_mean,
        grid_step,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub tau: f64,
    pub vthr: f64,
    pub reset: ResetMode,
    pub tvs: Vec<f64>,
    pub fit: Option<DecayFit>,
    pub mean_rate: f64,
}

/// One decay fit per (tau, vthr) cell, same input law and seed everywhere.
/// Cells run in parallel; the output order is the row-major grid order no
/// matter which cell finishes first.
pub fn parameter_sweep(
    base: &ChainConfig,
    taus: &[f64],
    vthrs: &[f64],
    floor: f64,
) -> Result<Vec<SweepCell>> {
    if taus.is_empty() || vthrs.is_empty() {
        return Err(Error::invalid("parameter_sweep", "empty grid"));
    }
    if base.n_samples < 1_000 {
        return Err(Error::invalid(
            "parameter_sweep",
            "reported fits need at least 1000 samples",
        ));
    }
    let cells: Vec<(f64, f64)> = taus
        .iter()
        .flat_map(|&t| vthrs.iter().map(move |&v| (t, v)))
        .collect();
    cells
        .par_iter()
        .map(|&(tau, vthr)| {
            let cfg = ChainConfig {
                tau,
                vthr,
                ..*base
            };
            let trace = simulate_chain(&cfg)?;
            let (tvs, fit) = tv_decay_curve(&trace.u, floor)?;
            let mean_rate = trace.rate.iter().sum::<f64>() / trace.rate.len() as f64;
            Ok(SweepCell {
                tau,
                vthr,
                reset: cfg.reset,
                tvs,
                fit,
                mean_rate,
            })
        })
        .collect()
}

/// Sampling noise floor of the TV statistic: split one sample set in half at
/// random and measure the TV between the halves. Averaged over `rounds`
/// splits. An exponential fit is only meaningful above this level.
pub fn split_half_tv(samples: &[f64], rounds: usize, seed: u64) -> Result<f64> {
    if samples.len() < 4 || rounds == 0 {
        return Err(Error::invalid("split_half_tv", "need >= 4 samples and >= 1 round"));
    }
    let lo = samples.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = samples.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut acc = 0.0;
    for _ in 0..rounds {
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let half = samples.len() / 2;
        let a: Vec<f64> = idx[..half].iter().map(|&i| samples[i]).collect();
        let b: Vec<f64> = idx[half..].iter().map(|&i| samples[i]).collect();
        let ha = histogram(&a, lo, hi, DRIFT_BINS)?;
        let hb = histogram(&b, lo, hi, DRIFT_BINS)?;
        acc += tv_distance(&ha, &hb)?;
    }
    Ok(acc / rounds as f64)
}
