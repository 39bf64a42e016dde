//! Experiment configuration.
//!
//! A run is described by one JSON document. Command-line `--set key=value`
//! pairs patch the document before it is parsed into typed structs, using
//! dotted paths (`train.lr=0.05`, `neuron.sg.mode=relative`). Values are
//! parsed as JSON first, then fall back to a plain string, so
//! `--set out_dir=runs/x` works without quoting games.
//!
//! Sections are optional at parse time; `validate` enforces what each mode
//! actually needs so a theory config does not have to carry a dataset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::lif::ResetMode;
use crate::network::NeuronConfig;
use crate::surrogate::{ScaleMode, SurrogateConfig};
use crate::theory::{ChainConfig, TV_FIT_FLOOR};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
    Drift,
    Theory,
    Stress,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Drift => "drift",
            Mode::Theory => "theory",
            Mode::Stress => "stress",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_readout_tau() -> f64 {
    2.0
}

/// Architecture selector. Input shape and class count come from the dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum NetSpec {
    Small {
        #[serde(default)]
        dropout_p: f64,
        #[serde(default = "default_readout_tau")]
        readout_tau: f64,
    },
    Tiny {
        hidden: usize,
        #[serde(default = "default_readout_tau")]
        readout_tau: f64,
    },
}

fn default_separation() -> f64 {
    1.0
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Seeded Gaussian class blobs, split into train/test here.
    SynthBlobs {
        num_classes: usize,
        n: usize,
        dims: [usize; 3],
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    /// IDX image/label pairs. Without a test pair the train pair is split.
    Idx {
        train_images: String,
        train_labels: String,
        #[serde(default)]
        test_images: Option<String>,
        #[serde(default)]
        test_labels: Option<String>,
        /// Stratified subsample of the train pair before any split.
        #[serde(default)]
        subsample: Option<usize>,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
}

fn default_fit_floor() -> f64 {
    TV_FIT_FLOOR
}

fn default_lemma_grid_step() -> f64 {
    0.01
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySpec {
    pub chain: ChainConfig,
    /// Sweep grids. Empty means a single cell at the chain's own (tau, vthr).
    #[serde(default)]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub vthrs: Vec<f64>,
    #[serde(default = "default_fit_floor")]
    pub fit_floor: f64,
    #[serde(default = "default_lemma_grid_step")]
    pub lemma_grid_step: f64,
}

fn default_stress_modes() -> Vec<ScaleMode> {
    vec![
        ScaleMode::Absolute,
        ScaleMode::Relative,
        ScaleMode::ThresholdInvariant,
    ]
}

fn default_stress_vthrs() -> Vec<f64> {
    vec![0.1, 0.5, 1.0, 1.5, 2.0]
}

fn default_stress_resets() -> Vec<ResetMode> {
    vec![ResetMode::Soft, ResetMode::Hard]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressSpec {
    #[serde(default = "default_stress_modes")]
    pub modes: Vec<ScaleMode>,
    #[serde(default = "default_stress_vthrs")]
    pub vthrs: Vec<f64>,
    #[serde(default = "default_stress_resets")]
    pub resets: Vec<ResetMode>,
}

impl Default for StressSpec {
    fn default() -> Self {
        StressSpec {
            modes: default_stress_modes(),
            vthrs: default_stress_vthrs(),
            resets: default_stress_resets(),
        }
    }
}

fn default_out_dir() -> String {
    "runs/latest".to_string()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Seeds network initialization. Training and dataset draws carry their
    /// own seeds so each source of randomness can be varied independently.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub net: Option<NetSpec>,
    #[serde(default)]
    pub neuron: Option<NeuronConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub theory: Option<TheorySpec>,
    #[serde(default)]
    pub stress: Option<StressSpec>,
    /// Input checkpoint. Required by eval, optional for drift.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let need = |present: bool, section: &str| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "mode `{}` requires the `{}` section",
                    self.mode.as_str(),
                    section
                )))
            }
        };
        match self.mode {
            Mode::Train | Mode::Stress => {
                need(self.net.is_some(), "net")?;
                need(self.neuron.is_some(), "neuron")?;
                need(self.train.is_some(), "train")?;
                need(self.dataset.is_some(), "dataset")?;
            }
            Mode::Eval => {
                need(self.dataset.is_some(), "dataset")?;
                need(self.train.is_some(), "train")?;
                if self.checkpoint.is_none() {
                    return Err(Error::Config(
                        "mode `eval` requires `checkpoint` (path to a saved net)".to_string(),
                    ));
                }
            }
            Mode::Drift => {
                need(self.dataset.is_some(), "dataset")?;
                need(self.train.is_some(), "train")?;
                if self.checkpoint.is_none() {
                    need(self.net.is_some(), "net")?;
                    need(self.neuron.is_some(), "neuron")?;
                }
            }
            Mode::Theory => {
                need(self.theory.is_some(), "theory")?;
            }
        }
        if let Some(neuron) = &self.neuron {
            // reconstructing through the validating constructor catches a
            // gamma that an override pushed out of range
            SurrogateConfig::new(neuron.sg.shape, neuron.sg.mode, neuron.sg.gamma)?;
            if !(neuron.init_tau > 1.0) {
                return Err(Error::Config("neuron.init_tau must be > 1".to_string()));
            }
            if !(neuron.init_vthr > 0.0) {
                return Err(Error::Config("neuron.init_vthr must be > 0".to_string()));
            }
            if !(0.0 < neuron.mpinit_beta && neuron.mpinit_beta < 1.0) {
                return Err(Error::Config(
                    "neuron.mpinit_beta must lie in (0, 1)".to_string(),
                ));
            }
        }
        if let Some(train) = &self.train {
            if train.t_steps == 0 || train.batch_size == 0 {
                return Err(Error::Config(
                    "train.t_steps and train.batch_size must be positive".to_string(),
                ));
            }
            if self.mode != Mode::Eval && self.mode != Mode::Drift {
                if train.epochs == 0 {
                    return Err(Error::Config("train.epochs must be positive".to_string()));
                }
                if !(train.lr > 0.0) || !train.lr.is_finite() {
                    return Err(Error::Config("train.lr must be positive".to_string()));
                }
            }
        }
        if let Some(net) = &self.net {
            match net {
                NetSpec::Small { dropout_p, readout_tau } => {
                    if !(0.0..1.0).contains(dropout_p) {
                        return Err(Error::Config("net.dropout_p must lie in [0, 1)".to_string()));
                    }
                    if !(*readout_tau > 1.0) {
                        return Err(Error::Config("net.readout_tau must be > 1".to_string()));
                    }
                }
                NetSpec::Tiny { hidden, readout_tau } => {
                    if *hidden == 0 {
                        return Err(Error::Config("net.hidden must be positive".to_string()));
                    }
                    if !(*readout_tau > 1.0) {
                        return Err(Error::Config("net.readout_tau must be > 1".to_string()));
                    }
                }
            }
        }
        if let Some(ds) = &self.dataset {
            match ds {
                DatasetSpec::SynthBlobs {
                    num_classes,
                    n,
                    dims,
                    separation,
                    train_fraction,
                    ..
                } => {
                    if *num_classes < 2 || *n == 0 {
                        return Err(Error::Config(
                            "dataset needs at least 2 classes and 1 sample".to_string(),
                        ));
                    }
                    if dims.iter().any(|d| *d == 0) {
                        return Err(Error::Config("dataset.dims must be positive".to_string()));
                    }
                    if !(*separation > 0.0) {
                        return Err(Error::Config(
                            "dataset.separation must be positive".to_string(),
                        ));
                    }
                    if !(0.0 < *train_fraction && *train_fraction < 1.0) {
                        return Err(Error::Config(
                            "dataset.train_fraction must lie in (0, 1)".to_string(),
                        ));
                    }
                }
                DatasetSpec::Idx {
                    test_images,
                    test_labels,
                    train_fraction,
                    subsample,
                    ..
                } => {
                    if test_images.is_some() != test_labels.is_some() {
                        return Err(Error::Config(
                            "dataset needs both test_images and test_labels or neither"
                                .to_string(),
                        ));
                    }
                    if test_images.is_none() && !(0.0 < *train_fraction && *train_fraction < 1.0) {
                        return Err(Error::Config(
                            "dataset.train_fraction must lie in (0, 1)".to_string(),
                        ));
                    }
                    if subsample == &Some(0) {
                        return Err(Error::Config(
                            "dataset.subsample must be positive when given".to_string(),
                        ));
                    }
                }
            }
        }
        if let Some(theory) = &self.theory {
            theory.chain.validate()?;
            for tau in &theory.taus {
                if !(*tau > 1.0) {
                    return Err(Error::Config("theory.taus entries must be > 1".to_string()));
                }
            }
            for vthr in &theory.vthrs {
                if !(*vthr > 0.0) {
                    return Err(Error::Config(
                        "theory.vthrs entries must be > 0".to_string(),
                    ));
                }
            }
            if !(theory.fit_floor >= 0.0) {
                return Err(Error::Config(
                    "theory.fit_floor must be non-negative".to_string(),
                ));
            }
            if !(theory.lemma_grid_step > 0.0) {
                return Err(Error::Config(
                    "theory.lemma_grid_step must be positive".to_string(),
                ));
            }
        }
        if let Some(stress) = &self.stress {
            if stress.modes.is_empty() || stress.vthrs.is_empty() || stress.resets.is_empty() {
                return Err(Error::Config(
                    "stress grids must not be empty".to_string(),
                ));
            }
            if stress.vthrs.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(
                    "stress.vthrs entries must be > 0".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// The document echoed into `resolved.json` and checkpoint manifests.
    /// Serializing the typed struct bakes every default in, so the echo
    /// reproduces the run without the original file or overrides.
    pub fn resolved(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }
}

/// Patch one dotted path into a JSON document, creating intermediate objects.
/// The value text is parsed as JSON when possible, else kept as a string.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    if path.is_empty() || path.split('.').any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad --set path `{}`", path)));
    }
    if !doc.is_object() {
        return Err(Error::Config("config root must be a JSON object".to_string()));
    }
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().expect("walk stays on objects");
        let next = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if !next.is_object() {
            return Err(Error::Config(format!(
                "--set {}: `{}` holds a value, not a section",
                path, p
            )));
        }
        cur = next;
    }
    let leaf = *parts.last().expect("path is non-empty");
    let value = serde_json::from_str::<Value>(raw)
        .unwrap_or_else(|_| Value::String(raw.to_string()));
    cur.as_object_mut()
        .expect("walk stays on objects")
        .insert(leaf.to_string(), value);
    Ok(())
}

/// `key=value` pairs as they arrive from the command line.
pub fn parse_set_arg(arg: &str) -> Result<(&str, &str)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k, v)),
        _ => Err(Error::Config(format!(
            "--set expects key=value, got `{}`",
            arg
        ))),
    }
}

pub fn config_from_value(mut doc: Value, sets: &[(String, String)]) -> Result<ExperimentConfig> {
    for (path, raw) in sets {
        apply_override(&mut doc, path, raw)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc)
        .map_err(|e| Error::Config(format!("config field `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, sets: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    if !doc.is_object() {
        return Err(Error::Config(format!(
            "{}: config root must be a JSON object",
            path.display()
        )));
    }
    config_from_value(doc, sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn train_doc() -> Value {
        json!({
            "mode": "train",
            "precision": "f64",
            "seed": 7,
            "out_dir": "runs/demo",
            "net": {"arch": "tiny", "hidden": 16},
            "neuron": {
                "sg": {"shape": "triangular", "mode": "threshold_invariant", "gamma": 1.0},
                "reset": "soft",
                "init_tau": 2.0,
                "init_vthr": 1.0,
                "train_tau": false,
                "train_vthr": false,
                "mpinit_enabled": true,
                "mpinit_beta": 0.9
            },
            "train": {
                "t_steps": 4, "epochs": 2, "lr": 0.1,
                "batch_size": 8, "seed": 3
            },
            "dataset": {
                "kind": "synth_blobs",
                "num_classes": 3, "n": 60, "dims": [1, 4, 4], "seed": 1
            }
        })
    }

    #[test]
    fn full_train_config_parses_with_defaults_filled() {
        let cfg = config_from_value(train_doc(), &[]).unwrap();
        assert_eq!(cfg.mode, Mode::Train);
        assert_eq!(cfg.precision, Precision::F64);
        let train = cfg.train.as_ref().unwrap();
        assert_eq!(train.momentum, 0.9);
        assert_eq!(train.weight_decay, 0.0);
        match cfg.net.as_ref().unwrap() {
            NetSpec::Tiny { hidden, readout_tau } => {
                assert_eq!(*hidden, 16);
                assert_eq!(*readout_tau, 2.0);
            }
            _ => panic!("expected tiny"),
        }
        match cfg.dataset.as_ref().unwrap() {
            DatasetSpec::SynthBlobs { separation, train_fraction, .. } => {
                assert_eq!(*separation, 1.0);
                assert_eq!(*train_fraction, 0.8);
            }
            _ => panic!("expected blobs"),
        }
    }

    #[test]
    fn overrides_patch_nested_fields_and_create_sections() {
        let sets = vec![
            ("train.lr".to_string(), "0.05".to_string()),
            ("neuron.sg.mode".to_string(), "relative".to_string()),
            ("out_dir".to_string(), "runs/elsewhere".to_string()),
            ("stress.vthrs".to_string(), "[0.1, 2.0]".to_string()),
            ("train.verbose".to_string(), "true".to_string()),
        ];
        let cfg = config_from_value(train_doc(), &sets).unwrap();
        assert_eq!(cfg.train.as_ref().unwrap().lr, 0.05);
        assert!(cfg.train.as_ref().unwrap().verbose);
        assert_eq!(
            cfg.neuron.as_ref().unwrap().sg.mode,
            ScaleMode::Relative
        );
        assert_eq!(cfg.out_dir, "runs/elsewhere");
        assert_eq!(cfg.stress.as_ref().unwrap().vthrs, vec![0.1, 2.0]);
    }

    #[test]
    fn override_value_falls_back_to_string() {
        let mut doc = json!({});
        apply_override(&mut doc, "a.b", "not json [").unwrap();
        assert_eq!(doc["a"]["b"], json!("not json ["));
        apply_override(&mut doc, "a.c", "2.5").unwrap();
        assert_eq!(doc["a"]["c"], json!(2.5));
    }

    #[test]
    fn override_through_scalar_is_rejected() {
        let mut doc = json!({"seed": 7});
        let err = apply_override(&mut doc, "seed.nested", "1").unwrap_err();
        assert!(err.to_string().contains("holds a value"), "{}", err);
    }

    #[test]
    fn set_arg_parsing() {
        assert_eq!(parse_set_arg("a.b=c=d").unwrap(), ("a.b", "c=d"));
        assert!(parse_set_arg("novalue").is_err());
        assert!(parse_set_arg("=x").is_err());
    }

    #[test]
    fn mode_requirements_enforced() {
        let doc = json!({"mode": "theory"});
        let err = config_from_value(doc, &[]).unwrap_err();
        assert!(err.to_string().contains("`theory` section"), "{}", err);

        let mut doc = train_doc();
        doc["mode"] = json!("eval");
        let err = config_from_value(doc, &[]).unwrap_err();
        assert!(err.to_string().contains("checkpoint"), "{}", err);
    }

    #[test]
    fn field_errors_carry_a_path() {
        let mut doc = train_doc();
        doc["neuron"]["sg"]["shape"] = json!("circular");
        let err = config_from_value(doc, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("neuron.sg.shape"), "{}", msg);

        let mut doc = train_doc();
        doc["unknown_knob"] = json!(1);
        let err = config_from_value(doc, &[]).unwrap_err();
        assert!(err.to_string().contains("unknown_knob"), "{}", err);
    }

    #[test]
    fn out_of_range_values_rejected_after_overrides() {
        let sets = vec![("neuron.sg.gamma".to_string(), "-1".to_string())];
        assert!(config_from_value(train_doc(), &sets).is_err());
        let sets = vec![("train.lr".to_string(), "0".to_string())];
        assert!(config_from_value(train_doc(), &sets).is_err());
        let sets = vec![("dataset.train_fraction".to_string(), "1.5".to_string())];
        assert!(config_from_value(train_doc(), &sets).is_err());
    }

    #[test]
    fn theory_config_needs_no_dataset() {
        let doc = json!({
            "mode": "theory",
            "theory": {
                "chain": {
                    "dist": {"kind": "gaussian", "mean": 1.0, "std": 1.0},
                    "tau": 2.0, "vthr": 1.0, "reset": "soft",
                    "t_steps": 10, "n_samples": 1000,
                    "u0": 0.0, "seed": 5
                }
            }
        });
        let cfg = config_from_value(doc, &[]).unwrap();
        let th = cfg.theory.as_ref().unwrap();
        assert!(th.taus.is_empty());
        assert_eq!(th.lemma_grid_step, 0.01);
        assert_eq!(th.fit_floor, TV_FIT_FLOOR);
    }

    #[test]
    fn stress_defaults_cover_the_full_grid() {
        let spec = StressSpec::default();
        assert_eq!(spec.modes.len(), 3);
        assert_eq!(spec.vthrs, vec![0.1, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(spec.resets.len(), 2);
    }

    #[test]
    fn resolved_echo_round_trips() {
        let cfg = config_from_value(train_doc(), &[]).unwrap();
        let echo = cfg.resolved().unwrap();
        let back = config_from_value(echo.clone(), &[]).unwrap();
        assert_eq!(echo, back.resolved().unwrap());
    }
}
