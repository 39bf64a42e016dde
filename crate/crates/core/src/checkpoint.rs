//! Checkpoint serialization.
//!
//! Layout: the bytes `SNNCKPT1`, a little-endian u32 manifest length, a UTF-8
//! JSON manifest, then raw little-endian float payloads in manifest order.
//! The manifest carries the architecture, per-tensor name/shape/dtype/offset,
//! and a config echo. Weight tensors use the net's compute precision; batch
//! norm running statistics are always f64 so round trips are exact at any
//! precision. Spiking-layer running-mean state is small and structured, so it
//! rides in the manifest (serde_json prints f64 shortest-round-trip, which
//! parses back to the identical bits).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::{LifParams, ResetMode};
use crate::mpinit::MpInitState;
use crate::network::{
    BatchNormLayer, Conv2dLayer, IntegratorLayer, Layer, LifLayer, LinearLayer, Network,
};
use crate::surrogate::SurrogateConfig;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SNNCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        name: String,
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        name: String,
        in_f: usize,
        out_f: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
        momentum: f64,
        eps: f64,
        frozen: bool,
    },
    Lif {
        name: String,
        reset: ResetMode,
        train_tau: bool,
        train_vthr: bool,
        sg: SurrogateConfig,
        mpinit: MpInitState,
        mpinit_enabled: bool,
        absorbed: bool,
    },
    AvgPool {
        k: usize,
    },
    Flatten,
    Dropout {
        p: f64,
    },
    Integrator {
        name: String,
        tau: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// byte offset from payload start
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    precision: String,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
    config: serde_json::Value,
}

fn spec_of<S: Scalar>(layer: &Layer<S>) -> LayerSpec {
    match layer {
        Layer::Conv2d(c) => {
            let s = c.weight.shape();
            LayerSpec::Conv2d {
                name: c.name.clone(),
                out_ch: s[0],
                in_ch: s[1],
                kh: s[2],
                kw: s[3],
                stride: c.stride,
                pad: c.pad,
            }
        }
        Layer::Linear(l) => {
            let s = l.weight.shape();
            LayerSpec::Linear {
                name: l.name.clone(),
                in_f: s[0],
                out_f: s[1],
            }
        }
        Layer::BatchNorm(bn) => LayerSpec::BatchNorm {
            name: bn.name.clone(),
            channels: bn.running_mean.len(),
            momentum: bn.momentum,
            eps: bn.eps,
            frozen: bn.frozen,
        },
        Layer::Lif(lf) => LayerSpec::Lif {
            name: lf.name.clone(),
            reset: lf.params.reset,
            train_tau: lf.params.train_tau,
            train_vthr: lf.params.train_vthr,
            sg: lf.sg,
            mpinit: lf.mpinit.clone(),
            mpinit_enabled: lf.mpinit_enabled,
            absorbed: lf.absorbed,
        },
        Layer::AvgPool { k } => LayerSpec::AvgPool { k: *k },
        Layer::Flatten => LayerSpec::Flatten,
        Layer::Dropout { p } => LayerSpec::Dropout { p: *p },
        Layer::Integrator(ig) => LayerSpec::Integrator {
            name: ig.name.clone(),
            tau: ig.tau,
        },
    }
}

fn layer_from_spec<S: Scalar>(spec: &LayerSpec) -> Layer<S> {
    match spec {
        LayerSpec::Conv2d {
            name,
            out_ch,
            in_ch,
            kh,
            kw,
            stride,
            pad,
        } => Layer::Conv2d(Conv2dLayer {
            name: name.clone(),
            weight: Tensor::zeros(&[*out_ch, *in_ch, *kh, *kw]),
            bias: Tensor::zeros(&[*out_ch]),
            stride: *stride,
            pad: *pad,
        }),
        LayerSpec::Linear { name, in_f, out_f } => Layer::Linear(LinearLayer {
            name: name.clone(),
            weight: Tensor::zeros(&[*in_f, *out_f]),
            bias: Tensor::zeros(&[*out_f]),
        }),
        LayerSpec::BatchNorm {
            name,
            channels,
            momentum,
            eps,
            frozen,
        } => Layer::BatchNorm(BatchNormLayer {
            name: name.clone(),
            gain: Tensor::zeros(&[*channels]),
            shift: Tensor::zeros(&[*channels]),
            running_mean: vec![0.0; *channels],
            running_var: vec![0.0; *channels],
            momentum: *momentum,
            eps: *eps,
            frozen: *frozen,
        }),
        LayerSpec::Lif {
            name,
            reset,
            train_tau,
            train_vthr,
            sg,
            mpinit,
            mpinit_enabled,
            absorbed,
        } => Layer::Lif(LifLayer {
            name: name.clone(),
            params: LifParams {
                w_raw: Tensor::zeros(&[1]),
                k_raw: Tensor::zeros(&[1]),
                reset: *reset,
                train_tau: *train_tau,
                train_vthr: *train_vthr,
            },
            sg: *sg,
            mpinit: mpinit.clone(),
            mpinit_enabled: *mpinit_enabled,
            absorbed: *absorbed,
        }),
        LayerSpec::AvgPool { k } => Layer::AvgPool { k: *k },
        LayerSpec::Flatten => Layer::Flatten,
        LayerSpec::Dropout { p } => Layer::Dropout { p: *p },
        LayerSpec::Integrator { name, tau } => Layer::Integrator(IntegratorLayer {
            name: name.clone(),
            tau: *tau,
        }),
    }
}

enum Slot<'a, S> {
    Native(&'a Tensor<S>),
    Stats(&'a [f64]),
}

/// Deterministic payload order: layer order, fixed field order within a layer.
fn collect_slots<S: Scalar>(net: &Network<S>) -> Vec<(String, Slot<'_, S>)> {
    let mut out = Vec::new();
    for layer in &net.layers {
        match layer {
            Layer::Conv2d(c) => {
                out.push((format!("{}.weight", c.name), Slot::Native(&c.weight)));
                out.push((format!("{}.bias", c.name), Slot::Native(&c.bias)));
            }
            Layer::Linear(l) => {
                out.push((format!("{}.weight", l.name), Slot::Native(&l.weight)));
                out.push((format!("{}.bias", l.name), Slot::Native(&l.bias)));
            }
            Layer::BatchNorm(bn) => {
                out.push((format!("{}.gain", bn.name), Slot::Native(&bn.gain)));
                out.push((format!("{}.shift", bn.name), Slot::Native(&bn.shift)));
                out.push((
                    format!("{}.running_mean", bn.name),
                    Slot::Stats(&bn.running_mean),
                ));
                out.push((
                    format!("{}.running_var", bn.name),
                    Slot::Stats(&bn.running_var),
                ));
            }
            Layer::Lif(lf) => {
                out.push((format!("{}.w_raw", lf.name), Slot::Native(&lf.params.w_raw)));
                out.push((format!("{}.k_raw", lf.name), Slot::Native(&lf.params.k_raw)));
            }
            _ => {}
        }
    }
    out
}

pub fn save_checkpoint<S: Scalar>(
    net: &Network<S>,
    config: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, slot) in collect_slots(net) {
        let (shape, dtype) = match &slot {
            Slot::Native(t) => (t.shape().to_vec(), S::DTYPE.to_string()),
            Slot::Stats(v) => (vec![v.len()], "f64".to_string()),
        };
        entries.push(TensorEntry {
            name,
            shape,
            dtype,
            offset: payload.len(),
        });
        match slot {
            Slot::Native(t) => {
                for v in t.data() {
                    v.write_le(&mut payload);
                }
            }
            Slot::Stats(v) => {
                for x in v {
                    x.write_le(&mut payload);
                }
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: S::DTYPE.to_string(),
        num_classes: net.num_classes,
        layers: net.layers.iter().map(spec_of).collect(),
        tensors: entries,
        config: config.clone(),
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(8 + 4 + mjson.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&mjson);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Network<S>, serde_json::Value)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".to_string()));
    }
    let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + mlen {
        return Err(Error::Checkpoint("truncated manifest".to_string()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + mlen])
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {}", e)))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {})",
            manifest.format_version, FORMAT_VERSION
        )));
    }
    if manifest.precision != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "precision mismatch: file stores {}, requested {}",
            manifest.precision,
            S::DTYPE
        )));
    }
    let payload = &bytes[12 + mlen..];

    let layers: Vec<Layer<S>> = manifest.layers.iter().map(layer_from_spec).collect();
    let mut net = Network::new(layers, manifest.num_classes);

    // fill slots in the same deterministic order they were written
    let mut entry_iter = manifest.tensors.iter();
    for layer in &mut net.layers {
        let mut fill_native = |t: &mut Tensor<S>, want: &str| -> Result<()> {
            let e = entry_iter
                .next()
                .ok_or_else(|| Error::Checkpoint("manifest is missing tensors".to_string()))?;
            if e.name != want {
                return Err(Error::Checkpoint(format!(
                    "tensor order mismatch: found `{}`, expected `{}`",
                    e.name, want
                )));
            }
            if e.dtype != S::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` stored as {}, requested {}",
                    e.name,
                    e.dtype,
                    S::DTYPE
                )));
            }
            if e.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` shape {:?} does not match architecture {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            let n = t.len();
            let end = e.offset + n * S::BYTES;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated payload reading `{}`",
                    e.name
                )));
            }
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = S::read_le(&payload[e.offset + i * S::BYTES..]);
            }
            Ok(())
        };
        match layer {
            Layer::Conv2d(c) => {
                fill_native(&mut c.weight, &format!("{}.weight", c.name))?;
                fill_native(&mut c.bias, &format!("{}.bias", c.name))?;
            }
            Layer::Linear(l) => {
                fill_native(&mut l.weight, &format!("{}.weight", l.name))?;
                fill_native(&mut l.bias, &format!("{}.bias", l.name))?;
            }
            Layer::BatchNorm(bn) => {
                fill_native(&mut bn.gain, &format!("{}.gain", bn.name))?;
                fill_native(&mut bn.shift, &format!("{}.shift", bn.name))?;
                for (buf, field) in [
                    (&mut bn.running_mean, "running_mean"),
                    (&mut bn.running_var, "running_var"),
                ] {
                    let e = entry_iter.next().ok_or_else(|| {
                        Error::Checkpoint("manifest is missing tensors".to_string())
                    })?;
                    let want = format!("{}.{}", bn.name, field);
                    if e.name != want || e.dtype != "f64" || e.shape != [buf.len()] {
                        return Err(Error::Checkpoint(format!(
                            "bad running-stat entry `{}`",
                            e.name
                        )));
                    }
                    let end = e.offset + buf.len() * 8;
                    if end > payload.len() {
                        return Err(Error::Checkpoint(format!(
                            "truncated payload reading `{}`",
                            e.name
                        )));
                    }
                    for (i, v) in buf.iter_mut().enumerate() {
                        *v = f64::read_le(&payload[e.offset + i * 8..]);
                    }
                }
            }
            Layer::Lif(lf) => {
                fill_native(&mut lf.params.w_raw, &format!("{}.w_raw", lf.name))?;
                fill_native(&mut lf.params.k_raw, &format!("{}.k_raw", lf.name))?;
            }
            _ => {}
        }
    }
    if entry_iter.next().is_some() {
        return Err(Error::Checkpoint(
            "manifest lists more tensors than the architecture holds".to_string(),
        ));
    }
    Ok((net, manifest.config))
}
