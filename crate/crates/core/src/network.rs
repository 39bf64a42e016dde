//! Layer composition and the simulation-window forward pass.
//!
//! A `Network` owns parameter values only; every window records a fresh tape,
//! so the autodiff graph never outlives the minibatch it was built for. The
//! forward is layer-major: each layer consumes the whole T-step sequence
//! before the next one starts, which lets batch norm fold the time axis into
//! the batch axis with plain concat/slice nodes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::{self, LifNodes, LifParams, ResetMode};
use crate::mpinit::MpInitState;
use crate::surrogate::{ScaleMode, SurrogateConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2dLayer<S> {
    pub name: String,
    /// [out_ch, in_ch, kh, kw]
    pub weight: Tensor<S>,
    /// [out_ch]
    pub bias: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct LinearLayer<S> {
    pub name: String,
    /// [in, out]
    pub weight: Tensor<S>,
    /// [out]
    pub bias: Tensor<S>,
}

/// Batch norm whose statistics pool batch, time, and spatial positions.
#[derive(Clone, Debug)]
pub struct BatchNormLayer<S> {
    pub name: String,
    pub gain: Tensor<S>,
    pub shift: Tensor<S>,
    /// Running statistics live in f64 so checkpoints round-trip exactly
    /// regardless of compute precision.
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct LifLayer<S> {
    pub name: String,
    pub params: LifParams<S>,
    pub sg: SurrogateConfig,
    pub mpinit: MpInitState,
    pub mpinit_enabled: bool,
    /// Set by inference conversion: the threshold has been folded into the
    /// next weighted layer, so the training-time V_thr output scaling is off.
    pub absorbed: bool,
}

/// Non-firing readout: plain leaky integration, logits are the membrane.
#[derive(Clone, Debug)]
pub struct IntegratorLayer {
    pub name: String,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub enum Layer<S> {
    Conv2d(Conv2dLayer<S>),
    Linear(LinearLayer<S>),
    BatchNorm(BatchNormLayer<S>),
    Lif(LifLayer<S>),
    AvgPool { k: usize },
    Flatten,
    Dropout { p: f64 },
    Integrator(IntegratorLayer),
}

#[derive(Clone, Debug)]
pub struct Network<S> {
    pub layers: Vec<Layer<S>>,
    pub num_classes: usize,
}

/// One tape-registered parameter: where its gradient lives this window and
/// how the optimizer should treat it.
#[derive(Clone, Debug)]
pub struct ParamBinding {
    pub name: String,
    pub node: NodeId,
    /// Weight decay applies (conv/linear weights only).
    pub decay: bool,
    pub trainable: bool,
}

/// Everything recorded about one spiking layer across a window.
#[derive(Debug)]
pub struct LifTrace<S> {
    pub layer_index: usize,
    pub name: String,
    pub nodes: LifNodes,
    pub m_nodes: Vec<NodeId>,
    pub spike_nodes: Vec<NodeId>,
    /// Post-reset state per step, U[1]..U[T].
    pub u_nodes: Vec<NodeId>,
    pub out_nodes: Vec<NodeId>,
    pub spikes: Vec<Tensor<S>>,
    pub sg_args: Vec<Tensor<S>>,
    /// Elementwise OR over t of (S > 0), batch dim included.
    pub active: Vec<bool>,
    pub u_final: Tensor<S>,
    pub vthr: f64,
    pub gamma: f64,
}

pub struct WindowRecord<S: Scalar> {
    pub tape: Tape<S>,
    /// Per-timestep logits, [batch, num_classes] each.
    pub logits: Vec<NodeId>,
    pub params: Vec<ParamBinding>,
    pub lif: Vec<LifTrace<S>>,
}

pub struct ForwardOptions<'r> {
    pub train: bool,
    /// Dropout mask sampling; required when training a net with dropout.
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions {
            train: false,
            rng: None,
        }
    }
}

impl<S: Scalar> Network<S> {
    pub fn new(layers: Vec<Layer<S>>, num_classes: usize) -> Self {
        Network {
            layers,
            num_classes,
        }
    }

    /// Static input: the same frame drives every timestep (stem-layer
    /// encoding). The single leaf is reused, so the timestep axis is
    /// identical across t by construction.
    pub fn forward_static(
        &mut self,
        input: &Tensor<S>,
        t_steps: usize,
        opts: &mut ForwardOptions,
    ) -> Result<WindowRecord<S>> {
        if t_steps == 0 {
            return Err(Error::invalid("forward_window", "t_steps must be >= 1"));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let seq = vec![x; t_steps];
        self.run_window(tape, seq, opts)
    }

    /// Frame-sequence input, one tensor per timestep.
    pub fn forward_sequence(
        &mut self,
        frames: &[Tensor<S>],
        opts: &mut ForwardOptions,
    ) -> Result<WindowRecord<S>> {
        if frames.is_empty() {
            return Err(Error::invalid("forward_window", "empty frame sequence"));
        }
        for f in frames.iter().skip(1) {
            if f.shape() != frames[0].shape() {
                return Err(Error::shape("forward_window", "frame shapes differ"));
            }
        }
        let mut tape = Tape::new();
        let seq = frames.iter().map(|f| tape.leaf(f.clone())).collect();
        self.run_window(tape, seq, opts)
    }

    fn run_window(
        &mut self,
        mut tape: Tape<S>,
        mut seq: Vec<NodeId>,
        opts: &mut ForwardOptions,
    ) -> Result<WindowRecord<S>> {
        let t_steps = seq.len();
        let mut params = Vec::new();
        let mut lif_traces = Vec::new();

        for (li, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv2d(c) => {
                    let w = tape.leaf(c.weight.clone());
                    let b = tape.leaf(c.bias.clone());
                    params.push(ParamBinding {
                        name: format!("{}.weight", c.name),
                        node: w,
                        decay: true,
                        trainable: true,
                    });
                    params.push(ParamBinding {
                        name: format!("{}.bias", c.name),
                        node: b,
                        decay: false,
                        trainable: true,
                    });
                    for t in 0..t_steps {
                        let y = tape.conv2d(seq[t], w, c.stride, c.pad)?;
                        seq[t] = tape.add_bias(y, b)?;
                    }
                }
                Layer::Linear(l) => {
                    let w = tape.leaf(l.weight.clone());
                    let b = tape.leaf(l.bias.clone());
                    params.push(ParamBinding {
                        name: format!("{}.weight", l.name),
                        node: w,
                        decay: true,
                        trainable: true,
                    });
                    params.push(ParamBinding {
                        name: format!("{}.bias", l.name),
                        node: b,
                        decay: false,
                        trainable: true,
                    });
                    for t in 0..t_steps {
                        let y = tape.matmul(seq[t], w)?;
                        seq[t] = tape.add_bias(y, b)?;
                    }
                }
                Layer::BatchNorm(bn) => {
                    let gain = tape.leaf(bn.gain.clone());
                    let shift = tape.leaf(bn.shift.clone());
                    let trainable = !bn.frozen;
                    params.push(ParamBinding {
                        name: format!("{}.gain", bn.name),
                        node: gain,
                        decay: false,
                        trainable,
                    });
                    params.push(ParamBinding {
                        name: format!("{}.shift", bn.name),
                        node: shift,
                        decay: false,
                        trainable,
                    });
                    // Fold time into the batch axis: statistics pool
                    // (batch x time x spatial) per channel.
                    let cat = tape.concat_rows(&seq)?;
                    let use_batch_stats = opts.train && !bn.frozen;
                    let running = if use_batch_stats {
                        None
                    } else {
                        Some((bn.running_mean.as_slice(), bn.running_var.as_slice()))
                    };
                    let (y, mean, var) = tape.batch_norm(cat, gain, shift, running, bn.eps)?;
                    if use_batch_stats {
                        // biased variance normalizes; the running buffer keeps
                        // the unbiased estimate, torch-style
                        let shp = tape.value(y).shape().to_vec();
                        let c = mean.len();
                        let count = (tape.value(y).len() / c) as f64;
                        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                        debug_assert_eq!(shp[0] % t_steps, 0);
                        for ch in 0..c {
                            bn.running_mean[ch] =
                                (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean[ch];
                            bn.running_var[ch] = (1.0 - bn.momentum) * bn.running_var[ch]
                                + bn.momentum * var[ch] * unbias;
                        }
                    }
                    let rows = tape.value(seq[0]).shape()[0];
                    for t in 0..t_steps {
                        seq[t] = tape.slice_rows(y, t * rows, rows)?;
                    }
                }
                Layer::Lif(lf) => {
                    let nodes = lif::register(&mut tape, &lf.params)?;
                    params.push(ParamBinding {
                        name: format!("{}.w_raw", lf.name),
                        node: nodes.w_raw,
                        decay: false,
                        trainable: lf.params.train_tau,
                    });
                    params.push(ParamBinding {
                        name: format!("{}.k_raw", lf.name),
                        node: nodes.k_raw,
                        decay: false,
                        trainable: lf.params.train_vthr,
                    });
                    let state_shape = tape.value(seq[0]).shape().to_vec();
                    let u0 = if lf.mpinit_enabled {
                        lf.mpinit.init_window(&state_shape)
                    } else {
                        Tensor::zeros(&state_shape)
                    };
                    // state buffer, never receives an optimizer update
                    let mut u = tape.leaf(u0);
                    let mut active = vec![false; tape.value(seq[0]).len()];
                    let mut trace = LifTrace {
                        layer_index: li,
                        name: lf.name.clone(),
                        nodes,
                        m_nodes: Vec::with_capacity(t_steps),
                        spike_nodes: Vec::with_capacity(t_steps),
                        u_nodes: Vec::with_capacity(t_steps),
                        out_nodes: Vec::with_capacity(t_steps),
                        spikes: Vec::with_capacity(t_steps),
                        sg_args: Vec::with_capacity(t_steps),
                        active: Vec::new(),
                        u_final: Tensor::zeros(&[0]),
                        vthr: tape.value(nodes.vthr).scalar_value().as_f64(),
                        gamma: lf.sg.gamma,
                    };
                    for t in 0..t_steps {
                        let so = lif::step(
                            &mut tape,
                            &nodes,
                            u,
                            seq[t],
                            lf.params.reset,
                            &lf.sg,
                            &lf.name,
                            t + 1,
                        )?;
                        for (a, s) in active.iter_mut().zip(so.spikes.data()) {
                            *a |= *s > S::zero();
                        }
                        // absorbed thresholds already live in the next layer's
                        // weights, so the output stays the raw binary spikes
                        seq[t] = if lf.absorbed { so.spikes_node } else { so.out };
                        u = so.u_next;
                        trace.m_nodes.push(so.m);
                        trace.spike_nodes.push(so.spikes_node);
                        trace.u_nodes.push(so.u_next);
                        trace.out_nodes.push(seq[t]);
                        trace.spikes.push(so.spikes);
                        trace.sg_args.push(so.sg_args);
                    }
                    trace.u_final = tape.value(u).clone();
                    trace.active = active;
                    if opts.train && lf.mpinit_enabled && !lf.mpinit.is_frozen() {
                        lf.mpinit.update(&trace.u_final, &trace.active)?;
                    }
                    lif_traces.push(trace);
                }
                Layer::AvgPool { k } => {
                    for t in 0..t_steps {
                        seq[t] = tape.avgpool2d(seq[t], *k, *k)?;
                    }
                }
                Layer::Flatten => {
                    let shp = tape.value(seq[0]).shape().to_vec();
                    if shp.len() < 2 {
                        return Err(Error::shape("flatten", "needs a batch dimension"));
                    }
                    let flat: usize = shp[1..].iter().product();
                    for t in 0..t_steps {
                        seq[t] = tape.reshape(seq[t], &[shp[0], flat])?;
                    }
                }
                Layer::Dropout { p } => {
                    if !opts.train || *p == 0.0 {
                        continue;
                    }
                    if !(*p > 0.0 && *p < 1.0) {
                        return Err(Error::invalid("dropout", format!("p = {}", p)));
                    }
                    let rng = opts.rng.as_deref_mut().ok_or_else(|| {
                        Error::invalid("dropout", "training forward needs an rng")
                    })?;
                    let keep = 1.0 - *p;
                    let scale = S::from_f64(1.0 / keep);
                    // one mask per window, shared across timesteps
                    let shape = tape.value(seq[0]).shape().to_vec();
                    let n = tape.value(seq[0]).len();
                    let mut mask = Tensor::zeros(&shape);
                    for v in mask.data_mut() {
                        if rng.random_range(0.0..1.0) < keep {
                            *v = scale;
                        }
                    }
                    debug_assert_eq!(mask.len(), n);
                    let m = tape.leaf(mask);
                    for t in 0..t_steps {
                        seq[t] = tape.mul(seq[t], m)?;
                    }
                }
                Layer::Integrator(ig) => {
                    if !(ig.tau > 1.0) {
                        return Err(Error::invalid("integrator", "tau must be > 1"));
                    }
                    let tau = tape.leaf(Tensor::scalar_tensor(S::from_f64(ig.tau)));
                    let shape = tape.value(seq[0]).shape().to_vec();
                    let mut u = tape.leaf(Tensor::zeros(&shape));
                    for t in 0..t_steps {
                        let m = tape.membrane_update(u, seq[t], tau)?;
                        if !tape.value(m).all_finite() {
                            return Err(Error::Divergence {
                                what: "readout membrane",
                                layer: ig.name.clone(),
                                timestep: t + 1,
                            });
                        }
                        seq[t] = m;
                        u = m;
                    }
                }
            }
        }

        Ok(WindowRecord {
            tape,
            logits: seq,
            params,
            lif: lif_traces,
        })
    }

    /// Visit every optimizer-visible parameter in the same order the window
    /// binds them. The mpinit mu buffers and BN running statistics are
    /// deliberately not visited.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<S>, bool, bool)) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    f(&format!("{}.weight", c.name), &mut c.weight, true, true);
                    f(&format!("{}.bias", c.name), &mut c.bias, false, true);
                }
                Layer::Linear(l) => {
                    f(&format!("{}.weight", l.name), &mut l.weight, true, true);
                    f(&format!("{}.bias", l.name), &mut l.bias, false, true);
                }
                Layer::BatchNorm(bn) => {
                    let trainable = !bn.frozen;
                    f(&format!("{}.gain", bn.name), &mut bn.gain, false, trainable);
                    f(&format!("{}.shift", bn.name), &mut bn.shift, false, trainable);
                }
                Layer::Lif(lf) => {
                    let (tt, tv) = (lf.params.train_tau, lf.params.train_vthr);
                    f(&format!("{}.w_raw", lf.name), &mut lf.params.w_raw, false, tt);
                    f(&format!("{}.k_raw", lf.name), &mut lf.params.k_raw, false, tv);
                }
                _ => {}
            }
        }
    }

    /// Per-layer mean firing rate over a window (lif layers, window order).
    pub fn firing_rates(record: &WindowRecord<S>) -> Vec<(String, f64)> {
        record
            .lif
            .iter()
            .map(|tr| {
                let mut sum = 0.0;
                let mut count = 0usize;
                for s in &tr.spikes {
                    sum += s.data().iter().map(|v| v.as_f64()).sum::<f64>();
                    count += s.len();
                }
                (tr.name.clone(), if count == 0 { 0.0 } else { sum / count as f64 })
            })
            .collect()
    }

    /// Fold each threshold-invariant lif layer's V_thr into the next weighted
    /// layer's weights (bias untouched: it never multiplies a spike), then
    /// freeze everything that adapts online. Spikes leave the converted net
    /// strictly binary. AS/RS layers need no folding; they are only frozen.
    pub fn convert_for_inference(&mut self) -> Result<()> {
        let n = self.layers.len();
        for i in 0..n {
            let (vthr, is_ti) = match &self.layers[i] {
                Layer::Lif(lf) => (
                    lf.params.vthr().as_f64(),
                    lf.sg.mode == ScaleMode::ThresholdInvariant && !lf.absorbed,
                ),
                _ => continue,
            };
            if is_ti {
                let mut target = None;
                for (j, later) in self.layers.iter().enumerate().skip(i + 1) {
                    match later {
                        Layer::Conv2d(_) | Layer::Linear(_) => {
                            target = Some(j);
                            break;
                        }
                        Layer::AvgPool { .. } | Layer::Flatten | Layer::Dropout { .. } => {}
                        Layer::BatchNorm(_) | Layer::Lif(_) | Layer::Integrator(_) => break,
                    }
                }
                let j = target.ok_or_else(|| {
                    Error::invalid(
                        "convert_for_inference",
                        format!(
                            "no weighted layer follows spiking layer index {}; \
                             its threshold scale has nowhere to go",
                            i
                        ),
                    )
                })?;
                let v = S::from_f64(vthr);
                match &mut self.layers[j] {
                    Layer::Conv2d(c) => {
                        for w in c.weight.data_mut() {
                            *w = *w * v;
                        }
                    }
                    Layer::Linear(l) => {
                        for w in l.weight.data_mut() {
                            *w = *w * v;
                        }
                    }
                    _ => unreachable!(),
                }
                if let Layer::Lif(lf) = &mut self.layers[i] {
                    lf.absorbed = true;
                }
            }
        }
        for layer in &mut self.layers {
            match layer {
                Layer::Lif(lf) => {
                    lf.mpinit.freeze();
                    lf.params.train_tau = false;
                    lf.params.train_vthr = false;
                }
                Layer::BatchNorm(bn) => bn.frozen = true,
                _ => {}
            }
        }
        Ok(())
    }

    /// Weighted-layer operation counts for one sample over one window.
    /// A layer whose input comes straight from spikes accumulates (AC) at the
    /// producing layer's firing rate; real-valued inputs multiply-accumulate
    /// (MAC). Pool/norm overhead is ignored, as in the usual accounting.
    pub fn count_ops(&self, input_shape: &[usize], t_steps: usize, rates: &[(String, f64)]) -> Result<OpCounts> {
        let mut shape = input_shape.to_vec();
        let mut counts = OpCounts::default();
        // rate of the spiking layer currently feeding the data path; None
        // means the signal is real-valued
        let mut feeding_rate: Option<f64> = None;
        let mut rate_iter = rates.iter();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    let (co, ci, kh, kw) = {
                        let s = c.weight.shape();
                        (s[0], s[1], s[2], s[3])
                    };
                    if shape.len() != 3 || shape[0] != ci {
                        return Err(Error::shape("count_ops", "conv input"));
                    }
                    let oh = (shape[1] + 2 * c.pad - kh) / c.stride + 1;
                    let ow = (shape[2] + 2 * c.pad - kw) / c.stride + 1;
                    let ops = (co * oh * ow * ci * kh * kw * t_steps) as f64;
                    match feeding_rate {
                        Some(r) => counts.ac += ops * r,
                        None => counts.mac += ops,
                    }
                    shape = vec![co, oh, ow];
                    feeding_rate = None;
                }
                Layer::Linear(l) => {
                    let (fi, fo) = {
                        let s = l.weight.shape();
                        (s[0], s[1])
                    };
                    let flat: usize = shape.iter().product();
                    if flat != fi {
                        return Err(Error::shape("count_ops", "linear input"));
                    }
                    let ops = (fi * fo * t_steps) as f64;
                    match feeding_rate {
                        Some(r) => counts.ac += ops * r,
                        None => counts.mac += ops,
                    }
                    shape = vec![fo];
                    feeding_rate = None;
                }
                Layer::Lif(lf) => {
                    let r = rate_iter
                        .next()
                        .filter(|(n, _)| *n == lf.name)
                        .map(|(_, r)| *r)
                        .ok_or_else(|| {
                            Error::invalid("count_ops", "firing rates out of sync with layers")
                        })?;
                    feeding_rate = Some(r);
                }
                Layer::AvgPool { k } => {
                    if shape.len() != 3 {
                        return Err(Error::shape("count_ops", "pool input"));
                    }
                    shape = vec![shape[0], shape[1] / k, shape[2] / k];
                }
                Layer::Flatten => shape = vec![shape.iter().product()],
                Layer::BatchNorm(_) | Layer::Dropout { .. } | Layer::Integrator(_) => {}
            }
        }
        Ok(counts)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub ac: f64,
    pub mac: f64,
}

fn he_normal<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is positive");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = S::from_f64(dist.sample(rng));
    }
    t
}

/// Knobs shared by every spiking layer in a built net.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NeuronConfig {
    pub sg: SurrogateConfig,
    pub reset: ResetMode,
    pub init_tau: f64,
    pub init_vthr: f64,
    pub train_tau: bool,
    pub train_vthr: bool,
    pub mpinit_enabled: bool,
    pub mpinit_beta: f64,
}

impl NeuronConfig {
    fn lif_layer<S: Scalar>(&self, name: &str) -> Result<LifLayer<S>> {
        Ok(LifLayer {
            name: name.to_string(),
            params: LifParams::from_tau_vthr(
                self.init_tau,
                self.init_vthr,
                self.reset,
                self.train_tau,
                self.train_vthr,
            )?,
            sg: self.sg,
            mpinit: MpInitState::new(self.mpinit_beta)?,
            mpinit_enabled: self.mpinit_enabled,
            absorbed: false,
        })
    }
}

/// Reference desk-scale architecture:
/// conv 16C3 - pool - conv 32C3 - pool - 128FC - 10FC, batch norm after each
/// conv, a spiking layer after each weighted layer except the readout, and
/// dropout ahead of each fully connected layer.
pub fn small_net<S: Scalar>(
    in_shape: (usize, usize, usize),
    num_classes: usize,
    neuron: &NeuronConfig,
    dropout_p: f64,
    readout_tau: f64,
    seed: u64,
) -> Result<Network<S>> {
    let (ci, h, w) = in_shape;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(
            "small_net",
            "input sides must be divisible by 4 (two 2x2 pools)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = 32 * (h / 4) * (w / 4);
    let conv = |name: &str, ci: usize, co: usize, rng: &mut ChaCha8Rng| {
        Layer::Conv2d(Conv2dLayer {
            name: name.to_string(),
            weight: he_normal(&[co, ci, 3, 3], ci * 9, rng),
            bias: Tensor::zeros(&[co]),
            stride: 1,
            pad: 1,
        })
    };
    let bn = |name: &str, c: usize| {
        Layer::BatchNorm(BatchNormLayer {
            name: name.to_string(),
            gain: Tensor::full(&[c], S::one()),
            shift: Tensor::zeros(&[c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            frozen: false,
        })
    };
    let fc = |name: &str, fi: usize, fo: usize, rng: &mut ChaCha8Rng| {
        Layer::Linear(LinearLayer {
            name: name.to_string(),
            weight: he_normal(&[fi, fo], fi, rng),
            bias: Tensor::zeros(&[fo]),
        })
    };
    let mut layers = vec![
        conv("conv0", ci, 16, &mut rng),
        bn("bn0", 16),
        Layer::Lif(neuron.lif_layer("lif0")?),
        Layer::AvgPool { k: 2 },
        conv("conv1", 16, 32, &mut rng),
        bn("bn1", 32),
        Layer::Lif(neuron.lif_layer("lif1")?),
        Layer::AvgPool { k: 2 },
        Layer::Flatten,
    ];
    if dropout_p > 0.0 {
        layers.push(Layer::Dropout { p: dropout_p });
    }
    layers.push(fc("fc0", flat, 128, &mut rng));
    layers.push(Layer::Lif(neuron.lif_layer("lif2")?));
    if dropout_p > 0.0 {
        layers.push(Layer::Dropout { p: dropout_p });
    }
    layers.push(fc("fc1", 128, num_classes, &mut rng));
    layers.push(Layer::Integrator(IntegratorLayer {
        name: "readout".to_string(),
        tau: readout_tau,
    }));
    Ok(Network::new(layers, num_classes))
}

/// Two weighted layers, no conv: flatten - FC - lif - FC - readout. Used by
/// overfit sanity checks and conversion tests.
pub fn tiny_net<S: Scalar>(
    in_shape: (usize, usize, usize),
    hidden: usize,
    num_classes: usize,
    neuron: &NeuronConfig,
    readout_tau: f64,
    seed: u64,
) -> Result<Network<S>> {
    let (c, h, w) = in_shape;
    let flat = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        Layer::Flatten,
        Layer::Linear(LinearLayer {
            name: "fc0".to_string(),
            weight: he_normal(&[flat, hidden], flat, &mut rng),
            bias: Tensor::zeros(&[hidden]),
        }),
        Layer::Lif(neuron.lif_layer("lif0")?),
        Layer::Linear(LinearLayer {
            name: "fc1".to_string(),
            weight: he_normal(&[hidden, num_classes], hidden, &mut rng),
            bias: Tensor::zeros(&[num_classes]),
        }),
        Layer::Integrator(IntegratorLayer {
            name: "readout".to_string(),
            tau: readout_tau,
        }),
    ];
    Ok(Network::new(layers, num_classes))
}
