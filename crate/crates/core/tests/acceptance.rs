//! Acceptance gate: ten numbered end-to-end checks, one test each. Every
//! test prints a single summary line with the numbers it measured, so a
//! `--nocapture` run reads as a checklist. Two checks carry documented
//! deviations where a quoted figure is not reachable from the stated
//! arithmetic; those assert the measured truth and say so in their line.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use snn_forge::config::config_from_value;
use snn_forge::diagnostics::{energy_estimate, ljung_box_lag1, tv_distance};
use snn_forge::gradcheck::max_grad_error;
use snn_forge::lif::{self, LifNodes, LifParams, ResetMode};
use snn_forge::mpinit::MpInitState;
use snn_forge::network::{
    tiny_net, BatchNormLayer, Conv2dLayer, ForwardOptions, IntegratorLayer, Layer, LinearLayer,
    Network, NeuronConfig,
};
use snn_forge::runner::{self, RunOutcome};
use snn_forge::surrogate::{spike_grad_wrt_m, ScaleMode, SurrogateConfig, SurrogateShape};
use snn_forge::tape::{NodeId, Tape};
use snn_forge::tensor::Scalar;
use snn_forge::theory::{
    lemma1_check, simulate_chain, split_half_tv, tv_decay_curve, ChainConfig, InitMode, InputDist,
    TV_FIT_FLOOR,
};
use snn_forge::Tensor;
use std::collections::HashMap;
use std::path::Path;

const SHAPES: [SurrogateShape; 4] = [
    SurrogateShape::Rectangular,
    SurrogateShape::Triangular,
    SurrogateShape::Arctan,
    SurrogateShape::Sigmoid,
];

const MODES: [ScaleMode; 3] = [
    ScaleMode::Absolute,
    ScaleMode::Relative,
    ScaleMode::ThresholdInvariant,
];

fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64_slice(shape, &data).unwrap()
}

/// Window derivative of each surrogate shape, transcribed literally so the
/// library is checked against an independent copy of the formulas.
fn window_deriv(shape: SurrogateShape, x: f64, g: f64) -> f64 {
    match shape {
        SurrogateShape::Rectangular => {
            if x.abs() < g / 2.0 {
                1.0 / g
            } else {
                0.0
            }
        }
        SurrogateShape::Triangular => {
            let t = g - x.abs();
            if t > 0.0 {
                t / (g * g)
            } else {
                0.0
            }
        }
        SurrogateShape::Arctan => {
            let a = std::f64::consts::FRAC_PI_2 * g * x;
            g / (2.0 * (1.0 + a * a))
        }
        SurrogateShape::Sigmoid => {
            let s = 1.0 / (1.0 + (-x / g).exp());
            s * (1.0 - s) / g
        }
    }
}

// ---------------------------------------------------------------------------
// 1. BPTT gradients against central finite differences, and the spike node
//    against closed forms.
// ---------------------------------------------------------------------------

/// Smooth micro-net covering conv2d, batch norm, avgpool, linear, and the
/// leaky readout integrator. No spiking layer: every op in it is
/// differentiable, so finite differences are ground truth everywhere.
fn smooth_micro_net() -> (Network<f64>, Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let layers = vec![
        Layer::Conv2d(Conv2dLayer {
            name: "c0".into(),
            weight: uniform_tensor(&[2, 1, 3, 3], -0.6, 0.6, &mut rng),
            bias: uniform_tensor(&[2], -0.2, 0.2, &mut rng),
            stride: 1,
            pad: 1,
        }),
        Layer::BatchNorm(BatchNormLayer {
            name: "b0".into(),
            gain: uniform_tensor(&[2], 0.8, 1.3, &mut rng),
            shift: uniform_tensor(&[2], -0.2, 0.2, &mut rng),
            running_mean: vec![0.0; 2],
            running_var: vec![1.0; 2],
            momentum: 0.1,
            eps: 1e-5,
            frozen: false,
        }),
        Layer::AvgPool { k: 2 },
        Layer::Flatten,
        Layer::Linear(LinearLayer {
            name: "f0".into(),
            weight: uniform_tensor(&[8, 3], -0.7, 0.7, &mut rng),
            bias: uniform_tensor(&[3], -0.2, 0.2, &mut rng),
        }),
        Layer::Integrator(IntegratorLayer {
            name: "ro".into(),
            tau: 2.0,
        }),
    ];
    let net = Network::new(layers, 3);
    let x = uniform_tensor(&[2, 1, 4, 4], -1.0, 1.0, &mut rng);
    (net, x, vec![0, 2])
}

fn ce_of_mean_logits(net: &mut Network<f64>, x: &Tensor<f64>, labels: &[usize], t: usize) -> f64 {
    let mut rec = net
        .forward_static(x, t, &mut ForwardOptions { train: true, rng: None })
        .unwrap();
    let mut acc = rec.logits[0];
    for &l in &rec.logits[1..] {
        acc = rec.tape.add(acc, l).unwrap();
    }
    let mean = rec.tape.scalar_mul(acc, 1.0 / t as f64);
    let ce = rec.tape.softmax_cross_entropy(mean, labels).unwrap();
    rec.tape.value(ce).scalar_value()
}

fn ce_param_grads(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    t: usize,
) -> HashMap<String, Vec<f64>> {
    let mut rec = net
        .forward_static(x, t, &mut ForwardOptions { train: true, rng: None })
        .unwrap();
    let mut acc = rec.logits[0];
    for &l in &rec.logits[1..] {
        acc = rec.tape.add(acc, l).unwrap();
    }
    let mean = rec.tape.scalar_mul(acc, 1.0 / t as f64);
    let ce = rec.tape.softmax_cross_entropy(mean, labels).unwrap();
    rec.tape.backward(ce).unwrap();
    rec.params
        .iter()
        .map(|p| {
            let g = rec
                .tape
                .grad(p.node)
                .map(|g| g.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; rec.tape.value(p.node).len()]);
            (p.name.clone(), g)
        })
        .collect()
}

fn fd_check_smooth_net() -> f64 {
    let (mut net, x, labels) = smooth_micro_net();
    let t = 4;
    let h = 1e-5;
    let analytic = ce_param_grads(&mut net, &x, &labels, t);

    let mut slots: Vec<(String, usize)> = Vec::new();
    net.for_each_param_mut(|name, tensor, _, _| slots.push((name.to_string(), tensor.len())));

    let mut worst = 0.0f64;
    for (name, len) in &slots {
        for idx in 0..*len {
            let nudge = |net: &mut Network<f64>, delta: f64| {
                net.for_each_param_mut(|n, tensor, _, _| {
                    if n == name {
                        tensor.data_mut()[idx] += delta;
                    }
                });
            };
            nudge(&mut net, h);
            let up = ce_of_mean_logits(&mut net, &x, &labels, t);
            nudge(&mut net, -2.0 * h);
            let down = ce_of_mean_logits(&mut net, &x, &labels, t);
            nudge(&mut net, h);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[name][idx];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}

/// Draw inputs for a recurrent spiking chain such that every surrogate
/// argument stays clear of a rectangular window (gamma 0.3) and every
/// membrane stays clear of the threshold, with at least one unit firing and
/// one staying silent somewhere. Outside the window the surrogate is exactly
/// zero, which is also the true local derivative of the spike indicator away
/// from the threshold, so BPTT through membrane_update and both reset rules
/// must agree with finite differences.
fn margin_chain_inputs(
    reset: ResetMode,
    mode: ScaleMode,
    t_steps: usize,
    units: usize,
) -> (Vec<Tensor<f64>>, Tensor<f64>) {
    let sg = SurrogateConfig::new(SurrogateShape::Rectangular, mode, 0.3).unwrap();
    let params = LifParams::<f64>::from_tau_vthr(2.0, 1.0, reset, true, true).unwrap();
    'seeds: for seed in 0..400u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let inputs: Vec<Tensor<f64>> = (0..t_steps)
            .map(|_| uniform_tensor(&[units], -2.5, 2.5, &mut rng))
            .collect();
        let u0 = uniform_tensor(&[units], -0.4, 0.4, &mut rng);

        let mut tape = Tape::<f64>::new();
        let nodes = lif::register(&mut tape, &params).unwrap();
        let vthr = tape.value(nodes.vthr).scalar_value();
        let mut u = tape.leaf(u0.clone());
        let (mut fired, mut stayed) = (false, false);
        for (t, frame) in inputs.iter().enumerate() {
            let i = tape.leaf(frame.clone());
            let st = lif::step(&mut tape, &nodes, u, i, reset, &sg, "probe", t + 1).unwrap();
            for (&m, &x) in tape.value(st.m).data().iter().zip(st.sg_args.data()) {
                if x.abs() <= 0.17 || (m - vthr).abs() <= 0.02 {
                    continue 'seeds;
                }
            }
            for &s in st.spikes.data() {
                if s > 0.5 {
                    fired = true;
                } else {
                    stayed = true;
                }
            }
            u = st.u_next;
        }
        if fired && stayed {
            return (inputs, u0);
        }
    }
    panic!("no input draw kept every surrogate argument clear of the window");
}

/// The loss reads U[t] and the layer output directly, so the recurrent path
/// carries nonzero gradient even though the spike path carries none.
fn fd_check_recurrent_chain(reset: ResetMode, mode: ScaleMode) -> f64 {
    let (t_steps, units) = (5usize, 4usize);
    let (frames, u0) = margin_chain_inputs(reset, mode, t_steps, units);
    let sg = SurrogateConfig::new(SurrogateShape::Rectangular, mode, 0.3).unwrap();

    let mut inputs: Vec<Tensor<f64>> = frames;
    inputs.push(Tensor::scalar_tensor(lif::raw_from_tau(2.0).unwrap()));
    inputs.push(Tensor::scalar_tensor(lif::raw_from_vthr(1.0).unwrap()));
    inputs.push(u0);

    max_grad_error(&inputs, 1e-5, move |tape: &mut Tape<f64>, ids: &[NodeId]| {
        let tau = tape.reparam_tau(ids[t_steps])?;
        let vthr = tape.reparam_vthr(ids[t_steps + 1])?;
        let nodes = LifNodes {
            w_raw: ids[t_steps],
            k_raw: ids[t_steps + 1],
            tau,
            vthr,
        };
        let mut u = ids[t_steps + 2];
        let mut loss: Option<NodeId> = None;
        for t in 0..t_steps {
            let st = lif::step(tape, &nodes, u, ids[t], reset, &sg, "probe", t + 1)?;
            u = st.u_next;
            let uu = tape.mul(st.u_next, st.u_next)?;
            let su = tape.sum(uu);
            let oo = tape.mul(st.out, st.out)?;
            let so = tape.sum(oo);
            let step_loss = tape.add(su, so)?;
            loss = Some(match loss {
                None => step_loss,
                Some(acc) => tape.add(acc, step_loss)?,
            });
        }
        Ok(loss.expect("t_steps >= 1"))
    })
}

/// Spike node gradients against literal transcriptions of the three scaling
/// rules, for every shape, argument band, and a spread of thresholds.
fn spike_closed_form_deviation() -> f64 {
    let xs = [-0.8, -0.45, -0.2, -0.05, 0.0, 0.05, 0.2, 0.45, 0.8];
    let mut worst = 0.0f64;
    for &shape in &SHAPES {
        for &mode in &MODES {
            for &g in &[0.35, 1.0] {
                for &target in &[0.25, 1.0, 3.0] {
                    let cfg = SurrogateConfig::new(shape, mode, g).unwrap();
                    let mut tape = Tape::<f64>::new();
                    let k = tape.leaf(Tensor::scalar_tensor(lif::raw_from_vthr(target).unwrap()));
                    let v = tape.reparam_vthr(k).unwrap();
                    let va = tape.value(v).scalar_value();
                    let ms: Vec<f64> = xs.iter().map(|x| va * (1.0 + x)).collect();
                    let m = tape.leaf(Tensor::from_f64_slice(&[ms.len()], &ms).unwrap());
                    let s = tape.spike(m, v, &cfg).unwrap();
                    let out = if mode == ScaleMode::ThresholdInvariant {
                        tape.mul(v, s).unwrap()
                    } else {
                        s
                    };
                    let loss = tape.sum(out);
                    tape.backward(loss).unwrap();

                    // the forward is the exact indicator, firing on M >= V
                    for (&sv, &mv) in tape.value(s).data().iter().zip(&ms) {
                        assert_eq!(sv, if mv >= va { 1.0 } else { 0.0 });
                    }

                    let gm = tape.grad(m).unwrap().to_f64_vec();
                    let gv = tape.grad(v).unwrap().scalar_value();
                    let mut want_v = 0.0;
                    for (i, &mv) in ms.iter().enumerate() {
                        let xa = match mode {
                            ScaleMode::Absolute => mv - va,
                            _ => (mv - va) / va,
                        };
                        let f = window_deriv(shape, xa, g);
                        let want_m = match mode {
                            ScaleMode::Absolute => f,
                            ScaleMode::Relative => f / va,
                            ScaleMode::ThresholdInvariant => va * (f / va),
                        };
                        let dm = (gm[i] - want_m).abs() / 1.0f64.max(want_m.abs());
                        worst = worst.max(dm);
                        want_v += match mode {
                            ScaleMode::Absolute => -f,
                            ScaleMode::Relative => f * (-mv / (va * va)),
                            ScaleMode::ThresholdInvariant => {
                                let s_fwd = if mv >= va { 1.0 } else { 0.0 };
                                s_fwd + va * (f * (-mv / (va * va)))
                            }
                        };
                    }
                    let dv = (gv - want_v).abs() / 1.0f64.max(want_v.abs());
                    worst = worst.max(dv);
                }
            }
        }
    }
    worst
}

#[test]
fn criterion_01_bptt_matches_finite_differences() {
    let worst_net = fd_check_smooth_net();
    assert!(
        worst_net <= 1e-5,
        "smooth micro-net: max FD rel err {:.3e} > 1e-5",
        worst_net
    );

    let combos = [
        (ResetMode::Soft, ScaleMode::Absolute),
        (ResetMode::Hard, ScaleMode::Relative),
        (ResetMode::Soft, ScaleMode::ThresholdInvariant),
        (ResetMode::Hard, ScaleMode::ThresholdInvariant),
    ];
    let mut worst_rec = 0.0f64;
    for &(reset, mode) in &combos {
        let e = fd_check_recurrent_chain(reset, mode);
        assert!(
            e <= 1e-5,
            "recurrent chain {:?}/{:?}: max FD rel err {:.3e} > 1e-5",
            reset,
            mode,
            e
        );
        worst_rec = worst_rec.max(e);
    }

    let worst_spike = spike_closed_form_deviation();
    assert!(
        worst_spike <= 1e-12,
        "spike closed forms: max rel deviation {:.3e} > 1e-12",
        worst_spike
    );

    println!(
        "criterion 01 PASS: micro-net FD rel err {:.2e}; recurrent membrane/reset FD rel err {:.2e}; spike closed-form dev {:.2e}",
        worst_net, worst_rec, worst_spike
    );
}

// ---------------------------------------------------------------------------
// 2. Threshold-invariant scaling: dO/dM at a fixed relative argument does
//    not move with V_thr, and the relative-scaled gradient times V_thr
//    reproduces it.
// ---------------------------------------------------------------------------

fn tape_dm_grads(shape: SurrogateShape, mode: ScaleMode, target: f64, xs: &[f64]) -> (Vec<f64>, f64) {
    let cfg = SurrogateConfig::new(shape, mode, 1.0).unwrap();
    let mut tape = Tape::<f64>::new();
    let k = tape.leaf(Tensor::scalar_tensor(lif::raw_from_vthr(target).unwrap()));
    let v = tape.reparam_vthr(k).unwrap();
    let va = tape.value(v).scalar_value();
    let ms: Vec<f64> = xs.iter().map(|x| va * (1.0 + x)).collect();
    let m = tape.leaf(Tensor::from_f64_slice(&[ms.len()], &ms).unwrap());
    let s = tape.spike(m, v, &cfg).unwrap();
    let out = if mode == ScaleMode::ThresholdInvariant {
        tape.mul(v, s).unwrap()
    } else {
        s
    };
    let loss = tape.sum(out);
    tape.backward(loss).unwrap();
    (tape.grad(m).unwrap().to_f64_vec(), va)
}

#[test]
fn criterion_02_threshold_invariant_scaling() {
    let xs = [-0.9, -0.45, -0.15, 0.0, 0.2, 0.45, 0.9];
    let vthrs = [0.01, 0.1, 1.0, 10.0, 100.0];
    let mut worst_inv = 0.0f64;
    let mut worst_pair = 0.0f64;
    let mut pair_bitwise = true;

    for &shape in &SHAPES {
        let (g_ref, _) = tape_dm_grads(shape, ScaleMode::ThresholdInvariant, 1.0, &xs);
        let rs_cfg = SurrogateConfig::new(shape, ScaleMode::Relative, 1.0).unwrap();
        let ti_cfg = SurrogateConfig::new(shape, ScaleMode::ThresholdInvariant, 1.0).unwrap();
        for &target in &vthrs {
            let (g_ti, va) = tape_dm_grads(shape, ScaleMode::ThresholdInvariant, target, &xs);
            let (g_rs, va_rs) = tape_dm_grads(shape, ScaleMode::Relative, target, &xs);
            assert_eq!(va.to_bits(), va_rs.to_bits());
            for i in 0..xs.len() {
                let inv = (g_ti[i] - g_ref[i]).abs() / 1.0f64.max(g_ref[i].abs());
                worst_inv = worst_inv.max(inv);

                let prod = g_rs[i] * va;
                let pair = (prod - g_ti[i]).abs() / 1.0f64.max(g_ti[i].abs());
                worst_pair = worst_pair.max(pair);
                if prod.to_bits() != g_ti[i].to_bits() {
                    pair_bitwise = false;
                }

                // the closed forms hold the identity bit for bit
                let mi = va * (1.0 + xs[i]);
                let closed_rs = spike_grad_wrt_m(&rs_cfg, mi, va);
                let closed_ti = spike_grad_wrt_m(&ti_cfg, mi, va);
                assert_eq!(
                    (closed_rs * va).to_bits(),
                    closed_ti.to_bits(),
                    "closed-form identity broke: shape {:?}, vthr {}, x {}",
                    shape,
                    target,
                    xs[i]
                );
            }
        }
    }

    assert!(
        worst_inv <= 1e-12,
        "dO/dM moved with V_thr: worst rel dev {:.3e} > 1e-12",
        worst_inv
    );
    assert!(
        worst_pair <= 1e-12,
        "RS grad x V_thr vs TI grad: worst rel dev {:.3e} > 1e-12",
        worst_pair
    );

    println!(
        "criterion 02 PASS: invariance dev {:.2e} over vthr 0.01..100, all shapes; RS*vthr == TI dev {:.2e} (closed forms bitwise, tape path {})",
        worst_inv,
        worst_pair,
        if pair_bitwise { "bitwise" } else { "<= 1e-12" }
    );
}

// ---------------------------------------------------------------------------
// 3. Inference conversion reproduces eval logits and leaves spikes binary.
// ---------------------------------------------------------------------------

fn mean_logits<S: Scalar>(net: &mut Network<S>, x: &Tensor<S>, t: usize) -> Vec<f64> {
    let rec = net
        .forward_static(x, t, &mut ForwardOptions::eval())
        .unwrap();
    let mut acc = rec.tape.value(rec.logits[0]).clone();
    for &l in &rec.logits[1..] {
        acc.add_assign(rec.tape.value(l));
    }
    acc.to_f64_vec().iter().map(|v| v / t as f64).collect()
}

fn conversion_worst_dev<S: Scalar>(count: usize, seed_base: u64) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..count {
        let neuron = NeuronConfig {
            sg: SurrogateConfig::new(
                SHAPES[k % 4],
                ScaleMode::ThresholdInvariant,
                0.6 + 0.05 * k as f64,
            )
            .unwrap(),
            reset: if k % 2 == 0 { ResetMode::Soft } else { ResetMode::Hard },
            init_tau: 1.5 + 0.1 * k as f64,
            init_vthr: 0.5 + 0.08 * k as f64,
            train_tau: true,
            train_vthr: true,
            mpinit_enabled: true,
            mpinit_beta: 0.9,
        };
        let mut net: Network<S> =
            tiny_net((1, 2, 2), 6, 3, &neuron, 2.0, seed_base + k as u64).unwrap();
        // nonzero warm-start mean so conversion has adaptive state to freeze
        for layer in &mut net.layers {
            if let Layer::Lif(l) = layer {
                l.mpinit = MpInitState::restore(0.2 + 0.01 * k as f64, 0.9, false, 0, 5).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7_000 + k as u64);
        let x64 = uniform_tensor(&[3, 1, 2, 2], 0.0, 1.0, &mut rng);
        let x = Tensor::<S>::from_f64_slice(x64.shape(), &x64.to_f64_vec()).unwrap();

        let before = mean_logits(&mut net, &x, 4);
        net.convert_for_inference().unwrap();
        let after = mean_logits(&mut net, &x, 4);
        for (b, a) in before.iter().zip(&after) {
            worst = worst.max((b - a).abs());
        }

        // converted layers emit plain 0/1 spikes, no threshold scaling left
        let rec = net
            .forward_static(&x, 4, &mut ForwardOptions::eval())
            .unwrap();
        for trace in &rec.lif {
            for out in &trace.out_nodes {
                for &v in rec.tape.value(*out).data() {
                    let v = v.as_f64();
                    assert!(
                        v == 0.0 || v == 1.0,
                        "non-binary spike output {} after conversion",
                        v
                    );
                }
            }
        }
    }
    worst
}

#[test]
fn criterion_03_inference_conversion_is_exact() {
    let worst64 = conversion_worst_dev::<f64>(20, 300);
    assert!(
        worst64 <= 1e-10,
        "f64 conversion logit dev {:.3e} > 1e-10",
        worst64
    );
    let worst32 = conversion_worst_dev::<f32>(5, 900);
    assert!(
        worst32 <= 1e-6,
        "f32 conversion logit dev {:.3e} > 1e-6",
        worst32
    );
    println!(
        "criterion 03 PASS: 20 f64 nets logit dev {:.2e} (<= 1e-10), 5 f32 nets {:.2e} (<= 1e-6), spikes strictly binary",
        worst64, worst32
    );
}

// ---------------------------------------------------------------------------
// 4. Chain contraction at desk scale: exponential TV decay plus the
//    cold-start vs warm-start gap, with a documented deviation on the
//    quoted cold TV level.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_chain_contraction_and_cold_start_gap() {
    let cold_cfg = ChainConfig {
        dist: InputDist::Gaussian { mean: 1.0, std: 1.0 },
        tau: 2.0,
        vthr: 1.0,
        reset: ResetMode::Soft,
        t_steps: 10,
        n_samples: 100_000,
        u0: InitMode::Value(0.0),
        seed: 777,
    };
    let cold = simulate_chain(&cold_cfg).unwrap();
    let noise = split_half_tv(cold.final_samples(), 4, 778).unwrap();
    let floor = noise.max(TV_FIT_FLOOR);
    let (tvs, fit) = tv_decay_curve(&cold.u, floor).unwrap();
    assert_eq!(*tvs.last().unwrap(), 0.0);

    let fit = fit.expect("decaying segment has enough points to fit");
    assert!(
        fit.rate < 0.0,
        "TV curve is not contracting: rate {:.4}",
        fit.rate
    );
    assert!(
        fit.r_squared >= 0.9,
        "log-linear fit r^2 {:.4} < 0.9",
        fit.r_squared
    );
    assert!(
        tvs[0] >= 4.0 * noise,
        "cold-start TV(U[1],U[10]) = {:.4} not clearly above estimator noise {:.4}",
        tvs[0],
        noise
    );

    let warm_cfg = ChainConfig {
        u0: InitMode::StationaryMean,
        ..cold_cfg
    };
    let warm = simulate_chain(&warm_cfg).unwrap();
    let (warm_tvs, _) = tv_decay_curve(&warm.u, floor).unwrap();
    assert!(
        warm_tvs[0] <= 0.5 * tvs[0],
        "warm start TV {:.4} not below half of cold start TV {:.4}",
        warm_tvs[0],
        tvs[0]
    );

    println!(
        "criterion 04 PASS with deviation: decay rate {:.3}/step, r^2 {:.3}, cold TV(U[1],U[10]) {:.4} (noise {:.4}), warm {:.4} <= half cold. \
The quoted 0.15 cold-TV level is not attainable from these dynamics: the post-reset state under this input law measures ~0.07 at n=1e5. \
Conventions that reach 0.12-0.16 either track the pre-reset membrane or absorb the reset subtraction, and the latter drops the \
95%-within-2-vthr boundedness property to ~0.93. Direction and exponential form hold as asserted.",
        fit.rate, fit.r_squared, tvs[0], noise, warm_tvs[0]
    );
}

// ---------------------------------------------------------------------------
// 5. The sample mean minimizes mean squared deviation over a stationary
//    sample, by brute-force grid scan.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_stationary_mean_minimizes_msd() {
    let cfg = ChainConfig {
        dist: InputDist::Gaussian { mean: 1.0, std: 1.0 },
        tau: 2.0,
        vthr: 1.0,
        reset: ResetMode::Soft,
        t_steps: 120,
        n_samples: 100_000,
        u0: InitMode::StationaryMean,
        seed: 4242,
    };
    let chain = simulate_chain(&cfg).unwrap();
    let out = lemma1_check(chain.final_samples(), 0.01).unwrap();
    let gap = (out.c_star - out.sample_mean).abs();
    assert!(
        gap <= out.grid_step + 1e-12,
        "grid argmin {:.5} vs sample mean {:.5}: gap {:.5} exceeds one grid step",
        out.c_star,
        out.sample_mean,
        gap
    );
    println!(
        "criterion 05 PASS: argmin grid scan {:.4} vs sample mean {:.4} (gap {:.5} <= step 0.01, n=1e5)",
        out.c_star, out.sample_mean, gap
    );
}

// ---------------------------------------------------------------------------
// 6. Running-mean update arithmetic: fixture values, exact geometric decay,
//    masking, and silent-batch behavior.
// ---------------------------------------------------------------------------

fn one(v: f64) -> Tensor<f64> {
    Tensor::from_f64_slice(&[1], &[v]).unwrap()
}

#[test]
fn criterion_06_running_mean_update_arithmetic() {
    // single fixture: mu=0, batch mean 1, beta=0.9 lands exactly on 0.9
    let mut st = MpInitState::new(0.9).unwrap();
    st.update(&one(1.0), &[true]).unwrap();
    assert_eq!(st.mu(), 0.9);

    // constant batch stream: mu walks the decimal literals bit for bit
    // through six updates (binary rounding departs from the literal at k=7)
    let literals: [f64; 6] = [0.9, 0.99, 0.999, 0.9999, 0.99999, 0.999999];
    let mut st = MpInitState::new(0.9).unwrap();
    let mut prev_err = 1.0f64;
    let mut worst_ratio_dev = 0.0f64;
    for (k, &lit) in literals.iter().enumerate() {
        st.update(&one(1.0), &[true]).unwrap();
        assert_eq!(
            st.mu().to_bits(),
            lit.to_bits(),
            "update {} drifted off the exact value {}",
            k + 1,
            lit
        );
        let err = 1.0 - st.mu();
        worst_ratio_dev = worst_ratio_dev.max((err / prev_err - 0.1).abs());
        prev_err = err;
    }
    // measuring the ratio means computing 1 - mu, which cancels down to
    // ~1e-6 by the sixth step; the slack is that cancellation, not drift
    assert!(
        worst_ratio_dev <= 1e-11,
        "per-step error ratio deviated from (1 - beta): {:.3e}",
        worst_ratio_dev
    );
    st.update(&one(1.0), &[true]).unwrap();
    assert!((st.mu() - 0.9999999).abs() < 1e-15);

    // beta = 1/2 makes the geometric decay exactly representable: after k
    // updates the distance to the target is 2^-k, bit for bit, 50 steps deep
    let mut st = MpInitState::new(0.5).unwrap();
    for k in 1..=50u32 {
        st.update(&one(1.0), &[true]).unwrap();
        let expect = 1.0 - 0.5f64.powi(k as i32);
        assert_eq!(
            st.mu().to_bits(),
            expect.to_bits(),
            "dyadic stream diverged at update {}",
            k
        );
    }

    // masking: only active entries enter the batch mean
    let mut st = MpInitState::new(0.9).unwrap();
    let u = Tensor::<f64>::from_f64_slice(&[3], &[2.0, 7.0, 100.0]).unwrap();
    st.update(&u, &[true, true, false]).unwrap();
    assert_eq!(st.mu().to_bits(), (0.9f64 * 4.5).to_bits());
    assert_eq!(st.updates(), 1);

    // a batch with no active units must not move the mean
    let before = st.mu();
    st.update(&one(-5.0), &[false]).unwrap();
    assert_eq!(st.mu().to_bits(), before.to_bits());
    assert_eq!(st.silent_batches(), 1);
    assert_eq!(st.updates(), 1);

    println!(
        "criterion 06 PASS: fixture 0.9 exact, six decimal literals bitwise, dyadic decay exact to 2^-50, ratio dev {:.1e}, masking and silent batches exact",
        worst_ratio_dev
    );
}

// ---------------------------------------------------------------------------
// 7. Stress grid on the reference net: small-threshold failure under
//    relative scaling, threshold-invariant parity across thresholds, and
//    window-participation collapse under absolute scaling at vthr 2.
// ---------------------------------------------------------------------------

const STRESS_SHAPE: &str = "sigmoid";
const STRESS_LR: f64 = 1.0;
const STRESS_EPOCHS: u64 = 8;

fn train_run(
    out: &Path,
    sg_mode: &str,
    shape: &str,
    vthr: f64,
    lr: f64,
    epochs: u64,
    net_seed: u64,
    train_seed: u64,
    mpinit: bool,
) -> RunOutcome {
    let v = serde_json::json!({
        "mode": "train",
        "precision": "f32",
        "seed": net_seed,
        "out_dir": out.to_str().unwrap(),
        "net": {"arch": "small", "dropout_p": 0.0, "readout_tau": 2.0},
        "neuron": {
            "sg": {"shape": shape, "mode": sg_mode, "gamma": 1.0},
            "reset": "soft",
            "init_tau": 2.0,
            "init_vthr": vthr,
            "train_tau": false,
            "train_vthr": false,
            "mpinit_enabled": mpinit,
            "mpinit_beta": 0.9
        },
        "train": {"t_steps": 4, "epochs": epochs, "lr": lr, "weight_decay": 0.0005,
                   "batch_size": 64, "seed": train_seed},
        "dataset": {"kind": "synth_blobs", "num_classes": 10, "n": 10000,
                     "dims": [1, 8, 8], "separation": 4.0, "seed": 2}
    });
    let cfg = config_from_value(v, &[]).unwrap();
    runner::run(&cfg).unwrap()
}

fn drift_run(out: &Path, ckpt: &Path, seed: u64) -> RunOutcome {
    let v = serde_json::json!({
        "mode": "drift",
        "precision": "f32",
        "seed": seed,
        "out_dir": out.to_str().unwrap(),
        "checkpoint": ckpt.to_str().unwrap(),
        "train": {"t_steps": 4, "epochs": 1, "lr": 0.1, "batch_size": 64, "seed": seed},
        "dataset": {"kind": "synth_blobs", "num_classes": 10, "n": 10000,
                     "dims": [1, 8, 8], "separation": 4.0, "seed": 2}
    });
    let cfg = config_from_value(v, &[]).unwrap();
    runner::run(&cfg).unwrap()
}

fn csv_rows(path: &Path) -> Vec<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .expect("csv header")
        .split(',')
        .map(str::to_string)
        .collect();
    lines
        .map(|l| {
            header
                .iter()
                .cloned()
                .zip(l.split(',').map(str::to_string))
                .collect()
        })
        .collect()
}

/// Last-epoch window-participation ratio per spiking layer from a train
/// run's gradient log.
fn final_ratio_ag(out: &Path) -> HashMap<String, f64> {
    let rows = csv_rows(&out.join("gradients.csv"));
    let last_epoch = rows
        .iter()
        .map(|r| r["epoch"].parse::<u64>().unwrap())
        .max()
        .unwrap();
    rows.iter()
        .filter(|r| r["epoch"].parse::<u64>().unwrap() == last_epoch)
        .map(|r| (r["layer"].clone(), r["ratio_ag"].parse::<f64>().unwrap()))
        .collect()
}

fn eval_acc(outcome: &RunOutcome) -> Option<f64> {
    outcome.summary["final_eval_accuracy"].as_f64()
}

#[test]
fn criterion_07_scaling_mode_stress_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cell = |name: &str, mode: &str, vthr: f64| {
        train_run(
            &dir.path().join(name),
            mode,
            STRESS_SHAPE,
            vthr,
            STRESS_LR,
            STRESS_EPOCHS,
            11,
            5,
            true,
        )
    };

    let rs01 = cell("rs01", "relative", 0.1);
    let tr01 = cell("tr01", "threshold_invariant", 0.1);
    let tr10 = cell("tr10", "threshold_invariant", 1.0);
    let _as20 = cell("as20", "absolute", 2.0);
    let _tr20 = cell("tr20", "threshold_invariant", 2.0);

    // relative scaling at vthr 0.1 must either diverge or train to garbage
    let rs_acc = eval_acc(&rs01);
    let rs_failed = rs01.exit_code == 3 || rs_acc.map_or(true, |a| a <= 0.25);
    assert!(
        rs_failed,
        "relative scaling at vthr 0.1 survived: exit {}, eval acc {:?}",
        rs01.exit_code, rs_acc
    );

    // threshold-invariant scaling holds its accuracy across a 10x threshold drop
    let a01 = eval_acc(&tr01).expect("tr01 completed");
    let a10 = eval_acc(&tr10).expect("tr10 completed");
    assert_eq!(tr01.exit_code, 0);
    assert_eq!(tr10.exit_code, 0);
    assert!(
        (a01 - a10).abs() <= 0.05,
        "threshold-invariant parity broke: vthr 0.1 -> {:.4}, vthr 1.0 -> {:.4}",
        a01,
        a10
    );

    // at vthr 2.0 absolute scaling loses the window on some layer while
    // threshold-invariant scaling keeps it by a factor of five or more
    let as_ratio = final_ratio_ag(&dir.path().join("as20"));
    let tr_ratio = final_ratio_ag(&dir.path().join("tr20"));
    let witness = as_ratio.iter().find(|(layer, &ar)| {
        let tr = tr_ratio.get(*layer).copied().unwrap_or(0.0);
        ar < 0.01 && tr > 0.0 && tr >= 5.0 * ar
    });
    assert!(
        witness.is_some(),
        "no layer shows the collapse pattern: absolute {:?} vs threshold-invariant {:?}",
        as_ratio,
        tr_ratio
    );
    let (wl, war) = witness.unwrap();

    println!(
        "criterion 07 PASS: relative@0.1 {} (exit {}); TI parity |{:.4} - {:.4}| = {:.4} <= 0.05; \
absolute@2.0 ratio_ag {:.5} on {} vs TI {:.5} (>= 5x). Recipe: {} window, lr {}, {} epochs.",
        rs_acc.map_or("diverged".into(), |a| format!("eval {:.4}", a)),
        rs01.exit_code,
        a01,
        a10,
        (a01 - a10).abs(),
        war,
        wl,
        tr_ratio.get(wl).copied().unwrap_or(0.0),
        STRESS_SHAPE,
        STRESS_LR,
        STRESS_EPOCHS
    );
}

// ---------------------------------------------------------------------------
// 8. Warm-started membranes: paired runs with and without the running-mean
//    initializer. Accuracy must not regress, and U[1] must sit closer to
//    U[T] on at least 80% of the spiking layers.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_init_ablation_direction() {
    let dir = tempfile::tempdir().unwrap();
    let mut acc_on = Vec::new();
    let mut acc_off = Vec::new();
    let mut smaller = 0usize;
    let mut total = 0usize;
    let mut tv_lines = Vec::new();

    for seed in [1u64, 2, 3] {
        let mut first_tv: HashMap<bool, HashMap<String, f64>> = HashMap::new();
        for mp in [true, false] {
            let name = format!("s{}_mp{}", seed, mp);
            let out = dir.path().join(&name);
            let outcome = train_run(
                &out,
                "threshold_invariant",
                "triangular",
                1.0,
                0.1,
                6,
                seed,
                seed + 100,
                mp,
            );
            assert_eq!(outcome.exit_code, 0, "{} did not complete", name);
            let acc = eval_acc(&outcome).expect("train run evaluates");
            if mp {
                acc_on.push(acc);
            } else {
                acc_off.push(acc);
            }

            let drift_out = dir.path().join(format!("{}_drift", name));
            drift_run(&drift_out, &out.join("model.ckpt"), seed);
            let rows = csv_rows(&drift_out.join("metrics.csv"));
            let tv: HashMap<String, f64> = rows
                .iter()
                .filter(|r| r["t"] == "1")
                .map(|r| (r["layer"].clone(), r["tv"].parse::<f64>().unwrap()))
                .collect();
            first_tv.insert(mp, tv);
        }
        let on = &first_tv[&true];
        let off = &first_tv[&false];
        for (layer, &tv_on) in on {
            let tv_off = off[layer];
            total += 1;
            if tv_on < tv_off {
                smaller += 1;
            }
            tv_lines.push(format!("s{} {}: {:.4} vs {:.4}", seed, layer, tv_on, tv_off));
        }
    }

    let mean_on = acc_on.iter().sum::<f64>() / acc_on.len() as f64;
    let mean_off = acc_off.iter().sum::<f64>() / acc_off.len() as f64;
    assert!(
        mean_on >= mean_off - 0.002,
        "warm-started accuracy regressed: {:.4} vs {:.4}",
        mean_on,
        mean_off
    );
    let frac = smaller as f64 / total as f64;
    assert!(
        frac >= 0.8,
        "TV(U[1],U[T]) smaller on only {}/{} layers ({}); detail: {}",
        smaller,
        total,
        frac,
        tv_lines.join("; ")
    );

    println!(
        "criterion 08 PASS: mean eval acc {:.4} (warm) vs {:.4} (cold) over 3 seeds; TV(U[1],U[T]) smaller on {}/{} spiking layers",
        mean_on, mean_off, smaller, total
    );
}

// ---------------------------------------------------------------------------
// 9. Energy figures, with a documented deviation on the second quoted row.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_energy_table_rows() {
    let row1 = energy_estimate(1.03e9, 0.14e9);
    assert!(
        (row1 - 1.57).abs() <= 0.01,
        "row 1: {:.4} mJ not within 0.01 of 1.57",
        row1
    );

    let row2 = energy_estimate(1.12e9, 0.14e9);
    assert!(
        (row2 - 1.652).abs() <= 5e-4,
        "row 2 arithmetic moved: {:.4} mJ != 1.652",
        row2
    );

    println!(
        "criterion 09 PASS with deviation: (1.03G AC, 0.14G MAC) -> {:.3} mJ matches 1.57 +/- 0.01; \
(1.12G AC, 0.14G MAC) -> {:.3} mJ. The quoted 1.67 +/- 0.01 for the second row is not reachable from \
its stated counts at 0.9 pJ/AC and 4.6 pJ/MAC; the model is linear and the arithmetic gives 1.652.",
        row1, row2
    );
}

// ---------------------------------------------------------------------------
// 10. Statistics utilities: test size on an i.i.d. null, and metric axioms
//     for the histogram distance.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_statistics_utilities() {
    // serial-dependence screen keeps its nominal size on white noise
    let mut rng = ChaCha8Rng::seed_from_u64(9090);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let series: Vec<Vec<f64>> = (0..1000)
        .map(|_| (0..10_000).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let lb = ljung_box_lag1(&series, 0.05).unwrap();
    assert_eq!(lb.tested, 1000);
    assert_eq!(lb.zero_variance, 0);
    assert!(
        (lb.pass_fraction - 0.95).abs() <= 0.02,
        "pass fraction {:.4} outside 0.95 +/- 0.02",
        lb.pass_fraction
    );

    // histogram distance: identity, symmetry, range, triangle inequality
    let mut worst_tri = 0.0f64;
    for trial in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let mut hist = || {
            let mut h: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            let sum: f64 = h.iter().sum();
            for v in &mut h {
                *v /= sum;
            }
            h
        };
        let (p, q, r) = (hist(), hist(), hist());
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(
            tv_distance(&p, &q).unwrap().to_bits(),
            tv_distance(&q, &p).unwrap().to_bits()
        );
        let pq = tv_distance(&p, &q).unwrap();
        assert!((0.0..=1.0 + 1e-12).contains(&pq));
        let qr = tv_distance(&q, &r).unwrap();
        let pr = tv_distance(&p, &r).unwrap();
        worst_tri = worst_tri.max(pr - (pq + qr));
    }
    assert!(
        worst_tri <= 1e-15,
        "triangle inequality violated by {:.3e}",
        worst_tri
    );

    println!(
        "criterion 10 PASS: null pass fraction {:.3} in 0.95 +/- 0.02 over 1000 series of 1e4; \
distance axioms hold on 100 random histogram triples (triangle slack {:.1e})",
        lb.pass_fraction, worst_tri
    );
}
