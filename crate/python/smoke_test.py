#!/usr/bin/env python3
"""Smoke test for the snn_forge_py extension module.

Builds nothing itself: expects `cargo build -p snn-forge-py` (debug or
release) to have produced the cdylib already. Copies it next to a temp dir
under the importable name and drives the bindings end to end, including one
tiny training run through the full experiment pipeline.
"""

import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    candidates = [
        os.path.join(ROOT, "target", p, n)
        for p in ("debug", "release")
        for n in ("libsnn_forge_py.so", "snn_forge_py.so", "libsnn_forge_py.dylib")
    ]
    src = next((c for c in candidates if os.path.exists(c)), None)
    if src is None:
        sys.exit("cdylib not found; run `cargo build -p snn-forge-py` first")
    stage = tempfile.mkdtemp(prefix="snn_forge_py_")
    shutil.copy(src, os.path.join(stage, "snn_forge_py.so"))
    sys.path.insert(0, stage)
    import snn_forge_py

    return snn_forge_py


def approx(a, b, tol=1e-12):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    sf = load_module()

    # neuron step: M = (1 - 1/tau) u + (1/tau) i, spike at threshold,
    # soft reset subtracts the threshold
    m, s, u_next = sf.scalar_step(0.6, 1.6, 2.0, 1.0, "soft")
    approx(m, 1.1)
    approx(s, 1.0)
    approx(u_next, 0.1)
    m, s, u_next = sf.scalar_step(0.6, 1.6, 2.0, 1.0, "hard")
    approx(u_next, 0.0)
    m, s, u_next = sf.scalar_step(0.6, 0.1, 2.0, 1.0)
    approx(s, 0.0)
    approx(u_next, m)

    # spike grad: threshold-invariant value is constant at fixed relative arg
    ref = sf.spike_grad(1.25, 1.0, "sigmoid", "threshold_invariant", 1.0)
    for vthr in (0.01, 0.1, 10.0, 100.0):
        g = sf.spike_grad(vthr * 1.25, vthr, "sigmoid", "threshold_invariant", 1.0)
        approx(g, ref)
        rs = sf.spike_grad(vthr * 1.25, vthr, "sigmoid", "relative", 1.0)
        approx(rs * vthr, ref)
    assert sf.heaviside(1.2, 1.0) == 1.0 and sf.heaviside(0.8, 1.0) == 0.0
    approx(sf.forward_scale("threshold_invariant", 2.5), 2.5)
    approx(sf.forward_scale("absolute", 2.5), 1.0)
    # window derivative peaks at the argument origin
    assert sf.sg_derivative("triangular", 0.0, 1.0) > sf.sg_derivative("triangular", 0.4, 1.0)

    # energy model reproduces the published operating points
    assert abs(sf.energy_estimate(1.03e9, 0.14e9) - 1.57) <= 0.01
    assert sf.energy_estimate(0, 0) == 0.0

    # distribution utilities
    h1 = sf.histogram([0.1, 0.2, 0.9], 0.0, 1.0, 4)
    approx(sum(h1), 1.0)
    h2 = sf.histogram([0.6, 0.7, 0.8], 0.0, 1.0, 4)
    t = sf.tv_distance(h1, h2)
    assert 0.0 <= t <= 1.0
    approx(sf.tv_distance(h1, h1), 0.0)
    approx(sf.tv_distance(h1, h2), sf.tv_distance(h2, h1))

    # running-mean update: mu=0, batch mean 1, beta 0.9 -> exactly 0.9
    rm = sf.RunningMean(beta=0.9)
    rm.update([1.0, 1.0, 1.0])
    assert rm.mu == 0.9 and rm.updates == 1
    rm.update([5.0, 7.0], active=[False, False])
    assert rm.mu == 0.9 and rm.silent_batches == 1
    rm.freeze()
    assert rm.frozen
    try:
        rm.update([100.0])
    except ValueError:
        pass
    else:
        raise AssertionError("update after freeze should raise")
    assert rm.mu == 0.9

    # chain lab: cold start decays toward the stationary law; warm start
    # (stationary-mean) begins much closer to it. Fit only above the
    # sampling-noise floor, estimated by split-half TV on one population.
    cold = sf.simulate_chain(
        "gaussian", 1.0, 1.0, 2.0, 1.0, 0.0, t_steps=10, n_samples=100000, seed=7
    )
    noise = sf.split_half_tv(cold["finals"], rounds=4, seed=11)
    assert 0.0 < noise < 0.05
    cold = sf.simulate_chain(
        "gaussian", 1.0, 1.0, 2.0, 1.0, 0.0,
        t_steps=10, n_samples=100000, seed=7, fit_floor=noise,
    )
    assert cold["tvs"][-1] == 0.0
    assert cold["tvs"][0] > 4 * noise
    assert cold["rate"] is not None and cold["rate"] < 0.0
    assert cold["r_squared"] > 0.8
    warm = sf.simulate_chain(
        "gaussian", 1.0, 1.0, 2.0, 1.0, "stationary-mean",
        t_steps=10, n_samples=100000, seed=7,
    )
    assert warm["tvs"][0] < 0.5 * cold["tvs"][0]

    # the sample mean minimizes mean squared deviation
    out = sf.lemma1_check(cold["finals"], grid_step=0.01)
    assert abs(out["c_star"] - out["sample_mean"]) <= 0.01 + 1e-12

    mu = sf.stationary_mean("gaussian", 1.0, 1.0, 2.0, 1.0, n_samples=200, seed=3)
    assert math.isfinite(mu)

    # whiteness check accepts i.i.d. input
    import random

    rng = random.Random(0)
    series = [[rng.gauss(0, 1) for _ in range(500)] for _ in range(50)]
    lb = sf.ljung_box_lag1(series, alpha=0.05)
    assert lb["tested"] == 50 and lb["pass_fraction"] > 0.8

    # full pipeline: one tiny training run end to end
    out_dir = tempfile.mkdtemp(prefix="snn_forge_run_")
    cfg = {
        "mode": "train",
        "precision": "f32",
        "seed": 1,
        "out_dir": out_dir,
        "net": {"arch": "tiny", "hidden": 32},
        "neuron": {
            "sg": {"shape": "sigmoid", "mode": "threshold_invariant", "gamma": 1.0},
            "reset": "soft",
            "init_tau": 2.0,
            "init_vthr": 1.0,
            "train_tau": False,
            "train_vthr": False,
            "mpinit_enabled": True,
            "mpinit_beta": 0.9,
        },
        "train": {
            "t_steps": 4,
            "epochs": 2,
            "lr": 0.1,
            "weight_decay": 0.0005,
            "batch_size": 32,
            "seed": 5,
        },
        "dataset": {
            "kind": "synth_blobs",
            "num_classes": 4,
            "n": 800,
            "dims": [1, 6, 6],
            "separation": 3.0,
            "seed": 2,
        },
    }
    code, run_dir, summary_json = sf.run_experiment(
        json.dumps(cfg), [("train.lr", "0.2")]
    )
    assert code == 0, f"train run exited {code}"
    summary = json.loads(summary_json)
    assert summary["epochs_run"] == 2
    assert summary["final_eval_accuracy"] > 0.5, summary["final_eval_accuracy"]
    for name in ("summary.json", "metrics.csv", "gradients.csv", "model.ckpt", "resolved.json"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    resolved = json.load(open(os.path.join(run_dir, "resolved.json")))
    assert resolved["train"]["lr"] == 0.2

    # bad configs surface as ValueError, not crashes
    try:
        sf.run_experiment("{\"mode\": \"train\"}")
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config should raise")

    print("smoke test passed")


if __name__ == "__main__":
    main()
