"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale MNIST study behind criteria 9-11 trains 15 networks once per
session (module fixture) and writes ``results/desk_study.json``.
"""

import json
import os
from pathlib import Path

import numpy as np
import pytest

import orthonet.optim as optim_module
import orthonet.train as train_module
from orthonet.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from orthonet.data import CORRUPTIONS
from orthonet.linalg import svd
from orthonet.network import (
    Batch, ConvAsMatrix, Dense, MaxPool, Norm, ReLU, SoftmaxCE, backward, build_network, forward,
)
from orthonet.norm import NormState, effective_transform
from orthonet.optim import (
    MomentumState, OrthoConfig, manifold_residual, orthogonal_init, sgd_momentum_step, svb_project,
)
from orthonet.probe import (
    induced_linear_map, local_region_radius, radius_context, region_sandwich, spectrum_of,
)
from orthonet.data import synth_blobs
from orthonet.train import TrainConfig, Trainer, corruption_table, strip_timing, train_loop

import desk
from acceptance_log import record, stopwatch
from gradcheck import network_max_error, perturb_params, random_net_cases, soft_penalty_error
from gradcheck import srip_penalty_error

RESULTS = Path(os.environ.get("ORTHONET_RESULTS", Path(__file__).resolve().parents[1] / "results"))


def patterns(net, params, inputs):
    """Inference logits ``(B, k)`` plus stacked masks and pool winners ``(B, ...)``."""
    inputs = np.atleast_2d(inputs)
    batch = Batch(inputs, np.zeros(len(inputs), dtype=np.int64))
    _, logits, trace = forward(net, params, batch, mode="infer")
    parts = [trace.masks[i].T for i in sorted(trace.masks)]
    parts += [trace.argmax[i].T for i in sorted(trace.argmax)]
    code = np.concatenate([np.zeros((len(inputs), 0), dtype=np.int64)]
                          + [p.astype(np.int64) for p in parts], axis=1)
    return logits.T, code


def probe_nets(seed):
    """ReLU nets with and without pooling, folded norms, and a conv front end."""
    rng = np.random.default_rng(seed)
    specs = {
        "mlp_bn": ([Dense(24), Norm("bn"), ReLU(), Dense(16), ReLU(), Dense(5), SoftmaxCE()], (10,)),
        "mlp_pool": ([Dense(24), ReLU(), MaxPool(2, 2), Dense(16), ReLU(), MaxPool(2, 2),
                      Dense(5), SoftmaxCE()], (10,)),
        "conv_pool": ([ConvAsMatrix(4, 1, 3, 3, 1, 1), Norm("dbn"), ReLU(), MaxPool(2, 2),
                       Dense(5), SoftmaxCE()], (1, 6, 6)),
    }
    nets = {}
    for name, (layers, shape) in specs.items():
        net, params = build_network(layers, shape, seed=seed)
        perturb_params(params, rng)
        for st in params.norms.values():
            st.running_mean = 0.3 * rng.standard_normal(st.size)
            st.running_std = rng.uniform(0.5, 2.0, st.size)
            st.running_std_bar = float(rng.uniform(0.5, 2.0))
        nets[name] = (net, params)
    return nets


# -- 1 ---------------------------------------------------------------------

def test_criterion_1_svb_band_and_idempotence():
    rng = np.random.default_rng(1)
    band_excess = idem = 0.0
    with stopwatch() as sw:
        for _ in range(500):
            m, n = int(rng.integers(1, 65)), int(rng.integers(1, 49))
            w = 10 ** rng.uniform(-2, 2) * rng.standard_normal((m, n))
            for eps in (0.0, 0.05, 0.5):
                once = svb_project(w, eps)
                s = np.linalg.svd(once, compute_uv=False)  # independent LAPACK route
                band_excess = max(band_excess, s.max() - (1 + eps), 1 / (1 + eps) - s.min())
                idem = max(idem, float(np.linalg.norm(svb_project(once, eps) - once)))
    ok = band_excess <= 1e-8 and idem <= 1e-9 and sw["elapsed"] < 30
    record(1, "SVB band", ok, f"worst band excess {band_excess:.2e} (<= 1e-8), "
           f"worst idempotence {idem:.2e} (<= 1e-9), 1500 projections", sw["elapsed"], 30)
    assert ok


# -- 2 ---------------------------------------------------------------------

def test_criterion_2_stiefel_trajectory(monkeypatch):
    tangent_worst = [0.0]
    calls = [0]
    original = optim_module.stiefel_tangent_project

    def checked(w, g):
        z = original(w, g)
        tangent_worst[0] = max(tangent_worst[0], float(np.linalg.norm(w.T @ z + z.T @ w)))
        calls[0] += 1
        return z

    monkeypatch.setattr(optim_module, "stiefel_tangent_project", checked)
    data = synth_blobs(6, 20, 60, 3.0, seed=2)
    layers = [Dense(32), Norm("dbn"), ReLU(), Dense(24), ReLU(), Dense(16), ReLU(), Dense(6),
              SoftmaxCE()]
    net, params = build_network(layers, (20,), seed=2)
    state = MomentumState(0.9, 1e-4)
    rng = np.random.default_rng(2)
    residual = 0.0
    with stopwatch() as sw:
        for step in range(200):
            idx = rng.choice(len(data), 32, replace=False)
            batch = Batch(data.inputs[idx], data.labels[idx])
            _, _, trace = forward(net, params, batch)
            grads = backward(net, params, batch, trace)
            sgd_momentum_step(params, grads, state, 0.1, OrthoConfig(mode="stiefel"), step)
            residual = max(residual, max(manifold_residual(w) for w in params.weights.values()))
    ok = residual <= 1e-6 and tangent_worst[0] <= 1e-10 and calls[0] == 800 and sw["elapsed"] < 60
    record(2, "Stiefel trajectory", ok, f"max ||W^T W - I|| {residual:.2e} (<= 1e-6), "
           f"max tangency {tangent_worst[0]:.2e} (<= 1e-10) over {calls[0]} projections",
           sw["elapsed"], 60)
    assert ok


# -- 3 ---------------------------------------------------------------------

def test_criterion_3_gradient_oracle():
    net_err = soft_err = srip_err = 0.0
    with stopwatch() as sw:
        for seed in range(50):
            for case in random_net_cases(seed):
                net_err = max(net_err, network_max_error(*case))
            rng = np.random.default_rng(1000 + seed)
            soft_err = max(soft_err, soft_penalty_error(rng))
            srip_err = max(srip_err, srip_penalty_error(rng))
    ok = net_err <= 1e-4 and soft_err <= 1e-4 and srip_err <= 1e-3 and sw["elapsed"] < 120
    record(3, "gradient oracle", ok, f"network {net_err:.2e}, soft {soft_err:.2e} (<= 1e-4), "
           f"SRIP {srip_err:.2e} (<= 1e-3), 50 seeds", sw["elapsed"], 120)
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_criterion_4_linear_sandwich():
    # Later layers are tall or square (injective) and differences avoid the
    # first map's null space: the two conditions under which the lower bound holds.
    rng = np.random.default_rng(4)
    worst_low = worst_high = -np.inf
    with stopwatch() as sw:
        for k in range(20):
            d0 = int(rng.integers(3, 12))
            d1 = int(rng.integers(2, 12))
            d2 = int(rng.integers(d1, 14))
            d3 = int(rng.integers(d2, 16))
            layers = [Dense(d1, bias=False), Dense(d2, bias=False), Dense(d3, bias=False),
                      SoftmaxCE()]
            net, params = build_network(layers, (d0,), seed=k)
            for i in params.weights:
                params.weights[i] = rng.uniform(0.3, 2) * rng.standard_normal(params.weights[i].shape)
            lo, hi = region_sandwich(net, params, np.zeros(d0))
            w1 = params.weights[0]
            v = svd(w1).V[:, :min(d0, d1)]
            x = rng.standard_normal((1000, d0))
            delta = rng.standard_normal((1000, d0)) @ v @ v.T
            fx, _ = patterns(net, params, x)
            fy, _ = patterns(net, params, x + delta)
            ratio = np.linalg.norm(fx - fy, axis=1) / np.linalg.norm(delta, axis=1)
            worst_low = max(worst_low, float(np.max(lo - ratio)))
            worst_high = max(worst_high, float(np.max(ratio - hi)))
    ok = worst_low <= 1e-8 and worst_high <= 1e-8 and sw["elapsed"] < 30
    record(4, "linear sandwich", ok, f"max(prod s_min - r) {worst_low:.2e}, "
           f"max(r - prod s_max) {worst_high:.2e} (<= 1e-8), 20 nets x 1000 pairs",
           sw["elapsed"], 30)
    assert ok


# -- 5 ---------------------------------------------------------------------

def test_criterion_5_induced_map():
    rng = np.random.default_rng(5)
    worst = 0.0
    checked = 0
    with stopwatch() as sw:
        for name, (net, params) in probe_nets(5).items():
            for _ in range(100):
                x = rng.standard_normal(net.input_dim)
                imap = induced_linear_map(net, params, x)
                fx, code = patterns(net, params, x)
                worst = max(worst, float(np.max(np.abs(imap(x) - fx[0]))))
                found = []
                scale = 1.0
                while sum(len(f[0]) for f in found) < 200:
                    u = rng.standard_normal((400, net.input_dim))
                    u *= scale * rng.uniform(0, 1, (400, 1)) / np.linalg.norm(u, axis=1, keepdims=True)
                    fy, codes = patterns(net, params, x + u)
                    same = np.all(codes == code, axis=1)
                    found.append((x + u[same], fy[same]))
                    scale /= 2
                xs = np.concatenate([f[0] for f in found])[:200]
                ys = np.concatenate([f[1] for f in found])[:200]
                worst = max(worst, float(np.max(np.abs(xs @ imap.matrix.T + imap.bias - ys))))
                checked += len(xs)
    ok = worst <= 1e-8 and checked == 3 * 100 * 200 and sw["elapsed"] < 60
    record(5, "induced map", ok, f"max |T(x') - T_x(x')| {worst:.2e} (<= 1e-8) on 3 nets "
           f"x 100 anchors x 200 in-region points", sw["elapsed"], 60)
    assert ok


# -- 6 ---------------------------------------------------------------------

def test_criterion_6_radius():
    rng = np.random.default_rng(6)
    flips = zero_radius = samples = 0
    with stopwatch() as sw:
        for name, (net, params) in probe_nets(6).items():
            ctx = radius_context(net, params)
            for _ in range(100):
                x = rng.standard_normal(net.input_dim)
                r = local_region_radius(net, params, x, ctx)
                zero_radius += r == 0
                _, code = patterns(net, params, x)
                u = rng.standard_normal((10_000, net.input_dim))
                u *= 0.99 * r / np.linalg.norm(u, axis=1, keepdims=True)
                _, codes = patterns(net, params, x + u)
                flips += int(np.sum(np.any(codes != code, axis=1)))
                samples += len(u)
    ok = flips == 0 and zero_radius == 0 and sw["elapsed"] < 120
    record(6, "region radius", ok, f"{flips} pattern flips in {samples} samples at 0.99 r "
           f"(3 nets x 100 anchors), {zero_radius} zero radii", sw["elapsed"], 120)
    assert ok


# -- 7 ---------------------------------------------------------------------

def test_criterion_7_diagonal_times_orthonormal():
    rng = np.random.default_rng(7)
    fat_err = outside = 0.0
    with stopwatch() as sw:
        for k in range(200):
            m = int(rng.integers(1, 20))
            n = int(rng.integers(m, 40))
            st = NormState.create(m, "bn")
            st.running_std = rng.uniform(0.2, 3.0, m)
            st.upsilon = rng.choice([-1, 1], m) * rng.uniform(0.1, 3.0, m)
            g = st.upsilon / st.running_std
            w = orthogonal_init((m, n), seed=k)
            gw, _ = effective_transform(st, w)
            fat_err = max(fat_err, float(np.max(np.abs(svd(gw).S - np.sort(np.abs(g))[::-1]))))
            # tall, column-orthonormal W: unit spectrum but not row-orthonormal
            t = int(rng.integers(1, m + 1))
            wt = orthogonal_init((m, t), seed=10_000 + k)
            s = svd(effective_transform(st, wt)[0]).S
            outside = max(outside, float(np.max(s - np.abs(g).max())),
                          float(np.max(np.abs(g).min() - s)))
    ok = fat_err <= 1e-8 and outside <= 1e-8 and sw["elapsed"] < 30
    record(7, "diagonal gain spectra", ok, f"row-orthonormal max |s - sorted|g|| {fat_err:.2e}, "
           f"unit-spectrum excursion {outside:.2e} (<= 1e-8), 200 draws", sw["elapsed"], 30)
    assert ok


# -- 8 ---------------------------------------------------------------------

def test_criterion_8_dbn_conditioning_and_bbn_band(monkeypatch):
    train = synth_blobs(4, 10, 60, 3.0, seed=8)
    layers = [Dense(24), Norm("dbn"), ReLU(), Dense(16), Norm("dbn"), ReLU(), Dense(4), SoftmaxCE()]
    net, params = build_network(layers, (10,), seed=8)
    cfg = TrainConfig(epochs=5, batch_size=16, lr_start=0.05, lr_end=0.01, seed=8)
    with stopwatch() as sw:
        train_loop(net, params, train, cfg)
        cond_err = 0.0
        for i in net.weighted_indices():
            j = net.norm_of(i)
            if j is None:
                continue
            raw = spectrum_of(params.weights[i])
            eff = spectrum_of(effective_transform(params.norms[j], params.weights[i])[0])
            cond_raw = raw.sigma_max / raw.sigma_min
            cond_err = max(cond_err, abs(eff.sigma_max / eff.sigma_min - cond_raw) / cond_raw)

        # BBN: every clamp lands in the band around its input's mean ratio, and
        # the band still holds once each full optimizer step has finished
        band_excess = [0.0]
        clamps = [0]
        steps = [0]
        original_clamp = optim_module.bbn_clamp
        original_step = train_module.sgd_momentum_step

        def clamp(state):
            out = original_clamp(state)
            alpha = np.mean(state.upsilon / state.running_std)
            rel = out.upsilon / out.running_std / alpha
            eps = state.eps_tilde
            band_excess[0] = max(band_excess[0], float(rel.max() - (1 + eps)),
                                 float(1 / (1 + eps) - rel.min()))
            clamps[0] += 1
            return out

        def step(p, *args, **kwargs):
            info = original_step(p, *args, **kwargs)
            steps[0] += 1
            for st in p.norms.values():
                ratio = st.upsilon / st.running_std
                spread = ratio.max() / ratio.min() / (1 + st.eps_tilde) ** 2
                band_excess[0] = max(band_excess[0], float(spread - 1))
            return info

        monkeypatch.setattr(optim_module, "bbn_clamp", clamp)
        monkeypatch.setattr(train_module, "sgd_momentum_step", step)
        bbn_layers = [Dense(24), Norm("bbn", 0.2), ReLU(), Dense(16), Norm("bbn", 0.2), ReLU(),
                      Dense(4), SoftmaxCE()]
        net, params = build_network(bbn_layers, (10,), seed=9)
        cfg = TrainConfig(epochs=5, batch_size=16, lr_start=0.05, lr_end=0.01, seed=9,
                          ortho=OrthoConfig(mode="svb"))
        train_loop(net, params, train, cfg)
    ok = cond_err <= 1e-6 and band_excess[0] <= 1e-12 and clamps[0] == 2 * steps[0] > 0
    record(8, "DBN conditioning / BBN band", ok, f"max relative cond gap {cond_err:.2e} "
           f"(<= 1e-6); BBN band excess {band_excess[0]:.2e} over {steps[0]} steps "
           f"({clamps[0]} clamps)", sw["elapsed"])
    assert ok


# -- 9 to 11: desk-scale MNIST study ---------------------------------------

@pytest.fixture(scope="module")
def desk_study():
    train, test = desk.load_data()
    runs = {}
    with stopwatch() as sw:
        for method in desk.METHODS:
            for seed in desk.SEEDS:
                trainer = desk.trainer_for(method, seed, train, test)
                trainer.run()
                runs[method, seed] = trainer
    return {"train": train, "test": test, "runs": runs, "elapsed": sw["elapsed"]}


def _write_results(name, doc):
    RESULTS.mkdir(parents=True, exist_ok=True)
    (RESULTS / name).write_text(json.dumps(doc, indent=2) + "\n")


@pytest.mark.slow
def test_criterion_9_desk_study(desk_study):
    runs = desk_study["runs"]
    errors = {m: [runs[m, s].metrics[-1]["test_error"] for s in desk.SEEDS] for m in desk.METHODS}
    means = {m: float(np.mean(v)) for m, v in errors.items()}
    _write_results("desk_study.json", {
        "epochs": desk.EPOCHS, "seeds": list(desk.SEEDS), "widths": list(desk.WIDTHS),
        "train_examples": len(desk_study["train"]), "test_examples": len(desk_study["test"]),
        "test_error": errors, "mean_test_error": means, "train_seconds": desk_study["elapsed"],
    })
    gap = means["svb_bbn"] - means["baseline_bn"]
    ok = gap <= 0.3 and desk_study["elapsed"] < 30 * 60
    summary = ", ".join(f"{m} {v:.2f}%" for m, v in means.items())
    record(9, "desk study", ok, f"mean test error {summary}; SVB+BBN minus baseline "
           f"{gap:+.2f} pts (<= +0.30)", desk_study["elapsed"], 30 * 60)
    assert ok


@pytest.mark.slow
def test_criterion_10_corruption_table(desk_study):
    runs, test = desk_study["runs"], desk_study["test"]
    tables, increase = {}, {}
    schema_ok = True
    with stopwatch() as sw:
        for method in desk.METHODS:
            tables[method] = {}
            rises = []
            for seed in desk.SEEDS:
                tr = runs[method, seed]
                table = corruption_table(tr.net, tr.params, test, seed=0)
                schema_ok &= set(table) == {"clean", *CORRUPTIONS}
                schema_ok &= all(sorted(table[k]) == ["1", "2", "3", "4", "5"] for k in CORRUPTIONS)
                schema_ok &= all(0 <= table[k][s] <= 100 for k in CORRUPTIONS for s in table[k])
                tables[method][str(seed)] = table
                rises.append(np.mean([table[k]["3"] for k in CORRUPTIONS]) - table["clean"])
            increase[method] = float(np.mean(rises))
        tr = runs["svb_bbn", 0]
        repeat_ok = corruption_table(tr.net, tr.params, test, seed=0) == tables["svb_bbn"]["0"]
    _write_results("corruption_table.json", {"tables": tables, "mean_increase_at_severity_3": increase})
    ok = schema_ok and repeat_ok
    summary = ", ".join(f"{m} {v:+.2f}" for m, v in increase.items())
    record(10, "corruption table", ok, f"4 kinds x 5 severities for 15 models, schema "
           f"{'ok' if schema_ok else 'BROKEN'}, repeat {'identical' if repeat_ok else 'DIFFERS'}; "
           f"mean error rise clean -> severity 3 (pts): {summary}", sw["elapsed"])
    assert ok


def _same_params(a, b):
    ta, tb = a.trainable(), b.trainable()
    same = ta.keys() == tb.keys() and all(ta[k].tobytes() == tb[k].tobytes() for k in ta)
    for i in a.norms:
        same &= a.norms[i].running_std.tobytes() == b.norms[i].running_std.tobytes()
        same &= a.norms[i].running_mean.tobytes() == b.norms[i].running_mean.tobytes()
    return same


@pytest.mark.slow
def test_criterion_11_determinism_and_resume(desk_study, tmp_path):
    runs, train, test = desk_study["runs"], desk_study["train"], desk_study["test"]
    rerun_ok, resume_ok = {}, {}
    with stopwatch() as sw:
        for method in desk.METHODS:
            again = desk.trainer_for(method, 0, train, test)
            again.run()
            ref = runs[method, 0]
            rerun_ok[method] = (strip_timing(again.metrics) == strip_timing(ref.metrics)
                                and _same_params(again.params, ref.params))
        for method in ("svb_bbn", "srip_bn"):
            first = desk.trainer_for(method, 0, train, test)
            first.run(stop_after=desk.EPOCHS // 2)
            path = tmp_path / f"{method}.onet"
            save_checkpoint(path, Checkpoint(first.net, first.params, first.momentum, first.step,
                                             first.epoch, first.rng.bit_generator.state,
                                             {"metrics": first.metrics}))
            ckpt = load_checkpoint(path)
            _, _, config = desk.build(method, 0)
            second = Trainer(ckpt.net, ckpt.params, train, test, config)
            second.restore(ckpt.momentum, {"step": ckpt.step, "epoch": ckpt.epoch,
                                           "rng": ckpt.rng_state, "metrics": ckpt.extra["metrics"]})
            second.run()
            ref = runs[method, 0]
            resume_ok[method] = (strip_timing(second.metrics) == strip_timing(ref.metrics)
                                 and _same_params(second.params, ref.params))
    ok = all(rerun_ok.values()) and all(resume_ok.values())
    record(11, "determinism & resume", ok,
           f"bit-identical reruns {sum(rerun_ok.values())}/{len(rerun_ok)}, "
           f"resume after epoch {desk.EPOCHS // 2} identical {sum(resume_ok.values())}/"
           f"{len(resume_ok)}", sw["elapsed"])
    assert ok
