"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line (printed in the terminal summary) and
asserts the criterion at its stated tolerance. Models are trained once per
session on the synthetic oracle and shared by criteria 4-7.
"""

import json
import time

import numpy as np
import pytest

from tailquant.autodiff import DenseNet, backward, constant
from tailquant.cli import main as cli_main
from tailquant.cli import synthetic_scenario
from tailquant.data import DataError, Normalizer, Samples, action_histogram, extract_pairs, parse_highd
from tailquant.data.highd import TrackRecord
from tailquant.data.synthetic import SyntheticSpec, synth_generate, synth_true_quantile
from tailquant.models import ConditionalFlow, TrainConfig, train_flow, train_qr
from tailquant.models.coupling import (
    affine_inverse,
    affine_params,
    affine_tau,
    nlsq_dtau,
    nlsq_inverse,
    nlsq_params,
    nlsq_tau,
)
from tailquant.models.qr import pinball
from tailquant.quantile import LEVELS, EmpiricalDistribution, empirical_quantile, tal_minimizer_oracle
from tailquant.report import baseline_unconditional, eval_method, trace_csv_text
from tailquant.sim import rollout

from test_data import GOLDEN_LATERAL, GOLDEN_PAIRS_1D, META, TRACKS

SPEC = SyntheticSpec()
QR_CONFIG = TrainConfig(epochs=20, batch_size=512, lr_decay=0.9)
AQF_CONFIG = TrainConfig(epochs=30, batch_size=512, lr=3e-3, lr_decay=0.92)
ANF_CONFIG = TrainConfig(epochs=20, batch_size=512, lr=3e-3, lr_decay=0.9)
FLOW_KINDS = ("aqf-nlsq", "aqf-affine", "anf-nlsq", "anf-affine")


@pytest.fixture(scope="session")
def synthetic():
    return {
        "train": synth_generate(SPEC, 200_000, 1),
        "val": synth_generate(SPEC, 20_000, 2),
        "test": synth_generate(SPEC, 50_000, 3),
    }


@pytest.fixture(scope="session")
def qr_models(synthetic):
    models, seconds = {}, {}
    for i, alpha in enumerate(LEVELS):
        start = time.perf_counter()
        models[alpha], _ = train_qr(synthetic["train"], alpha, QR_CONFIG, seed=i, val=synthetic["val"])
        seconds[alpha] = time.perf_counter() - start
    return models, seconds


class QRSet:
    def __init__(self, models):
        self.models = models

    def quantile(self, states, alpha, dim=0, prefix=None):
        return self.models[alpha].predict(states)


@pytest.fixture(scope="session")
def flows(synthetic):
    out = {}
    for kind in FLOW_KINDS:
        config = AQF_CONFIG if kind.startswith("aqf") else ANF_CONFIG
        start = time.perf_counter()
        flow, history = train_flow(synthetic["train"], kind, 1, config, seed=0, val=synthetic["val"])
        out[kind] = (flow, history, time.perf_counter() - start)
    return out


def mae_vs_oracle(model, test, alpha):
    pred = model.quantile(test.states, alpha)
    return float(np.mean(np.abs(pred - synth_true_quantile(SPEC, test.states, alpha))))


# -- 1 ---------------------------------------------------------------------------

def test_c1_minimizer_equals_empirical_quantile(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for k in range(50):
        kind = k % 3
        if kind == 0:
            x = rng.normal(rng.uniform(-2, 2), rng.uniform(0.2, 2.0), 200)
        elif kind == 1:
            x = rng.standard_t(2.0, 200)
        else:
            x = rng.exponential(1.0, 200) - 1.0
        dist = EmpiricalDistribution(x)
        for alpha in LEVELS:
            q = tal_minimizer_oracle(dist, alpha, 1e-3)
            worst = max(worst, abs(q - empirical_quantile(dist, alpha)))
    seconds = time.perf_counter() - start
    ok = worst <= 1e-3 + 1e-12 and seconds < 30
    criterion(1, ok, f"max |grid minimizer - empirical quantile| = {worst:.2e} (tol 1e-3), {seconds:.1f} s")
    assert ok


# -- 2 ---------------------------------------------------------------------------

def _signs(net, x, y):
    """ReLU and residual sign pattern: the pieces of the piecewise-linear loss."""
    h, parts = x, []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.value + b.value
        if i < len(net.weights) - 1:
            parts.append(h > 0)
            h = np.maximum(h, 0.0)
    parts.append(y - h > 0)
    return np.concatenate([p.ravel() for p in parts])


def test_c2_gradients_match_finite_differences(criterion):
    rng = np.random.default_rng(7)
    h = 1e-5
    start = time.perf_counter()
    checked = skipped = 0
    worst = 0.0
    failures = 0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 9)) for _ in range(depth)] + [1]
        net = DenseNet(sizes, rng)
        for b in net.biases:
            b.value = rng.normal(scale=0.5, size=b.value.shape)
        n = int(rng.integers(1, 17))
        x = rng.normal(size=(n, sizes[0]))
        y = rng.normal(size=(n, 1))
        alpha = rng.uniform(0.001, 0.999) if rng.random() < 0.5 else rng.uniform(0.001, 0.999, (n, 1))
        loss = lambda: pinball(constant(y), net(x), alpha)
        grads = backward(loss())
        for p in net.parameters:
            flat = p.value.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                base = _signs(net, x, y)
                flat[i] = old + h
                up, s_up = loss().item(), _signs(net, x, y)
                flat[i] = old - h
                down, s_down = loss().item(), _signs(net, x, y)
                flat[i] = old
                if not (np.array_equal(base, s_up) and np.array_equal(base, s_down)):
                    skipped += 1
                    continue
                fd = (up - down) / (2 * h)
                g = grads[p].reshape(-1)[i]
                err = abs(g - fd)
                scale = max(abs(g), abs(fd))
                rel = err / scale if scale > 1e-8 else 0.0
                checked += 1
                worst = max(worst, rel)
                failures += err > 1e-8 and rel >= 1e-5
    seconds = time.perf_counter() - start
    ok = failures == 0 and checked > 0 and seconds < 60
    criterion(2, ok, f"{checked} coordinates over 100 nets, worst rel err {worst:.1e} (tol 1e-5), "
                     f"{skipped} skipped at kinks, {seconds:.1f} s")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def test_c3_coupling_invertibility(criterion):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    n = 10_000
    z = rng.uniform(-5, 5, n)
    p = nlsq_params(rng.normal(scale=2.0, size=(n, 5)))
    nlsq_err = float(np.max(np.abs(z - nlsq_inverse(p, nlsq_tau(p, z)))))
    q = affine_params(rng.normal(scale=2.0, size=(n, 2)))
    affine_err = float(np.max(np.abs(z - affine_inverse(q, affine_tau(q, z)))))
    grid = np.linspace(-10, 10, 2001)
    ratio = np.inf
    for chunk in np.array_split(np.arange(n), 10):
        pc = {k: v[chunk, None] for k, v in p.items()}
        ratio = min(ratio, float(np.min(nlsq_dtau(pc, grid[None, :]) / pc["b"])))
    seconds = time.perf_counter() - start
    ok = nlsq_err < 1e-6 and affine_err < 1e-6 and ratio >= 0.009 and seconds < 60
    criterion(3, ok, f"round trip NLSQ {nlsq_err:.1e}, affine {affine_err:.1e} (tol 1e-6); "
                     f"min tau'/b = {ratio:.4f} (>= 0.009), {seconds:.1f} s")
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_c4_qr_recovers_oracle_quantiles(criterion, synthetic, qr_models):
    models, seconds = qr_models
    limits = {0.25: 0.1, 0.5: 0.1, 0.75: 0.1, 0.01: 0.25, 0.05: 0.25, 0.95: 0.25, 0.99: 0.25}
    maes = {a: mae_vs_oracle(QRSet(models), synthetic["test"], a) for a in limits}
    total = sum(seconds[a] for a in limits)
    ok = all(maes[a] <= limits[a] for a in limits) and total < 15 * 60
    detail = ", ".join(f"{a}: {maes[a]:.3f}" for a in sorted(limits))
    criterion(4, ok, f"MAE {detail}; training {total:.0f} s")
    assert ok


# -- 5 ---------------------------------------------------------------------------

def test_c5_aqf_nlsq_recovers_quantiles(criterion, synthetic, flows):
    flow, history, seconds = flows["aqf-nlsq"]
    maes = {a: mae_vs_oracle(flow, synthetic["test"], a) for a in (0.05, 0.5, 0.95)}
    rng = np.random.default_rng(5)
    states = synthetic["test"].states[rng.choice(len(synthetic["test"]), 1000, replace=False)]
    levels = np.linspace(0.0, 1.0, 201)
    q = np.array([flow.quantile(states, a) for a in levels])
    monotone = float(np.mean(np.all(np.diff(q, axis=0) > 0, axis=0)))
    ok = all(m <= 0.15 for m in maes.values()) and monotone == 1.0 and seconds < 30 * 60
    detail = ", ".join(f"{a}: {m:.3f}" for a, m in maes.items())
    criterion(5, ok, f"MAE {detail} (tol 0.15); monotone at {monotone:.1%} of 1000 states; "
                     f"training {seconds:.0f} s")
    assert ok


# -- 6 ---------------------------------------------------------------------------

def test_c6_nlsq_beats_affine_in_tails(criterion, synthetic, flows):
    test = synthetic["test"]
    nlsq = eval_method(flows["aqf-nlsq"][0], test, (0.01, 0.99))
    affine = eval_method(flows["aqf-affine"][0], test, (0.01, 0.99))
    ok = nlsq[0] < affine[0] and nlsq[1] < affine[1]
    criterion(6, ok, f"mean TAL NLSQ vs affine: 0.01: {nlsq[0]:.5f} vs {affine[0]:.5f}, "
                     f"0.99: {nlsq[1]:.5f} vs {affine[1]:.5f}")
    assert ok


# -- 7 ---------------------------------------------------------------------------

def test_c7_models_beat_unconditional_baseline(criterion, synthetic, qr_models, flows):
    train, test = synthetic["train"], synthetic["test"]
    base = baseline_unconditional(train, test)
    models = {"qr": QRSet(qr_models[0])}
    models.update({kind: flows[kind][0] for kind in FLOW_KINDS})
    misses = []
    for name, model in models.items():
        row = eval_method(model, test)
        for alpha, cell, b in zip(LEVELS, row, base):
            if cell > 0.9 * b:
                misses.append(f"{name}@{alpha} ratio {cell / b:.2f}")
    ok = not misses
    detail = "all models <= 0.9 x baseline at all 9 levels" if ok else "over 0.9 x baseline: " + "; ".join(misses)
    criterion(7, ok, detail)
    assert ok


# -- 8 ---------------------------------------------------------------------------

def test_c8_log_det_matches_finite_differences(criterion):
    rng = np.random.default_rng(8)
    h = 1e-5
    worst = 0.0
    start = time.perf_counter()
    for k in range(1000):
        dims = 1 + k % 2
        coupling = "nlsq" if k % 4 < 2 else "affine"
        hidden = (int(rng.integers(2, 9)),)
        norm = Normalizer(rng.normal(size=5), rng.uniform(0.5, 2.0, 5),
                          rng.normal(size=dims), rng.uniform(0.3, 3.0, dims))
        flow = ConditionalFlow(5, dims, coupling, "normal", 3, hidden, rng, norm)
        for t in flow.transformers():
            t.net.weights[-1].value = rng.normal(scale=0.5, size=t.net.weights[-1].value.shape)
        s = rng.normal(size=(1, 5))
        a = rng.normal(size=(1, dims)) * norm.action_std + norm.action_mean
        _, log_det = flow.inverse(s, a)
        jac = np.empty((dims, dims))
        for j in range(dims):
            e = np.zeros((1, dims))
            e[0, j] = h
            jac[:, j] = (flow.inverse(s, a + e)[0][0] - flow.inverse(s, a - e)[0][0]) / (2 * h)
        fd = abs(np.linalg.det(jac))
        worst = max(worst, abs(np.exp(log_det[0]) - fd) / fd)
    seconds = time.perf_counter() - start
    ok = worst < 1e-4
    criterion(8, ok, f"worst relative error of |det dz/da| over 1000 flows: {worst:.1e} (tol 1e-4), {seconds:.1f} s")
    assert ok


# -- 9 ---------------------------------------------------------------------------

def test_c9_rollout_level_ordering(criterion):
    start = time.perf_counter()
    scenario = synthetic_scenario(steps=750, seed=0)
    policy = lambda s, a: synth_true_quantile(SPEC, s, a)
    levels = (0.5, 0.75, 0.95, 0.99)
    traces = [rollout(policy, a, scenario) for a in levels]
    means = [float(np.mean(t.dhw)) for t in traces]
    decreasing = all(x > y for x, y in zip(means, means[1:]))
    again = [rollout(policy, a, scenario) for a in levels]
    exact = all(trace_csv_text(t) == trace_csv_text(u) for t, u in zip(traces, again))
    seconds = time.perf_counter() - start
    ok = decreasing and exact and seconds < 10
    detail = ", ".join(f"{a}: {m:.2f} m" for a, m in zip(levels, means))
    criterion(9, ok, f"mean dhw {detail}; bit-exact rerun {exact}; {seconds:.1f} s")
    assert ok


# -- 10 --------------------------------------------------------------------------

def test_c10_oversampling_contract(criterion, tmp_path):
    base = {"seed": 4, "data": {"source": "synthetic", "n": 20_000}}
    outputs = {}
    for flag in (False, True):
        out = tmp_path / ("over" if flag else "plain")
        cfg = tmp_path / f"{out.name}.json"
        cfg.write_text(json.dumps({**base, "output_dir": str(out), "oversample": flag}))
        assert cli_main(["prepare", str(cfg)]) == 0
        outputs[flag] = out / "data"
    same_splits = all((outputs[False] / f).read_bytes() == (outputs[True] / f).read_bytes()
                      for f in ("val.csv", "test.csv"))
    before = Samples.from_csv(outputs[False] / "train.csv")
    after = Samples.from_csv(outputs[True] / "train.csv")
    hist_before = action_histogram(before.actions[:, 0], 0.2)
    hist_after = action_histogram(after.actions[:, 0], 0.2)
    flat = set(hist_after.values()) == {max(hist_before.values())} and set(hist_after) == set(hist_before)
    no_new = {tuple(r) for r in after.rows()} <= {tuple(r) for r in before.rows()}
    ok = same_splits and flat and no_new
    criterion(10, ok, f"{len(hist_before)} bins flattened to {max(hist_before.values())}; "
                      f"val/test identical {same_splits}; no new samples {no_new}")
    assert ok


# -- 11 --------------------------------------------------------------------------

LEADER = [
    (0, 150.00, 30.00, 0.00), (1, 151.20, 30.00, 0.00), (2, 152.40, 30.00, 0.10),
    (3, 153.60, 30.01, 0.10), (4, 154.80, 30.01, 0.10), (5, 156.00, 30.01, 0.10),
    (6, 157.20, 30.02, 0.10), (7, 158.40, 30.02, 0.10), (8, 159.60, 30.02, 0.10),
    (9, 160.80, 30.03, 0.10),
]
FOLLOWER = [
    (0, 100.00, 32.00, 0.10, -0.50, 0.05, 45.50, 1.42, -1.00, 1),
    (1, 101.28, 31.98, 0.10, -0.40, 0.05, 45.42, 1.42, -1.00, 1),
    (2, 102.56, 31.97, 0.10, -0.30, 0.04, 45.34, 1.42, 0.00, 1),
    (3, 103.84, 31.96, 0.10, -0.20, 0.04, 45.26, 1.42, 23.40, 1),
    (4, 105.12, 31.95, 0.09, -0.10, 0.03, 45.18, 1.41, 23.59, 1),
    (5, 106.40, 31.95, 0.09, 0.00, 0.03, 45.10, 1.41, 23.61, 1),
    (6, 107.68, 31.95, 0.08, 0.10, 0.02, 45.02, 1.41, 23.82, 1),
    (7, 108.96, 31.96, 0.08, 0.20, 0.02, 44.94, 1.41, 23.53, 1),
    (8, 110.24, 31.97, 0.07, 0.30, 0.01, 44.86, 1.40, 23.24, 1),
    (9, 111.52, 31.98, 0.07, 0.40, 0.01, 44.78, 1.40, 22.97, 3),
]
GOLDEN_RECORDS = (
    [TrackRecord(f, 1, x, 5, v, 0.0, ax, 0.0, 0.0, 0.0, 0.0, 0) for f, x, v, ax in LEADER]
    + [TrackRecord(f, 2, x, 5, v, vy, ax, ay, d, th, tc, lead) for f, x, v, vy, ax, ay, d, th, tc, lead in FOLLOWER]
)


def test_c11_highd_golden_fixture(criterion, tmp_path):
    rec = parse_highd(TRACKS, META)
    records_ok = rec.records == GOLDEN_RECORDS
    pairs, skips = extract_pairs(rec, dims=1)
    pairs_ok = (pairs.states.tolist() == [list(p[0]) for p in GOLDEN_PAIRS_1D]
                and pairs.actions[:, 0].tolist() == [p[1] for p in GOLDEN_PAIRS_1D]
                and skips.dangling_leader == 1)
    pairs2, _ = extract_pairs(rec, dims=2)
    pairs_ok = pairs_ok and pairs2.actions[:, 1].tolist() == GOLDEN_LATERAL

    lines = TRACKS.read_text().splitlines()
    header = lines[0].split(",")
    drop = header.index("dhw")
    no_dhw = tmp_path / "no_dhw.csv"
    no_dhw.write_text("\n".join(",".join(c for i, c in enumerate(l.split(",")) if i != drop) for l in lines))
    bad_cell = tmp_path / "bad_cell.csv"
    bad_cell.write_text("\n".join(lines[:3] + [lines[3].replace("152.40", "n/a")] + lines[4:]))
    messages = []
    for path in (no_dhw, bad_cell):
        try:
            parse_highd(path, META)
            messages.append("")
        except DataError as exc:
            messages.append(str(exc))
    errors_ok = "'dhw'" in messages[0] and "row 4" in messages[1] and "'n/a'" in messages[1]
    ok = records_ok and pairs_ok and errors_ok
    criterion(11, ok, f"records exact {records_ok}; pairs exact {pairs_ok}; "
                      f"errors: {messages[0]!r} / {messages[1]!r}")
    assert ok
