"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

The desk-scale criteria (5, 7, 8) share one generated dataset and one trained
model. Expect roughly 20 minutes on a single core. The summary lines are
printed by the ``pytest_terminal_summary`` hook in ``conftest.py``.

Run alone with ``pytest -v tests/test_acceptance.py``.
"""

import json
import time

import numpy as np
import pytest
import torch
from conftest import poiseuille_run, record_criterion

from pinnshield import autodiff as ad
from pinnshield import cfd, cli, pinn, sentinel
from pinnshield.dataset import SampleSet

pytestmark = pytest.mark.slow

PROBE = (5.0, 0.0)


# ---------------------------------------------------------------- 1


def _relative(a, b):
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / scale) if scale > 0 else float(np.max(np.abs(a)))


def _richardson_jet(model, pts, step):
    # central differences at step and step/2, combined to cancel the O(step**2) term;
    # stream-function velocities are nested differences, so plain steps leave too much truncation
    a = ad.finite_difference_jet(model, pts, step).entries()
    b = ad.finite_difference_jet(model, pts, step / 2).entries()
    return {k: (4 * b[k] - a[k]) / 3 for k in a}


def test_criterion_1_autodiff_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_first = worst_second = worst_grad = 0.0
    for net in range(50):
        formulation = "stream" if net % 2 == 0 else "direct"
        depth = int(rng.integers(1, 4))
        width = int(rng.integers(4, 11))
        sizes = (3,) + (width,) * depth + (pinn.OUTPUT_WIDTH[formulation],)
        lower = rng.uniform(-5, 0, 3)
        upper = lower + rng.uniform(1, 10, 3)
        model = pinn.init_model(sizes, formulation, seed=int(rng.integers(1 << 30)),
                                lower=lower, upper=upper)
        pts = rng.uniform(lower, upper, (20, 3))
        jet = ad.evaluate_jet(model, pts)
        fd = _richardson_jet(model, pts, 4e-3 if formulation == "stream" else 1e-3)
        for name in ("dx", "dy", "dt"):
            worst_first = max(worst_first, _relative(getattr(jet, name), fd[name]))
        for name in ("dxx", "dyy"):
            worst_second = max(worst_second, _relative(getattr(jet, name), fd[name]))

        data = SampleSet(*pts.T, np.sin(pts[:, 0]), np.cos(pts[:, 1]))
        data_pts, target = pinn._data_tensors(data)
        colloc = torch.tensor(pts, dtype=ad.DTYPE)
        cfg = pinn.TrainConfig()

        def loss(params):
            return pinn._loss_terms(params, model, (data_pts, target), colloc, cfg)[0]

        g = ad.parameter_gradient(model, loss)
        g_fd = ad.finite_difference_gradient(model, loss, step=1e-6)
        worst_grad = max(worst_grad, float(np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd)))
    elapsed = time.perf_counter() - t0
    ok = worst_first < 1e-5 and worst_second < 1e-4 and worst_grad < 1e-5 and elapsed < 60
    record_criterion(
        1, ok, "autodiff vs finite differences, 50 networks x 20 points",
        f"first {worst_first:.2e} < 1e-5, second {worst_second:.2e} < 1e-4, "
        f"param grad {worst_grad:.2e} < 1e-5, {elapsed:.1f} s < 60 s",
    )
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_structural_continuity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        model = pinn.init_model(seed=seed, lower=[1, -2, 0], upper=[8, 2, 20])
        pts = np.random.default_rng(seed).uniform([-15, -8, -5], [25, 8, 25], (2000, 3))
        worst = max(worst, float(np.max(np.abs(pinn.physics_residuals(model, pts).f_c))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12
    record_criterion(2, ok, "stream-function |f_c| at 10,000 random points",
                     f"max |f_c| = {worst:.1e} < 1e-12, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_solver_validation(desk):
    t0 = time.perf_counter()
    coarse, div_c = poiseuille_run(16)
    fine, div_f = poiseuille_run(32)
    elapsed = time.perf_counter() - t0
    ratio = coarse / fine
    desk_div = max(s.divmax for s in desk["snapshots"])
    divmax = max(div_c, div_f, desk_div)
    ok = fine < 0.02 and coarse < 0.02 and ratio >= 3 and divmax < 1e-3 and elapsed < 300
    record_criterion(
        3, ok, "Poiseuille profile, refinement, divergence",
        f"L2 err {coarse:.3%} (ny=16), {fine:.3%} (ny=32) < 2%, ratio {ratio:.2f} >= 3, "
        f"max divergence {divmax:.1e} < 1e-3 (incl. all {len(desk['snapshots'])} desk snapshots), "
        f"{elapsed:.0f} s",
    )
    assert ok


# ---------------------------------------------------------------- 4


def _probe_peak(config, duration):
    sig = cfd.probe_signal(config, *PROBE, steps=int(round(duration / config.dt)), every=10)
    return cfd.dominant_frequency(sig[:, 0], sig[:, 2]), float(np.std(sig[:, 2]))


def test_criterion_4_wake_shedding():
    t0 = time.perf_counter()
    base = cfd.DomainConfig()
    fine = cfd.with_overrides(base, nx=300, ny=120)
    p1, amp1 = _probe_peak(base, 80.0)
    p2, amp2 = _probe_peak(fine, 80.0)
    elapsed = time.perf_counter() - t0
    change = abs(p2.frequency - p1.frequency) / p1.frequency
    ok = (
        p1.power_fraction >= 0.5 and p2.power_fraction >= 0.5
        and amp1 > 0.05 and amp2 > 0.05 and change < 0.10
    )
    record_criterion(
        4, ok, "Re=100 wake, probe v at (5, 0)",
        f"f = {p1.frequency:.4f} (200x80), {p2.frequency:.4f} (300x120), change {change:.1%} < 10%; "
        f"peak power share {p1.power_fraction:.2f}, {p2.power_fraction:.2f} >= 0.5; "
        f"v std {amp1:.2f}, {amp2:.2f}; {elapsed:.0f} s",
    )
    assert ok


# ---------------------------------------------------------------- desk-scale pipeline


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    assert cli.main(["gen-data", "--out", str(root / "data")]) == 0
    t_gen = time.perf_counter() - t0
    t0 = time.perf_counter()
    assert cli.main(["train", "--snapshots", str(root / "data"), "--out", str(root / "model")]) == 0
    t_train = time.perf_counter() - t0
    return {
        "root": root,
        "snapshots": cfd.read_snapshots(root / "data"),
        "model": pinn.load_model(root / "model" / "model.ckpt"),
        "metrics": json.loads((root / "model" / "metrics.json").read_text()),
        "t_gen": t_gen,
        "t_train": t_train,
    }


def test_criterion_5_velocity_accuracy(desk):
    acc = desk["metrics"]["test_accuracy"]
    model_dir = desk["root"] / "model"
    assert cli.main(["evaluate", "--model", str(model_dir / "model.ckpt"),
                     "--samples", str(model_dir / "train_samples.csv"),
                     "--out", str(desk["root"] / "train_eval")]) == 0
    train_acc = json.loads((desk["root"] / "train_eval" / "accuracy.json").read_text())
    total = desk["t_gen"] + desk["t_train"]
    ok = acc["u_accuracy"] >= 97 and acc["v_accuracy"] >= 90 and total <= 1800
    record_criterion(
        5, ok, "held-out accuracy on the [1,8]x[-2,2] window",
        f"u {acc['u_accuracy']:.4f}% >= 97, v {acc['v_accuracy']:.4f}% >= 90 "
        f"on {acc['sample_count']} samples; data {desk['t_gen']:.0f} s + train "
        f"{desk['t_train']:.0f} s <= 1800 s; for reference, on its own training split "
        f"u {train_acc['u_accuracy']:.4f}%, v {train_acc['v_accuracy']:.4f}% (not gated)",
    )
    assert ok


SENSORS = [
    sentinel.SensorSpec("s1", 3.0, 0.5, report_period=1),
    sentinel.SensorSpec("s2", 5.0, 0.0, report_period=2),
    sentinel.SensorSpec("s3", 6.5, -1.0, report_period=1),
]


def test_criterion_7_mitigation_efficacy(desk):
    snaps, model = desk["snapshots"], desk["model"]
    u_inf = cfd.DomainConfig().inflow_velocity
    t0 = time.perf_counter()
    clean = sentinel.run_scenario(sentinel.ScenarioConfig(SENSORS, seed=0), snaps, model)
    fp = clean.summary["false_positive_rate"]
    worst_pair = 0.0
    details, ok = [], fp <= 0.01
    for s in SENSORS:
        attack = sentinel.AttackSpec("bias", s.id, 60, 140, 0.5 * u_inf)
        t1 = time.perf_counter()
        on, off = sentinel.run_paired(sentinel.ScenarioConfig(SENSORS, [attack], seed=0), snaps, model)
        worst_pair = max(worst_pair, time.perf_counter() - t1)
        d_on = on.summary["controller_deviation_integral"]
        d_off = off.summary["controller_deviation_integral"]
        lat = on.summary["detection_latency_periods"][f"bias:{s.id}@60"]
        ok = ok and d_on < d_off and lat is not None and lat <= 2
        details.append(f"{s.id}: deviation {d_on:.3f} < {d_off:.3f}, latency {lat} periods")
    ok = ok and worst_pair < 120
    record_criterion(
        7, ok, "paired bias 0.5*u_inf scenarios",
        "; ".join(details) + f"; clean false-positive rate {fp:.2%} <= 1%; "
        f"slowest pair {worst_pair:.1f} s < 120 s ({time.perf_counter() - t0:.0f} s total)",
    )
    assert ok


def _tree_bytes(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(desk, tmp_path):
    root = desk["root"]
    results = {}
    # gen-data at full default size
    assert cli.main(["gen-data", "--out", str(tmp_path / "data")]) == 0
    results["gen-data"] = _tree_bytes(tmp_path / "data") == _tree_bytes(root / "data")
    # train twice on the full dataset with a reduced iteration budget
    for name in ("t1", "t2"):
        assert cli.main(["train", "--snapshots", str(root / "data"), "--iterations", "300",
                         "--out", str(tmp_path / name)]) == 0
    results["train"] = _tree_bytes(tmp_path / "t1") == _tree_bytes(tmp_path / "t2")
    scenario = tmp_path / "scenario.ini"
    scenario.write_text(
        f"[plant]\nsnapshots = {root / 'data'}\nmodel = {root / 'model' / 'model.ckpt'}\n"
        "[sensors]\ns1 = 3.0, 0.5\ns2 = 5.0, 0.0, 2\ns3 = 6.5, -1.0\n"
        "[attacks]\na1 = kind=bias target=s2 start=60 end=140 magnitude=0.5\n"
        "a2 = kind=dropout target=s3 start=100 end=120\n"
        "[output]\nseed = 0\n"
    )
    for name in ("s1", "s2"):
        assert cli.main(["simulate", "--scenario", str(scenario), "--paired",
                         "--out", str(tmp_path / name)]) == 0
    results["simulate"] = _tree_bytes(tmp_path / "s1") == _tree_bytes(tmp_path / "s2")
    ok = all(results.values())
    record_criterion(8, ok, "byte-identical reruns",
                     ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in results.items()))
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_observability():
    from pinnshield import observability as ob

    t0 = time.perf_counter()
    verdicts = [
        ob.is_observable(ob.ObservabilitySystem([[0, 1], [0, 0]], [[1, 0]])) == (True, 2),
        ob.is_observable(ob.ObservabilitySystem(np.eye(2), [[1, 0]])) == (False, 1),
        ob.is_observable(ob.ObservabilitySystem([[0.0]], [[1.0], [1.0]])) == (True, 1),
    ]
    rng = np.random.default_rng(6)
    invariant = 0
    for _ in range(100):
        n, p = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        A = rng.standard_normal((n, n))
        C = rng.standard_normal((p, n))
        if rng.random() < 0.5:
            C[:, rng.integers(n)] = 0.0  # some unobservable systems too
            A = np.diag(np.diag(A))
        d = rng.uniform(0.1, 10, p) * rng.choice([-1, 1], p)
        invariant += ob.is_observable(ob.ObservabilitySystem(A, C)) == ob.is_observable(
            ob.ObservabilitySystem(A, d[:, None] * C))
    elapsed = time.perf_counter() - t0
    ok = all(verdicts) and invariant == 100
    record_criterion(6, ok, "observability examples and row-scaling invariance",
                     f"examples {sum(verdicts)}/3, invariance {invariant}/100 systems, {elapsed:.2f} s")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main(["-v", __file__]))
