import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinnshield import sentinel as sn
from pinnshield.cfd import FlowSnapshot
from pinnshield.errors import CalibrationError, ConfigurationError, ParseError
from pinnshield.pinn import init_model, predict

FRAMES = 100
LOWER, UPPER = [0.0, -2.0, 0.0], [10.0, 2.0, 9.9]


@pytest.fixture(scope="module")
def plant():
    """Snapshots sampled from a small network, so the model reproduces its own plant."""
    model = init_model((3, 12, 12, 2), seed=11, lower=LOWER, upper=UPPER)
    nx, ny = 80, 32
    x0, y0, dx, dy = 0.0, -2.0, 10.0 / nx, 4.0 / ny
    xc = x0 + (np.arange(nx) + 0.5) * dx
    yc = y0 + (np.arange(ny) + 0.5) * dy
    X, Y = np.meshgrid(xc, yc)
    snaps = []
    for k in range(FRAMES):
        t = 0.1 * k
        u, v, p = predict(model, X, Y, t)
        snaps.append(FlowSnapshot(t, u, v, p, np.zeros((ny, nx), bool), x0, y0, dx, dy))
    return snaps, model


SENSORS = [sn.SensorSpec("a", 2.0, 0.5), sn.SensorSpec("b", 5.0, -1.0), sn.SensorSpec("c", 8.0, 0.0)]


def _config(attacks=(), **kw):
    return sn.ScenarioConfig(list(kw.pop("sensors", SENSORS)), list(attacks), **kw)


# ---------------------------------------------------------------- attacks


def test_attack_examples():
    bias0 = sn.AttackSpec("bias", "a", 0, 10, 0.0)
    assert sn.apply_attack((0.3, -0.2), bias0, 5, {}) == (0.3, -0.2)
    scale = sn.AttackSpec("scaling", "a", 0, 10, 2.0)
    assert sn.apply_attack((0.5, 0.1), scale, 3, {}) == (1.0, 0.2)
    replay = sn.AttackSpec("replay", "a", 90, 120, 5)
    buf = {k: (float(k), -float(k)) for k in range(101)}
    assert sn.apply_attack((0.0, 0.0), replay, 100, buf) == (95.0, -95.0)
    drop = sn.AttackSpec("dropout", "a", 0, 10)
    assert sn.apply_attack((1.0, 1.0), drop, 4, {}) is None


def test_attack_outside_window_is_unmodified():
    bias = sn.AttackSpec("bias", "a", 10, 20, 0.7)
    assert sn.apply_attack((1.0, 2.0), bias, 9, {}) == (1.0, 2.0)
    assert sn.apply_attack((1.0, 2.0), bias, 21, {}) == (1.0, 2.0)
    assert sn.apply_attack((1.0, 2.0), bias, 20, {}) == (1.7, 2.7)


def test_replay_before_buffer_falls_back_to_dropout():
    replay = sn.AttackSpec("replay", "a", 0, 10, 5)
    assert sn.apply_attack((1.0, 1.0), replay, 3, {0: (0.0, 0.0)}) is None


@pytest.mark.parametrize("kw", [dict(kind="spoof"), dict(start_frame=5, end_frame=4),
                                dict(kind="replay", magnitude=0.5)])
def test_attack_validation(kw):
    base = dict(kind="bias", target="a", start_frame=0, end_frame=1, magnitude=1.0)
    base.update(kw)
    with pytest.raises(ConfigurationError):
        sn.AttackSpec(**base)


# ---------------------------------------------------------------- detector


def test_calibration_examples():
    assert sn.calibrate_threshold([0.25] * 40, k=3) == 0.25
    assert sn.calibrate_threshold([0.0] * 15 + [2.0] * 15, k=1) == 2.0
    with pytest.raises(CalibrationError):
        sn.calibrate_threshold([1.0] * 29)


def test_detect_examples():
    assert not sn.detect((0.4, 0.1), (0.4, 0.1), 0.01)
    assert sn.detect(None, (0.4, 0.1), 0.01)
    tau = sn.residual_norm((3.0, 4.0), (0.0, 0.0))
    assert tau == 5.0
    assert not sn.detect((3.0, 4.0), (0.0, 0.0), tau)
    assert sn.detect((3.0, 4.0), (0.0, 0.0), math.nextafter(tau, 0))


def test_detector_rejects_nonpositive_threshold():
    with pytest.raises(ConfigurationError):
        sn.ResidualDetector(0.0)
    with pytest.raises(ConfigurationError):
        sn.ResidualDetector({"a": 1.0, "b": -1.0})


def test_substitute_zero_model_and_window_warning():
    model = init_model(seed=0, lower=[1, -2, 0], upper=[8, 2, 20])
    zero = model.with_parameters(np.zeros(model.parameter_count))
    value, extrapolated = sn.substitute(sn.SensorSpec("s", 3.0, 0.0), 1.0, zero)
    assert value == (0.0, 0.0) and not extrapolated
    _, outside = sn.substitute(sn.SensorSpec("s", 9.0, 0.0), 1.0, zero)
    _, edge = sn.substitute(sn.SensorSpec("s", 8.0, 2.0), 1.0, zero)
    assert outside and not edge


# ---------------------------------------------------------------- controller


def test_controller_examples():
    cfg = sn.ControllerConfig(kp=1.0, ki=0.0)
    state, act = sn.controller_step(sn.ControllerState(), 0.8, 1.0, cfg, 0.1)
    assert act == pytest.approx(0.2)
    state, act = sn.controller_step(sn.ControllerState(), 1.0, 1.0, sn.ControllerConfig(), 0.1)
    assert act == 0.0 and state.integral == 0.0
    held, act = sn.controller_step(sn.ControllerState(integral=0.4), 1.0, 1.0,
                                   sn.ControllerConfig(kp=2.0, ki=0.5), 0.1)
    assert act == pytest.approx(0.2) and held.integral == 0.4


@settings(max_examples=50, deadline=None)
@given(errors=st.lists(st.floats(-5, 5), min_size=1, max_size=60), limit=st.floats(0.01, 3))
def test_integral_stays_clamped(errors, limit):
    cfg = sn.ControllerConfig(kp=0.3, ki=0.7, integral_limit=limit)
    state = sn.ControllerState()
    for e in errors:
        state, act = sn.controller_step(state, 1.0 - e, 1.0, cfg, 0.1)
        assert abs(state.integral) <= limit
        assert act == pytest.approx(0.3 * e + 0.7 * state.integral)


# ---------------------------------------------------------------- scenario loop


def test_clean_run(plant):
    snaps, model = plant
    on = sn.run_scenario(_config(), snaps, model)
    off = sn.run_scenario(_config(mitigation=False), snaps, model)
    assert on.summary["false_positive_rate"] <= 0.01
    flags = sum(r.flagged for fr in on.frames for r in fr.records)
    subs = sum(r.substituted for fr in on.frames for r in fr.records)
    assert subs <= (1 + on.config.detector.clear_frames) * flags
    if flags == 0:
        # without attacks and without flags both loops are identical frame by frame
        assert [fr.actuation for fr in on.frames] == [fr.actuation for fr in off.frames]
    assert [fr.frame for fr in on.frames] == list(range(FRAMES))


def test_used_value_contract(plant):
    snaps, model = plant
    trace = sn.run_scenario(_config([sn.AttackSpec("bias", "b", 20, 60, 0.5)]), snaps, model)
    for fr in trace.frames:
        for r in fr.records:
            if r.substituted:
                assert r.used == r.prediction
            elif r.report_frame:
                assert r.used == r.reported


def test_bias_attack_mitigation(plant):
    snaps, model = plant
    cfg = _config([sn.AttackSpec("bias", "b", 30, 70, 0.5)])
    on, off = sn.run_paired(cfg, snaps, model)
    assert (on.summary["controller_deviation_integral"]
            < off.summary["controller_deviation_integral"])
    assert on.summary["detection_latency_frames"]["bias:b@30"] <= 2
    assert off.threshold == on.threshold


def test_unmitigated_bias_winds_integral_to_clamp(plant):
    snaps, model = plant
    ctl = sn.ControllerConfig(integral_limit=0.5)
    cfg = _config([sn.AttackSpec("bias", "b", 10, 99, 0.5)], controller=ctl, mitigation=False)
    trace = sn.run_scenario(cfg, snaps, model)
    assert abs(trace.frames[-1].integral) == pytest.approx(0.5)


def test_dropout_with_mitigation_never_starves(plant):
    snaps, model = plant
    attacks = [sn.AttackSpec("dropout", s.id, 20, 40) for s in SENSORS]
    on, off = sn.run_paired(_config(attacks), snaps, model)
    for fr in on.frames:
        assert all(r.used is not None for r in fr.records)
        assert fr.observable
    assert on.summary["starved_frames"] == 0
    assert off.summary["starved_frames"] == 21
    assert off.summary["unobservable_frames"] == 21


def test_observability_restored_when_pre_attack_system_was(plant):
    snaps, model = plant
    on = sn.run_scenario(_config([sn.AttackSpec("dropout", "a", 5, 50)]), snaps, model)
    assert on.frames[4].observable
    assert all(fr.observable for fr in on.frames)


def test_slow_reporting_sensor_latency(plant):
    snaps, model = plant
    sensors = [replace(s, report_period=3) for s in SENSORS]
    on = sn.run_scenario(_config([sn.AttackSpec("bias", "a", 31, 60, 0.5)], sensors=sensors),
                         snaps, model)
    latency = on.summary["detection_latency_frames"]["bias:a@31"]
    assert latency is not None and latency <= 2 * 3
    assert on.summary["detection_latency_periods"]["bias:a@31"] <= 2


@settings(max_examples=8, deadline=None)
@given(kind=st.sampled_from(["bias", "scaling"]), sign=st.sampled_from([-1, 1]),
       start=st.integers(0, 60), length=st.integers(5, 30), seed=st.integers(0, 50),
       target=st.sampled_from(["a", "b", "c"]))
def test_mitigation_monotonicity(plant, kind, sign, start, length, seed, target):
    snaps, model = plant
    base = sn.run_scenario(_config(seed=seed), snaps, model)
    tau = max(base.threshold.values())
    if kind == "bias":
        magnitude = sign * 5 * tau
    else:
        # scaling factor whose offset is at least 5 tau at this sensor for every frame
        k = [s.id for s in SENSORS].index(target)
        speed = min(math.hypot(*fr.records[k].true) for fr in base.frames)
        magnitude = 1 + sign * (5 * tau / speed + 0.01)
    attack = sn.AttackSpec(kind, target, start, min(start + length, FRAMES - 1), magnitude)
    on, off = sn.run_paired(_config([attack], seed=seed), snaps, model)
    assert (on.summary["controller_deviation_integral"]
            < off.summary["controller_deviation_integral"])
    assert on.summary["detection_latency_frames"][f"{kind}:{target}@{start}"] <= 2


def test_traces_are_reproducible(plant, tmp_path):
    snaps, model = plant
    cfg = _config([sn.AttackSpec("replay", "a", 30, 60, 10)], seed=4)
    sn.write_trace(sn.run_scenario(cfg, snaps, model), tmp_path / "one")
    sn.write_trace(sn.run_scenario(cfg, snaps, model), tmp_path / "two")
    for name in ("trace.csv", "controller.csv", "summary.txt"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    header = (tmp_path / "one" / "trace.csv").read_text().splitlines()[0]
    assert header.split(",") == list(sn.TRACE_COLUMNS)


def test_seed_changes_noise(plant):
    snaps, model = plant
    a = sn.run_scenario(_config(seed=1), snaps, model)
    b = sn.run_scenario(_config(seed=2), snaps, model)
    assert a.frames[0].records[0].reported != b.frames[0].records[0].reported


def test_sensor_position_checks(plant):
    snaps, model = plant
    with pytest.raises(ConfigurationError):
        sn.run_scenario(_config(sensors=[sn.SensorSpec("far", 50.0, 0.0)]), snaps, model)
    masked = [replace(s, mask=s.mask.copy()) for s in snaps]
    for s in masked:
        s.mask[16, 40] = True
    with pytest.raises(ConfigurationError):
        sn.run_scenario(_config(sensors=[sn.SensorSpec("in", 5.06, 0.06)]), masked, model)


def test_warning_for_sensor_outside_training_window(plant):
    snaps, _ = plant
    narrow = init_model((3, 12, 12, 2), seed=11, lower=[0, -1, 0], upper=[6, 1, 9.9])
    trace = sn.run_scenario(_config(detector=sn.DetectorConfig(threshold=10.0)), snaps, narrow)
    # b sits on the window edge (inside); c is beyond x = 6
    assert len(trace.warnings) == 1 and trace.warnings[0].startswith("sensor c")


def test_too_few_frames_to_calibrate(plant):
    snaps, model = plant
    with pytest.raises(CalibrationError):
        sn.run_scenario(_config(), snaps[:20], model)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        _config(sensors=[]).validate()
    with pytest.raises(ConfigurationError):
        _config(sensors=[SENSORS[0], SENSORS[0]]).validate()
    with pytest.raises(ConfigurationError):
        _config([sn.AttackSpec("bias", "zz", 0, 1, 1.0)]).validate()
    with pytest.raises(ConfigurationError):
        sn.run_scenario(_config(snapshots="/nonexistent"))


# ---------------------------------------------------------------- scenario file

SCENARIO = """\
[plant]
snapshots = data
model = model.ckpt

[sensors]
noise_std = 0.02
s1 = 3.0, 0.5
s2 = 5.0, 0.0, 2

[attacks]
a1 = kind=bias target=s1 start=10 end=40 magnitude=0.5

[detector]
k = 3
clear_frames = 4

[controller]
kp = 0.8
integral_limit = 1.5

[output]
mitigation = false
seed = 7
"""


def test_read_scenario(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text(SCENARIO)
    cfg = sn.read_scenario(path)
    assert cfg.snapshots == str(tmp_path / "data") and cfg.model == str(tmp_path / "model.ckpt")
    assert cfg.sensors == [sn.SensorSpec("s1", 3.0, 0.5, 1, 0.02), sn.SensorSpec("s2", 5.0, 0.0, 2, 0.02)]
    assert cfg.attacks == [sn.AttackSpec("bias", "s1", 10, 40, 0.5)]
    assert cfg.detector.clear_frames == 4 and cfg.detector.threshold is None
    assert cfg.controller.kp == 0.8 and cfg.controller.ki == 0.5
    assert not cfg.mitigation and cfg.seed == 7
    assert sn.read_scenario(path, {"seed": "3"}).seed == 3


@pytest.mark.parametrize("old,new,error", [
    ("kp = 0.8", "kd = 1", ConfigurationError),
    ("[output]", "[extra]", ConfigurationError),
    ("start=10 end=40", "start=10", ParseError),
    ("s1 = 3.0, 0.5", "s1 = 3.0", ParseError),
    ("mitigation = false", "mitigation = maybe", ParseError),
    ("target=s1", "target=s9", ConfigurationError),
])
def test_read_scenario_errors(tmp_path, old, new, error):
    path = tmp_path / "s.ini"
    path.write_text(SCENARIO.replace(old, new))
    with pytest.raises(error):
        sn.read_scenario(path)


def test_shipped_scenario_file_parses():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "bias_attack.ini"
    cfg = sn.read_scenario(path)
    assert [s.id for s in cfg.sensors] == ["s1", "s2", "s3"]
    assert cfg.attacks[0].kind == "bias" and cfg.attacks[0].target == "s2"
    assert cfg.snapshots.endswith("out-gen-data")
