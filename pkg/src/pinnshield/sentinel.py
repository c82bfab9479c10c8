"""Closed-loop attack and mitigation simulator.

A frame loop replays CFD snapshots as the plant, samples sensors, lets
attackers tamper with or suppress readings, flags suspicious readings by
comparing them with the PINN prediction, substitutes PINN values for flagged
sensors, and drives a PI pump controller with whatever values survive.

The plant is open loop: actuation is logged and scored against a shadow
controller fed the true flow, but it never feeds back into the flow field.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import cfd, observability
from .errors import CalibrationError, ConfigurationError, ParseError
from .pinn import predict

ATTACK_KINDS = ("bias", "scaling", "replay", "dropout")
MIN_CALIBRATION_SAMPLES = 30


@dataclass(frozen=True)
class SensorSpec:
    id: str
    x: float
    y: float
    report_period: int = 1
    noise_std: float = 0.01

    def __post_init__(self):
        if self.report_period < 1:
            raise ConfigurationError(f"sensor {self.id}: report_period must be >= 1")
        if self.noise_std < 0:
            raise ConfigurationError(f"sensor {self.id}: noise_std must be >= 0")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    target: str
    start_frame: int
    end_frame: int
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if self.start_frame > self.end_frame:
            raise ConfigurationError("attack start_frame must not exceed end_frame")
        if self.kind == "replay" and (self.magnitude < 1 or self.magnitude != int(self.magnitude)):
            raise ConfigurationError("replay magnitude is a lag in frames (integer >= 1)")

    def active(self, frame):
        return self.start_frame <= frame <= self.end_frame


@dataclass(frozen=True)
class DetectorConfig:
    threshold: float = None  # None: calibrate from a clean warm-up run
    k: float = 3.0
    warmup_frames: int = None  # None: every frame of the plant
    clear_frames: int = 3
    # one threshold per sensor (model error differs by location) or one pooled value
    per_sensor: bool = True


@dataclass(frozen=True)
class ControllerConfig:
    kp: float = 1.0
    ki: float = 0.5
    setpoint: float = None  # None: mean true flow over the run
    integral_limit: float = 2.0


@dataclass
class ControllerState:
    integral: float = 0.0
    actuation: float = 0.0


def apply_attack(reading, spec, frame, replay_buffer):
    """Reported reading after tampering, or ``None`` when nothing is delivered.

    ``replay_buffer`` maps frame index to the genuine reading of the target
    sensor at that frame. A replay whose source frame is not buffered falls
    back to dropout.
    """
    if spec is None or not spec.active(frame):
        return reading
    u, v = reading
    if spec.kind == "bias":
        return (u + spec.magnitude, v + spec.magnitude)
    if spec.kind == "scaling":
        return (spec.magnitude * u, spec.magnitude * v)
    if spec.kind == "replay":
        return replay_buffer.get(frame - int(spec.magnitude))
    return None


def calibrate_threshold(clean_residuals, k=3.0):
    """``mean + k * std`` (population std) of residual norms from a clean run."""
    r = np.asarray(clean_residuals, dtype=float).ravel()
    if r.size < MIN_CALIBRATION_SAMPLES:
        raise CalibrationError(
            f"need at least {MIN_CALIBRATION_SAMPLES} clean residuals, got {r.size}"
        )
    return float(r.mean() + k * r.std())


def detect(reported, pinn_prediction, threshold):
    """Flag a dropout, or a residual strictly greater than ``threshold``."""
    if reported is None:
        return True
    return residual_norm(reported, pinn_prediction) > threshold


def residual_norm(reported, prediction):
    return math.hypot(reported[0] - prediction[0], reported[1] - prediction[1])


class ResidualDetector:
    """PINN-residual thresholder. Any object with the same ``flag`` method can replace it.

    ``thresholds`` maps sensor id to its bound; a plain number applies to all sensors.
    """

    def __init__(self, thresholds):
        self.thresholds = thresholds
        values = thresholds.values() if isinstance(thresholds, dict) else [thresholds]
        for tau in values:
            if not tau > 0:
                raise ConfigurationError(f"detector threshold must be positive, got {tau}")

    def threshold_for(self, sensor_id):
        if isinstance(self.thresholds, dict):
            return self.thresholds[sensor_id]
        return self.thresholds

    def flag(self, sensor_id, reported, prediction):
        return detect(reported, prediction, self.threshold_for(sensor_id))


def in_training_window(model, x, y):
    if model.lower is None:
        return True
    return bool(model.lower[0] <= x <= model.upper[0] and model.lower[1] <= y <= model.upper[1])


def substitute(sensor, frame_time, model):
    """Virtual-sensor reading ``(u, v)`` at the sensor position, plus an extrapolation flag."""
    u, v, _ = predict(model, sensor.x, sensor.y, frame_time)
    return (u, v), not in_training_window(model, sensor.x, sensor.y)


def controller_step(state, measured_u, setpoint, config, dt):
    """PI law on ``e = setpoint - measured_u`` with a clamped integral (anti-windup)."""
    error = setpoint - measured_u
    lim = config.integral_limit
    integral = min(max(state.integral + error * dt, -lim), lim)
    actuation = config.kp * error + config.ki * integral
    return ControllerState(integral, actuation), actuation


@dataclass
class SensorRecord:
    sensor: str
    true: tuple
    reported: tuple  # None: nothing delivered (dropout) or not a report frame
    report_frame: bool
    attack_active: bool  # hidden from the detector
    prediction: tuple
    residual: float
    flagged: bool
    substituted: bool
    used: tuple  # value handed to the controller this frame; None if unavailable


@dataclass
class MeasurementFrame:
    frame: int
    time: float
    records: list
    observable: bool
    measured_u: float
    error: float
    integral: float
    actuation: float
    reference_actuation: float


@dataclass
class ScenarioConfig:
    sensors: list
    attacks: list = field(default_factory=list)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    mitigation: bool = True
    seed: int = 0
    snapshots: str = None
    model: str = None

    def validate(self):
        if not self.sensors:
            raise ConfigurationError("scenario needs at least one sensor")
        ids = [s.id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("sensor ids must be unique")
        for a in self.attacks:
            if a.target not in ids:
                raise ConfigurationError(f"attack targets unknown sensor {a.target!r}")
        return self


@dataclass
class ScenarioTrace:
    frames: list
    threshold: float
    summary: dict
    warnings: list
    config: ScenarioConfig


def _measurement_system(sensors, available):
    """One state per sensor location; an available sensor measures it twice (u and v)."""
    n = len(sensors)
    rows = []
    for k, ok in enumerate(available):
        if ok:
            e = np.zeros(n)
            e[k] = 1.0
            rows += [e, e]
    C = np.array(rows) if rows else np.zeros((0, n))
    return observability.ObservabilitySystem(np.zeros((n, n)), C)


def _truth(snapshots, sensors):
    out = np.zeros((len(snapshots), len(sensors), 2))
    for f, snap in enumerate(snapshots):
        for k, s in enumerate(sensors):
            u, v, _ = cfd.sample_at(snap, s.x, s.y)
            out[f, k] = (u, v)
    return out


def _predictions(model, snapshots, sensors):
    times = np.array([s.time for s in snapshots])
    out = np.zeros((len(snapshots), len(sensors), 2))
    for k, s in enumerate(sensors):
        u, v, _ = predict(model, np.full_like(times, s.x), np.full_like(times, s.y), times)
        out[:, k, 0] = u
        out[:, k, 1] = v
    return out


def _loop(snapshots, truth, preds, noise, config, detector, attacks, mitigation):
    sensors = config.sensors
    ctrl_cfg = config.controller
    times = [s.time for s in snapshots]
    frame_dt = times[1] - times[0] if len(times) > 1 else 1.0
    setpoint = ctrl_cfg.setpoint
    if setpoint is None:
        setpoint = float(truth[:, :, 0].mean())
    by_target = {}
    for a in attacks:
        by_target.setdefault(a.target, []).append(a)

    ctrl = ControllerState()
    ref = ControllerState()
    buffers = {s.id: {} for s in sensors}
    last_used = {s.id: None for s in sensors}
    substituting = {s.id: False for s in sensors}
    clear_run = {s.id: 0 for s in sensors}
    frames = []
    for f, t in enumerate(times):
        records = []
        for k, s in enumerate(sensors):
            true = (float(truth[f, k, 0]), float(truth[f, k, 1]))
            pred = (float(preds[f, k, 0]), float(preds[f, k, 1]))
            report = f % s.report_period == 0
            active = [a for a in by_target.get(s.id, ()) if a.active(f)]
            reported = None
            residual = float("nan")
            flagged = False
            if report:
                genuine = (true[0] + noise[f, k, 0], true[1] + noise[f, k, 1])
                reported = genuine
                for a in active:
                    reported = apply_attack(reported, a, f, buffers[s.id])
                    if reported is None:
                        break
                buffers[s.id][f] = genuine
                flagged = detector.flag(s.id, reported, pred)
                if reported is not None:
                    residual = residual_norm(reported, pred)
                if flagged:
                    substituting[s.id] = True
                    clear_run[s.id] = 0
                elif substituting[s.id]:
                    clear_run[s.id] += 1
                    if clear_run[s.id] >= config.detector.clear_frames:
                        substituting[s.id] = False
            substituted = mitigation and substituting[s.id]
            if substituted:
                used = pred
            elif report:
                used = reported
            else:
                used = last_used[s.id]
            last_used[s.id] = used
            records.append(
                SensorRecord(s.id, true, reported, report, bool(active), pred, residual,
                             flagged, substituted, used)
            )
        available = [r.used is not None for r in records]
        observable, _ = observability.is_observable(_measurement_system(sensors, available))
        us = [r.used[0] for r in records if r.used is not None]
        if us:
            measured = float(np.mean(us))
            ctrl, act = controller_step(ctrl, measured, setpoint, ctrl_cfg, frame_dt)
        else:
            # starved: hold the previous actuation
            measured = float("nan")
            act = ctrl.actuation
        true_mean = float(np.mean([r.true[0] for r in records]))
        ref, ref_act = controller_step(ref, true_mean, setpoint, ctrl_cfg, frame_dt)
        frames.append(
            MeasurementFrame(f, float(t), records, bool(observable), measured,
                             setpoint - measured, ctrl.integral, act, ref_act)
        )
    return frames, setpoint, frame_dt


def _summarize(frames, config, threshold, setpoint, frame_dt):
    sensors = config.sensors
    deviation = sum(abs(fr.actuation - fr.reference_actuation) for fr in frames) * frame_dt
    fp = 0
    clean_reports = 0
    for fr in frames:
        for r in fr.records:
            if r.report_frame and not r.attack_active:
                clean_reports += 1
                fp += r.flagged
    latencies = {}
    periods = {s.id: s.report_period for s in sensors}
    for a in config.attacks:
        first = None
        for fr in frames[a.start_frame : a.end_frame + 1]:
            rec = next(r for r in fr.records if r.sensor == a.target)
            if rec.flagged:
                first = fr.frame
                break
        latencies[f"{a.kind}:{a.target}@{a.start_frame}"] = (
            None if first is None else first - a.start_frame
        )
    return {
        "frames": len(frames),
        "threshold": threshold,
        "setpoint": setpoint,
        "mitigation": config.mitigation,
        "controller_deviation_integral": deviation,
        "false_positive_count": fp,
        "clean_report_count": clean_reports,
        "false_positive_rate": fp / clean_reports if clean_reports else 0.0,
        "substituted_frames": sum(any(r.substituted for r in fr.records) for fr in frames),
        "unobservable_frames": sum(not fr.observable for fr in frames),
        "starved_frames": sum(math.isnan(fr.measured_u) for fr in frames),
        "detection_latency_frames": latencies,
        "detection_latency_periods": {
            key: (None if lat is None else lat / periods[key.split(":")[1].split("@")[0]])
            for key, lat in latencies.items()
        },
    }


def calibration_residuals(snapshots, truth, preds, config):
    """Residual norms per sensor id from a clean run with an independent noise stream."""
    warm = config.detector.warmup_frames or len(snapshots)
    warm = min(warm, len(snapshots))
    noise = _noise(config, warm, stream=1)
    out = {s.id: [] for s in config.sensors}
    for f in range(warm):
        for k, s in enumerate(config.sensors):
            if f % s.report_period:
                continue
            reported = truth[f, k] + noise[f, k]
            out[s.id].append(residual_norm(reported, preds[f, k]))
    return {sid: np.array(r) for sid, r in out.items()}


def calibrate_detector(residuals, config):
    """Thresholds from :func:`calibration_residuals`: per sensor or pooled."""
    k = config.detector.k
    if config.detector.per_sensor:
        return {sid: calibrate_threshold(r, k) for sid, r in residuals.items()}
    return calibrate_threshold(np.concatenate(list(residuals.values())), k)


def _noise(config, frames, stream=0):
    rng = np.random.default_rng([config.seed, stream])
    std = np.array([s.noise_std for s in config.sensors])
    return rng.standard_normal((frames, len(config.sensors), 2)) * std[None, :, None]


def _check_positions(sensors, snap):
    x1 = snap.x0 + snap.nx * snap.dx
    y1 = snap.y0 + snap.ny * snap.dy
    for s in sensors:
        if not (snap.x0 <= s.x <= x1 and snap.y0 <= s.y <= y1):
            raise ConfigurationError(f"sensor {s.id} at ({s.x}, {s.y}) lies outside the domain")
        i = min(int((s.x - snap.x0) / snap.dx), snap.nx - 1)
        j = min(int((s.y - snap.y0) / snap.dy), snap.ny - 1)
        if snap.mask[j, i]:
            raise ConfigurationError(f"sensor {s.id} at ({s.x}, {s.y}) lies inside the obstacle")


def run_scenario(config, snapshots=None, model=None, detector=None):
    """Run the frame loop and return a :class:`ScenarioTrace`.

    ``snapshots`` and ``model`` default to loading ``config.snapshots`` and
    ``config.model``. ``detector`` defaults to a :class:`ResidualDetector`
    with the configured or calibrated threshold.
    """
    from .pinn import load_model

    config.validate()
    if snapshots is None:
        if not config.snapshots or not os.path.isdir(config.snapshots):
            raise ConfigurationError(f"snapshot directory {config.snapshots!r} not found")
        snapshots = cfd.read_snapshots(config.snapshots)
        if not snapshots:
            raise ConfigurationError(f"no snapshots in {config.snapshots!r}")
    if model is None:
        if not config.model or not os.path.isfile(config.model):
            raise ConfigurationError(f"model checkpoint {config.model!r} not found")
        model = load_model(config.model)

    _check_positions(config.sensors, snapshots[0])
    warnings = [
        f"sensor {s.id} at ({s.x}, {s.y}) lies outside the model's training window; "
        "substituted values are extrapolated"
        for s in config.sensors
        if not in_training_window(model, s.x, s.y)
    ]
    truth = _truth(snapshots, config.sensors)
    preds = _predictions(model, snapshots, config.sensors)
    threshold = config.detector.threshold
    if detector is None:
        if threshold is None:
            threshold = calibrate_detector(
                calibration_residuals(snapshots, truth, preds, config), config
            )
        detector = ResidualDetector(threshold)
    else:
        threshold = getattr(detector, "thresholds", threshold)
    noise = _noise(config, len(snapshots))
    frames, setpoint, frame_dt = _loop(
        snapshots, truth, preds, noise, config, detector, config.attacks, config.mitigation
    )
    summary = _summarize(frames, config, threshold, setpoint, frame_dt)
    return ScenarioTrace(frames, threshold, summary, warnings, config)


def run_paired(config, snapshots, model):
    """Mitigated and unmitigated runs sharing seed, plant, and threshold."""
    first = run_scenario(replace(config, mitigation=True), snapshots, model)
    second = run_scenario(
        replace(config, mitigation=False), snapshots, model, ResidualDetector(first.threshold)
    )
    return first, second


# ---------------------------------------------------------------- file formats

TRACE_COLUMNS = (
    "frame", "time", "sensor", "true_u", "true_v", "reported_u", "reported_v",
    "report_frame", "attack_active", "prediction_u", "prediction_v", "residual",
    "flagged", "substituted", "used_u", "used_v", "observable",
)
CONTROLLER_COLUMNS = (
    "frame", "time", "measured_u", "error", "integral", "actuation", "reference_actuation",
)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(v)
    if isinstance(v, str):
        return v
    return "" if math.isnan(v) else format(float(v), ".17g")


def write_trace(trace, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rows = [",".join(TRACE_COLUMNS)]
    ctrl = [",".join(CONTROLLER_COLUMNS)]
    for fr in trace.frames:
        for r in fr.records:
            rep = r.reported or (None, None)
            used = r.used or (None, None)
            vals = (fr.frame, fr.time, r.sensor, r.true[0], r.true[1], rep[0], rep[1],
                    r.report_frame, r.attack_active, r.prediction[0], r.prediction[1],
                    r.residual, r.flagged, r.substituted, used[0], used[1], fr.observable)
            rows.append(",".join(_fmt(v) for v in vals))
        vals = (fr.frame, fr.time, fr.measured_u, fr.error, fr.integral, fr.actuation,
                fr.reference_actuation)
        ctrl.append(",".join(_fmt(v) for v in vals))
    paths = {
        "trace": os.path.join(out_dir, "trace.csv"),
        "controller": os.path.join(out_dir, "controller.csv"),
        "summary": os.path.join(out_dir, "summary.txt"),
    }
    with open(paths["trace"], "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")
    with open(paths["controller"], "w", newline="\n") as fh:
        fh.write("\n".join(ctrl) + "\n")
    with open(paths["summary"], "w", newline="\n") as fh:
        fh.write(format_summary(trace))
    return paths


def _thresholds_text(threshold):
    if isinstance(threshold, dict):
        return "  ".join(f"{sid}={tau:.6g}" for sid, tau in threshold.items())
    return f"{threshold:.6g}"


def format_summary(trace):
    s = trace.summary
    lines = [
        f"frames                        {s['frames']}",
        f"mitigation                    {'on' if s['mitigation'] else 'off'}",
        f"detector threshold            {_thresholds_text(s['threshold'])}",
        f"setpoint                      {s['setpoint']:.6g}",
        f"controller deviation integral {s['controller_deviation_integral']:.6g}",
        f"false positives               {s['false_positive_count']} / {s['clean_report_count']}"
        f" ({100 * s['false_positive_rate']:.3f} %)",
        f"frames with substitution      {s['substituted_frames']}",
        f"unobservable frames           {s['unobservable_frames']}",
        f"starved frames                {s['starved_frames']}",
    ]
    for key, lat in s["detection_latency_frames"].items():
        per = s["detection_latency_periods"][key]
        text = "not detected" if lat is None else f"{lat} frames ({per:g} report periods)"
        lines.append(f"detection latency {key:<12} {text}")
    for w in trace.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- scenario file

_SENSOR_DEFAULT_KEYS = ("report_period", "noise_std")


def _kv_tokens(text, where):
    out = {}
    for token in text.split():
        key, sep, val = token.partition("=")
        if not sep:
            raise ParseError(f"{where}: expected key=value, got {token!r}")
        out[key] = val
    return out


def read_scenario(path, overrides=None):
    """Parse a scenario file (INI sections plant/sensors/attacks/detector/controller/output).

    Relative paths under ``[plant]`` resolve against the file's directory.
    """
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from exc
    allowed = {"plant", "sensors", "attacks", "detector", "controller", "output"}
    unknown = set(cp.sections()) - allowed
    if unknown:
        raise ConfigurationError(f"{path}: unknown sections {sorted(unknown)}")
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base, p)

    def section(name):
        return dict(cp[name]) if cp.has_section(name) else {}

    plant = section("plant")
    _reject(plant, {"snapshots", "model"}, "plant")
    sens = section("sensors")
    defaults = {k: sens.pop(k) for k in _SENSOR_DEFAULT_KEYS if k in sens}
    sensors = []
    for sid, text in sens.items():
        parts = [p.strip() for p in text.split(",")]
        if len(parts) not in (2, 3, 4):
            raise ParseError(f"{path}: sensor {sid}: expected 'x, y[, report_period[, noise_std]]'")
        try:
            sensors.append(
                SensorSpec(
                    sid,
                    float(parts[0]),
                    float(parts[1]),
                    int(parts[2]) if len(parts) > 2 else int(defaults.get("report_period", 1)),
                    float(parts[3]) if len(parts) > 3 else float(defaults.get("noise_std", 0.01)),
                )
            )
        except ValueError as exc:
            raise ParseError(f"{path}: sensor {sid}: {exc}") from exc
    attacks = []
    for name, text in section("attacks").items():
        kv = _kv_tokens(text, f"{path}: attack {name}")
        _reject(kv, {"kind", "target", "start", "end", "magnitude"}, f"attack {name}")
        try:
            attacks.append(
                AttackSpec(kv["kind"], kv["target"], int(kv["start"]), int(kv["end"]),
                           float(kv.get("magnitude", 0.0)))
            )
        except (KeyError, ValueError) as exc:
            raise ParseError(f"{path}: attack {name}: {exc}") from exc
    det = section("detector")
    _reject(det, {"threshold", "k", "warmup_frames", "clear_frames", "per_sensor"}, "detector")
    ctl = section("controller")
    _reject(ctl, {"kp", "ki", "setpoint", "integral_limit"}, "controller")
    out = section("output")
    _reject(out, {"mitigation", "seed"}, "output")
    if overrides:
        out.update({k: v for k, v in overrides.items() if v is not None})
    try:
        detector = DetectorConfig(
            threshold=float(det["threshold"]) if "threshold" in det else None,
            k=float(det.get("k", 3.0)),
            warmup_frames=int(det["warmup_frames"]) if "warmup_frames" in det else None,
            clear_frames=int(det.get("clear_frames", 3)),
            per_sensor=_truthy(det.get("per_sensor", "true")),
        )
        controller = ControllerConfig(
            kp=float(ctl.get("kp", 1.0)),
            ki=float(ctl.get("ki", 0.5)),
            setpoint=float(ctl["setpoint"]) if "setpoint" in ctl else None,
            integral_limit=float(ctl.get("integral_limit", 2.0)),
        )
        mitigation = _truthy(out.get("mitigation", "true"))
        seed = int(out.get("seed", 0))
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return ScenarioConfig(
        sensors=sensors,
        attacks=attacks,
        detector=detector,
        controller=controller,
        mitigation=mitigation,
        seed=seed,
        snapshots=resolve(plant.get("snapshots")),
        model=resolve(plant.get("model")),
    ).validate()


def _truthy(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _reject(mapping, allowed, where):
    extra = set(mapping) - set(allowed)
    if extra:
        raise ConfigurationError(f"[{where}]: unknown keys {sorted(extra)}")
