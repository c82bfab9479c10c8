"""Command-line frontend: ``pinnshield <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Every subcommand reads an optional INI config file; each config key also
has a flag of the same name (underscores become dashes) that overrides it.
Unknown sections or keys are rejected.

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import cfd, dataset, observability, pinn, plotting, sentinel
from .errors import ConfigurationError, ParseError

log = logging.getLogger("pinnshield")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2

WINDOW_DEFAULT = {"x_min": 1.0, "x_max": 8.0, "y_min": -2.0, "y_max": 2.0, "spatial_stride": 1}


def _tuple(text):
    return tuple(float(v) for v in str(text).split(","))


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(kind):
    def conv(text):
        return None if str(text).strip().lower() in ("", "none") else kind(text)

    return conv


def _schema_from(cls, skip=()):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if isinstance(default, tuple):
            conv = _tuple
        elif isinstance(default, bool):
            conv = _bool
        elif default is None:
            conv = _optional(int)
        else:
            conv = type(default)
        out[f.name] = (conv, default)
    return out


# section -> key -> (converter, default)
SCHEMAS = {
    "gen-data": {"domain": _schema_from(cfd.DomainConfig)},
    "train": {
        "data": {"snapshots": (str, None)},
        "window": {k: (type(v), v) for k, v in WINDOW_DEFAULT.items()},
        "split": _schema_from(dataset.SplitSpec, skip=("seed",)),
        "model": {
            "formulation": (str, "stream"),
            "hidden_layers": (int, 7),
            "hidden_width": (int, 20),
            "nu": (float, 0.01),
            "rho": (float, 1.0),
        },
        "train": _schema_from(pinn.TrainConfig, skip=("seed",)),
    },
    "evaluate": {
        "evaluate": {
            "model": (str, None),
            "samples": (str, None),
            "predictions": (str, None),
        }
    },
    "simulate": {
        "scenario": {"scenario": (str, None), "paired": (_bool, False)},
        "output": {"mitigation": (_bool, None)},
    },
    "check-observability": {
        "system": {"system": (str, None), "tolerance": (float, observability.DEFAULT_TOLERANCE)}
    },
}

SEED_DEFAULT = 0


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser():
    parser = argparse.ArgumentParser(prog="pinnshield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "run the CFD solver and write snapshot CSVs plus a manifest",
        "train": "train a PINN on a window of the snapshot data",
        "evaluate": "report u/v accuracy of a model or a predictions file",
        "simulate": "run an attack/mitigation scenario",
        "check-observability": "decide observability of an (A, C) system file",
    }
    for name, sections in SCHEMAS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="INI file with the keys listed below")
        p.add_argument("--seed", type=int, default=None, help=f"global seed (default {SEED_DEFAULT})")
        p.add_argument("--out", default=None, help="output directory (default: ./out-<subcommand>)")
        seen = set()
        for section, keys in sections.items():
            group = p.add_argument_group(f"[{section}]")
            for key, (conv, default) in keys.items():
                if key in seen:
                    continue
                seen.add(key)
                extra = {"nargs": "?", "const": "true"} if conv is _bool else {}
                group.add_argument(_flag(key), dest=key, default=None, metavar="VALUE",
                                   help=f"default: {default}", **extra)
        if name == "check-observability":
            p.add_argument("system_file", nargs="?", help="system file (same as --system)")
    return parser


def resolve_config(command, args):
    """Merge defaults, the config file, and flags into ``{section: {key: value}}``."""
    sections = SCHEMAS[command]
    merged = {s: {k: d for k, (_, d) in keys.items()} for s, keys in sections.items()}
    seed = SEED_DEFAULT
    out = None
    if args.config:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(args.config, encoding="utf-8") as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ParseError(f"{args.config}: {exc}") from exc
        base = os.path.dirname(os.path.abspath(args.config))
        for section in cp.sections():
            if section == "run":
                for key, raw in cp[section].items():
                    if key == "seed":
                        seed = int(raw)
                    elif key == "out":
                        out = raw
                    else:
                        raise ConfigurationError(f"{args.config}: unknown key [run] {key}")
                continue
            if section not in sections:
                raise ConfigurationError(
                    f"{args.config}: unknown section [{section}] for {command} "
                    f"(expected {sorted(sections) + ['run']})"
                )
            for key, raw in cp[section].items():
                if key not in sections[section]:
                    raise ConfigurationError(f"{args.config}: unknown key [{section}] {key}")
                conv = sections[section][key][0]
                if key in ("snapshots", "scenario", "system", "model", "samples", "predictions"):
                    raw = raw if os.path.isabs(raw) else os.path.join(base, raw)
                merged[section][key] = _convert(conv, raw, f"[{section}] {key}")
    for section, keys in sections.items():
        for key, (conv, _) in keys.items():
            raw = getattr(args, key, None)
            if raw is not None:
                merged[section][key] = _convert(conv, raw, _flag(key))
    if args.seed is not None:
        seed = args.seed
    if args.out is not None:
        out = args.out
    return merged, seed, out or f"out-{command}"


def _convert(conv, raw, where):
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: cannot parse {raw!r}: {exc}") from exc


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(obj, path):
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(cfg, seed, out):
    domain = cfd.DomainConfig(**cfg["domain"]).validate()
    paths = cfd.run_simulation(domain, out)
    manifest = {
        "config": {k: list(v) if isinstance(v, tuple) else v
                   for k, v in dataclasses.asdict(domain).items()},
        "config_hash": domain.digest(),
        "files": {os.path.basename(p): _sha256(p) for p in paths},
    }
    _write_json(manifest, os.path.join(out, "manifest.json"))
    last = cfd.read_snapshot(paths[-1])
    plotting.plot_field(last, os.path.join(out, "field_u.png"), "u",
                        window=((1.0, 8.0), (-2.0, 2.0)))
    plotting.plot_field(last, os.path.join(out, "field_v.png"), "v",
                        window=((1.0, 8.0), (-2.0, 2.0)))
    print(f"wrote {len(paths)} snapshots to {out} (config hash {manifest['config_hash'][:16]})")
    return EXIT_OK


def cmd_train(cfg, seed, out):
    directory = cfg["data"]["snapshots"]
    if not directory or not os.path.isdir(directory):
        raise ConfigurationError(f"snapshot directory {directory!r} not found (set --snapshots)")
    snaps = cfd.read_snapshots(directory)
    if not snaps:
        raise ConfigurationError(f"no snapshot_*.csv files in {directory!r}")
    w = cfg["window"]
    window = ((w["x_min"], w["x_max"]), (w["y_min"], w["y_max"]))
    samples = dataset.extract_window(snaps, window, w["spatial_stride"])
    train_set, test_set = dataset.split(samples, dataset.SplitSpec(cfg["split"]["train_fraction"], seed))
    m = cfg["model"]
    width = pinn.OUTPUT_WIDTH.get(m["formulation"])
    if width is None:
        raise ConfigurationError(f"unknown formulation {m['formulation']!r}")
    layers = (3,) + (m["hidden_width"],) * m["hidden_layers"] + (width,)
    t = samples.t
    lower = [window[0][0], window[1][0], float(t.min())]
    upper = [window[0][1], window[1][1], float(t.max())]
    if upper[2] == lower[2]:
        upper[2] = lower[2] + 1.0
    model = pinn.init_model(layers, m["formulation"], pinn.FluidProperties(m["nu"], m["rho"]),
                            seed, lower, upper)
    tc = pinn.TrainConfig(seed=seed, **cfg["train"])
    model, history = pinn.train(model, train_set, tc, collocation_bounds=(lower, upper))

    os.makedirs(out, exist_ok=True)
    pinn.save_model(model, os.path.join(out, "model.ckpt"))
    dataset.write_samples(train_set, os.path.join(out, "train_samples.csv"))
    dataset.write_samples(test_set, os.path.join(out, "test_samples.csv"))
    np.savetxt(os.path.join(out, "loss_history.csv"), history, delimiter=",", fmt="%.17g",
               header="total,data,residual", comments="")
    pred = _predict_uv(model, test_set)
    report = dataset.accuracy(pred, test_set)
    final = history[-1] if len(history) else pinn.loss(
        model, train_set[: tc.batch_size],
        pinn.sample_collocation(lower, upper, tc.collocation_batch, seed + 1), tc)
    metrics = {
        "final_loss": {"total": float(final[0]), "data": float(final[1]), "residual": float(final[2])},
        "test_accuracy": report.as_dict(),
        "train_samples": len(train_set),
        "test_samples": len(test_set),
        "iterations": tc.iterations,
        "parameter_count": model.parameter_count,
        "seed": seed,
    }
    _write_json(metrics, os.path.join(out, "metrics.json"))
    plotting.plot_loss_history(history, os.path.join(out, "loss.png"))
    plotting.plot_prediction_scatter(pred, test_set, os.path.join(out, "test_scatter.png"))
    print(report.format(), end="")
    return EXIT_OK


def _predict_uv(model, samples):
    u, v, _ = pinn.predict(model, samples.x, samples.y, samples.t)
    return np.stack([np.atleast_1d(u), np.atleast_1d(v)], axis=1)


def cmd_evaluate(cfg, seed, out):
    e = cfg["evaluate"]
    if not e["samples"]:
        raise ConfigurationError("--samples is required")
    truth = dataset.read_samples(e["samples"])
    if len(truth) == 0:
        raise ConfigurationError(f"{e['samples']}: sample file is empty")
    if e["predictions"]:
        pred = dataset.read_samples(e["predictions"])
        if len(pred) != len(truth):
            raise ConfigurationError("predictions and samples have different lengths")
        pred = np.stack([pred.u, pred.v], axis=1)
    elif e["model"]:
        pred = _predict_uv(pinn.load_model(e["model"]), truth)
    else:
        raise ConfigurationError("give --model or --predictions")
    report = dataset.accuracy(pred, truth)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "accuracy.txt"), "w", newline="\n") as fh:
        fh.write(report.format())
    _write_json(report.as_dict(), os.path.join(out, "accuracy.json"))
    print(report.format(), end="")
    return EXIT_OK


def cmd_simulate(cfg, seed_override, out, seed_given):
    s = cfg["scenario"]
    if not s["scenario"]:
        raise ConfigurationError("--scenario is required")
    overrides = {}
    if cfg["output"]["mitigation"] is not None:
        overrides["mitigation"] = str(cfg["output"]["mitigation"])
    if seed_given:
        overrides["seed"] = str(seed_override)
    config = sentinel.read_scenario(s["scenario"], overrides)
    if not config.snapshots or not os.path.isdir(config.snapshots):
        raise ConfigurationError(f"snapshot directory {config.snapshots!r} not found")
    if not config.model or not os.path.isfile(config.model):
        raise ConfigurationError(f"model checkpoint {config.model!r} not found")
    snaps = cfd.read_snapshots(config.snapshots)
    model = pinn.load_model(config.model)
    if s["paired"]:
        mitigated, unmitigated = sentinel.run_paired(config, snaps, model)
        sentinel.write_trace(mitigated, os.path.join(out, "mitigated"))
        sentinel.write_trace(unmitigated, os.path.join(out, "unmitigated"))
        plotting.plot_scenario(mitigated, os.path.join(out, "scenario.png"), unmitigated)
        a = mitigated.summary["controller_deviation_integral"]
        b = unmitigated.summary["controller_deviation_integral"]
        text = (f"controller deviation integral: mitigated {a:.6g}, unmitigated {b:.6g}\n"
                + sentinel.format_summary(mitigated))
        with open(os.path.join(out, "comparison.txt"), "w", newline="\n") as fh:
            fh.write(text)
        print(text, end="")
    else:
        trace = sentinel.run_scenario(config, snaps, model)
        sentinel.write_trace(trace, out)
        plotting.plot_scenario(trace, os.path.join(out, "scenario.png"))
        print(sentinel.format_summary(trace), end="")
    return EXIT_OK


def cmd_check_observability(cfg, seed, out, system_file=None):
    path = system_file or cfg["system"]["system"]
    if not path:
        raise ConfigurationError("give a system file")
    system = observability.read_system(path)
    ok, r = observability.is_observable(system, cfg["system"]["tolerance"])
    verdict = "observable" if ok else "not observable"
    print(f"{verdict}: rank {r} of n = {system.n} (p = {system.p} outputs)")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg, seed, out = resolve_config(args.command, args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, seed, out)
        if args.command == "train":
            return cmd_train(cfg, seed, out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, seed, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, seed, out, args.seed is not None)
        return cmd_check_observability(cfg, seed, out, args.system_file)
    except (ValueError, OSError) as exc:
        # configuration, parse, and missing-file problems are the user's to fix
        print(f"pinnshield {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        print(f"pinnshield {args.command}: internal error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
