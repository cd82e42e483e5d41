"""Command-line pipeline: prepare, train-qr, train-flow, eval, rollout, synth.

Every command reads one JSON run config. ``--set key=value`` overrides a
scalar (dotted keys reach nested sections; the value is parsed as JSON when
possible). ``TAILQUANT_OUTPUT_DIR`` and ``TAILQUANT_WORKERS`` override the
output directory and worker count.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training diverged,
5 missing artifact.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    Normalizer,
    Samples,
    extract_pairs,
    oversample,
    parse_highd,
    split_dataset,
)
from .data.synthetic import SyntheticSpec, synth_generate
from .models import KINDS, ConditionalFlow, QuantileRegressor, QuantileRegressorSet, TrainConfig
from .models import train_flow, train_qr
from .models.training import TrainingDivergedError
from .quantile import LEVELS
from .report import EvalTable, UnconditionalQuantile, build_table, eval_method, export
from .sim import Scenario, rollout

log = logging.getLogger("tailquant")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_MISSING = 0, 2, 3, 4, 5
ROLLOUT_LEVELS = (0.5, 0.75, 0.95, 0.99)

DEFAULTS = {
    "seed": 0,
    "output_dir": "run",
    "workers": 1,
    "data": {"source": "synthetic", "n": 10000},
    "dims": 1,
    "split": [0.8, 0.1, 0.1],
    "frame_stride": 1,
    "oversample": False,
    "bin_width": 0.2,
    "levels": list(LEVELS),
    "train": {},
    "flow_kinds": ["aqf-nlsq"],
    "methods": ["qr", "aqf-nlsq"],
    "rollout": {"levels": list(ROLLOUT_LEVELS), "horizon": None, "method": "aqf-nlsq"},
}


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# -- config -------------------------------------------------------------------

def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _level(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 < value < 1.0:
        raise ConfigError(f"{where}: quantile level must lie in (0, 1), got {value!r}")
    return float(value)


def _int(value, where, lo=0):
    if isinstance(value, bool) or not isinstance(value, int) or value < lo:
        raise ConfigError(f"{where} must be an integer >= {lo}, got {value!r}")
    return value


def validate_config(raw):
    """Merge ``raw`` over the defaults and check every field. Returns a new dict."""
    _check_keys(raw, DEFAULTS, "config")
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(DEFAULTS[key], dict) and key not in ("data", "train"):
            _check_keys(value, DEFAULTS[key], key)
            cfg[key] = {**DEFAULTS[key], **value}
        else:
            cfg[key] = copy.deepcopy(value)

    _int(cfg["seed"], "seed")
    _int(cfg["workers"], "workers", 1)
    _int(cfg["frame_stride"], "frame_stride", 1)
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        raise ConfigError("output_dir must be a non-empty string")
    if cfg["dims"] not in (1, 2):
        raise ConfigError(f"dims must be 1 or 2, got {cfg['dims']!r}")
    split = cfg["split"]
    if (not isinstance(split, list) or len(split) != 3
            or not all(isinstance(r, (int, float)) and r > 0 for r in split)
            or abs(sum(split) - 1.0) > 1e-9):
        raise ConfigError(f"split must be three positive ratios summing to 1, got {split!r}")
    if not isinstance(cfg["oversample"], bool):
        raise ConfigError("oversample must be true or false")
    if not isinstance(cfg["bin_width"], (int, float)) or not cfg["bin_width"] > 0:
        raise ConfigError("bin_width must be positive")
    if not isinstance(cfg["levels"], list) or not cfg["levels"]:
        raise ConfigError("levels must be a non-empty list")
    cfg["levels"] = [_level(a, "levels") for a in cfg["levels"]]

    data = cfg["data"]
    if not isinstance(data, dict) or data.get("source") not in ("synthetic", "highd"):
        raise ConfigError("data.source must be 'synthetic' or 'highd'")
    if data["source"] == "synthetic":
        _check_keys(data, ("source", "n", "spec"), "data")
        _int(data.get("n"), "data.n", 3)
        spec = data.get("spec", {})
        _check_keys(spec, [f.name for f in fields(SyntheticSpec)], "data.spec")
        try:
            SyntheticSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in spec.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.spec: {exc}") from None
    else:
        _check_keys(data, ("source", "recordings"), "data")
        recs = data.get("recordings")
        if not isinstance(recs, list) or not recs:
            raise ConfigError("data.recordings must be a non-empty list")
        for i, rec in enumerate(recs):
            _check_keys(rec, ("tracks", "meta"), f"data.recordings[{i}]")
            if not all(isinstance(rec.get(k), str) for k in ("tracks", "meta")):
                raise ConfigError(f"data.recordings[{i}] needs 'tracks' and 'meta' paths")

    try:
        TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    for kind in cfg["flow_kinds"]:
        if kind not in KINDS:
            raise ConfigError(f"flow_kinds: unknown flow kind {kind!r}")
    if "methods" not in raw and cfg["dims"] == 2:
        cfg["methods"] = [m for m in cfg["methods"] if m != "qr"]
    for method in cfg["methods"]:
        if method != "qr" and method not in KINDS:
            raise ConfigError(f"methods: unknown method {method!r}")
        if method == "qr" and cfg["dims"] == 2:
            raise ConfigError("methods: quantile regression models only the longitudinal action (dims=1)")
    ro = cfg["rollout"]
    ro["levels"] = [_level(a, "rollout.levels") for a in ro["levels"]]
    if ro["horizon"] is not None:
        _int(ro["horizon"], "rollout.horizon", 1)
    if ro["method"] != "qr" and ro["method"] not in KINDS:
        raise ConfigError(f"rollout.method: unknown method {ro['method']!r}")
    return cfg


def _apply_override(cfg, assignment):
    key, sep, text = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError(f"--set {key}: {part} is not a section")
    target[parts[-1]] = value


def load_config(path, overrides=(), env=None):
    env = os.environ if env is None else env
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    for assignment in overrides:
        _apply_override(raw, assignment)
    if env.get("TAILQUANT_OUTPUT_DIR"):
        raw["output_dir"] = env["TAILQUANT_OUTPUT_DIR"]
    if env.get("TAILQUANT_WORKERS"):
        try:
            raw["workers"] = int(env["TAILQUANT_WORKERS"])
        except ValueError:
            raise ConfigError("TAILQUANT_WORKERS must be an integer") from None
    return validate_config(raw)


# -- file layout ----------------------------------------------------------------

def _paths(cfg):
    out = Path(cfg["output_dir"])
    return {
        "out": out,
        "data": out / "data",
        "models": out / "models",
        "logs": out / "logs",
        "eval": out / "eval",
        "rollouts": out / "rollouts",
    }


def _qr_name(alpha):
    return f"qr_{alpha!r}"


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path, what):
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return json.loads(path.read_text())


def _load_split(cfg, name):
    path = _paths(cfg)["data"] / f"{name}.csv"
    if not path.exists():
        raise MissingArtifact(f"missing {name} split: {path} (run 'prepare' first)")
    return Samples.from_csv(path, dims=cfg["dims"])


def _load_normalizer(cfg):
    return Normalizer.from_dict(_read_json(_paths(cfg)["data"] / "normalizer.json", "normalizer"))


def _histogram_json(hist):
    return {str(k): v for k, v in sorted(hist.items())}


def _write_loss_log(path, history):
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = ["epoch", "train_loss", "val_loss"] + (["min_slope_ratio"] if history and "min_slope_ratio" in history[0] else [])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for entry in history:
            w.writerow(["" if entry[k] is None else repr(entry[k]) for k in keys])


# -- commands -------------------------------------------------------------------

def _load_source(cfg):
    data = cfg["data"]
    if data["source"] == "synthetic":
        spec = SyntheticSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.get("spec", {}).items()})
        samples = synth_generate(spec, data["n"], cfg["seed"])
        if cfg["dims"] == 2:
            raise DataError("the synthetic generator produces longitudinal actions only (dims=1)")
        return samples, {}
    parts, skips = [], {}
    for rec in data["recordings"]:
        for key in ("tracks", "meta"):
            if not Path(rec[key]).exists():
                raise DataError(f"missing input file: {rec[key]}")
        recording = parse_highd(rec["tracks"], rec["meta"])
        samples, report = extract_pairs(recording, cfg["dims"], frame_stride=cfg["frame_stride"])
        parts.append(samples)
        skips[rec["tracks"]] = report.to_dict()
    samples = parts[0]
    for extra in parts[1:]:
        samples = samples.concat(extra)
    return samples, skips


def cmd_prepare(cfg):
    paths = _paths(cfg)
    samples, skips = _load_source(cfg)
    split = split_dataset(samples, tuple(cfg["split"]), cfg["seed"])
    train = split.train
    manifest = {
        "command": "prepare",
        "config": cfg,
        "counts": {"source": len(samples), "train": len(split.train), "val": len(split.val), "test": len(split.test)},
        "skip_report": skips,
    }
    if cfg["oversample"]:
        train, report = oversample(split.train, cfg["bin_width"], cfg["seed"])
        manifest["oversampling"] = {
            "bin_width": cfg["bin_width"],
            "before": _histogram_json(report["before"]),
            "after": _histogram_json(report["after"]),
            "duplicated": report["duplicated"],
        }
        manifest["counts"]["train_oversampled"] = len(train)
    normalizer = Normalizer.fit(train)
    paths["data"].mkdir(parents=True, exist_ok=True)
    train.to_csv(paths["data"] / "train.csv")
    split.val.to_csv(paths["data"] / "val.csv")
    split.test.to_csv(paths["data"] / "test.csv")
    _write_json(paths["data"] / "normalizer.json", normalizer.to_dict())
    _write_json(paths["data"] / "skip_report.json", skips)
    _write_json(paths["data"] / "manifest.json", manifest)
    log.info("prepared %d train / %d val / %d test samples in %s",
             len(train), len(split.val), len(split.test), paths["data"])


def _fit_qr_level(args):
    train, val, normalizer, alpha, train_cfg, seed = args
    return train_qr(train, alpha, TrainConfig.from_dict(train_cfg), seed, val, normalizer)


def cmd_train_qr(cfg):
    paths = _paths(cfg)
    train, val = _load_split(cfg, "train"), _load_split(cfg, "val")
    normalizer = _load_normalizer(cfg)
    jobs = [(train, val, normalizer, alpha, cfg["train"], cfg["seed"] + i) for i, alpha in enumerate(cfg["levels"])]
    if cfg["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            results = list(pool.map(_fit_qr_level, jobs))
    else:
        results = [_fit_qr_level(job) for job in jobs]
    for alpha, (model, history) in zip(cfg["levels"], results):
        _write_json(paths["models"] / f"{_qr_name(alpha)}.json", model.to_dict())
        _write_loss_log(paths["logs"] / f"{_qr_name(alpha)}.csv", history)
        log.info("trained QR level %r: final val loss %s", alpha, history[-1]["val_loss"])


def cmd_train_flow(cfg, kinds=None):
    paths = _paths(cfg)
    train, val = _load_split(cfg, "train"), _load_split(cfg, "val")
    normalizer = _load_normalizer(cfg)
    for kind in kinds or cfg["flow_kinds"]:
        flow, history = train_flow(train, kind, cfg["dims"], TrainConfig.from_dict(cfg["train"]),
                                   cfg["seed"], val, normalizer)
        _write_json(paths["models"] / f"{kind}.json", flow.to_dict())
        _write_loss_log(paths["logs"] / f"{kind}.csv", history)
        log.info("trained %s: final val loss %s", kind, history[-1]["val_loss"])


def _load_method(cfg, method, levels):
    models = _paths(cfg)["models"]
    if method == "qr":
        return QuantileRegressorSet([
            QuantileRegressor.from_dict(_read_json(models / f"{_qr_name(a)}.json", f"QR checkpoint for level {a!r}"))
            for a in levels
        ])
    return ConditionalFlow.from_dict(_read_json(models / f"{method}.json", f"{method} checkpoint"))


def cmd_eval(cfg):
    paths = _paths(cfg)
    train, test = _load_split(cfg, "train"), _load_split(cfg, "test")
    levels = cfg["levels"]
    methods = {m: _load_method(cfg, m, levels) for m in cfg["methods"]}
    dims = cfg["dims"]
    table = build_table(methods, test, levels, dims) if methods else EvalTable(tuple(levels))
    table.add_row("unconditional", eval_method(UnconditionalQuantile(train), test, levels, dims), len(test))
    paths["eval"].mkdir(parents=True, exist_ok=True)
    export(table, paths["eval"] / "table.csv")
    log.info("wrote %d-row table to %s", len(table.rows), paths["eval"] / "table.csv")
    return table


def cmd_rollout(cfg, scenario_path, levels=None, method=None):
    paths = _paths(cfg)
    scenario_path = Path(scenario_path)
    if not scenario_path.exists():
        raise MissingArtifact(f"missing scenario file: {scenario_path}")
    try:
        scenario = Scenario.load(scenario_path)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"invalid scenario {scenario_path}: {exc}") from None
    requested = list(levels) if levels else cfg["rollout"]["levels"]
    requested = [_level(a, "rollout levels") for a in requested]
    unique = list(dict.fromkeys(requested))
    if len(unique) < len(requested):
        log.warning("duplicate quantile levels removed: %s", requested)
    method = method or cfg["rollout"]["method"]
    model = _load_method(cfg, method, unique)
    paths["rollouts"].mkdir(parents=True, exist_ok=True)
    written = []
    for alpha in unique:
        trace = rollout(model, alpha, scenario, cfg["rollout"]["horizon"])
        path = paths["rollouts"] / f"{method}_alpha{alpha!r}.csv"
        manifest = {"method": method, "alpha": alpha, "scenario": str(scenario_path),
                    "steps": len(trace), "terminal": trace.terminal}
        export(trace, path, manifest=manifest)
        written.append(path)
    log.info("wrote %d traces to %s", len(written), paths["rollouts"])
    return written


def synthetic_scenario(steps=750, seed=0, dt=0.04):
    """Leader with a slow random-walk speed in [15, 35] m/s, follower 40 m behind."""
    rng = np.random.default_rng(seed)
    v = np.clip(27.0 + np.cumsum(rng.normal(0.0, 0.02, steps)), 15.0, 35.0)
    x = 44.5 + np.concatenate([[0.0], np.cumsum(v[1:] * dt)])
    return Scenario(x, v, 0.0, float(v[0]), dt=dt)


def cmd_synth(cfg):
    out = _paths(cfg)["out"]
    data = cfg["data"]
    if data["source"] != "synthetic":
        raise ConfigError("synth needs data.source = 'synthetic'")
    samples, _ = _load_source(cfg)
    out.mkdir(parents=True, exist_ok=True)
    samples.to_csv(out / "synthetic.csv")
    synthetic_scenario(seed=cfg["seed"]).save(out / "scenario.json")
    log.info("wrote %d synthetic samples and a leader scenario to %s", len(samples), out)


# -- entry point -------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="tailquant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train-qr", "train-flow", "eval", "rollout", "synth"):
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (repeatable)")
        if name == "train-flow":
            p.add_argument("--kind", action="append", choices=KINDS, help="flow kind (repeatable)")
        if name == "rollout":
            p.add_argument("--scenario", required=True)
            p.add_argument("--alpha", type=float, nargs="+")
            p.add_argument("--method")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "rollout" and args.method and args.method != "qr" and args.method not in KINDS:
            raise ConfigError(f"unknown method {args.method!r}")
        if args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "train-qr":
            cmd_train_qr(cfg)
        elif args.command == "train-flow":
            cmd_train_flow(cfg, args.kind)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "rollout":
            cmd_rollout(cfg, args.scenario, args.alpha, args.method)
        else:
            cmd_synth(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        log.error("training diverged at epoch %s: %s", exc.epoch, exc)
        return EXIT_TRAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
