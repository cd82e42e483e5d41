"""Quantile-loss tables, the unconditional baseline, and file export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quantile import LEVELS, check_level, empirical_quantile, mean_tal
from .sim import TRACE_COLUMNS, RolloutTrace


def level_label(alpha):
    return repr(float(alpha))


@dataclass
class EvalTable:
    """Mean pinball loss per method (rows) and quantile level (columns)."""

    levels: tuple = LEVELS
    rows: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    @property
    def methods(self):
        return list(self.rows)

    def add_row(self, method, cells, count):
        cells = [float(c) for c in cells]
        if len(cells) != len(self.levels):
            raise ValueError(f"row {method!r} has {len(cells)} cells for {len(self.levels)} levels")
        if any(c < 0 for c in cells):
            raise ValueError(f"row {method!r} has a negative loss")
        self.rows[method] = cells
        self.counts[method] = int(count)

    def cell(self, method, alpha):
        return self.rows[method][self.levels.index(alpha)]

    def to_csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [level_label(a) for a in self.levels])
        for method, cells in self.rows.items():
            w.writerow([method] + [repr(c) for c in cells])
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text):
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if not header or header[0] != "method":
            raise ValueError("table CSV must start with a 'method' column")
        table = cls(tuple(float(h) for h in header[1:]))
        for row in reader:
            if row:
                table.rows[row[0]] = [float(x) for x in row[1:]]
        return table

    def to_dict(self):
        return {
            "levels": list(self.levels),
            "rows": self.rows,
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["levels"]), {k: list(v) for k, v in d["rows"].items()}, dict(d["counts"]))


class UnconditionalQuantile:
    """Predicts the training split's empirical alpha-quantile for every state."""

    def __init__(self, train):
        self.actions = np.asarray(train.actions, dtype=float)
        self.n_features = train.states.shape[1]
        self._cache = {}

    def constant(self, alpha, dim=0):
        key = (float(alpha), dim)
        if key not in self._cache:
            self._cache[key] = empirical_quantile(self.actions[:, dim], alpha)
        return self._cache[key]

    def quantile(self, states, alpha, dim=0, prefix=None):
        check_level(alpha)
        n = len(np.atleast_2d(states))
        return np.full(n, self.constant(alpha, dim))


def eval_method(model, test, levels=LEVELS, dims=1):
    """Mean pinball loss of ``model`` on ``test`` at each level.

    For two dimensions each cell is the unweighted mean of the per-dimension
    losses, with dimension 2 conditioned on the observed longitudinal action.
    """
    row = []
    for alpha in levels:
        losses = []
        for j in range(dims):
            preds = model.quantile(test.states, alpha, j, test.actions if j else None)
            losses.append(mean_tal(test.actions[:, j], np.asarray(preds), alpha))
        row.append(float(np.mean(losses)))
    return row


def baseline_unconditional(train, test, levels=LEVELS, dims=1):
    return eval_method(UnconditionalQuantile(train), test, levels, dims)


def build_table(models, test, levels=LEVELS, dims=1):
    """``models`` maps method names to anything with a ``quantile`` method."""
    table = EvalTable(tuple(levels))
    for name, model in models.items():
        table.add_row(name, eval_method(model, test, levels, dims), len(test))
    return table


def trace_csv_text(trace):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace.rows():
        w.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def read_trace_csv(path):
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        trace = RolloutTrace()
        for row in reader:
            for name, value in zip(TRACE_COLUMNS, row):
                getattr(trace, name).append(float(value))
    return trace


def export(obj, path, fmt="csv", manifest=None):
    """Write a table or trace to ``path`` as ``csv`` or ``json``.

    For traces written as CSV, ``manifest`` (if given) goes to a sidecar
    ``<path>.json``. Output bytes depend only on the inputs.
    """
    path = Path(path)
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown export format {fmt!r}")
    if isinstance(obj, EvalTable):
        text = obj.to_csv_text() if fmt == "csv" else json.dumps(obj.to_dict(), indent=2, sort_keys=True)
    elif isinstance(obj, RolloutTrace):
        if fmt == "csv":
            text = trace_csv_text(obj)
        else:
            data = {c: list(getattr(obj, c)) for c in TRACE_COLUMNS}
            data["terminal"] = obj.terminal
            text = json.dumps(data, indent=2, sort_keys=True)
    else:
        raise TypeError(f"cannot export {type(obj).__name__}")
    try:
        path.write_text(text)
        if manifest is not None:
            sidecar = path.with_suffix(path.suffix + ".json")
            sidecar.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path
