"""Training/testing sets built from snapshot series, and the accuracy metric."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DegenerateNormalizationError, EmptyWindowError, ParseError

COLUMNS = ("x", "y", "t", "u", "v")


class LabeledSample(NamedTuple):
    x: float
    y: float
    t: float
    u: float
    v: float


@dataclass
class SampleSet:
    """Column arrays of labeled samples (struct-of-arrays)."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in COLUMNS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        n = len(self.x)
        if any(len(getattr(self, c)) != n for c in COLUMNS):
            raise ConfigurationError("sample columns have different lengths")

    @classmethod
    def empty(cls):
        return cls(*(np.zeros(0) for _ in COLUMNS))

    @classmethod
    def from_rows(cls, rows):
        arr = np.asarray(list(rows), dtype=float).reshape(-1, 5)
        return cls(*arr.T)

    def __len__(self):
        return len(self.x)

    def __iter__(self):
        for row in zip(self.x, self.y, self.t, self.u, self.v):
            yield LabeledSample(*map(float, row))

    def __getitem__(self, index):
        return SampleSet(*(getattr(self, c)[index] for c in COLUMNS))

    def as_array(self):
        return np.stack([getattr(self, c) for c in COLUMNS], axis=1)

    def points(self):
        return np.stack([self.x, self.y, self.t], axis=1)

    def __eq__(self, other):
        if not isinstance(other, SampleSet):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in COLUMNS)


def window_indices(snapshot, window, spatial_stride=1):
    """Row/column indices of unmasked cell centers inside ``window``."""
    (x1, x2), (y1, y2) = window
    if x2 < x1 or y2 < y1:
        raise ConfigurationError(f"window {window} is not ordered")
    if spatial_stride < 1:
        raise ConfigurationError("spatial_stride must be >= 1")
    tol = 1e-9 * max(snapshot.dx, snapshot.dy)
    cols = np.nonzero((snapshot.xc >= x1 - tol) & (snapshot.xc <= x2 + tol))[0][::spatial_stride]
    rows = np.nonzero((snapshot.yc >= y1 - tol) & (snapshot.yc <= y2 + tol))[0][::spatial_stride]
    jj, ii = np.meshgrid(rows, cols, indexing="ij")
    keep = ~snapshot.mask[jj, ii]
    return jj[keep], ii[keep]


def extract_window(snapshots, window, spatial_stride=1):
    """Samples at every unmasked grid point inside ``window`` for every snapshot.

    Ordering: snapshot by snapshot, then row-major (y outer, x inner).
    """
    if not snapshots:
        raise EmptyWindowError("no snapshots given")
    jj, ii = window_indices(snapshots[0], window, spatial_stride)
    if len(jj) == 0:
        raise EmptyWindowError(f"window {window} contains no fluid grid points")
    first = snapshots[0]
    xs = first.xc[ii]
    ys = first.yc[jj]
    parts = []
    for snap in snapshots:
        if snap.u.shape != first.u.shape:
            raise ConfigurationError("snapshots have different grid shapes")
        parts.append(
            np.stack([xs, ys, np.full(len(xs), snap.time), snap.u[jj, ii], snap.v[jj, ii]], axis=1)
        )
    return SampleSet(*np.concatenate(parts).T)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must lie in (0, 1)")


def split(samples, spec=SplitSpec()):
    """Seeded split by spatial coordinate.

    Every time instant of a coordinate lands on the same side. With ``C``
    distinct coordinates the training side gets ``ceil(f * C)`` of them
    (capped at ``C - 1`` so the test side is never empty). Within each side
    the original sample order is kept.
    """
    if len(samples) < 2:
        raise ConfigurationError(f"need at least 2 samples to split, got {len(samples)}")
    coords = np.stack([samples.x, samples.y], axis=1)
    uniq, first, inverse = np.unique(coords, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    c = len(uniq)
    if c < 2:
        raise ConfigurationError("need at least 2 distinct coordinates to split")
    # canonical order: first appearance in the input
    order = np.argsort(first, kind="stable")
    rank = np.empty(c, dtype=np.int64)
    rank[order] = np.arange(c)
    perm = np.random.default_rng(spec.seed).permutation(c)
    n_train = min(math.ceil(spec.train_fraction * c - 1e-9), c - 1)
    in_train = np.zeros(c, dtype=bool)
    in_train[perm[:n_train]] = True
    mask = in_train[rank[inverse]]
    return samples[mask], samples[~mask]


@dataclass(frozen=True)
class AccuracyReport:
    u_accuracy: float
    v_accuracy: float
    sample_count: int
    u_range: float
    v_range: float
    u_mae: float
    v_mae: float

    def as_dict(self):
        return dict(self.__dict__)

    def format(self):
        return (
            f"samples     {self.sample_count}\n"
            f"u_accuracy  {self.u_accuracy:.7f} %  (mae {self.u_mae:.6g}, range {self.u_range:.6g})\n"
            f"v_accuracy  {self.v_accuracy:.7f} %  (mae {self.v_mae:.6g}, range {self.v_range:.6g})\n"
        )


def _uv(data):
    if isinstance(data, SampleSet):
        return np.stack([data.u, data.v], axis=1)
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigurationError(f"expected (N, 2) velocities, got shape {arr.shape}")
    return arr


def accuracy(predictions, truths):
    """Range-normalized mean absolute error complement, in percent, per component.

    ``accuracy_c = 100 * (1 - mean|pred_c - true_c| / (max true_c - min true_c))``.
    """
    pred, true = _uv(predictions), _uv(truths)
    if len(pred) != len(true) or len(true) == 0:
        raise ConfigurationError("predictions and truths must be nonempty and equally long")
    mae = np.mean(np.abs(pred - true), axis=0)
    rng = np.max(true, axis=0) - np.min(true, axis=0)
    if np.any(rng == 0):
        bad = "u" if rng[0] == 0 else "v"
        raise DegenerateNormalizationError(
            f"ground-truth {bad} has zero range; raw MAE u={mae[0]:.6g} v={mae[1]:.6g}", mae=mae
        )
    acc = 100.0 * (1.0 - mae / rng)
    return AccuracyReport(
        float(acc[0]), float(acc[1]), len(true), float(rng[0]), float(rng[1]), float(mae[0]), float(mae[1])
    )


def write_samples(samples, path):
    lines = [",".join(COLUMNS)]
    for row in samples.as_array():
        lines.append(",".join(format(float(v), ".17g") for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_samples(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != ",".join(COLUMNS):
            raise ParseError(f"{path}:1: expected header 'x,y,t,u,v', got {header!r}", line=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}", line=lineno)
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}", line=lineno) from exc
    if not rows:
        return SampleSet.empty()
    return SampleSet(*np.asarray(rows).T)
