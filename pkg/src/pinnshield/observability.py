"""Observability of linear time-invariant systems ``x' = A x``, ``y = C x``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, ParseError

DEFAULT_TOLERANCE = 1e-10


@dataclass
class ObservabilitySystem:
    A: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.C = np.asarray(self.C, dtype=float)
        n = self.A.shape[0]
        if self.C.ndim == 1:
            self.C = self.C.reshape(-1, n) if self.C.size else np.zeros((0, n))
        if self.A.shape != (n, n):
            raise ConfigurationError(f"A must be square, got {self.A.shape}")
        if self.C.ndim != 2 or self.C.shape[1] != n:
            raise ConfigurationError(f"C must have {n} columns, got shape {self.C.shape}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.C))):
            raise ConfigurationError("system matrices must be finite")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.C.shape[0]


def observability_matrix(system):
    """Stack ``C, CA, ..., CA^(n-1)`` into an ``(n*p, n)`` matrix."""
    blocks = [system.C]
    for _ in range(system.n - 1):
        blocks.append(blocks[-1] @ system.A)
    return np.vstack(blocks)


def controllability_matrix(A, B):
    """``[B, AB, ..., A^(n-1) B]``; used for duality checks."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def rank(matrix, tolerance=DEFAULT_TOLERANCE):
    """Numerical rank from a column-pivoted QR factorization.

    Diagonal entries of ``R`` whose magnitude is at most ``tolerance`` times
    the largest one count as zero.
    """
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.size == 0:
        return 0
    if not np.all(np.isfinite(m)):
        raise ConfigurationError("matrix has non-finite entries")
    r = scipy.linalg.qr(m, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return 0
    return int(np.sum(diag > tolerance * diag[0]))


def is_observable(system, tolerance=DEFAULT_TOLERANCE):
    r = rank(observability_matrix(system), tolerance)
    return r == system.n, r


def read_system(path):
    """Read a system file: an ``[A]`` block then a ``[C]`` block of CSV rows.

    Blank lines and lines starting with ``#`` are ignored. An empty ``[C]``
    block means no measurements.
    """
    blocks = {}
    current = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip().upper()
                if current not in ("A", "C"):
                    raise ParseError(f"{path}:{lineno}: unknown block {line}", line=lineno)
                if current in blocks:
                    raise ParseError(f"{path}:{lineno}: duplicate block {line}", line=lineno)
                blocks[current] = []
                continue
            if current is None:
                raise ParseError(f"{path}:{lineno}: data before [A] or [C] header", line=lineno)
            try:
                blocks[current].append([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}", line=lineno) from exc
    if "A" not in blocks:
        raise ParseError(f"{path}: missing [A] block")
    a_rows = blocks["A"]
    c_rows = blocks.get("C", [])
    for name, rows in (("A", a_rows), ("C", c_rows)):
        if rows and len({len(r) for r in rows}) != 1:
            raise ParseError(f"{path}: ragged rows in [{name}] block")
    n = len(a_rows)
    C = np.array(c_rows, dtype=float) if c_rows else np.zeros((0, n))
    try:
        return ObservabilitySystem(np.array(a_rows, dtype=float), C)
    except ConfigurationError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_system(system, path):
    lines = ["[A]"]
    lines += [",".join(format(float(v), ".17g") for v in row) for row in system.A]
    lines.append("[C]")
    lines += [",".join(format(float(v), ".17g") for v in row) for row in system.C]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
