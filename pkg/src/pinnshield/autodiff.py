"""Exact input derivatives of tanh networks plus parameter gradients.

Input derivatives are obtained by pushing truncated multivariate Taylor
polynomials in ``(x, y, t)`` forward through the network. Each activation is
a polynomial of width ``K`` (one coefficient per multi-index in a
downward-closed set), so affine layers act coefficient-wise and ``tanh`` is
composed through its own Taylor series. The result is exact up to rounding,
not a difference quotient.

Everything is written in torch (float64), so reverse-mode differentiation of
any loss assembled from these jets yields parameter gradients, including
gradients of PDE residuals.

A "model" here is anything with ``weights`` / ``biases`` lists (numpy arrays,
``weights[l]`` of shape ``(out, in)``), optional ``lower`` / ``upper`` input
bounds used for affine normalization to ``[-1, 1]``, and an optional
``formulation``: ``"stream"`` maps raw outputs ``(psi, p)`` to channels
``(u, v, p)`` with ``u = psi_y`` and ``v = -psi_x``; anything else exposes the
raw outputs as channels.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch

from .errors import ConfigurationError

DTYPE = torch.float64

X, Y, T = (1, 0, 0), (0, 1, 0), (0, 0, 1)
ZERO = (0, 0, 0)


def _add(a, b):
    return tuple(i + j for i, j in zip(a, b))


def _closure(indices):
    out = set()
    for idx in indices:
        for sub in itertools.product(*(range(k + 1) for k in idx)):
            out.add(sub)
    return sorted(out, key=lambda m: (sum(m), tuple(-k for k in m)))


class TaylorBasis:
    """Downward-closed set of multi-indices with its truncated product table."""

    def __init__(self, required):
        self.indices = _closure(set(required) | {ZERO})
        self.position = {m: k for k, m in enumerate(self.indices)}
        self.order = max(sum(m) for m in self.indices)
        # products[k] lists (i, j) with indices[i] + indices[j] == indices[k],
        # both nonconstant
        self.products = [[] for _ in self.indices]
        for a, ma in enumerate(self.indices):
            for b, mb in enumerate(self.indices):
                if ma == ZERO or mb == ZERO:
                    continue
                mc = _add(ma, mb)
                if mc in self.position:
                    self.products[self.position[mc]].append((a, b))
        self.factorial = {m: float(np.prod([math.factorial(k) for k in m])) for m in self.indices}

    def __len__(self):
        return len(self.indices)

    def multiply_nilpotent(self, a, b):
        """Truncated product of two jets (lists of planes) with zero constant terms."""
        out = []
        for pairs in self.products:
            acc = None
            for i, j in pairs:
                if a[i] is None or b[j] is None:
                    continue
                term = a[i] * b[j]
                acc = term if acc is None else acc + term
            out.append(acc)
        return out

    def derivative(self, jet, m):
        """∂^m from the Taylor coefficients (coefficient times m!)."""
        return jet[self.position[m]] * self.factorial[m]


VALUE_BASIS = TaylorBasis([ZERO])
GRADIENT_BASIS = TaylorBasis([X, Y, T])
# channels (u, v, p) taken straight from the outputs
DIRECT_BASIS = TaylorBasis([X, Y, T, (2, 0, 0), (0, 2, 0)])
# u = psi_y, v = -psi_x: second partials of u, v need third partials of psi
STREAM_BASIS = TaylorBasis(
    [(1, 1, 0), (0, 2, 0), (0, 1, 1), (2, 0, 0), (1, 0, 1), (2, 1, 0), (0, 3, 0), (3, 0, 0), (1, 2, 0)]
)
STREAM_VELOCITY_BASIS = TaylorBasis([X, Y])


def _tanh_compose(z, basis):
    """tanh of a jet given as a list of planes (``None`` marks a zero plane)."""
    a = torch.tanh(z[0])
    if len(basis) == 1:
        return [a]
    d1 = 1.0 - a * a
    delta = [None] + list(z[1:])
    out = [a] + [d1 * zk for zk in z[1:]]
    if basis.order >= 2:
        c2 = -a * d1  # second derivative of tanh over 2!
        delta2 = basis.multiply_nilpotent(delta, delta)
        for k, term in enumerate(delta2):
            if term is not None:
                out[k] = out[k] + c2 * term
        if basis.order >= 3:
            c3 = d1 * (a * a - 1.0 / 3.0)  # third derivative over 3!
            for k, term in enumerate(basis.multiply_nilpotent(delta2, delta)):
                if term is not None:
                    out[k] = out[k] + c3 * term
    return out


def input_affine(model):
    """Per-input (scale, shift) mapping raw inputs to the network's input space."""
    lower = getattr(model, "lower", None)
    upper = getattr(model, "upper", None)
    if lower is None or upper is None:
        return np.ones(3), np.zeros(3)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    scale = 2.0 / (upper - lower)
    return scale, -1.0 - lower * scale


def propagate(params, inputs, basis, scale=None, shift=None):
    """Push a Taylor jet of the inputs through the network.

    ``params`` alternates weight and bias tensors. ``inputs`` has shape
    ``(N, 3)``. Returns the output jet of shape ``(K, N, out_width)``.
    """
    scale = torch.ones(3, dtype=DTYPE) if scale is None else torch.as_tensor(scale, dtype=DTYPE)
    shift = torch.zeros(3, dtype=DTYPE) if shift is None else torch.as_tensor(shift, dtype=DTYPE)
    n = inputs.shape[0]
    h = [inputs * scale + shift]
    for m in basis.indices[1:]:
        plane = torch.zeros((n, 3), dtype=DTYPE)
        if sum(m) == 1:
            axis = m.index(1)
            plane[:, axis] = scale[axis]
        h.append(plane)
    nlayers = len(params) // 2
    for layer in range(nlayers):
        w, b = params[2 * layer], params[2 * layer + 1]
        z = list(torch.unbind(torch.stack(h) @ w.T))
        z[0] = z[0] + b
        h = _tanh_compose(z, basis) if layer < nlayers - 1 else z
    return torch.stack(h)


def check_shapes(model):
    weights, biases = model.weights, model.biases
    if len(weights) != len(biases) or not weights:
        raise ConfigurationError("model needs matching, nonempty weight and bias lists")
    width = 3
    for k, (w, b) in enumerate(zip(weights, biases)):
        w = np.asarray(w)
        b = np.asarray(b)
        if w.ndim != 2 or w.shape[1] != width or b.shape != (w.shape[0],):
            raise ConfigurationError(
                f"layer {k}: weight {w.shape} / bias {b.shape} do not follow width {width}"
            )
        width = w.shape[0]
    return width


def torch_params(model, requires_grad=False):
    out = []
    for w, b in zip(model.weights, model.biases):
        for arr in (w, b):
            t = torch.tensor(np.asarray(arr, dtype=float), dtype=DTYPE)
            out.append(t.requires_grad_(requires_grad))
    return out


class Channels(NamedTuple):
    """Per-channel derivative tensors, each of shape ``(N, C)``."""

    value: torch.Tensor
    dx: torch.Tensor
    dy: torch.Tensor
    dt: torch.Tensor
    dxx: torch.Tensor
    dyy: torch.Tensor


def channel_jet(params, inputs, formulation=None, scale=None, shift=None):
    """Torch-level jet of the physical channels (autograd-friendly)."""
    if formulation == "stream":
        basis = STREAM_BASIS
        out = propagate(params, inputs, basis, scale, shift)
        d = lambda m, c: basis.derivative(out, m)[:, c]  # noqa: E731
        psi_u = [(0, 1, 0), (1, 1, 0), (0, 2, 0), (0, 1, 1), (2, 1, 0), (0, 3, 0)]
        psi_v = [(1, 0, 0), (2, 0, 0), (1, 1, 0), (1, 0, 1), (3, 0, 0), (1, 2, 0)]
        p_idx = [ZERO, X, Y, T, (2, 0, 0), (0, 2, 0)]
        cols = []
        for mu, mv, mp in zip(psi_u, psi_v, p_idx):
            cols.append(torch.stack([d(mu, 0), -d(mv, 0), d(mp, 1)], dim=1))
        return Channels(*cols)
    basis = DIRECT_BASIS
    out = propagate(params, inputs, basis, scale, shift)
    return Channels(*(basis.derivative(out, m) for m in (ZERO, X, Y, T, (2, 0, 0), (0, 2, 0))))


def channel_values(params, inputs, formulation=None, scale=None, shift=None):
    """Torch-level channel values only (cheaper basis than :func:`channel_jet`)."""
    if formulation == "stream":
        basis = STREAM_VELOCITY_BASIS
        out = propagate(params, inputs, basis, scale, shift)
        psi_x = basis.derivative(out, X)[:, 0]
        psi_y = basis.derivative(out, Y)[:, 0]
        return torch.stack([psi_y, -psi_x, out[0][:, 1]], dim=1)
    return propagate(params, inputs, VALUE_BASIS, scale, shift)[0]


@dataclass(frozen=True)
class DiffPoint:
    x: float
    y: float
    t: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.t)):
            raise ConfigurationError(f"non-finite point {self}")

    def as_array(self):
        return np.array([[self.x, self.y, self.t]], dtype=float)


@dataclass
class FieldJet:
    """Values and partials per channel.

    Arrays have shape ``(C,)`` for a single point or ``(N, C)`` for a batch.
    """

    value: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dt: np.ndarray
    dxx: np.ndarray
    dyy: np.ndarray
    channels: tuple = field(default=())

    FIELDS = ("value", "dx", "dy", "dt", "dxx", "dyy")

    def entries(self):
        return {name: getattr(self, name) for name in self.FIELDS}

    def channel(self, name):
        k = self.channels.index(name)
        return {f: v[..., k] for f, v in self.entries().items()}


def _as_points(point):
    if isinstance(point, DiffPoint):
        return point.as_array(), True
    arr = np.asarray(point, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != 3:
        raise ConfigurationError(f"points must have 3 coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError("non-finite point")
    return arr, single


def channel_names(model):
    if getattr(model, "formulation", None) in ("stream", "direct"):
        return ("u", "v", "p")
    return tuple(f"out{k}" for k in range(np.asarray(model.weights[-1]).shape[0]))


def evaluate_jet(model, point):
    """Exact values, first partials and ∂²/∂x², ∂²/∂y² of every channel."""
    check_shapes(model)
    pts, single = _as_points(point)
    scale, shift = input_affine(model)
    with torch.no_grad():
        ch = channel_jet(
            torch_params(model),
            torch.tensor(pts, dtype=DTYPE),
            getattr(model, "formulation", None),
            scale,
            shift,
        )
    arrays = [t.numpy().copy() for t in ch]
    if single:
        arrays = [a[0] for a in arrays]
    return FieldJet(*arrays, channels=channel_names(model))


def forward_numpy(model, points):
    """Plain numpy forward pass returning raw outputs, shape (N, out)."""
    scale, shift = input_affine(model)
    h = np.asarray(points, dtype=float) * scale + shift
    n = len(model.weights)
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ np.asarray(w).T + np.asarray(b)
        if k < n - 1:
            h = np.tanh(h)
    return h


def _fd_channel_fn(model, step):
    if getattr(model, "formulation", None) != "stream":
        return lambda pts: forward_numpy(model, pts)

    def fn(pts):
        pts = np.asarray(pts, dtype=float)
        ex = np.array([step, 0.0, 0.0])
        ey = np.array([0.0, step, 0.0])
        psi_x = (forward_numpy(model, pts + ex)[:, 0] - forward_numpy(model, pts - ex)[:, 0]) / (2 * step)
        psi_y = (forward_numpy(model, pts + ey)[:, 0] - forward_numpy(model, pts - ey)[:, 0]) / (2 * step)
        return np.stack([psi_y, -psi_x, forward_numpy(model, pts)[:, 1]], axis=1)

    return fn


def finite_difference_jet(model, point, step):
    """Central-difference approximation of every :class:`FieldJet` entry.

    ``model`` may also be a callable mapping an ``(N, 3)`` array to channel
    values of shape ``(N, C)``. For stream-function models the velocity
    channels are themselves central differences of ``psi`` (same step), so
    their second partials carry ``O(eps / step**3)`` rounding.
    """
    if step <= 0:
        raise ConfigurationError("step must be positive")
    pts, single = _as_points(point)
    if callable(model) and not hasattr(model, "weights"):
        fn = model
        names = ()
    else:
        fn = _fd_channel_fn(model, step)
        names = channel_names(model)
    f0 = np.asarray(fn(pts), dtype=float)
    entries = {"value": f0}
    for name, axis in (("x", 0), ("y", 1), ("t", 2)):
        e = np.zeros(3)
        e[axis] = step
        fp = np.asarray(fn(pts + e), dtype=float)
        fm = np.asarray(fn(pts - e), dtype=float)
        entries["d" + name] = (fp - fm) / (2 * step)
        if name in ("x", "y"):
            entries["d" + name * 2] = (fp - 2 * f0 + fm) / step**2
    arrays = [entries[k] for k in FieldJet.FIELDS]
    if single:
        arrays = [a[0] for a in arrays]
    return FieldJet(*arrays, channels=names)


def flatten(arrays):
    return np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])


def parameter_count(model):
    return sum(np.asarray(w).size + np.asarray(b).size for w, b in zip(model.weights, model.biases))


def parameter_gradient(model, loss_fn: Callable):
    """Gradient of ``loss_fn(params)`` with respect to every weight and bias.

    ``loss_fn`` receives the torch parameter list (weights and biases
    interleaved, layer order) and returns a scalar. The result is flattened in
    the same order as :func:`flatten` of the parameters.
    """
    params = torch_params(model, requires_grad=True)
    loss = loss_fn(params)
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        return np.zeros(parameter_count(model))
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return np.concatenate(
        [
            (torch.zeros_like(p) if g is None else g).detach().numpy().ravel()
            for p, g in zip(params, grads)
        ]
    )


def finite_difference_gradient(model, loss_fn: Callable, step=1e-5):
    """Central-difference parameter gradient; independent check for :func:`parameter_gradient`."""
    base = [torch.tensor(np.asarray(a, dtype=float), dtype=DTYPE) for a in _interleave(model)]
    grad = []
    with torch.no_grad():
        for k, p in enumerate(base):
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                fp = float(loss_fn(base))
                flat[i] = old - step
                fm = float(loss_fn(base))
                flat[i] = old
                grad.append((fp - fm) / (2 * step))
    return np.array(grad)


def _interleave(model):
    out = []
    for w, b in zip(model.weights, model.biases):
        out.extend([w, b])
    return out
