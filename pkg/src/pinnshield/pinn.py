"""Physics-informed tanh network for 2D incompressible flow.

Two output heads are supported. The stream-function head predicts
``(psi, p)`` and derives ``u = psi_y``, ``v = -psi_x``, so continuity holds by
construction. The direct head predicts ``(u, v, p)`` and must learn
continuity through the residual penalty.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import autodiff as ad
from .errors import ConfigurationError, DivergenceError, InvalidBatchError, ParseError, VersionError

log = logging.getLogger(__name__)

DEFAULT_LAYERS = (3,) + (20,) * 7
OUTPUT_WIDTH = {"stream": 2, "direct": 3}

MAGIC = b"PINNCKPT"
FORMAT_VERSION = 1
_FORMULATION_TAGS = {"stream": 0, "direct": 1}


@dataclass(frozen=True)
class FluidProperties:
    nu: float = 0.01
    rho: float = 1.0

    def __post_init__(self):
        if not (self.nu > 0 and self.rho > 0):
            raise ConfigurationError(f"nu and rho must be positive, got {self.nu}, {self.rho}")


@dataclass
class PinnModel:
    """Network parameters plus the head formulation and fluid constants.

    ``lower`` / ``upper`` are the input bounds mapped to ``[-1, 1]`` before the
    first layer; ``None`` means raw inputs.
    """

    layer_sizes: tuple
    weights: list
    biases: list
    formulation: str = "stream"
    fluid: FluidProperties = field(default_factory=FluidProperties)
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if self.formulation not in OUTPUT_WIDTH:
            raise ConfigurationError(f"unknown formulation {self.formulation!r}")
        if self.layer_sizes[0] != 3:
            raise ConfigurationError("first layer width must be 3 (x, y, t)")
        want = OUTPUT_WIDTH[self.formulation]
        if self.layer_sizes[-1] != want:
            raise ConfigurationError(
                f"{self.formulation} formulation needs output width {want}, "
                f"got {self.layer_sizes[-1]}"
            )
        if (self.lower is None) != (self.upper is None):
            raise ConfigurationError("lower and upper bounds must be given together")
        if self.lower is not None:
            self.lower = np.asarray(self.lower, dtype=float).reshape(3)
            self.upper = np.asarray(self.upper, dtype=float).reshape(3)
            if np.any(self.upper <= self.lower):
                raise ConfigurationError("input bounds must satisfy upper > lower")
        width = ad.check_shapes(self)
        shapes = [(b, a) for a, b in zip(self.layer_sizes, self.layer_sizes[1:])]
        if [np.shape(w) for w in self.weights] != shapes or width != self.layer_sizes[-1]:
            raise ConfigurationError("weights do not match layer_sizes")

    @property
    def parameter_count(self):
        return ad.parameter_count(self)

    def parameters(self):
        return ad.flatten(ad._interleave(self))

    def with_parameters(self, flat):
        """Copy of the model with parameters taken from a flat vector."""
        flat = np.asarray(flat, dtype=float)
        weights, biases, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[k : k + w.size].reshape(w.shape).copy())
            k += w.size
            biases.append(flat[k : k + b.size].copy())
            k += b.size
        return PinnModel(
            self.layer_sizes, weights, biases, self.formulation, self.fluid,
            None if self.lower is None else self.lower.copy(),
            None if self.upper is None else self.upper.copy(),
        )


@dataclass(frozen=True)
class ResidualTriple:
    f_c: np.ndarray
    f_u: np.ndarray
    f_v: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    data_weight: float = 1.0
    residual_weight: float = 1.0
    learning_rate: float = 1e-3
    iterations: int = 20000
    decay_every: int = 5000
    decay_factor: float = 0.5
    batch_size: int = 1024
    collocation_batch: int = 512
    # None: 4x the number of training samples
    collocation_count: int = None
    seed: int = 0
    log_every: int = 1000

    def validate(self):
        if self.data_weight < 0 or self.residual_weight < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.data_weight == 0 and self.residual_weight == 0:
            raise ConfigurationError("at least one loss weight must be positive")
        if self.iterations < 0:
            raise ConfigurationError("iteration budget must be nonnegative")
        if self.collocation_count is not None and self.collocation_count < 1:
            raise ConfigurationError("collocation_count must be positive")
        if self.batch_size < 1 or self.collocation_batch < 1:
            raise ConfigurationError("batch sizes must be positive")
        return self


def init_model(layer_sizes=None, formulation="stream", fluid=None, seed=0, lower=None, upper=None):
    """Gaussian weights with std 1/sqrt(fan_in), zero biases; deterministic in ``seed``."""
    if layer_sizes is None:
        layer_sizes = DEFAULT_LAYERS + (OUTPUT_WIDTH.get(formulation, 0),)
    layer_sizes = tuple(int(n) for n in layer_sizes)
    if formulation in OUTPUT_WIDTH and layer_sizes[-1] != OUTPUT_WIDTH[formulation]:
        raise ConfigurationError(
            f"{formulation} formulation needs output width {OUTPUT_WIDTH[formulation]}, "
            f"got {layer_sizes[-1]}"
        )
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return PinnModel(layer_sizes, weights, biases, formulation, fluid or FluidProperties(), lower, upper)


def _affine(model):
    return ad.input_affine(model)


def _points(x, y, t):
    x, y, t = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(y, dtype=float), np.asarray(t, dtype=float)
    )
    return np.stack([x.ravel(), y.ravel(), t.ravel()], axis=1), x.shape


def predict(model, x, y, t):
    """Velocity and pressure at the query points (scalars or broadcastable arrays)."""
    pts, shape = _points(x, y, t)
    scale, shift = _affine(model)
    with torch.no_grad():
        out = ad.channel_values(
            ad.torch_params(model), torch.tensor(pts, dtype=ad.DTYPE), model.formulation, scale, shift
        ).numpy()
    u, v, p = (out[:, k].reshape(shape) for k in range(3))
    if shape == ():
        return float(u), float(v), float(p)
    return u, v, p


def _residuals_torch(params, pts, model):
    scale, shift = _affine(model)
    ch = ad.channel_jet(params, pts, model.formulation, scale, shift)
    nu, rho = model.fluid.nu, model.fluid.rho
    u, v = ch.value[:, 0], ch.value[:, 1]
    f_c = ch.dx[:, 0] + ch.dy[:, 1]
    f_u = (
        ch.dt[:, 0] + u * ch.dx[:, 0] + v * ch.dy[:, 0] + ch.dx[:, 2] / rho
        - nu * (ch.dxx[:, 0] + ch.dyy[:, 0])
    )
    f_v = (
        ch.dt[:, 1] + u * ch.dx[:, 1] + v * ch.dy[:, 1] + ch.dy[:, 2] / rho
        - nu * (ch.dxx[:, 1] + ch.dyy[:, 1])
    )
    return f_c, f_u, f_v


def physics_residuals(model, point):
    """Continuity and momentum residuals at one point or an ``(N, 3)`` batch."""
    if isinstance(point, ad.DiffPoint):
        pts, single = point.as_array(), True
    else:
        pts = np.asarray(point, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
    with torch.no_grad():
        res = _residuals_torch(ad.torch_params(model), torch.tensor(pts, dtype=ad.DTYPE), model)
    arrays = [r.numpy().copy() for r in res]
    if single:
        arrays = [float(a[0]) for a in arrays]
    return ResidualTriple(*arrays)


def _ordered_mean(values):
    # summing in sorted order makes the reduction independent of batch order
    flat = values.reshape(-1)
    return torch.sort(flat).values.sum() / flat.numel()


def _loss_terms(params, model, data, colloc, config):
    zero = torch.zeros((), dtype=ad.DTYPE)
    data_term, residual_term = zero, zero
    scale, shift = _affine(model)
    if config.data_weight > 0:
        pts, target = data
        pred = ad.channel_values(params, pts, model.formulation, scale, shift)[:, :2]
        data_term = _ordered_mean((pred - target) ** 2)
    if config.residual_weight > 0:
        res = torch.stack(_residuals_torch(params, colloc, model), dim=1)
        residual_term = _ordered_mean(res**2)
    total = config.data_weight * data_term + config.residual_weight * residual_term
    return total, data_term, residual_term


def _data_tensors(batch):
    if batch is None:
        return None
    pts = np.stack([batch.x, batch.y, batch.t], axis=1)
    target = np.stack([batch.u, batch.v], axis=1)
    return torch.tensor(pts, dtype=ad.DTYPE), torch.tensor(target, dtype=ad.DTYPE)


def loss(model, data_batch, collocation_batch, config):
    """``(total, data_term, residual_term)`` as floats.

    ``data_batch`` is a sample set with ``x, y, t, u, v`` arrays;
    ``collocation_batch`` is an ``(M, 3)`` array of ``(x, y, t)`` points.
    """
    n_data = 0 if data_batch is None else len(data_batch)
    n_col = 0 if collocation_batch is None else len(collocation_batch)
    if config.data_weight > 0 and n_data == 0:
        raise InvalidBatchError("data batch is empty but data_weight > 0")
    if config.residual_weight > 0 and n_col == 0:
        raise InvalidBatchError("collocation batch is empty but residual_weight > 0")
    colloc = None
    if n_col:
        colloc = torch.tensor(np.asarray(collocation_batch, dtype=float).reshape(-1, 3), dtype=ad.DTYPE)
    with torch.no_grad():
        terms = _loss_terms(ad.torch_params(model), model, _data_tensors(data_batch), colloc, config)
    return tuple(float(t) for t in terms)


def sample_collocation(bounds_low, bounds_high, count, seed):
    """Uniform seeded points in the box ``[low, high]`` over (x, y, t)."""
    rng = np.random.default_rng(seed)
    low = np.asarray(bounds_low, dtype=float)
    high = np.asarray(bounds_high, dtype=float)
    return low + (high - low) * rng.random((count, 3))


@dataclass
class TrainResult:
    model: PinnModel
    history: np.ndarray  # (iterations, 3): total, data, residual
    collocation: np.ndarray


def train(model, training_set, config, collocation_bounds=None):
    """Adam with step decay on minibatches of data and collocation points.

    Collocation points are drawn once, uniformly inside ``collocation_bounds``
    (``(low, high)`` over ``(x, y, t)``; default the bounding box of the
    training set). Returns ``(trained_model, history)`` where ``history`` has
    one ``(total, data, residual)`` row per iteration.
    """
    config.validate()
    if len(training_set) == 0:
        raise InvalidBatchError("training set is empty")
    if config.iterations == 0:
        return model, np.zeros((0, 3))

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if collocation_bounds is None:
        collocation_bounds = (
            [training_set.x.min(), training_set.y.min(), training_set.t.min()],
            [training_set.x.max(), training_set.y.max(), training_set.t.max()],
        )
    n_col = config.collocation_count or 4 * len(training_set)
    colloc_all = torch.tensor(
        sample_collocation(*collocation_bounds, n_col, config.seed + 1), dtype=ad.DTYPE
    )
    data_pts, data_target = _data_tensors(training_set)

    params = ad.torch_params(model, requires_grad=True)
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    history = np.zeros((config.iterations, 3))
    n_data = len(training_set)
    for it in range(config.iterations):
        if config.decay_every and it and it % config.decay_every == 0:
            for group in opt.param_groups:
                group["lr"] *= config.decay_factor
        di = rng.integers(0, n_data, size=min(config.batch_size, n_data))
        ci = rng.integers(0, n_col, size=min(config.collocation_batch, n_col))
        opt.zero_grad()
        total, d_term, r_term = _loss_terms(
            params, model, (data_pts[di], data_target[di]), colloc_all[ci], config
        )
        if not torch.isfinite(total):
            raise DivergenceError(f"loss became non-finite at iteration {it}", iterations=it)
        total.backward()
        opt.step()
        history[it] = (total.item(), d_term.item(), r_term.item())
        if config.log_every and (it % config.log_every == 0 or it == config.iterations - 1):
            log.info("iter %6d  loss %.4e  data %.4e  residual %.4e", it, *history[it])
    flat = torch.cat([p.detach().reshape(-1) for p in params]).numpy()
    if not np.all(np.isfinite(flat)):
        raise DivergenceError("parameters became non-finite", iterations=config.iterations)
    return model.with_parameters(flat), history


def save_model(model, path):
    header = bytearray(MAGIC)
    header += struct.pack("<II", FORMAT_VERSION, len(model.layer_sizes))
    header += struct.pack(f"<{len(model.layer_sizes)}I", *model.layer_sizes)
    has_bounds = model.lower is not None
    header += struct.pack("<BB", _FORMULATION_TAGS[model.formulation], int(has_bounds))
    header += struct.pack("<dd", model.fluid.nu, model.fluid.rho)
    if has_bounds:
        header += struct.pack("<6d", *model.lower, *model.upper)
    body = model.parameters().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(header) + body)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise ParseError(
                f"checkpoint truncated at byte {len(self.data)} (needed {size} bytes at {self.offset})",
                offset=self.offset,
            )
        out = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return out


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic at byte 0)", offset=0)
    r = _Reader(data)
    r.offset = len(MAGIC)
    version, nlayers = r.take("<II")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if nlayers < 2 or nlayers > 1024:
        raise ParseError(f"implausible layer count {nlayers} at byte {r.offset - 4}", offset=r.offset - 4)
    sizes = r.take(f"<{nlayers}I")
    tag_offset = r.offset
    tag, has_bounds = r.take("<BB")
    tags = {v: k for k, v in _FORMULATION_TAGS.items()}
    if tag not in tags:
        raise ParseError(f"unknown formulation tag {tag} at byte {tag_offset}", offset=tag_offset)
    nu, rho = r.take("<dd")
    lower = upper = None
    if has_bounds:
        b = r.take("<6d")
        lower, upper = np.array(b[:3]), np.array(b[3:])
    count = sum(a * b + b for a, b in zip(sizes, sizes[1:]))
    params = np.array(r.take(f"<{count}d"), dtype=float)
    if r.offset != len(data):
        raise ParseError(f"{len(data) - r.offset} trailing bytes after byte {r.offset}", offset=r.offset)
    template = PinnModel(
        sizes,
        [np.zeros((b, a)) for a, b in zip(sizes, sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
        tags[tag],
        FluidProperties(nu, rho),
        lower,
        upper,
    )
    return template.with_parameters(params)
