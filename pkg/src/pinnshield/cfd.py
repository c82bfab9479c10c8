"""Fractional-step Navier-Stokes solver for channel flow past a circular cylinder.

The discretization is a staggered (MAC) grid: pressure lives at cell centers,
``u`` on the vertical cell faces and ``v`` on the horizontal cell faces. Each
step advances momentum explicitly (limited second-order upwind advection,
central diffusion, two-stage Heun integration), solves a pressure Poisson
equation, and projects the velocity onto the discretely divergence-free space.
Because the divergence, gradient and Laplacian operators are mutually
consistent on the MAC grid, the post-projection divergence equals the Poisson
residual times ``dt``.

Snapshots are reported at cell centers (face values averaged), which is what
the dataset and sensor layers consume.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, NumericalError, OutOfDomainError, ParseError

# Peak speed around the cylinder relative to the free stream, used by the CFL
# check at construction time.
PEAK_VELOCITY_FACTOR = 2.0


@dataclass(frozen=True)
class DomainConfig:
    x_range: tuple = (-15.0, 25.0)
    y_range: tuple = (-8.0, 8.0)
    cylinder_center: tuple = (0.0, 0.0)
    cylinder_diameter: float = 1.0
    nx: int = 200
    ny: int = 80
    nu: float = 0.01
    inflow_velocity: float = 1.0
    dt: float = 0.01
    total_steps: int = 2000
    snapshot_stride: int = 10
    # steps run before t = 0 so that recorded data shows developed shedding
    spinup_steps: int = 3000
    # transverse body-force pulse that breaks the top/bottom symmetry during spin-up
    kick_amplitude: float = 0.5
    kick_duration: float = 2.0
    wall: str = "noslip"  # or "slip"
    inflow: str = "uniform"  # or "extrapolate"
    body_force: float = 0.0
    poisson: str = "direct"  # or "sor"
    poisson_tol: float = 1e-5
    poisson_max_iter: int = 20000
    divergence_tol: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(a) for a in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(a) for a in self.y_range))
        object.__setattr__(
            self, "cylinder_center", tuple(float(a) for a in self.cylinder_center)
        )

    @property
    def dx(self):
        return (self.x_range[1] - self.x_range[0]) / self.nx

    @property
    def dy(self):
        return (self.y_range[1] - self.y_range[0]) / self.ny

    @property
    def reynolds(self):
        return self.inflow_velocity * self.cylinder_diameter / self.nu

    def validate(self):
        x0, x1 = self.x_range
        y0, y1 = self.y_range
        if not (x1 > x0 and y1 > y0):
            raise ConfigurationError("domain ranges must be increasing")
        if self.nx < 2 or self.ny < 2:
            raise ConfigurationError("grid needs at least 2 cells per direction")
        if self.nu <= 0:
            raise ConfigurationError(f"nu must be positive, got {self.nu}")
        if self.inflow_velocity <= 0:
            raise ConfigurationError("inflow_velocity must be positive")
        if self.dt <= 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if self.total_steps < 0 or self.spinup_steps < 0:
            raise ConfigurationError("step counts must be nonnegative")
        if self.snapshot_stride < 1:
            raise ConfigurationError("snapshot_stride must be >= 1")
        if self.cylinder_diameter < 0:
            raise ConfigurationError("cylinder_diameter must be nonnegative")
        if self.wall not in ("noslip", "slip"):
            raise ConfigurationError(f"unknown wall condition {self.wall!r}")
        if self.inflow not in ("uniform", "extrapolate"):
            raise ConfigurationError(f"unknown inflow condition {self.inflow!r}")
        if self.poisson not in ("direct", "sor"):
            raise ConfigurationError(f"unknown poisson method {self.poisson!r}")
        if self.cylinder_diameter > 0:
            cx, cy = self.cylinder_center
            r = 0.5 * self.cylinder_diameter
            if not (x0 < cx - r and cx + r < x1 and y0 < cy - r and cy + r < y1):
                raise ConfigurationError(
                    f"cylinder at {self.cylinder_center} with diameter "
                    f"{self.cylinder_diameter} is not fully inside the domain"
                )
        h = min(self.dx, self.dy)
        u_max = PEAK_VELOCITY_FACTOR * self.inflow_velocity
        dt_adv = 0.5 * h / u_max
        if self.dt > dt_adv:
            raise ConfigurationError(
                f"CFL violation: dt={self.dt:g} exceeds 0.5*min(dx,dy)/u_max = "
                f"{dt_adv:g} (min(dx,dy)={h:g}, u_max={u_max:g})"
            )
        dt_diff = 0.25 * h * h / self.nu
        if self.dt > dt_diff:
            raise ConfigurationError(
                f"diffusion limit violated: dt={self.dt:g} exceeds "
                f"0.25*min(dx,dy)^2/nu = {dt_diff:g} (nu={self.nu:g})"
            )
        return self

    def digest(self):
        text = ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class FlowSnapshot:
    """Cell-centered flow field at one instant.

    ``u``, ``v``, ``p`` and ``mask`` have shape ``(ny, nx)``; row ``j`` is
    ``y = y0 + (j + 0.5) * dy`` and column ``i`` is ``x = x0 + (i + 0.5) * dx``.
    ``(x0, y0)`` is the lower-left domain corner.
    """

    time: float
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    mask: np.ndarray
    x0: float
    y0: float
    dx: float
    dy: float
    divmax: float = 0.0

    @property
    def nx(self):
        return self.u.shape[1]

    @property
    def ny(self):
        return self.u.shape[0]

    @property
    def xc(self):
        return self.x0 + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def yc(self):
        return self.y0 + (np.arange(self.ny) + 0.5) * self.dy

    def coordinates(self):
        """Meshgrid of cell centers, each of shape (ny, nx)."""
        return np.meshgrid(self.xc, self.yc)


@dataclass
class PoissonOperator:
    """Coefficients of the 5-point pressure Laplacian over the fluid cells."""

    east: np.ndarray
    west: np.ndarray
    north: np.ndarray
    south: np.ndarray
    diag: np.ndarray
    active: np.ndarray
    _lu: object = field(default=None, repr=False)
    _index: np.ndarray = field(default=None, repr=False)

    def apply(self, p):
        out = self.diag * p
        out[:, :-1] += self.east[:, :-1] * p[:, 1:]
        out[:, 1:] += self.west[:, 1:] * p[:, :-1]
        out[:-1, :] += self.north[:-1, :] * p[1:, :]
        out[1:, :] += self.south[1:, :] * p[:-1, :]
        out[~self.active] = 0.0
        return out

    def residual(self, p, rhs):
        r = np.where(self.active, rhs, 0.0) - self.apply(p)
        return float(np.max(np.abs(r))) if r.size else 0.0

    def matrix(self):
        ny, nx = self.diag.shape
        idx = -np.ones((ny, nx), dtype=np.int64)
        idx[self.active] = np.arange(int(self.active.sum()))
        rows, cols, vals = [], [], []
        jj, ii = np.nonzero(self.active)
        rows.append(idx[jj, ii])
        cols.append(idx[jj, ii])
        vals.append(self.diag[jj, ii])
        for coef, dj, di in (
            (self.east, 0, 1),
            (self.west, 0, -1),
            (self.north, 1, 0),
            (self.south, -1, 0),
        ):
            sel = self.active & (coef != 0)
            jj, ii = np.nonzero(sel)
            rows.append(idx[jj, ii])
            cols.append(idx[jj + dj, ii + di])
            vals.append(coef[jj, ii])
        n = int(self.active.sum())
        mat = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
        return mat, idx

    def factorized(self):
        if self._lu is None:
            mat, self._index = self.matrix()
            self._lu = spla.splu(mat)
        return self._lu, self._index


@dataclass
class SolverState:
    config: DomainConfig
    u: np.ndarray  # (ny, nx + 1) x-face velocities
    v: np.ndarray  # (ny + 1, nx) y-face velocities
    p: np.ndarray  # (ny, nx) cell-centered pressure
    solid: np.ndarray
    u_fixed: np.ndarray
    v_fixed: np.ndarray
    poisson: PoissonOperator
    time: float = 0.0
    steps: int = 0
    divmax: float = 0.0
    last_poisson_iterations: int = 0
    kick: np.ndarray = None

    @property
    def xc(self):
        c = self.config
        return c.x_range[0] + (np.arange(c.nx) + 0.5) * c.dx

    @property
    def yc(self):
        c = self.config
        return c.y_range[0] + (np.arange(c.ny) + 0.5) * c.dy

    def divergence(self):
        c = self.config
        div = (self.u[:, 1:] - self.u[:, :-1]) / c.dx + (self.v[1:, :] - self.v[:-1, :]) / c.dy
        div[self.solid] = 0.0
        return div

    def snapshot(self):
        u_c = 0.5 * (self.u[:, 1:] + self.u[:, :-1])
        v_c = 0.5 * (self.v[1:, :] + self.v[:-1, :])
        p = self.p.copy()
        u_c[self.solid] = 0.0
        v_c[self.solid] = 0.0
        p[self.solid] = 0.0
        c = self.config
        return FlowSnapshot(
            time=self.time,
            u=u_c,
            v=v_c,
            p=p,
            mask=self.solid.copy(),
            x0=c.x_range[0],
            y0=c.y_range[0],
            dx=c.dx,
            dy=c.dy,
            divmax=self.divmax,
        )


def cylinder_mask(config):
    """Cells whose center lies strictly inside the cylinder."""
    xc = config.x_range[0] + (np.arange(config.nx) + 0.5) * config.dx
    yc = config.y_range[0] + (np.arange(config.ny) + 0.5) * config.dy
    X, Y = np.meshgrid(xc, yc)
    if config.cylinder_diameter <= 0:
        return np.zeros_like(X, dtype=bool)
    cx, cy = config.cylinder_center
    r = 0.5 * config.cylinder_diameter
    return (X - cx) ** 2 + (Y - cy) ** 2 < r * r


def _poisson_operator(config, solid, u_fixed, v_fixed):
    ny, nx = solid.shape
    ix2, iy2 = 1.0 / config.dx**2, 1.0 / config.dy**2
    east = np.zeros((ny, nx))
    west = np.zeros((ny, nx))
    east[:, :-1] = np.where(u_fixed[:, 1:-1], 0.0, ix2)
    west[:, 1:] = np.where(u_fixed[:, 1:-1], 0.0, ix2)
    north = np.where(v_fixed[1:, :], 0.0, iy2)
    south = np.where(v_fixed[:-1, :], 0.0, iy2)
    outflow = np.zeros((ny, nx))
    # Dirichlet p = 0 on the outflow face: ghost value -p gives 2/dx^2.
    outflow[:, -1] = np.where(u_fixed[:, -1], 0.0, 2.0 * ix2)
    fluid = ~solid
    for a in (east, west, north, south, outflow):
        a[solid] = 0.0
    diag = -(east + west + north + south + outflow)
    active = fluid & (diag != 0)
    return PoissonOperator(east, west, north, south, diag, active)


def build_domain(config):
    """Allocate the grid, the obstacle mask and the uniform initial field."""
    config.validate()
    nx, ny = config.nx, config.ny
    solid = cylinder_mask(config)
    u_fixed = np.zeros((ny, nx + 1), dtype=bool)
    u_fixed[:, 0] = True
    u_fixed[:, 1:-1] = solid[:, :-1] | solid[:, 1:]
    u_fixed[:, -1] = solid[:, -1]
    v_fixed = np.zeros((ny + 1, nx), dtype=bool)
    v_fixed[0, :] = True
    v_fixed[-1, :] = True
    v_fixed[1:-1, :] = solid[:-1, :] | solid[1:, :]

    u = np.full((ny, nx + 1), float(config.inflow_velocity))
    u[:, 1:-1][solid[:, :-1] | solid[:, 1:]] = 0.0
    u[:, -1][solid[:, -1]] = 0.0
    v = np.zeros((ny + 1, nx))
    p = np.zeros((ny, nx))
    state = SolverState(
        config=config,
        u=u,
        v=v,
        p=p,
        solid=solid,
        u_fixed=u_fixed,
        v_fixed=v_fixed,
        poisson=_poisson_operator(config, solid, u_fixed, v_fixed),
    )
    state.divmax = float(np.max(np.abs(state.divergence())))
    return state


def _limited(qm1, q0, q1, q2, a):
    """Face value between q0 and q1, upwinded by the sign of ``a`` (van Leer limiter)."""

    def vanleer(d1, d2):
        prod = d1 * d2
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(prod > 0, 2.0 * prod / (d1 + d2), 0.0)
        return s

    left = q0 + 0.5 * vanleer(q0 - qm1, q1 - q0)
    right = q1 - 0.5 * vanleer(q1 - q0, q2 - q1)
    return np.where(a >= 0, left, right)


def _pad_u(u, wall):
    sign = -1.0 if wall == "noslip" else 1.0
    U = np.empty((u.shape[0] + 4, u.shape[1] + 4))
    U[2:-2, 2:-2] = u
    U[2:-2, :2] = u[:, :1]
    U[2:-2, -2:] = u[:, -1:]
    U[1, :] = sign * U[2, :]
    U[0, :] = sign * U[3, :]
    U[-2, :] = sign * U[-3, :]
    U[-1, :] = sign * U[-4, :]
    return U


def _pad_v(v):
    V = np.empty((v.shape[0] + 4, v.shape[1] + 4))
    V[2:-2, 2:-2] = v
    # v = 0 at the inflow boundary, zero gradient at the outflow
    V[2:-2, 1] = -v[:, 0]
    V[2:-2, 0] = -v[:, 1]
    V[2:-2, -2:] = v[:, -1:]
    # rows 0 and ny of v sit on the walls (v = 0); odd reflection about them
    V[1, :] = -V[3, :]
    V[0, :] = -V[4, :]
    V[-2, :] = -V[-4, :]
    V[-1, :] = -V[-5, :]
    return V


def _rhs(state, u, v, t):
    """Explicit momentum tendencies on the interior faces."""
    c = state.config
    nu, dx, dy = c.nu, c.dx, c.dy
    ny, nx = c.ny, c.nx
    U = _pad_u(u, c.wall)
    V = _pad_v(v)

    # ---- u momentum, faces i = 1..nx-1 ----
    # x-fluxes at cell centers (between faces c and c+1), c = 0..nx-1
    a = 0.5 * (u[:, :-1] + u[:, 1:])
    q = _limited(U[2:-2, 1:-4], U[2:-2, 2:-3], U[2:-2, 3:-2], U[2:-2, 4:-1], a)
    fx = a * q
    # y-fluxes at corners between rows J-1 and J, J = 0..ny, faces i = 1..nx-1
    a = 0.5 * (v[:, :-1] + v[:, 1:])
    q = _limited(U[0:-3, 3:-3], U[1:-2, 3:-3], U[2:-1, 3:-3], U[3:, 3:-3], a)
    fy = a * q
    ui = U[2:-2, 3:-3]
    lap = (U[2:-2, 4:-2] - 2 * ui + U[2:-2, 2:-4]) / dx**2 + (
        U[3:-1, 3:-3] - 2 * ui + U[1:-3, 3:-3]
    ) / dy**2
    du = np.zeros_like(u)
    du[:, 1:-1] = (
        -(fx[:, 1:] - fx[:, :-1]) / dx - (fy[1:, :] - fy[:-1, :]) / dy + nu * lap + c.body_force
    )

    # ---- v momentum, faces J = 1..ny-1 ----
    # x-fluxes at corners between columns I-1 and I, I = 0..nx
    a = 0.5 * (u[:-1, :] + u[1:, :])
    q = _limited(V[3:-3, 0:-3], V[3:-3, 1:-2], V[3:-3, 2:-1], V[3:-3, 3:], a)
    gx = a * q
    # y-fluxes at cell centers c = 0..ny-1
    a = 0.5 * (v[:-1, :] + v[1:, :])
    q = _limited(V[1:-4, 2:-2], V[2:-3, 2:-2], V[3:-2, 2:-2], V[4:-1, 2:-2], a)
    gy = a * q
    vi = V[3:-3, 2:-2]
    lap = (V[3:-3, 3:-1] - 2 * vi + V[3:-3, 1:-3]) / dx**2 + (
        V[4:-2, 2:-2] - 2 * vi + V[2:-4, 2:-2]
    ) / dy**2
    dv = np.zeros_like(v)
    dv[1:-1, :] = -(gx[:, 1:] - gx[:, :-1]) / dx - (gy[1:, :] - gy[:-1, :]) / dy + nu * lap

    if state.kick is not None and t < c.kick_duration:
        dv[1:-1, :] += state.kick
    return du, dv


def _apply_velocity_bc(state, u, v):
    c = state.config
    if c.inflow == "uniform":
        u[:, 0] = c.inflow_velocity
    else:
        u[:, 0] = u[:, 1]
    u[:, -1] = u[:, -2]
    u[:, 1:][state.u_fixed[:, 1:]] = 0.0
    v[0, :] = 0.0
    v[-1, :] = 0.0
    v[state.v_fixed] = 0.0


def solve_pressure_poisson(source, state, method=None, initial=None, history=None):
    """Solve ``L p = source`` on the fluid cells.

    Walls, inflow and obstacle faces are homogeneous Neumann; the outflow face
    is Dirichlet ``p = 0``. ``method`` is ``"sor"`` (red-black successive
    over-relaxation, residual checked every 10 sweeps) or ``"direct"`` (sparse
    LU, factored once per state). If ``history`` is a list, SOR appends
    ``(iteration, residual max-norm)`` pairs to it.
    """
    c = state.config
    op = state.poisson
    method = method or c.poisson
    source = np.asarray(source, dtype=float)
    if source.shape != op.diag.shape:
        raise ConfigurationError(
            f"source shape {source.shape} does not match grid {op.diag.shape}"
        )
    rhs = np.where(op.active, source, 0.0)
    if method == "direct":
        lu, idx = op.factorized()
        p = np.zeros_like(rhs)
        p[op.active] = lu.solve(rhs[op.active])
        state.last_poisson_iterations = 1
        return p
    if method != "sor":
        raise ConfigurationError(f"unknown poisson method {method!r}")
    return _sor(op, rhs, c, initial, history, state)


def _sor_omega(op):
    ny, nx = op.diag.shape
    n = 2 * max(nx, ny)
    return 2.0 / (1.0 + math.sin(math.pi / n))


def _sor(op, rhs, config, initial, history, state):
    p = np.zeros_like(rhs) if initial is None else np.array(initial, dtype=float)
    p[~op.active] = 0.0
    omega = _sor_omega(op)
    jj, ii = np.indices(p.shape)
    colors = [op.active & ((jj + ii) % 2 == k) for k in (0, 1)]
    safe_diag = np.where(op.active, op.diag, 1.0)
    tol = config.poisson_tol
    residual = op.residual(p, rhs)
    if history is not None:
        history.append((0, residual))
    it = 0
    while residual >= tol:
        if it >= config.poisson_max_iter:
            raise NumericalError(
                f"pressure Poisson did not converge in {it} iterations "
                f"(residual {residual:.3e} >= {tol:.1e})",
                iterations=it,
                residual=residual,
            )
        for color in colors:
            off = np.zeros_like(p)
            off[:, :-1] += op.east[:, :-1] * p[:, 1:]
            off[:, 1:] += op.west[:, 1:] * p[:, :-1]
            off[:-1, :] += op.north[:-1, :] * p[1:, :]
            off[1:, :] += op.south[1:, :] * p[:-1, :]
            gs = (rhs - off) / safe_diag
            p = np.where(color, p + omega * (gs - p), p)
        it += 1
        if it % 10 == 0:
            residual = op.residual(p, rhs)
            if history is not None:
                history.append((it, residual))
            if not np.isfinite(residual):
                raise NumericalError("pressure Poisson diverged", iterations=it, residual=residual)
    state.last_poisson_iterations = it
    return p


def step(state):
    """Advance ``state`` in place by one time step and return it."""
    c = state.config
    dt = c.dt
    u0, v0 = state.u, state.v
    du, dv = _rhs(state, u0, v0, state.time)
    u1 = u0 + dt * du
    v1 = v0 + dt * dv
    _apply_velocity_bc(state, u1, v1)
    du1, dv1 = _rhs(state, u1, v1, state.time + dt)
    us = 0.5 * (u0 + u1 + dt * du1)
    vs = 0.5 * (v0 + v1 + dt * dv1)
    _apply_velocity_bc(state, us, vs)

    div = (us[:, 1:] - us[:, :-1]) / c.dx + (vs[1:, :] - vs[:-1, :]) / c.dy
    p = solve_pressure_poisson(div / dt, state, initial=state.p)

    # velocity correction on free faces
    gpx = np.zeros_like(us)
    gpx[:, 1:-1] = (p[:, 1:] - p[:, :-1]) / c.dx
    gpx[:, -1] = -2.0 * p[:, -1] / c.dx
    gpy = np.zeros_like(vs)
    gpy[1:-1, :] = (p[1:, :] - p[:-1, :]) / c.dy
    us = np.where(state.u_fixed, us, us - dt * gpx)
    vs = np.where(state.v_fixed, vs, vs - dt * gpy)

    state.u, state.v, state.p = us, vs, p
    state.time += dt
    state.steps += 1
    divergence = state.divergence()
    state.divmax = float(np.max(np.abs(divergence)))
    if not np.isfinite(state.divmax) or not np.all(np.isfinite(us)):
        raise NumericalError(f"non-finite velocity after step {state.steps}")
    if state.divmax >= c.divergence_tol:
        raise NumericalError(
            f"divergence {state.divmax:.3e} exceeds tolerance {c.divergence_tol:.1e} "
            f"after step {state.steps}",
            residual=state.divmax,
        )
    return state


def _attach_kick(state):
    c = state.config
    state.kick = None
    if c.kick_amplitude == 0 or c.cylinder_diameter <= 0:
        return
    d = c.cylinder_diameter
    cx, cy = c.cylinder_center
    xs = c.x_range[0] + (np.arange(c.nx) + 0.5) * c.dx
    ys = c.y_range[0] + np.arange(1, c.ny) * c.dy
    X, Y = np.meshgrid(xs, ys)
    bump = np.exp(-((X - cx - 1.5 * d) ** 2 + (Y - cy) ** 2) / d**2)
    state.kick = c.kick_amplitude * c.inflow_velocity * bump


def spin_up(state):
    """Run the spin-up phase (with the symmetry-breaking pulse) and reset time to 0."""
    _attach_kick(state)
    c = state.config
    for k in range(c.spinup_steps):
        try:
            step(state)
        except NumericalError as exc:
            raise NumericalError(f"spin-up step {k + 1}: {exc}", exc.iterations, exc.residual) from exc
    state.kick = None
    state.time = 0.0
    state.steps = 0
    return state


def snapshot_steps(config):
    """Step indices at which snapshots are recorded; t = 0 is always included."""
    count = max(1, config.total_steps // config.snapshot_stride)
    return [k * config.snapshot_stride for k in range(count)]


def simulate(config, callback=None):
    """Generate the snapshot series in memory.

    ``callback(state)`` is invoked after every recorded step (useful for probes).
    """
    state = spin_up(build_domain(config))
    record = set(snapshot_steps(config))
    last = max(record)
    snaps = []
    if 0 in record:
        snaps.append(state.snapshot())
    for k in range(1, last + 1):
        try:
            step(state)
        except NumericalError as exc:
            raise NumericalError(f"step {k}: {exc}", exc.iterations, exc.residual) from exc
        if callback is not None:
            callback(state)
        if k in record:
            snaps.append(state.snapshot())
    return snaps


def run_simulation(config, output_dir):
    """Run the solver and write one CSV per snapshot; returns the file paths."""
    os.makedirs(output_dir, exist_ok=True)
    paths = []
    for k, snap in enumerate(simulate(config)):
        path = os.path.join(output_dir, f"snapshot_{k:04d}.csv")
        write_snapshot(snap, path)
        paths.append(path)
    return paths


def _g(x):
    return format(float(x), ".17g")


def write_snapshot(snap, path):
    ny, nx = snap.u.shape
    X, Y = snap.coordinates()
    lines = [
        f"# t={_g(snap.time)} nx={nx} ny={ny} x0={_g(snap.x0)} y0={_g(snap.y0)} "
        f"dx={_g(snap.dx)} dy={_g(snap.dy)} divmax={_g(snap.divmax)}"
    ]
    for x, y, u, v, p, m in zip(
        X.ravel(), Y.ravel(), snap.u.ravel(), snap.v.ravel(), snap.p.ravel(), snap.mask.ravel()
    ):
        lines.append(f"{_g(x)},{_g(y)},{_g(u)},{_g(v)},{_g(p)},{int(m)}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_snapshot(path):
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ParseError(f"{path}: missing '# t=...' header", line=1)
        meta = {}
        for token in header[1:].split():
            key, _, val = token.partition("=")
            meta[key] = val
        try:
            nx, ny = int(meta["nx"]), int(meta["ny"])
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except (KeyError, ValueError) as exc:
            raise ParseError(f"{path}: {exc}") from exc
    if data.shape != (nx * ny, 6):
        raise ParseError(f"{path}: expected {nx * ny} rows of 6 fields, got {data.shape}")
    grid = data.reshape(ny, nx, 6)
    return FlowSnapshot(
        time=float(meta["t"]),
        u=grid[:, :, 2].copy(),
        v=grid[:, :, 3].copy(),
        p=grid[:, :, 4].copy(),
        mask=grid[:, :, 5] != 0,
        x0=float(meta["x0"]),
        y0=float(meta["y0"]),
        dx=float(meta["dx"]),
        dy=float(meta["dy"]),
        divmax=float(meta.get("divmax", 0.0)),
    )


def read_snapshots(directory):
    names = sorted(n for n in os.listdir(directory) if n.startswith("snapshot_") and n.endswith(".csv"))
    return [read_snapshot(os.path.join(directory, n)) for n in names]


def sample_at(snapshot, x, y):
    """Bilinear interpolation of (u, v, p) from the four surrounding cell centers.

    Within half a cell of the outer boundary the nearest row/column of centers
    is used (constant extrapolation).
    """
    s = snapshot
    x1 = s.x0 + s.nx * s.dx
    y1 = s.y0 + s.ny * s.dy
    if not (s.x0 <= x <= x1 and s.y0 <= y <= y1):
        raise OutOfDomainError(f"point ({x}, {y}) is outside the domain")
    ci = min(int((x - s.x0) / s.dx), s.nx - 1)
    cj = min(int((y - s.y0) / s.dy), s.ny - 1)
    if s.mask[cj, ci]:
        raise OutOfDomainError(f"point ({x}, {y}) lies inside the obstacle")
    fx = np.clip((x - s.x0) / s.dx - 0.5, 0.0, s.nx - 1)
    fy = np.clip((y - s.y0) / s.dy - 0.5, 0.0, s.ny - 1)
    i0 = min(int(fx), s.nx - 2)
    j0 = min(int(fy), s.ny - 2)
    wx = fx - i0
    wy = fy - j0
    out = []
    for f in (s.u, s.v, s.p):
        val = (
            (1 - wx) * (1 - wy) * f[j0, i0]
            + wx * (1 - wy) * f[j0, i0 + 1]
            + (1 - wx) * wy * f[j0 + 1, i0]
            + wx * wy * f[j0 + 1, i0 + 1]
        )
        out.append(float(val))
    return tuple(out)


def with_overrides(config, **changes):
    return replace(config, **changes)


@dataclass(frozen=True)
class SpectralPeak:
    frequency: float
    power_fraction: float  # share of non-DC power within +-2 bins of the peak
    frequencies: np.ndarray
    power: np.ndarray


def probe_signal(config, x, y, steps=None, every=None):
    """Record ``(t, u, v)`` at ``(x, y)`` after spin-up.

    ``steps`` defaults to ``config.total_steps``; samples are taken every
    ``every`` steps (default ``config.snapshot_stride``).
    """
    steps = config.total_steps if steps is None else steps
    every = every or config.snapshot_stride
    state = spin_up(build_domain(config))
    rows = [(state.time, *sample_at(state.snapshot(), x, y)[:2])]
    for k in range(1, steps + 1):
        step(state)
        if k % every == 0:
            rows.append((state.time, *sample_at(state.snapshot(), x, y)[:2]))
    return np.array(rows)


def dominant_frequency(times, signal):
    """Strongest spectral line of a uniformly sampled signal (Hann window, mean removed).

    The peak location is refined by a parabola through the log power of the
    three bins around the maximum.
    """
    times = np.asarray(times, dtype=float)
    sig = np.asarray(signal, dtype=float)
    if len(sig) < 8:
        raise ConfigurationError("need at least 8 samples for a spectrum")
    dt = float(np.mean(np.diff(times)))
    win = np.hanning(len(sig))
    spec = np.abs(np.fft.rfft((sig - sig.mean()) * win)) ** 2
    freqs = np.fft.rfftfreq(len(sig), dt)
    spec[0] = 0.0
    k = int(np.argmax(spec))
    total = float(spec.sum())
    if total == 0.0:
        return SpectralPeak(0.0, 0.0, freqs, spec)
    frac = float(spec[max(k - 2, 1) : k + 3].sum()) / total
    f = freqs[k]
    if 1 <= k < len(spec) - 1 and np.all(spec[k - 1 : k + 2] > 0):
        a, b, c = np.log(spec[k - 1 : k + 2])
        denom = a - 2 * b + c
        if denom != 0:
            f = freqs[k] + 0.5 * (a - c) / denom * (freqs[1] - freqs[0])
    return SpectralPeak(float(f), frac, freqs, spec)
