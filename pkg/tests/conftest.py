import numpy as np

from pinnshield import cfd

POISEUILLE_NU = 0.1
POISEUILLE_FORCE = 0.8
POISEUILLE_HEIGHT = 1.0


def poiseuille_config(ny):
    """Body-force driven channel, no obstacle, slip-free walls, open inflow."""
    dy = POISEUILLE_HEIGHT / ny
    dt = min(0.2 * dy * dy / POISEUILLE_NU, 0.5 * dy / 2)
    return cfd.DomainConfig(
        x_range=(0.0, 2.0), y_range=(-0.5, 0.5), cylinder_diameter=0.0, nx=2 * ny, ny=ny,
        nu=POISEUILLE_NU, dt=dt, body_force=POISEUILLE_FORCE, inflow="extrapolate",
        spinup_steps=0, kick_amplitude=0.0,
    )


def poiseuille_run(ny, t_end=15.0):
    """Relative L2 error of the mid-channel profile and the largest divergence seen."""
    config = poiseuille_config(ny)
    state = cfd.build_domain(config)
    divmax = 0.0
    for _ in range(int(round(t_end / config.dt))):
        cfd.step(state)
        divmax = max(divmax, state.divmax)
    snap = state.snapshot()
    y = snap.yc
    h = POISEUILLE_HEIGHT / 2
    exact = POISEUILLE_FORCE * (h - y) * (h + y) / (2 * POISEUILLE_NU)
    col = snap.u[:, snap.nx // 2]
    return float(np.linalg.norm(col - exact) / np.linalg.norm(exact)), divmax


def small_cylinder_config(**changes):
    base = dict(x_range=(-4.0, 12.0), y_range=(-4.0, 4.0), nx=64, ny=32, dt=0.02,
                total_steps=100, snapshot_stride=10, spinup_steps=50)
    base.update(changes)
    return cfd.DomainConfig(**base)


# criterion number -> (passed, description, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number, passed, description, detail):
    ACCEPTANCE[number] = (bool(passed), description, detail)
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {description}  [{detail}]"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, description, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number}: {'PASS' if passed else 'FAIL'}  {description}  [{detail}]"
        )
