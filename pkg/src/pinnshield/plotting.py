"""Report figures written next to the CSV outputs.

Uses the non-interactive Agg backend and strips PNG metadata so repeated
runs produce identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_loss_history(history, path):
    """Total, data, and residual loss per iteration on a log scale."""
    history = np.asarray(history)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if len(history):
        it = np.arange(len(history))
        for col, label in enumerate(("total", "data", "residual")):
            ax.semilogy(it, history[:, col], lw=0.8, label=label)
        ax.legend()
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_field(snapshot, path, component="u", window=None):
    """Color map of one snapshot field with the obstacle blanked out."""
    data = {"u": snapshot.u, "v": snapshot.v, "p": snapshot.p}[component]
    data = np.ma.masked_array(data, snapshot.mask)
    extent = (snapshot.x0, snapshot.x0 + snapshot.nx * snapshot.dx,
              snapshot.y0, snapshot.y0 + snapshot.ny * snapshot.dy)
    fig, ax = plt.subplots(figsize=(8, 3.4))
    im = ax.imshow(data, origin="lower", extent=extent, cmap="RdBu_r", aspect="equal")
    fig.colorbar(im, ax=ax, shrink=0.8, label=component)
    if window is not None:
        (x1, x2), (y1, y2) = window
        ax.plot([x1, x2, x2, x1, x1], [y1, y1, y2, y2, y1], "k--", lw=0.8)
    ax.set_title(f"{component} at t = {snapshot.time:.2f}")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    fig.tight_layout()
    return _save(fig, path)


def plot_prediction_scatter(pred, truth, path):
    """Predicted against true u and v for a sample set."""
    pred = np.asarray(pred)
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.4))
    for k, (ax, name) in enumerate(zip(axes, ("u", "v"))):
        t = truth.u if k == 0 else truth.v
        ax.plot(t, pred[:, k], ",", alpha=0.4)
        lo, hi = float(np.min(t)), float(np.max(t))
        ax.plot([lo, hi], [lo, hi], "k-", lw=0.6)
        ax.set_xlabel(f"true {name}")
        ax.set_ylabel(f"predicted {name}")
    fig.tight_layout()
    return _save(fig, path)


def plot_scenario(trace, path, unmitigated=None):
    """Controller actuation against the true-flow reference, plus detector flags."""
    t = np.array([fr.time for fr in trace.frames])
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax1.plot(t, [fr.reference_actuation for fr in trace.frames], "k-", lw=1, label="reference")
    label = "mitigated" if trace.config.mitigation else "actuation"
    ax1.plot(t, [fr.actuation for fr in trace.frames], lw=1, label=label)
    if unmitigated is not None:
        ax1.plot(t, [fr.actuation for fr in unmitigated.frames], lw=1, label="unmitigated")
    ax1.set_ylabel("actuation")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    sensors = [s.id for s in trace.config.sensors]
    for k, sid in enumerate(sensors):
        flags = [fr.records[k].flagged for fr in trace.frames]
        subs = [fr.records[k].substituted for fr in trace.frames]
        atk = [fr.records[k].attack_active for fr in trace.frames]
        ax2.fill_between(t, k - 0.4, k + 0.4, where=atk, color="tab:red", alpha=0.2, step="mid")
        ax2.plot(t[np.array(subs, bool)], np.full(sum(subs), k + 0.15), "|", color="tab:green")
        ax2.plot(t[np.array(flags, bool)], np.full(sum(flags), k - 0.15), "|", color="tab:red")
    ax2.set_yticks(range(len(sensors)))
    ax2.set_yticklabels(sensors)
    ax2.set_ylim(-0.6, len(sensors) - 0.4)
    ax2.set_xlabel("t")
    ax2.set_title("attack window (shaded), flags (red), substitution (green)", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
