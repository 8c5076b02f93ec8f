"""Static figures: sample fans over the density map, and attention overlays.

Every figure comes with a JSON sidecar holding exactly the coordinates drawn.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import PredictionCase  # noqa: E402
from .raster import ContextRasters  # noqa: E402


def _extent(points: np.ndarray, pad: float = 8.0):
    lo, hi = points.min(0) - pad, points.max(0) + pad
    return lo, hi


def _background(ax, rasters: ContextRasters | None, lo, hi):
    if rasters is None:
        return
    spec = rasters.spec
    x0, y0 = spec.origin
    ax.imshow(rasters.density, origin="lower", cmap="Greys", vmin=0, vmax=1, alpha=0.6,
              extent=(x0, x0 + spec.cols * spec.cell_size, y0, y0 + spec.rows * spec.cell_size))
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])


def plot_prediction(case: PredictionCase, samples: np.ndarray, path: str | Path,
                    rasters: ContextRasters | None = None, title: str = "") -> Path:
    """History (orange), ground truth (blue dashed) and sampled futures (green) per agent.

    samples: (N, K, T_f, 2) in world coordinates. Writes ``path`` and ``path`` + ``.json``.
    """
    path = Path(path)
    samples = np.asarray(samples, dtype=float)
    hist, fut = case.history_positions, case.future_positions
    pts = np.concatenate([hist.reshape(-1, 2), samples.reshape(-1, 2)] + ([fut.reshape(-1, 2)] if fut.size else []))
    lo, hi = _extent(pts)
    fig, ax = plt.subplots(figsize=(6, 6))
    _background(ax, rasters, lo, hi)
    for i in range(case.num_agents):
        for k in range(samples.shape[1]):
            trail = np.concatenate([hist[i, -1:], samples[i, k]])
            ax.plot(trail[:, 0], trail[:, 1], color="tab:green", alpha=0.25, lw=1.0,
                    label="samples" if i == 0 and k == 0 else None)
        ax.plot(hist[i, :, 0], hist[i, :, 1], color="tab:orange", lw=2.0, label="history" if i == 0 else None)
        if fut.size:
            trail = np.concatenate([hist[i, -1:], fut[i]])
            ax.plot(trail[:, 0], trail[:, 1], "--", color="tab:blue", lw=1.5, label="ground truth" if i == 0 else None)
    ax.set_aspect("equal")
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.legend(loc="upper right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    sidecar = {
        "agents": list(case.agent_ids),
        "history": hist.tolist(),
        "ground_truth": fut.tolist(),
        "samples": samples.tolist(),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar))
    return path


def plot_attention(case: PredictionCase, alpha: np.ndarray, beta: np.ndarray, path: str | Path) -> Path:
    """Head-averaged topological attention at the last history step, plus temporal weights.

    alpha: (N, N) row-stochastic; beta: (N, T_h).
    """
    path = Path(path)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    pos = case.history_positions[:, -1]
    fig, (ax0, ax1, ax2) = plt.subplots(1, 3, figsize=(14, 4.5))
    lo, hi = _extent(pos, 5.0)
    n = case.num_agents
    for i in range(n):
        for j in range(n):
            if i != j and alpha[i, j] > 0:
                ax0.plot([pos[i, 0], pos[j, 0]], [pos[i, 1], pos[j, 1]], color="tab:red",
                         lw=0.5 + 4 * alpha[i, j], alpha=0.3 + 0.7 * alpha[i, j])
    ax0.scatter(pos[:, 0], pos[:, 1], c="k", zorder=3)
    for i, aid in enumerate(case.agent_ids):
        ax0.annotate(aid, pos[i], fontsize=8)
    ax0.set_aspect("equal")
    ax0.set_xlim(lo[0], hi[0])
    ax0.set_ylim(lo[1], hi[1])
    ax0.set_title("neighbour attention")
    im = ax1.imshow(alpha, vmin=0, vmax=1, cmap="magma")
    ax1.set_title("alpha (row i attends to j)")
    fig.colorbar(im, ax=ax1)
    im = ax2.imshow(beta, vmin=0, vmax=1, cmap="viridis", aspect="auto")
    ax2.set_title("beta over history steps")
    fig.colorbar(im, ax=ax2)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    Path(str(path) + ".json").write_text(json.dumps({
        "agents": list(case.agent_ids), "positions": pos.tolist(), "alpha": alpha.tolist(), "beta": beta.tolist(),
    }))
    return path
