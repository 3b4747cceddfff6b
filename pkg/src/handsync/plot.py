"""Optional figures; matplotlib is imported only when a figure is requested."""
from __future__ import annotations

import numpy as np


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("plotting needs matplotlib (pip install matplotlib)") from exc
    return plt


def spectrum_heatmap(profile, path, title=None):
    """Segments x frame-time heatmap of band energy, linear colour scale."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(10, 0.3 * len(profile.labels) + 1.5))
    t = profile.times
    extent = (t[0], t[-1], len(profile.labels) - 0.5, -0.5) if len(t) else None
    im = ax.imshow(np.ma.masked_invalid(profile.energy), aspect="auto", interpolation="nearest", extent=extent)
    ax.set_yticks(range(len(profile.labels)))
    ax.set_yticklabels(profile.labels)
    ax.set_xlabel("time (s)")
    ax.set_title(title or f"band energy above {profile.f_min:g} Hz")
    fig.colorbar(im, ax=ax, label="energy (rad$^2$/s$^2$)")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def drift_plot(offsets, path, title=None):
    """Offset trajectories (rows ``sensor_id, t_master_s, offset_s``), one line per sensor."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for sid in np.unique(offsets[:, 0]):
        rows = offsets[offsets[:, 0] == sid]
        ax.plot(rows[:, 1], rows[:, 2] * 1e3, lw=0.8, label=f"{int(sid)}")
    ax.set_xlabel("master time (s)")
    ax.set_ylabel("local - master (ms)")
    ax.set_title(title or "clock offsets")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
