"""Delimited output and figure rendering for CLI runs.

Every CSV carries '#'-prefixed header lines binding it to the tool
version, resolved-config hash, and basis checksum; figures are rendered
next to the delimited files as PNG through the Agg backend. Nothing here
embeds timestamps, so identical runs produce identical bytes.
"""
from __future__ import annotations

import json

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402


def meta_header(config_hash: str = "", basis_checksum: str = "",
                extra: dict | None = None) -> dict:
    meta = {"tool": f"channelmodes {__version__}"}
    if config_hash:
        meta["config_hash"] = config_hash
    if basis_checksum:
        meta["basis_checksum"] = basis_checksum
    meta.update(extra or {})
    return meta


def write_csv(path, columns: dict, meta: dict | None = None) -> None:
    """Write named columns to CSV with '# key: value' header lines."""
    cols = {k: np.atleast_1d(np.asarray(v)) for k, v in columns.items()}
    n = max(len(v) for v in cols.values())
    for k, v in cols.items():
        if len(v) not in (1, n):
            raise ValueError(f"column {k!r} has length {len(v)} != {n}")
    with open(path, "w") as fh:
        for key, val in (meta or {}).items():
            fh.write(f"# {key}: {val}\n")
        fh.write(",".join(cols) + "\n")
        for i in range(n):
            fh.write(",".join(repr(float(v[i % len(v)])) for v in cols.values())
                     + "\n")


def write_json(path, payload: dict, meta: dict | None = None) -> None:
    doc = {"meta": meta or {}}
    doc.update(payload)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def read_csv(path) -> tuple[dict, dict]:
    """Inverse of write_csv: (columns, meta)."""
    meta = {}
    with open(path) as fh:
        lines = fh.readlines()
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        key, _, val = lines[i][1:].partition(":")
        meta[key.strip()] = val.strip()
        i += 1
    names = lines[i].strip().split(",")
    data = np.loadtxt(lines[i + 1:], delimiter=",", ndmin=2)
    return {name: data[:, j] for j, name in enumerate(names)}, meta


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def line_figure(path, x, series: dict, xlabel: str, ylabel: str,
                title: str = "", logy: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0), constrained_layout=True)
    for label, y in series.items():
        ax.plot(x, y, label=label, lw=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3, lw=0.4)
    fig.savefig(path, dpi=130)
    plt.close(fig)


def neutral_curve_figure(path, rows: list[dict]) -> None:
    k = [r["k"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8.4, 3.6), constrained_layout=True)
    axes[0].plot(k, [r["re_c"] for r in rows], "o-", ms=3)
    j = int(np.argmin([r["re_c"] for r in rows]))
    axes[0].plot(k[j], rows[j]["re_c"], "ro", ms=6)
    axes[0].set_xlabel("k")
    axes[0].set_ylabel("critical Reynolds number")
    axes[1].plot(k, [r["m_c"] for r in rows], "s-", ms=3, color="k")
    axes[1].set_xlabel("k")
    axes[1].set_ylabel("critical wavevector m_c")
    fig.savefig(path, dpi=130)
    plt.close(fig)


def slip_sweep_figure(path, rows: list[dict]) -> None:
    ls = [r["ls"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.0, 4.0), constrained_layout=True)
    ax.plot(ls, [r["re_c"] for r in rows], "o-", color="tab:blue", ms=3,
            label="Re_c")
    ax.set_xlabel("slip length")
    ax.set_ylabel("critical Reynolds number", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(ls, [r["m_c"] for r in rows], "s-", color="k", ms=3, label="m_c")
    ax2.set_ylabel("critical wavevector m_c")
    fig.savefig(path, dpi=130)
    plt.close(fig)


def frame_figure(path, frame: dict, title: str = "") -> None:
    """Vorticity field with a velocity quiver overlay on the x-z plane."""
    x, z = frame["x"], frame["z"]
    fig, ax = plt.subplots(figsize=(6.4, 3.4), constrained_layout=True)
    pc = ax.pcolormesh(x, z, frame["vorticity"].T, cmap="RdBu_r",
                       shading="auto")
    fig.colorbar(pc, ax=ax, label="vorticity")
    sx = max(len(x) // 24, 1)
    sz = max(len(z) // 12, 1)
    ax.quiver(x[::sx], z[::sz], frame["u_x"][::sx, ::sz].T,
              frame["u_z"][::sx, ::sz].T, scale_units="xy", angles="xy",
              width=2.4e-3)
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_title(title or f"t = {frame['t']:.2f}")
    fig.savefig(path, dpi=130)
    plt.close(fig)


def profile_figure(path, z, profiles: dict, xlabel: str = "velocity",
                   title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.2, 4.6), constrained_layout=True)
    for label, v in profiles.items():
        ax.plot(v, z, label=label, lw=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("z")
    if title:
        ax.set_title(title)
    if len(profiles) > 1:
        ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3, lw=0.4)
    fig.savefig(path, dpi=130)
    plt.close(fig)
