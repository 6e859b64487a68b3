"""CSV and SVG emission for metric series, fields, and latent trajectories.

CSV files are the source of truth; each figure is a self-contained SVG
rendered from the same arrays. Heatmaps default to an embedded raster with
a descriptive metadata note (compact); a vector style with one path per
cell is available when exact cell-level SVG structure matters.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .config import atomic_write_bytes, atomic_write_text
from .errors import UsageError


@dataclass(frozen=True)
class MetricSeries:
    """One metric sampled over the time grid."""

    kind: str  # "L_CAE" | "L_CAE-RC-NF" | "L_RC-NF_1" | "L_RC-NF_2"
    role: str  # "train" | "test"
    times: np.ndarray
    values: np.ndarray
    reconstruction_only: np.ndarray | None = None  # warm-up flags
    seed: int | None = None  # None marks the seed-averaged series

    def label(self) -> str:
        suffix = "" if self.seed is None else f"_seed{self.seed}"
        return f"{self.kind}_{self.role}{suffix}"


def series_to_csv(series: MetricSeries) -> str:
    buf = io.StringIO()
    flags = (
        series.reconstruction_only
        if series.reconstruction_only is not None
        else np.zeros(len(series.times), dtype=bool)
    )
    buf.write("t,value,reconstruction_only\n")
    for t, v, f in zip(series.times, series.values, flags):
        buf.write(f"{float(t)!r},{float(v)!r},{int(f)}\n")
    return buf.getvalue()


def field_to_csv(times: np.ndarray, x: np.ndarray, values: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("t," + ",".join(repr(float(v)) for v in x) + "\n")
    for t, row in zip(times, values):
        buf.write(f"{float(t)!r}," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def latents_to_csv(times: np.ndarray, latents: np.ndarray) -> str:
    d = latents.shape[1]
    buf = io.StringIO()
    buf.write("t," + ",".join(f"y{i}" for i in range(1, d + 1)) + "\n")
    for t, row in zip(times, latents):
        buf.write(f"{float(t)!r}," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def _save_svg(fig, path, description: str) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Description": description})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_metric_lines(series_list, path, title: str) -> None:
    """Log-scale error-versus-time lines, one per series."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    styles = {"train": "-", "test": "--"}
    for s in series_list:
        ax.semilogy(s.times, np.maximum(s.values, 1e-300),
                    styles.get(s.role, "-"), label=s.label())
    ax.set_xlabel("t")
    ax.set_ylabel("mean squared error")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    _save_svg(fig, path, f"{title}: {len(series_list)} series")


def plot_field_heatmaps(times, x, reference, predicted, path, title: str,
                        style: str = "raster") -> None:
    """Reference and predicted space-time fields side by side."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    vmax = max(reference.max(), predicted.max())
    for ax, data, name in ((axes[0], reference, "reference"),
                           (axes[1], predicted, "prediction")):
        if style == "vector":
            mesh = ax.pcolormesh(x, times, data, vmin=0.0, vmax=vmax, shading="auto")
        else:
            mesh = ax.imshow(data, origin="lower", aspect="auto",
                             extent=(x[0], x[-1], times[0], times[-1]),
                             vmin=0.0, vmax=vmax)
        ax.set_title(name)
        ax.set_xlabel("x")
    axes[0].set_ylabel("t")
    fig.colorbar(mesh, ax=axes, shrink=0.9)
    note = (
        f"{title}; {reference.shape[0]}x{reference.shape[1]} field rendered as "
        + ("vector cells" if style == "vector"
           else "an embedded raster (one image per panel, full resolution)")
    )
    _save_svg(fig, path, note)


def plot_profiles(x, reference, predicted, path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, reference, "-", label="reference")
    ax.plot(x, predicted, "--", label="prediction")
    ax.set_xlabel("x")
    ax.set_ylabel("u")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save_svg(fig, path, title)


def plot_latent_trajectories(times, encoded, predicted, warmup_len, path, title: str) -> None:
    d = encoded.shape[1]
    fig, axes = plt.subplots(1, d, figsize=(5 * d, 3.5))
    axes = np.atleast_1d(axes)
    pred_times = times[warmup_len:]
    for i in range(d):
        axes[i].plot(times, encoded[:, i], "-", label="encoder")
        axes[i].plot(pred_times, predicted[:, i], "--", label="prediction")
        axes[i].axvline(times[warmup_len - 1], color="gray", lw=0.8, alpha=0.6)
        axes[i].set_xlabel("t")
        axes[i].set_ylabel(f"Y{i + 1}")
        axes[i].legend(fontsize=8)
        axes[i].grid(True, alpha=0.3)
    fig.suptitle(title)
    _save_svg(fig, path, title)


def emit_series(series_list, out_dir) -> list[Path]:
    """One CSV per series; errors on empty input before touching the disk."""
    series_list = list(series_list)
    if not series_list:
        raise UsageError("no series to emit")
    out_dir = Path(out_dir)
    written = []
    for s in series_list:
        path = out_dir / f"{s.label()}.csv"
        atomic_write_text(path, series_to_csv(s))
        written.append(path)
    return written


def emit_plots(series_list, out_dir) -> list[Path]:
    """Write every series as CSV (the source of truth) plus grouped SVG lines.

    Series are grouped by metric kind into one figure per group. An empty
    input is an error and produces no files.
    """
    series_list = list(series_list)
    if not series_list:
        raise UsageError("no series to emit")
    out_dir = Path(out_dir)
    written = emit_series(series_list, out_dir)
    groups: dict[str, list] = {}
    for s in series_list:
        groups.setdefault(s.kind, []).append(s)
    for kind, group in groups.items():
        path = out_dir / f"{kind}.svg"
        plot_metric_lines(group, path, kind)
        written.append(path)
    return written
