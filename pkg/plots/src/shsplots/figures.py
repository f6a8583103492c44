"""Figure rendering from simulation outputs.

Four figure kinds: moment-vs-reference panels, normalized-error heat map,
density snapshot grids from MED checkpoints, and filtering trajectory
overlays. Rendering is a pure view of the input files; the only formula
reproduced here is the exponential-family density, evaluated on a grid
and normalized by trapezoidal mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .readers import (
    FormatError,
    MedRecord,
    read_checkpoints,
    read_filter,
    read_heatmap,
    read_moments,
)

KINDS = ("moments", "heatmap", "density_snapshots", "trajectories")

# Panels shown by the moments figure when the file carries them: the familiar
# low-order set plus two higher velocity moments.
DEFAULT_MOMENT_PANELS = [(1, 0), (0, 1), (2, 0), (0, 2), (0, 3), (0, 4)]


@dataclass
class FigureSpec:
    kind: str
    inputs: list[str]
    output: str
    times: list[float] = field(default_factory=list)
    grid: int = 200

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FormatError(f"unknown figure kind {self.kind!r}")
        if not self.inputs:
            raise FormatError("figure needs at least one input file")


def density_grid(record: MedRecord, grid: int = 200):
    """Evaluate the checkpointed density on a grid over its domain,
    normalized so the trapezoidal mass is exactly 1."""
    if record.dimension != 2:
        raise FormatError("density snapshots require two-dimensional records")
    xs = np.linspace(record.lower[0], record.upper[0], grid)
    ys = np.linspace(record.lower[1], record.upper[1], grid)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    u1 = (X - record.center[0]) / record.halfwidth[0]
    u2 = (Y - record.center[1]) / record.halfwidth[1]
    q = np.full_like(X, record.offset)
    for (a1, a2), c in record.multipliers.items():
        q += c * u1**a1 * u2**a2
    q -= q.min()
    p = np.exp(-q)
    mass = np.trapezoid(np.trapezoid(p, ys, axis=1), xs)
    p /= mass
    return X, Y, p


def _render_moments(spec: FigureSpec):
    prop = read_moments(spec.inputs[0])
    ref = read_moments(spec.inputs[1]) if len(spec.inputs) > 1 else None
    panels = [e for e in DEFAULT_MOMENT_PANELS if e in prop.exponents]
    if not panels:
        panels = prop.exponents[1:7]
    ncols = 3
    nrows = (len(panels) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(11, 2.8 * nrows), squeeze=False)
    for ax in axes.ravel()[len(panels):]:
        ax.set_visible(False)
    for ax, exps in zip(axes.ravel(), panels):
        ax.plot(prop.times, prop.column(exps), color="tab:blue", lw=1.4,
                label="propagated")
        if ref is not None and exps in ref.exponents:
            mid = ref.column(exps)
            ax.plot(ref.times, mid, color="black", lw=1.0, ls="--",
                    label="Monte Carlo")
            if ref.standard_errors is not None:
                se = ref.se_column(exps)
                ax.fill_between(ref.times, mid - 4 * se, mid + 4 * se,
                                color="gray", alpha=0.35, lw=0,
                                label="MC +-4 SE")
        name = "m_{" + ",".join(str(e) for e in exps) + "}"
        ax.set_title(f"${name}$")
        ax.set_xlabel("t [s]")
    axes.ravel()[0].legend(loc="best", fontsize=8)
    fig.tight_layout()
    return fig


def _render_heatmap(spec: FigureSpec):
    hm = read_heatmap(spec.inputs[0])
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    masked = np.ma.masked_invalid(hm.values)
    im = ax.imshow(masked.T, origin="lower", cmap="viridis")
    for a1 in range(hm.order + 1):
        for a2 in range(hm.order + 1):
            v = hm.values[a1, a2]
            if np.isfinite(v):
                ax.text(a1, a2, f"{v:.2f}", ha="center", va="center",
                        fontsize=8, color="white")
    for a1, a2 in hm.undefined:
        ax.text(a1, a2, "n/a", ha="center", va="center", fontsize=8, color="red")
    ax.set_xlabel(r"$\alpha_1$")
    ax.set_ylabel(r"$\alpha_2$")
    ax.set_xticks(range(hm.order + 1))
    ax.set_yticks(range(hm.order + 1))
    ax.set_title("normalized rollout error")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return fig


def _render_density_snapshots(spec: FigureSpec):
    rows = [read_checkpoints(path) for path in spec.inputs]
    times = spec.times
    if not times:
        times = sorted({rec.time for rec in rows[0]})[:4]
    fig, axes = plt.subplots(len(rows), len(times),
                             figsize=(3.0 * len(times), 2.8 * len(rows)),
                             squeeze=False)
    for r, records in enumerate(rows):
        for c, t in enumerate(times):
            rec = min(records, key=lambda rr: abs(rr.time - t))
            X, Y, P = density_grid(rec, spec.grid)
            ax = axes[r, c]
            ax.contourf(X, Y, P, levels=24, cmap="magma")
            ax.set_title(f"t = {rec.time:.2f} s (r={rec.order})", fontsize=9)
            if r == len(rows) - 1:
                ax.set_xlabel("$x_1$")
            if c == 0:
                ax.set_ylabel("$x_2$")
    fig.tight_layout()
    return fig


def _render_trajectories(spec: FigureSpec):
    run = read_filter(spec.inputs[0])
    fig, axes = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    labels = ("position $x_1$ [m]", "velocity $x_2$ [m/s]")
    for c, (ax, label) in enumerate(zip(axes, labels)):
        if run.truth_states is not None:
            ax.plot(run.times, run.truth_states[:, c], color="black", lw=1.2,
                    label="ground truth")
        ax.plot(run.times, run.map_states[:, c], color="tab:blue", lw=1.2,
                label="estimate")
        if c == 0 and len(run.measurement_times):
            ax.plot(run.measurement_times, run.measurement_values, ".",
                    color="tab:red", ms=5, label="measurements")
        ax.set_ylabel(label)
        ax.legend(loc="best", fontsize=8)
    axes[-1].set_xlabel("t [s]")
    fig.tight_layout()
    return fig


_RENDERERS = {
    "moments": _render_moments,
    "heatmap": _render_heatmap,
    "density_snapshots": _render_density_snapshots,
    "trajectories": _render_trajectories,
}


def render(spec: FigureSpec) -> str:
    """Render the figure described by `spec` and write it to spec.output."""
    fig = _RENDERERS[spec.kind](spec)
    fig.savefig(spec.output, dpi=150)
    plt.close(fig)
    return spec.output
