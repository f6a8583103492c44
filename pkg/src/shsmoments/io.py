"""File formats: moment/flux/ensemble/filter CSVs, heat-map matrices,
MED checkpoint files, and run manifests.

All floats are written with repr so identical runs produce byte-identical
files; writes go through a temp file plus rename.
"""

from __future__ import annotations

import os
import tempfile
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import SchemaError
from .filtering import FilterRun, MeasurementRecord
from .maxent import MedParams, med_from_record, med_to_record
from .mcref import EnsembleMoments, RolloutError
from .polyalg import MultiIndex, enumerate_multiindices
from .propagate import MomentTrajectory


def _fmt(x: float) -> str:
    return repr(float(x))


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def moment_column_names(indices: Sequence[MultiIndex], prefix: str = "m") -> list[str]:
    return [prefix + "_" + "_".join(str(e) for e in a.exponents) for a in indices]


# ---------------------------------------------------------------------------
# Moment trajectory and flux CSVs
# ---------------------------------------------------------------------------


def trajectory_to_csv(traj: MomentTrajectory, stride: int = 1) -> str:
    names = moment_column_names(traj.indices)
    lines = ["t," + ",".join(names)]
    rows = range(0, len(traj.times), stride)
    last = len(traj.times) - 1
    picked = sorted(set(list(rows) + [last]))
    for i in picked:
        lines.append(_fmt(traj.times[i]) + "," + ",".join(_fmt(v) for v in traj.moments[i]))
    return "\n".join(lines) + "\n"


def flux_to_csv(traj: MomentTrajectory, stride: int = 1) -> str:
    names = moment_column_names(traj.indices, prefix="flux")
    lines = ["t," + ",".join(names) + ",fit_fallback"]
    last = len(traj.times) - 1
    picked = sorted(set(list(range(0, len(traj.times), stride)) + [last]))
    for i in picked:
        lines.append(
            _fmt(traj.times[i]) + ","
            + ",".join(_fmt(v) for v in traj.flux_log[i])
            + f",{int(traj.fit_failed[i])}"
        )
    return "\n".join(lines) + "\n"


def ensemble_to_csv(ens: EnsembleMoments) -> str:
    names = moment_column_names(ens.indices)
    se_names = ["se_" + n for n in names]
    lines = ["t," + ",".join(names) + "," + ",".join(se_names)]
    for i in range(len(ens.times)):
        lines.append(
            _fmt(ens.times[i]) + ","
            + ",".join(_fmt(v) for v in ens.moments[i]) + ","
            + ",".join(_fmt(v) for v in ens.standard_errors[i])
        )
    return "\n".join(lines) + "\n"


def excess_mass_to_csv(ens: EnsembleMoments) -> str:
    lines = ["t,excess_mass_fraction"]
    for i in range(len(ens.times)):
        lines.append(_fmt(ens.times[i]) + "," + _fmt(ens.excess_mass_fraction[i]))
    return "\n".join(lines) + "\n"


class MomentTable:
    """Parsed moment CSV: times plus columns keyed by multi-index."""

    def __init__(self, times: np.ndarray, indices: tuple[MultiIndex, ...],
                 moments: np.ndarray, standard_errors: Optional[np.ndarray] = None):
        self.times = times
        self.indices = indices
        self.moments = moments
        self.standard_errors = standard_errors

    @property
    def order(self) -> int:
        return max(a.degree for a in self.indices)


def _parse_index_names(names: Sequence[str], prefix: str) -> tuple[MultiIndex, ...]:
    out = []
    for name in names:
        parts = name.split("_")
        if parts[0] != prefix or len(parts) < 2:
            raise SchemaError(f"unexpected column {name!r}")
        try:
            out.append(MultiIndex(tuple(int(p) for p in parts[1:])))
        except ValueError as err:
            raise SchemaError(f"cannot parse column {name!r}") from err
    return tuple(out)


def read_moment_csv(text: str) -> MomentTable:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise SchemaError("empty moment CSV")
    header = lines[0].split(",")
    if header[0] != "t":
        raise SchemaError("moment CSV must start with a t column")
    moment_cols = [i for i, h in enumerate(header) if h.startswith("m_")]
    se_cols = [i for i, h in enumerate(header) if h.startswith("se_m_")]
    indices = _parse_index_names([header[i] for i in moment_cols], "m")
    if se_cols:
        se_idx = _parse_index_names([header[i][3:] for i in se_cols], "m")
        if se_idx != indices:
            raise SchemaError("standard-error columns do not mirror moment columns")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    if data.shape[1] != len(header):
        raise SchemaError("ragged moment CSV")
    times = data[:, 0]
    moments = data[:, moment_cols]
    ses = data[:, se_cols] if se_cols else None
    return MomentTable(times, indices, moments, ses)


# ---------------------------------------------------------------------------
# Filter CSV and measurement schedules
# ---------------------------------------------------------------------------


def filter_run_to_csv(run: FilterRun,
                      truth: Optional[tuple[np.ndarray, np.ndarray]] = None) -> str:
    n = run.indices[0].dimension
    map_cols = [f"map_x{i + 1}" for i in range(n)]
    truth_cols = [f"truth_x{i + 1}" for i in range(n)]
    names = moment_column_names(run.indices)
    lines = ["t," + ",".join(map_cols + truth_cols) + ",y," + ",".join(names)]
    truth_interp = None
    if truth is not None:
        tt, ts = truth
        truth_interp = np.column_stack(
            [np.interp(run.times, tt, ts[:, c]) for c in range(n)]
        )
    # MAP estimates are recorded at every record time, in order.
    assert len(run.map_times) == len(run.times)
    for i, t in enumerate(run.times):
        map_txt = ",".join(_fmt(v) for v in run.map_states[i])
        truth_txt = (",".join(_fmt(v) for v in truth_interp[i])
                     if truth_interp is not None else "," * (n - 1))
        y = run.measurement_values[i]
        y_txt = "" if np.isnan(y) else _fmt(y)
        lines.append(
            _fmt(t) + "," + map_txt + "," + truth_txt + "," + y_txt + ","
            + ",".join(_fmt(v) for v in run.post_moments[i])
        )
    return "\n".join(lines) + "\n"


def rmse_summary(run: FilterRun) -> str:
    lines = []
    if run.position_rmse is not None:
        lines.append(f"position_rmse={_fmt(run.position_rmse)}")
    if run.velocity_rmse is not None:
        lines.append(f"velocity_rmse={_fmt(run.velocity_rmse)}")
    lines.append(f"measurements_applied={int(np.sum(~np.isnan(run.measurement_values)))}")
    lines.append(f"refit_fallbacks={len(run.refit_fallback_times)}")
    return "\n".join(lines) + "\n"


def truth_path_to_csv(times: np.ndarray, states: np.ndarray) -> str:
    n = states.shape[1]
    lines = ["t," + ",".join(f"x{i + 1}" for i in range(n))]
    for i in range(len(times)):
        lines.append(_fmt(times[i]) + "," + ",".join(_fmt(v) for v in states[i]))
    return "\n".join(lines) + "\n"


def schedule_to_csv(schedule: Sequence[MeasurementRecord]) -> str:
    lines = ["t,y"]
    for rec in schedule:
        lines.append(_fmt(rec.time) + "," + _fmt(rec.value))
    return "\n".join(lines) + "\n"


def read_schedule_csv(text: str) -> list[MeasurementRecord]:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0].split(",")[:2] != ["t", "y"]:
        raise SchemaError("measurement schedule must have header t,y")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 2:
            raise SchemaError(f"bad schedule row {ln!r}")
        out.append(MeasurementRecord(float(parts[0]), float(parts[1])))
    return out


# ---------------------------------------------------------------------------
# Heat-map matrix
# ---------------------------------------------------------------------------


def heatmap_to_csv(err: RolloutError) -> str:
    """Matrix over (alpha1 rows, alpha2 columns); blank cells fall outside
    the truncation, undefined entries are written as 'undefined'."""
    order = err.order
    header = "alpha1\\alpha2," + ",".join(str(j) for j in range(order + 1))
    lines = [header]
    for a1 in range(order + 1):
        row = [str(a1)]
        for a2 in range(order + 1):
            if a1 + a2 > order:
                row.append("")
                continue
            alpha = MultiIndex((a1, a2))
            if alpha in err.undefined:
                row.append("undefined")
            else:
                row.append(_fmt(err.entries[alpha]))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def compare_summary(err: RolloutError) -> str:
    lines = [
        f"max_normalized_error={_fmt(err.max_defined())}",
        f"mean_normalized_error={_fmt(err.mean_defined())}",
        f"undefined_entries={len(err.undefined)}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# MED checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_HEADER = "# shsmoments med checkpoints v1"


def checkpoints_to_text(entries: Iterable[tuple[float, MedParams]]) -> str:
    blocks = [CHECKPOINT_HEADER]
    for t, lam in entries:
        blocks.append("record")
        blocks.append(f"time={_fmt(t)}")
        blocks.append(med_to_record(lam))
        blocks.append("end")
    return "\n".join(blocks) + "\n"


def read_checkpoints(text: str) -> list[tuple[float, MedParams]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise SchemaError("not a MED checkpoint file")
    out = []
    block: list[str] = []
    time = None
    inside = False
    for ln in lines[1:]:
        stripped = ln.strip()
        if stripped == "record":
            inside, block, time = True, [], None
        elif stripped == "end":
            if not inside or time is None:
                raise SchemaError("malformed checkpoint block")
            out.append((time, med_from_record("\n".join(block))))
            inside = False
        elif inside:
            if stripped.startswith("time="):
                time = float(stripped[5:])
            else:
                block.append(ln)
    if inside:
        raise SchemaError("unterminated checkpoint block")
    return out


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def manifest_text(fields: dict) -> str:
    lines = [f"{k}={v}" for k, v in fields.items()]
    return "\n".join(lines) + "\n"
