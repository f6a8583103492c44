"""Parsers for the simulation package's documented file formats.

This package sits behind a pure data boundary: everything here reads the
CSV and checkpoint schemas as documented, nothing imports the simulation
code itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    """An input file does not match its documented schema."""


@dataclass
class MomentSeries:
    """Moment CSV contents: columns keyed by exponent tuples."""

    times: np.ndarray
    exponents: list[tuple[int, ...]]
    moments: np.ndarray
    standard_errors: np.ndarray | None = None

    def column(self, exps: tuple[int, ...]) -> np.ndarray:
        return self.moments[:, self.exponents.index(exps)]

    def se_column(self, exps: tuple[int, ...]) -> np.ndarray:
        if self.standard_errors is None:
            raise FormatError("file carries no standard-error columns")
        return self.standard_errors[:, self.exponents.index(exps)]


def _split_rows(text: str) -> list[list[str]]:
    return [line.split(",") for line in text.strip().splitlines() if line.strip()]


def read_moments(path: str) -> MomentSeries:
    rows = _split_rows(open(path).read())
    header = rows[0]
    if header[0] != "t":
        raise FormatError(f"{path}: first column must be t")
    m_cols, se_cols, exponents = [], [], []
    for i, name in enumerate(header):
        if name.startswith("se_m_"):
            se_cols.append(i)
        elif name.startswith("m_"):
            m_cols.append(i)
            exponents.append(tuple(int(p) for p in name[2:].split("_")))
    if not m_cols:
        raise FormatError(f"{path}: no moment columns")
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    ses = data[:, se_cols] if se_cols else None
    return MomentSeries(times=data[:, 0], exponents=exponents,
                        moments=data[:, m_cols], standard_errors=ses)


@dataclass
class FilterSeries:
    """Filter CSV contents: MAP estimates, optional truth, measurements."""

    times: np.ndarray
    map_states: np.ndarray
    truth_states: np.ndarray | None
    measurement_times: np.ndarray
    measurement_values: np.ndarray


def read_filter(path: str) -> FilterSeries:
    rows = _split_rows(open(path).read())
    header = rows[0]
    map_cols = [i for i, h in enumerate(header) if h.startswith("map_x")]
    truth_cols = [i for i, h in enumerate(header) if h.startswith("truth_x")]
    try:
        y_col = header.index("y")
    except ValueError as err:
        raise FormatError(f"{path}: missing y column") from err
    if header[0] != "t" or not map_cols:
        raise FormatError(f"{path}: not a filter CSV")
    times, maps, truths, mt, mv = [], [], [], [], []
    has_truth = False
    for row in rows[1:]:
        times.append(float(row[0]))
        maps.append([float(row[i]) for i in map_cols])
        truth_vals = [row[i] for i in truth_cols]
        if all(v != "" for v in truth_vals):
            has_truth = True
            truths.append([float(v) for v in truth_vals])
        else:
            truths.append([np.nan] * len(truth_cols))
        if row[y_col] != "":
            mt.append(float(row[0]))
            mv.append(float(row[y_col]))
    return FilterSeries(
        times=np.array(times),
        map_states=np.array(maps),
        truth_states=np.array(truths) if has_truth else None,
        measurement_times=np.array(mt),
        measurement_values=np.array(mv),
    )


@dataclass
class HeatmapMatrix:
    order: int
    values: np.ndarray  # NaN where blank or undefined
    undefined: list[tuple[int, int]]


def read_heatmap(path: str) -> HeatmapMatrix:
    rows = _split_rows(open(path).read())
    if not rows or not rows[0][0].startswith("alpha1"):
        raise FormatError(f"{path}: not a heat-map CSV")
    order = len(rows[0]) - 2
    values = np.full((order + 1, order + 1), np.nan)
    undefined = []
    for row in rows[1:]:
        a1 = int(row[0])
        for a2, cell in enumerate(row[1:]):
            if cell == "":
                continue
            if cell == "undefined":
                undefined.append((a1, a2))
            else:
                values[a1, a2] = float(cell)
    return HeatmapMatrix(order=order, values=values, undefined=undefined)


@dataclass
class MedRecord:
    """One checkpointed max-entropy belief, as serialized by the simulator."""

    time: float
    order: int
    lower: np.ndarray
    upper: np.ndarray
    center: np.ndarray
    halfwidth: np.ndarray
    offset: float
    multipliers: dict[tuple[int, ...], float]

    @property
    def dimension(self) -> int:
        return self.lower.shape[0]


def read_checkpoints(path: str) -> list[MedRecord]:
    lines = open(path).read().splitlines()
    if not lines or not lines[0].startswith("# shsmoments med checkpoints"):
        raise FormatError(f"{path}: not a MED checkpoint file")
    records = []
    fields: dict[str, str] = {}
    multipliers: dict[tuple[int, ...], float] = {}
    inside = False
    for ln in lines[1:]:
        token = ln.strip()
        if token == "record":
            inside, fields, multipliers = True, {}, {}
        elif token == "end":
            if not inside:
                raise FormatError(f"{path}: stray end marker")
            records.append(MedRecord(
                time=float(fields["time"]),
                order=int(fields["order"]),
                lower=np.array([float(v) for v in fields["lower"].split(",")]),
                upper=np.array([float(v) for v in fields["upper"].split(",")]),
                center=np.array([float(v) for v in fields["center"].split(",")]),
                halfwidth=np.array([float(v) for v in fields["halfwidth"].split(",")]),
                offset=float(fields.get("offset", "0.0")),
                multipliers=dict(multipliers),
            ))
            inside = False
        elif inside and token:
            key, _, value = token.partition("=")
            if key.startswith("lam_"):
                exps = tuple(int(p) for p in key[4:].split("_"))
                multipliers[exps] = float(value)
            else:
                fields[key] = value
    if inside:
        raise FormatError(f"{path}: unterminated record")
    return records
