"""Shrinking-ellipse oracle, geometry measurements, error norms and fits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from .energy import EnergyModel
from .levelset import Contour, LevelSet, UniformSignError, extract_contour
from .mesh import MeshError

# column order of the RunRecord CSV
COLUMNS = ("step", "t", "a", "b", "r", "Va", "Vb", "e_a", "e_b", "e_Va", "e_Vb", "Lambda", "energy", "status")
STATUS_OK = "ok"
STATUS_VANISHED = "vanished"


class InsufficientDataError(ValueError):
    """A series is too short for the requested derivative, integral or fit."""


@dataclass(frozen=True)
class EllipseExact:
    """Closed-form homothetic shrinkage ``a(t) = a0 exp(-3 muG t)``, ``b`` likewise."""

    a0: float
    b0: float
    muG: float = 1.0
    times: tuple = ()

    def __post_init__(self):
        if not self.a0 >= self.b0 > 0:
            raise ValueError(f"need a0 >= b0 > 0, got a0={self.a0}, b0={self.b0}")
        if not self.muG > 0:
            raise ValueError(f"muG must be positive, got {self.muG}")

    @property
    def eccentricity(self) -> float:
        return math.sqrt(1.0 - (self.b0 / self.a0) ** 2)

    def a(self, t):
        return self.a0 * np.exp(-3.0 * self.muG * np.asarray(t, dtype=float))

    def b(self, t):
        return self.b0 * np.exp(-3.0 * self.muG * np.asarray(t, dtype=float))


def ellipse_exact_state(ex: EllipseExact, t: float) -> dict:
    """Semi-axes, inward tip speeds and eccentricity at time ``t``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    decay = math.exp(-3.0 * ex.muG * t)
    return {
        "a": ex.a0 * decay,
        "b": ex.b0 * decay,
        "va": 3.0 * ex.muG * ex.a0 * decay,
        "vb": 3.0 * ex.muG * ex.b0 * decay,
        "e": ex.eccentricity,
    }


# --------------------------------------------------------------------------
# measurements


def measure_b(ls: LevelSet) -> float:
    """Small semi-axis as the largest nodal distance value."""
    top = float(np.max(ls.phi))
    if top <= 0:
        raise UniformSignError("level set is non-positive everywhere: no interface left")
    return top


def measure_a(ls: LevelSet, a0: float, center) -> float:
    """Large semi-axis from the level set sampled at the initial tip ``center + (a0, 0)``."""
    probe = (center[0] + a0, center[1])
    try:
        return a0 + ls.mesh.interpolate(ls.phi, probe)
    except MeshError as exc:
        raise MeshError(f"probe point {probe} lies outside the mesh") from exc


def efficiency(ls: LevelSet, model: EnergyModel, contour: Contour | None = None) -> float:
    """Contour length over contour energy, i.e. the inverse length-averaged ``gamma``."""
    contour = extract_contour(ls) if contour is None else contour
    lengths = contour.lengths
    return float(lengths.sum() / np.sum(model.gamma_of_normal(contour.normals) * lengths))


def radius_ratio(contour: Contour) -> float:
    """Max over min distance of the contour vertices from their length-weighted centroid."""
    lengths = contour.lengths
    mid = contour.midpoints
    c = (mid * lengths[:, None]).sum(axis=0) / lengths.sum()
    d = np.linalg.norm(contour.segments.reshape(-1, 2) - c, axis=1)
    return float(d.max() / d.min())


# --------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    """Per-step measurements of one run plus an echo of its configuration.

    Rows are dicts keyed by ``COLUMNS``; missing numeric entries are NaN.
    A run that loses its interface ends with a row whose status is
    ``"vanished"``.
    """

    config: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def append(self, **values) -> None:
        unknown = set(values) - set(COLUMNS)
        if unknown:
            raise KeyError(f"unknown columns {sorted(unknown)}")
        t = values.get("t")
        if t is None or not np.isfinite(t):
            raise ValueError("every row needs a finite time")
        if self.rows and not t > self.rows[-1]["t"]:
            raise ValueError(f"times must increase strictly: {t} after {self.rows[-1]['t']}")
        if self.terminated:
            raise ValueError("record already terminated")
        row = {c: math.nan for c in COLUMNS}
        row["step"] = len(self.rows)
        row["status"] = STATUS_OK
        row.update(values)
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def terminated(self) -> bool:
        return bool(self.rows) and self.rows[-1]["status"] != STATUS_OK

    @property
    def status(self) -> str:
        return self.rows[-1]["status"] if self.rows else STATUS_OK

    def valid_rows(self) -> list:
        return [r for r in self.rows if r["status"] == STATUS_OK]

    def column(self, name: str, valid_only: bool = True) -> np.ndarray:
        rows = self.valid_rows() if valid_only else self.rows
        if name == "status":
            return np.array([r[name] for r in rows])
        return np.array([r[name] for r in rows], dtype=float)

    def set_column(self, name: str, values) -> None:
        rows = self.valid_rows()
        if len(values) != len(rows):
            raise ValueError("column length does not match the valid rows")
        for r, v in zip(rows, values):
            r[name] = float(v)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            for key, value in self.config.items():
                fh.write(f"# {key} = {value}\n")
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in COLUMNS])
        return path

    @classmethod
    def from_csv(cls, path) -> RunRecord:
        config = {}
        rows = []
        with Path(path).open() as fh:
            lines = fh.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                config[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
        reader = csv.DictReader(body)
        for raw in reader:
            row = {}
            for c in COLUMNS:
                v = raw.get(c, "")
                if c == "status":
                    row[c] = v or STATUS_OK
                elif c == "step":
                    row[c] = int(v)
                else:
                    row[c] = float(v) if v not in ("", "nan") else math.nan
            rows.append(row)
        return cls(config, rows)


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if math.isnan(v) else f"{v:.17g}"


# --------------------------------------------------------------------------
# post-processing


def _derivative(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = np.empty_like(y)
    d[1:-1] = (y[2:] - y[:-2]) / (t[2:] - t[:-2])
    d[0] = (y[1] - y[0]) / (t[1] - t[0])
    d[-1] = (y[-1] - y[-2]) / (t[-1] - t[-2])
    return d


def series_velocity(record: RunRecord) -> RunRecord:
    """Fill ``Va = da/dt`` and ``Vb = db/dt`` by finite differences (central inside, one-sided at the ends)."""
    rows = record.valid_rows()
    if len(rows) < 2:
        raise InsufficientDataError("velocities need at least two rows")
    t = record.column("t")
    for src, dst in (("a", "Va"), ("b", "Vb")):
        y = record.column(src)
        if np.all(np.isnan(y)):
            continue
        record.set_column(dst, _derivative(t, y))
    return record


def attach_ellipse_errors(record: RunRecord, ex: EllipseExact) -> RunRecord:
    """Absolute deviations from the closed form: ``e_a, e_b`` on positions, ``e_Va, e_Vb`` on ``d/dt``."""
    t = record.column("t")
    record.set_column("e_a", np.abs(ex.a(t) - record.column("a")))
    record.set_column("e_b", np.abs(ex.b(t) - record.column("b")))
    # exact derivatives are the negated inward speeds
    record.set_column("e_Va", np.abs(-3.0 * ex.muG * ex.a(t) - record.column("Va")))
    record.set_column("e_Vb", np.abs(-3.0 * ex.muG * ex.b(t) - record.column("Vb")))
    return record


def l2_error(record: RunRecord, ex: EllipseExact) -> float:
    """Trapezoidal integral of ``(b(t) - b_measured(t))^2`` over the recorded times."""
    t = record.column("t")
    if len(t) < 2:
        raise InsufficientDataError("the error integral needs at least two rows")
    gap = ex.b(t) - record.column("b")
    return float(trapezoid(gap**2, t))


def relative_l2_error(record: RunRecord, ex: EllipseExact) -> float:
    """Trapezoidal integral of ``((b - b_measured) / b)^2`` over the recorded times."""
    t = record.column("t")
    if len(t) < 2:
        raise InsufficientDataError("the error integral needs at least two rows")
    b = ex.b(t)
    return float(trapezoid(((b - record.column("b")) / b) ** 2, t))


def max_relative_error(record: RunRecord, ex: EllipseExact) -> float:
    t = record.column("t")
    b = ex.b(t)
    return float(np.max(np.abs(record.column("b") - b) / b))


def eccentricity_drift(record: RunRecord, ex: EllipseExact) -> float:
    """Largest relative deviation of the measured eccentricity from the initial exact one."""
    a = record.column("a")
    b = record.column("b")
    e = np.sqrt(np.clip(1.0 - (b / a) ** 2, 0.0, None))
    return float(np.max(np.abs(e - ex.eccentricity)) / ex.eccentricity)


def time_rescaled_deviation(slow: RunRecord, fast: RunRecord, factor: float = 3.0) -> float:
    """Max relative gap between ``fast.b(t)`` and ``slow.b(factor t)``.

    ``slow`` is linearly interpolated in time; only times with
    ``factor * t`` inside the slow record are compared.
    """
    ts, bs = slow.column("t"), slow.column("b")
    tf, bf = fast.column("t"), fast.column("b")
    keep = factor * tf <= ts[-1] + 1e-12
    if keep.sum() < 2:
        raise InsufficientDataError("records do not overlap after rescaling")
    ref = np.interp(factor * tf[keep], ts, bs)
    return float(np.max(np.abs(bf[keep] - ref) / ref))


def fit_convergence(pairs) -> float:
    """Least-squares slope of ``ln(error)`` against ``ln(discretization)``."""
    data = np.asarray(pairs, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2 or len(data) < 3:
        raise InsufficientDataError("a convergence fit needs at least three (discretization, error) pairs")
    if np.any(data <= 0) or not np.all(np.isfinite(data)):
        raise ValueError("discretizations and errors must be positive and finite")
    x, y = np.log(data[:, 0]), np.log(data[:, 1])
    if np.ptp(x) == 0:
        raise ValueError("degenerate fit: all discretizations are identical")
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def write_convergence_csv(path, pairs, slope: float | None = None, label: str = "discretization") -> Path:
    """Rows ``(label, error, slope)``; the slope is repeated on every row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if slope is None:
        slope = fit_convergence(pairs)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([label, "error", "slope"])
        for x, e in pairs:
            w.writerow([f"{x:.12g}", f"{e:.12g}", f"{slope:.6g}"])
    return path
