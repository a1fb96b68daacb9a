"""Time loop: initial level set, per-step transport solve, reinitialization and measurements."""

from __future__ import annotations

import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench
from .energy import VARIANTS, EnergyModel, ModelError, contour_energy, ellipse_model, get_model, require_admissible
from .fem import StepParams, advance, step_fields
from .levelset import (
    Contour,
    LevelSet,
    UniformSignError,
    extract_contour,
    init_circle,
    init_ellipse,
    init_polyline,
    read_polyline_csv,
)
from .mesh import TriMesh, generate_rect_mesh, import_gmsh, write_vtk

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

CASES = ("ellipse", "circle", "custom")

# config key -> (section, key in the file)
_LAYOUT = {
    "width": ("domain", "width"),
    "height": ("domain", "height"),
    "h": ("domain", "h"),
    "mesh_file": ("domain", "mesh"),
    "dt": ("numerics", "dt"),
    "t_end": ("numerics", "t_end"),
    "mu": ("numerics", "mu"),
    "supg": ("numerics", "supg"),
    "solver_rel_tol": ("numerics", "solver_rel_tol"),
    "solver_max_iter": ("numerics", "solver_max_iter"),
    "case": ("case", "kind"),
    "center": ("case", "center"),
    "a0": ("case", "a0"),
    "r": ("case", "r"),
    "R": ("case", "R"),
    "contour": ("case", "contour"),
    "model": ("model", "name"),
    "model_params": ("model", "params"),
    "variant": ("model", "variant"),
    "force_inadmissible": ("model", "force_inadmissible"),
    "output_dir": ("output", "directory"),
    "snapshot_every": ("output", "snapshot_every"),
}


class ConfigError(ValueError):
    """Invalid or unreadable simulation configuration."""


class SimulationError(RuntimeError):
    """A failure inside the time loop, tagged with the step at which it happened."""

    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class SimConfig:
    width: float = 1.0
    height: float = 1.0
    h: float = 3e-3
    mesh_file: str = ""
    dt: float = 5e-4
    t_end: float = 1e-2
    mu: float = 1.0
    supg: bool = True
    solver_rel_tol: float = 1e-8
    solver_max_iter: int = 2000
    case: str = "ellipse"
    center: tuple = (0.5, 0.5)
    a0: float = 0.4
    r: float = 2.0
    R: float = 0.4
    contour: str = ""
    model: str = "ellipse"
    model_params: tuple = ()
    variant: str | None = "aniso"
    force_inadmissible: bool = False
    output_dir: str = "out"
    snapshot_every: int = 0

    @property
    def b0(self) -> float:
        return self.a0 / self.r

    @property
    def n_steps(self) -> int:
        n = self.t_end / self.dt
        return max(1, int(round(n)) if abs(n - round(n)) < 1e-9 * max(1.0, n) else math.ceil(n))

    def replace(self, **changes) -> SimConfig:
        return dataclasses.replace(self, **changes)

    # -- serialization ------------------------------------------------------

    def to_sections(self) -> dict:
        out: dict = {}
        for name, (section, key) in _LAYOUT.items():
            value = getattr(self, name)
            if value is None:
                # an unset variant is written as the empty string
                value = ""
            if isinstance(value, tuple):
                value = list(value)
            out.setdefault(section, {})[key] = value
        return out

    def dumps(self) -> str:
        lines = []
        for section, values in self.to_sections().items():
            if lines:
                lines.append("")
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_toml_value(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def from_sections(cls, data: dict) -> SimConfig:
        reverse = {v: k for k, v in _LAYOUT.items()}
        kwargs = {}
        for section, values in data.items():
            if not isinstance(values, dict):
                raise ConfigError(f"top-level key {section!r} is not a section")
            for key, value in values.items():
                name = reverse.get((section, key))
                if name is None:
                    raise ConfigError(f"unknown key [{section}] {key}")
                kwargs[name] = value
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg._normalized()

    @classmethod
    def parse(cls, text: str) -> SimConfig:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        return cls.from_sections(data)

    @classmethod
    def load(cls, path) -> SimConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = cls.parse(text)
        # relative input files are taken relative to the config file
        changes = {}
        for name in ("mesh_file", "contour"):
            value = getattr(cfg, name)
            if value and not Path(value).is_absolute():
                changes[name] = str(path.parent / value)
        return cfg.replace(**changes) if changes else cfg

    def _normalized(self) -> SimConfig:
        try:
            changes = {
                "center": tuple(float(v) for v in self.center),
                "model_params": tuple(float(v) for v in self.model_params),
                "solver_max_iter": int(self.solver_max_iter),
                "snapshot_every": int(self.snapshot_every),
            }
            for name in ("width", "height", "h", "dt", "t_end", "mu", "solver_rel_tol", "a0", "r", "R"):
                changes[name] = float(getattr(self, name))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value type: {exc}") from None
        if self.variant == "":
            changes["variant"] = None
        return self.replace(**changes)

    # -- validation ---------------------------------------------------------

    def validate(self, need_variant: bool = True) -> None:
        """Raise ConfigError on invalid values and InadmissibleModelError on a rejected model."""
        for name in ("width", "height", "h", "dt", "t_end"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.h > min(self.width, self.height):
            raise ConfigError(f"h={self.h} exceeds the domain size")
        if not self.mu >= 0:
            raise ConfigError(f"mu must be non-negative, got {self.mu}")
        if not 0 < self.solver_rel_tol < 1:
            raise ConfigError("solver_rel_tol must lie in (0, 1)")
        if self.solver_max_iter < 1:
            raise ConfigError("solver_max_iter must be at least 1")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be non-negative")
        if len(self.center) != 2:
            raise ConfigError("center needs two coordinates")
        if self.case not in CASES:
            raise ConfigError(f"unknown case {self.case!r}; expected one of {', '.join(CASES)}")
        if self.variant is None:
            if need_variant:
                raise ConfigError("variant must be 'iso' or 'aniso'")
        elif self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        self._validate_geometry()
        model = self.initial_model()
        if self.variant == "aniso" and not self.force_inadmissible:
            require_admissible(model)

    def _validate_geometry(self) -> None:
        margin = 4.0 * self.h
        cx, cy = self.center
        if self.case == "ellipse":
            if not self.a0 > 0 or not self.r >= 1:
                raise ConfigError(f"ellipse needs a0 > 0 and r >= 1, got a0={self.a0}, r={self.r}")
            rx, ry = self.a0, self.b0
        elif self.case == "circle":
            if not self.R > 0:
                raise ConfigError(f"circle radius must be positive, got {self.R}")
            rx = ry = self.R
        else:
            if not self.contour:
                raise ConfigError("custom case needs a contour file")
            try:
                poly = read_polyline_csv(self.contour)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read contour {self.contour}: {exc}") from None
            lo, hi = poly.min(axis=0), poly.max(axis=0)
            if lo[0] < margin or lo[1] < margin or hi[0] > self.width - margin or hi[1] > self.height - margin:
                raise ConfigError("custom contour comes closer than 4h to the domain boundary")
            return
        if cx - rx < margin or cy - ry < margin or cx + rx > self.width - margin or cy + ry > self.height - margin:
            raise ConfigError(f"{self.case} does not fit inside the domain with a margin of 4h = {margin:g}")

    # -- model ----------------------------------------------------------------

    @property
    def tracks_ellipse(self) -> bool:
        """The ellipse model follows the measured small axis."""
        return self.model.strip().startswith("ellipse")

    def ellipse_ratio(self) -> float:
        return self.model_params[0] if self.model_params else self.r

    def model_at(self, b: float) -> EnergyModel:
        if self.tracks_ellipse:
            return ellipse_model(self.ellipse_ratio(), b)
        return get_model(self.model, *self.model_params)

    def initial_model(self) -> EnergyModel:
        try:
            if self.tracks_ellipse:
                b = self.b0 if self.case == "ellipse" else 1.0
                if len(self.model_params) > 1:
                    b = self.model_params[1]
                return self.model_at(b)
            return get_model(self.model, *self.model_params)
        except ModelError:
            raise
        except (TypeError, ValueError) as exc:
            raise ModelError(f"cannot build model {self.model!r}: {exc}") from None

    def echo(self) -> dict:
        """Flat key/value view for CSV headers."""
        out = {}
        for section, values in self.to_sections().items():
            for key, value in values.items():
                out[f"{section}.{key}"] = _toml_value(value)
        return out


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value) or math.isnan(value):
            raise ConfigError("non-finite values cannot be written")
        return repr(value)
    if isinstance(value, str):
        return '"' + "".join(_toml_char(ch) for ch in value) + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r}")


def _toml_char(ch: str) -> str:
    if ch in '"\\':
        return "\\" + ch
    if ord(ch) < 0x20 or ord(ch) == 0x7F:
        return f"\\u{ord(ch):04x}"
    return ch


# --------------------------------------------------------------------------
# running


@dataclass
class SimResult:
    record: bench.RunRecord
    level_set: LevelSet | None
    contour: Contour | None
    snapshots: list = field(default_factory=list)


def build_mesh(config: SimConfig) -> TriMesh:
    if config.mesh_file:
        return import_gmsh(config.mesh_file, bounds=(0.0, 0.0, config.width, config.height))
    return generate_rect_mesh(config.width, config.height, config.h)


def initial_level_set(config: SimConfig, mesh: TriMesh) -> LevelSet:
    if config.case == "ellipse":
        return init_ellipse(mesh, config.center, config.a0, config.b0)
    if config.case == "circle":
        return init_circle(mesh, config.center, config.R)
    return init_polyline(mesh, read_polyline_csv(config.contour))


def _measure(config: SimConfig, ls: LevelSet, model: EnergyModel) -> tuple[dict, Contour]:
    contour = extract_contour(ls)
    b = bench.measure_b(ls)
    row = {"b": b}
    if config.case == "ellipse":
        a = bench.measure_a(ls, config.a0, config.center)
        row.update(a=a, r=a / b)
    else:
        row["r"] = bench.radius_ratio(contour)
    row["Lambda"] = bench.efficiency(ls, model, contour)
    row["energy"] = contour_energy(model, contour.normals, contour.lengths)
    return row, contour


def _snapshot(path: Path, ls: LevelSet, model: EnergyModel, variant: str) -> Path:
    f = step_fields(ls, model, variant)
    return write_vtk(path, ls.mesh, {"phi": ls.phi, "normal": f["normal"], "gamma": f["gamma"], "D": f["D"]})


def simulate(config: SimConfig, output_dir=None, progress=None) -> SimResult:
    """Run the time loop and keep the final level set alongside the record.

    ``progress(step, row)`` is called after every recorded step.
    """
    config.validate()
    mesh = build_mesh(config)
    ls = initial_level_set(config, mesh)
    params = StepParams(
        dt=config.dt,
        mu=config.mu,
        solver_rel_tol=config.solver_rel_tol,
        solver_max_iter=config.solver_max_iter,
        supg=config.supg,
    )
    record = bench.RunRecord(config.echo())
    record.config["mesh.nodes"] = str(mesh.n_nodes)
    record.config["mesh.triangles"] = str(mesh.n_triangles)
    snap_dir = Path(output_dir) / "snapshots" if output_dir is not None and config.snapshot_every > 0 else None
    snapshots = []

    model = config.initial_model()
    row, contour = _measure(config, ls, model)
    record.append(t=0.0, **row)
    if snap_dir is not None:
        snapshots.append(_snapshot(snap_dir / "step_00000.vtk", ls, model, config.variant))

    b_prev = None
    for k in range(1, config.n_steps + 1):
        t = k * config.dt
        if config.tracks_ellipse:
            # small axis at the end of the step, extrapolated from the measured history
            b_now = row["b"]
            b_pred = b_now if b_prev is None else 2.0 * b_now - b_prev
            model = config.model_at(b_pred if b_pred > 0 else b_now)
            b_prev = b_now
        try:
            ls, _ = advance(ls, model, config.variant, params, force=True)
            row, contour = _measure(config, ls, model)
        except UniformSignError:
            logger.info("interface vanished at step %d (t=%g)", k, t)
            record.append(t=t, status=bench.STATUS_VANISHED)
            # the contour of the last valid step is kept as the final shape
            ls = None
            break
        except Exception as exc:
            raise SimulationError(k, exc) from exc
        record.append(t=t, **row)
        if progress is not None:
            progress(k, record.rows[-1])
        if snap_dir is not None and k % config.snapshot_every == 0:
            snapshots.append(_snapshot(snap_dir / f"step_{k:05d}.vtk", ls, model, config.variant))

    if len(record.valid_rows()) >= 2:
        bench.series_velocity(record)
        if config.case == "ellipse" and config.mu > 0:
            bench.attach_ellipse_errors(record, bench.EllipseExact(config.a0, config.b0, config.mu))
    return SimResult(record, ls, contour, snapshots)


def run(config: SimConfig, output_dir=None, progress=None) -> bench.RunRecord:
    """Simulate ``config`` and return its RunRecord; snapshots go to ``output_dir`` per the cadence."""
    return simulate(config, output_dir, progress).record


@dataclass
class Comparison:
    iso: bench.RunRecord
    aniso: bench.RunRecord
    table: np.ndarray  # columns t, Lambda_iso, Lambda_aniso
    contours: dict

    def lambda_ordered(self, tol: float = 0.0) -> bool:
        """Whether the anisotropic efficiency never falls below the isotropic one where both exist."""
        both = ~np.isnan(self.table[:, 1:]).any(axis=1)
        return bool(np.all(self.table[both, 2] >= self.table[both, 1] - tol))

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.iso.to_csv(directory / "iso.csv")
        self.aniso.to_csv(directory / "aniso.csv")
        with (directory / "lambda.csv").open("w") as fh:
            fh.write("t,Lambda_iso,Lambda_aniso,difference\n")
            for t, li, la in self.table:
                vals = [t, li, la, la - li]
                fh.write(",".join("" if math.isnan(v) else f"{v:.17g}" for v in vals) + "\n")
        for variant, contour in self.contours.items():
            if contour is not None:
                contour.to_csv(directory / f"contour_{variant}.csv")
        return directory


def compare_iso_aniso(config: SimConfig, output_dir=None) -> Comparison:
    """Run both variants from the same initial state and align their efficiencies step by step."""
    results = {}
    config.replace(variant="aniso").validate()
    for variant in VARIANTS:
        sub = None if output_dir is None else Path(output_dir) / variant
        results[variant] = simulate(config.replace(variant=variant), sub)
    iso, aniso = results["iso"].record, results["aniso"].record
    n = max(len(iso), len(aniso))
    table = np.full((n, 3), np.nan)
    for j, rec in ((1, iso), (2, aniso)):
        for i, row in enumerate(rec.rows):
            table[i, 0] = row["t"]
            table[i, j] = row["Lambda"]
    contours = {v: r.contour for v, r in results.items()}
    return Comparison(iso, aniso, table, contours)
