"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 invalid input, 3 inadmissible
energy model.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bench
from .energy import (
    InadmissibleModelError,
    ModelError,
    check_positive_definite,
    d_tensor,
    get_model,
    tensor_eigenvalues,
)
from .fem import step_fields
from .mesh import MeshError, write_vtk
from .sim import ConfigError, SimConfig, build_mesh, compare_iso_aniso, initial_level_set, run, tomllib

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2
EXIT_INADMISSIBLE = 3

AXES = {"meshSize": "h", "timeStep": "dt", "ratio": "r"}
CONVERGENCE_AXES = ("meshSize", "timeStep")

logger = logging.getLogger("anisoflow")


class StudyError(ValueError):
    pass


@dataclass(frozen=True)
class StudySpec:
    axis: str
    values: tuple
    base: SimConfig
    outputs: str = ""

    def validate(self) -> None:
        if self.axis not in AXES:
            raise StudyError(f"unknown study axis {self.axis!r}; expected one of {', '.join(AXES)}")
        vals = self.values
        if any(not (isinstance(v, float) and math.isfinite(v) and v > 0) for v in vals):
            raise StudyError("study values must be positive numbers")
        if self.axis in CONVERGENCE_AXES and len(vals) < 3:
            raise StudyError("a convergence study needs at least three values")
        if len(vals) < 2:
            raise StudyError("a study needs at least two values")
        steps = [b - a for a, b in zip(vals, vals[1:])]
        if not (all(s > 0 for s in steps) or all(s < 0 for s in steps)):
            raise StudyError("study values must be strictly monotone")

    def configs(self) -> list[SimConfig]:
        key = AXES[self.axis]
        return [self.base.replace(**{key: v}) for v in self.values]

    @classmethod
    def load(cls, path) -> StudySpec:
        """A study file is a run config with an extra ``[study]`` section (``axis``, ``values``, ``outputs``)."""
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read study {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse study {path}: {exc}") from None
        study = data.pop("study", None)
        if not isinstance(study, dict):
            raise StudyError("study file needs a [study] section")
        try:
            values = tuple(float(v) for v in study.get("values", ()))
        except (TypeError, ValueError):
            raise StudyError("study values must be numbers") from None
        base = SimConfig.from_sections(data)
        spec = cls(str(study.get("axis", "")), values, base, str(study.get("outputs", "")))
        spec.validate()
        return spec


# --------------------------------------------------------------------------
# helpers


def _output_root(args, config: SimConfig | None = None) -> Path:
    env = os.environ.get("ANISOFLOW_OUT")
    if getattr(args, "output", None):
        return Path(args.output)
    if env:
        return Path(env)
    return Path(config.output_dir if config is not None else "out")


def _load_config(args) -> SimConfig:
    path = args.config_path or args.config
    if not path:
        raise ConfigError("no config file given (positional or --config)")
    cfg = SimConfig.load(path)
    changes = {}
    if args.force_inadmissible:
        changes["force_inadmissible"] = True
    if args.snapshot_every is not None:
        changes["snapshot_every"] = args.snapshot_every
    return cfg.replace(**changes) if changes else cfg


def _summary(config: SimConfig, record: bench.RunRecord, seconds: float) -> str:
    b = record.column("b")
    parts = [f"status={record.status}", f"steps={len(record.valid_rows()) - 1}", f"final b={b[-1]:.6g}"]
    if config.case == "ellipse" and config.mu > 0:
        ex = bench.EllipseExact(config.a0, config.b0, config.mu)
        parts.append(f"max rel error in b={bench.max_relative_error(record, ex):.3%}")
        if len(b) >= 2:
            parts.append(f"L2 error={bench.l2_error(record, ex):.4e}")
    parts.append(f"wall time={seconds:.1f}s")
    return ", ".join(parts)


def _run_member(config: SimConfig, out_dir: str) -> tuple[str, float, str]:
    record = run(config, out_dir)
    path = record.to_csv(Path(out_dir) / "record.csv")
    return str(path), study_error(config, record), record.status


def study_error(config: SimConfig, record: bench.RunRecord) -> float:
    """L2-in-time error of the measured small axis against the closed form."""
    if config.case != "ellipse" or not config.mu > 0:
        raise StudyError("studies need an ellipse case with positive mobility")
    return bench.l2_error(record, bench.EllipseExact(config.a0, config.b0, config.mu))


# --------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    config = _load_config(args)
    out = _output_root(args, config)
    t0 = time.perf_counter()
    record = run(config, out)
    out.mkdir(parents=True, exist_ok=True)
    record.to_csv(out / "record.csv")
    config.save(out / "config.toml")
    print(_summary(config, record, time.perf_counter() - t0))
    return EXIT_OK


def cmd_study(args) -> int:
    spec = StudySpec.load(args.config_path or args.config)
    base = spec.base
    if args.force_inadmissible:
        base = base.replace(force_inadmissible=True)
    if args.snapshot_every is not None:
        base = base.replace(snapshot_every=args.snapshot_every)
    spec = StudySpec(spec.axis, spec.values, base, spec.outputs)
    configs = spec.configs()
    for cfg in configs:
        cfg.validate()
        if cfg.case != "ellipse":
            raise StudyError("studies need an ellipse case")
    root = Path(args.output) if args.output else Path(os.environ.get("ANISOFLOW_OUT") or spec.outputs or base.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    dirs = [str(root / f"run_{i:02d}_{AXES[spec.axis]}={v:.6g}") for i, v in enumerate(spec.values)]
    results: list = [None] * len(configs)
    table = root / "study.csv"
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                futures = [pool.submit(_run_member, c, d) for c, d in zip(configs, dirs)]
                for i, fut in enumerate(futures):
                    try:
                        results[i] = fut.result()
                    except BaseException:
                        for f in futures:
                            f.cancel()
                        raise
        else:
            for i, (c, d) in enumerate(zip(configs, dirs)):
                results[i] = _run_member(c, d)
                logger.info("%s=%g error %.4e", spec.axis, spec.values[i], results[i][1])
    finally:
        _write_study_table(table, spec, results)
    pairs = [(v, r[1]) for v, r in zip(spec.values, results)]
    if spec.axis in CONVERGENCE_AXES:
        slope = bench.fit_convergence(pairs)
        fit = bench.write_convergence_csv(root / "convergence.csv", pairs, slope, label=AXES[spec.axis])
        print(f"{spec.axis} study: fitted slope {slope:.3f} over {len(pairs)} runs -> {fit}")
    else:
        errors = [e for _, e in pairs]
        monotone = all(b >= a for a, b in zip(errors, errors[1:]))
        for v, e in pairs:
            print(f"r={v:.6g} error={e:.6e}")
        print(f"ratio study: errors {'non-decreasing' if monotone else 'NOT monotone'} in r -> {table}")
    return EXIT_OK


def _write_study_table(path: Path, spec: StudySpec, results: list) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([AXES[spec.axis], "error", "status", "record"])
        for v, r in zip(spec.values, results):
            if r is None:
                w.writerow([f"{v:.12g}", "", "not run", ""])
            else:
                w.writerow([f"{v:.12g}", f"{r[1]:.12g}", r[2], r[0]])


def cmd_compare(args) -> int:
    config = _load_config(args)
    out = _output_root(args, config)
    t0 = time.perf_counter()
    comp = compare_iso_aniso(config, out)
    comp.write(out)
    ordered = comp.lambda_ordered()
    print(
        f"compare: iso {comp.iso.status} after {len(comp.iso.valid_rows())} rows, "
        f"aniso {comp.aniso.status} after {len(comp.aniso.valid_rows())} rows; "
        f"Lambda_aniso >= Lambda_iso at every aligned step: {ordered}; "
        f"wall time {time.perf_counter() - t0:.1f}s -> {out}"
    )
    return EXIT_OK


def cmd_check_model(args) -> int:
    model = get_model(args.model, *args.params)
    report = check_positive_definite(model, samples=args.samples)
    print(f"model {model.label}: {report.summary()}")
    if report.admissible:
        lam = np.linspace(0.0, 2.0 * np.pi, args.samples, endpoint=False)
        eig = tensor_eigenvalues(d_tensor(model, np.column_stack([np.cos(lam), np.sin(lam)]), "aniso"))
        print(f"eigenvalue range [{eig.min():.6g}, {eig.max():.6g}]")
        return EXIT_OK
    return EXIT_INADMISSIBLE


def cmd_export_vtk(args) -> int:
    config = _load_config(args)
    mesh = build_mesh(config)
    ls = initial_level_set(config, mesh)
    model = config.initial_model()
    f = step_fields(ls, model, config.variant or "aniso")
    out = Path(args.vtk) if args.vtk else _output_root(args, config) / "initial.vtk"
    write_vtk(out, mesh, {"phi": ls.phi, "normal": f["normal"], "gamma": f["gamma"], "D": f["D"], "divD": f["divD"]})
    print(f"wrote {out} ({mesh.n_nodes} nodes, {mesh.n_triangles} triangles)")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anisoflow", description="Level-set simulator for anisotropic interface migration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, with_output=True):
        p.add_argument("config_path", nargs="?", help="config file")
        p.add_argument("--config", help="config file (alternative to the positional argument)")
        p.add_argument("--force-inadmissible", action="store_true", help="run even if D_aniso is not positive definite")
        p.add_argument("--snapshot-every", type=int, default=None, metavar="N", help="VTK snapshot cadence in steps (0: none)")
        if with_output:
            p.add_argument("-o", "--output", help="output directory (overrides ANISOFLOW_OUT and the config)")

    p = sub.add_parser("run", help="run one simulation")
    config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("study", help="mesh-size, time-step or ratio sweep")
    config_args(p)
    p.add_argument("--jobs", type=int, default=1, help="concurrent member runs")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("compare", help="run the iso and aniso variants and compare efficiencies")
    config_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("check-model", help="positive-definiteness check of an energy model")
    p.add_argument("model", help="model name, e.g. sixfold377, fourfold, 'constant(1)' or a .csv table")
    p.add_argument("params", nargs="*", type=float, help="model parameters")
    p.add_argument("--samples", type=int, default=3600)
    p.set_defaults(func=cmd_check_model)

    p = sub.add_parser("export-vtk", help="write the initial fields of a config as VTK")
    config_args(p)
    p.add_argument("--vtk", help="output file (default: <output>/initial.vtk)")
    p.set_defaults(func=cmd_export_vtk)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except InadmissibleModelError as exc:
        print(f"error: inadmissible model: {exc}", file=sys.stderr)
        return EXIT_INADMISSIBLE
    except (ConfigError, StudyError, ModelError, MeshError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
