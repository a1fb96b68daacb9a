"""Inclination-dependent boundary energy densities and diffusion tensors.

A model gives the energy density ``gamma`` as a function of the
inclination angle ``lam`` of the unit normal, ``n = (cos lam, sin lam)``,
together with its first two derivatives. Two ways of turning a model
into the diffusion tensor ``D`` are supported:

* ``angular``: ``gamma`` is extended to any gradient ``p`` as
  ``gamma(p / |p|)`` (constant along rays) and the anisotropic tensor adds
  the Cartesian Hessian of that extension to ``gamma * I``;
* ``prescribedD``: the anisotropic tensor is ``factor * gamma * I``, for
  energies whose Hessian is known in closed form to be a multiple of the
  identity (the shrinking-ellipse energy uses ``factor = 3``).

Symmetric tensors are stored as ``(..., 3)`` arrays ``(xx, yy, xy)``.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

ANGULAR = "angular"
PRESCRIBED = "prescribedD"
VARIANTS = ("iso", "aniso")


class ModelError(ValueError):
    pass


class InadmissibleModelError(ModelError):
    """The anisotropic diffusion tensor is not positive definite for some inclination."""


@dataclass(frozen=True)
class EnergyModel:
    name: str
    gamma: Callable[[np.ndarray], np.ndarray]
    dgamma: Callable[[np.ndarray], np.ndarray]
    d2gamma: Callable[[np.ndarray], np.ndarray]
    extension: str = ANGULAR
    d_factor: float | None = None
    params: tuple = field(default=())

    def __post_init__(self):
        if self.extension not in (ANGULAR, PRESCRIBED):
            raise ModelError(f"unknown extension {self.extension!r}")
        if self.extension == PRESCRIBED and self.d_factor is None:
            raise ModelError("prescribedD models need a d_factor")

    @property
    def label(self) -> str:
        if not self.params:
            return self.name
        return f"{self.name}({', '.join(f'{p:g}' for p in self.params)})"

    def gamma_of_normal(self, n) -> np.ndarray:
        return self.gamma(inclination(n, check=False))


def inclination(n, check: bool = True, tol: float = 1e-8) -> np.ndarray | float:
    """Angle of a unit vector in ``[0, 2 pi)``, so that ``cos(lam) = n_x``."""
    n = np.asarray(n, dtype=float)
    if check:
        norm = np.linalg.norm(n, axis=-1)
        if np.any(np.abs(norm - 1.0) > tol):
            raise ValueError("inclination needs unit vectors")
    lam = np.mod(np.arctan2(n[..., 1], n[..., 0]), 2.0 * np.pi)
    # arctan2 of -0.0 can land exactly on 2 pi after the modulo
    lam = np.where(lam >= 2.0 * np.pi, 0.0, lam)
    return float(lam) if lam.ndim == 0 else lam


def gamma_hessian(model: EnergyModel, n) -> np.ndarray:
    """Cartesian Hessian of ``p -> gamma(p/|p|)`` at ``p = n`` (``|n| = 1``).

    With the tangent ``t = (-n_y, n_x)``:
    ``H = gamma'' t t - gamma' (t n + n t)``.
    """
    if model.extension != ANGULAR:
        raise ModelError(f"model {model.label} prescribes D directly; its Hessian is not available")
    n = np.asarray(n, dtype=float)
    lam = inclination(n, check=False)
    g1 = np.asarray(model.dgamma(lam), dtype=float)
    g2 = np.asarray(model.d2gamma(lam), dtype=float)
    nx, ny = n[..., 0], n[..., 1]
    tx, ty = -ny, nx
    xx = g2 * tx * tx - 2.0 * g1 * tx * nx
    yy = g2 * ty * ty - 2.0 * g1 * ty * ny
    xy = g2 * tx * ty - g1 * (tx * ny + nx * ty)
    return np.stack([xx, yy, xy], axis=-1)


def d_tensor(model: EnergyModel, n, variant: str = "aniso") -> np.ndarray:
    """Diffusion tensor ``D`` at unit normal(s) ``n``, iso or aniso variant."""
    if variant not in VARIANTS:
        raise ModelError(f"variant must be one of {VARIANTS}, got {variant!r}")
    n = np.asarray(n, dtype=float)
    g = np.asarray(model.gamma(inclination(n, check=False)), dtype=float)
    iso = np.stack([g, g, np.zeros_like(g)], axis=-1)
    if variant == "iso":
        return iso
    if model.extension == PRESCRIBED:
        return model.d_factor * iso
    return iso + gamma_hessian(model, n)


def is_positive_definite(D) -> np.ndarray:
    """Classify symmetric 2x2 tensors ``(xx, yy, xy)``: positive diagonal and ``|xy| < sqrt(xx yy)``."""
    D = np.asarray(D, dtype=float)
    xx, yy, xy = D[..., 0], D[..., 1], D[..., 2]
    return (xx > 0) & (yy > 0) & (xy * xy < xx * yy)


def tensor_eigenvalues(D) -> np.ndarray:
    """Eigenvalues (ascending) of symmetric 2x2 tensors ``(xx, yy, xy)``."""
    D = np.asarray(D, dtype=float)
    xx, yy, xy = D[..., 0], D[..., 1], D[..., 2]
    mean = 0.5 * (xx + yy)
    rad = np.hypot(0.5 * (xx - yy), xy)
    return np.stack([mean - rad, mean + rad], axis=-1)


@dataclass(frozen=True)
class PDReport:
    admissible: bool
    worst_angle: float
    worst_eigenvalue: float
    dxy_margin_min: float
    samples: int

    def summary(self) -> str:
        state = "admissible" if self.admissible else "INADMISSIBLE"
        return (
            f"{state}: min eigenvalue {self.worst_eigenvalue:.6g} at lambda={self.worst_angle:.6g} rad, "
            f"min (sqrt(Dxx Dyy) - |Dxy|) margin {self.dxy_margin_min:.6g} over {self.samples} samples"
        )


def check_positive_definite(model: EnergyModel, samples: int = 3600) -> PDReport:
    """Sample ``D_aniso`` over the inclination circle and test positive definiteness."""
    if samples < 360:
        raise ValueError("use at least 360 samples")
    lam = np.linspace(0.0, 2.0 * np.pi, samples, endpoint=False)
    n = np.column_stack([np.cos(lam), np.sin(lam)])
    D = d_tensor(model, n, "aniso")
    eig = tensor_eigenvalues(D)[:, 0]
    xx, yy, xy = D[:, 0], D[:, 1], D[:, 2]
    margin = np.sqrt(np.maximum(xx * yy, 0.0)) - np.abs(xy)
    ok = is_positive_definite(D) & np.all(np.isfinite(D), axis=1)
    k = int(np.argmin(eig))
    return PDReport(
        admissible=bool(np.all(ok)),
        worst_angle=float(lam[k]),
        worst_eigenvalue=float(eig[k]),
        dxy_margin_min=float(margin.min()),
        samples=samples,
    )


def require_admissible(model: EnergyModel, samples: int = 3600) -> PDReport:
    report = check_positive_definite(model, samples)
    if not report.admissible:
        raise InadmissibleModelError(f"model {model.label} fails the positive-definiteness check: {report.summary()}")
    return report


# --------------------------------------------------------------------------
# built-in models


def constant_model(c: float = 1.0) -> EnergyModel:
    if c <= 0:
        raise ModelError("constant energy must be positive")
    return EnergyModel(
        "constant",
        lambda lam: np.full_like(np.asarray(lam, dtype=float), c),
        lambda lam: np.zeros_like(np.asarray(lam, dtype=float)),
        lambda lam: np.zeros_like(np.asarray(lam, dtype=float)),
        params=(float(c),),
    )


def sixfold377_model() -> EnergyModel:
    """``1 + (cos 6 lam - 9 cos 2 lam) / 377``: weakly anisotropic, positive definite everywhere."""
    k = 1.0 / 377.0
    return EnergyModel(
        "sixfold377",
        lambda lam: 1.0 + k * (np.cos(6 * lam) - 9 * np.cos(2 * lam)),
        lambda lam: k * (-6 * np.sin(6 * lam) + 18 * np.sin(2 * lam)),
        lambda lam: k * (-36 * np.cos(6 * lam) + 36 * np.cos(2 * lam)),
    )


def fourfold_model(base: float = 2.0) -> EnergyModel:
    """``base + cos 4 lam``. Not positive definite for the default base; for display and negative tests."""
    return EnergyModel(
        "fourfold",
        lambda lam: base + np.cos(4 * lam),
        lambda lam: -4 * np.sin(4 * lam),
        lambda lam: -16 * np.cos(4 * lam),
        params=() if base == 2.0 else (float(base),),
    )


def ellipse_model(r: float, b: float, d_factor: float = 3.0) -> EnergyModel:
    """Energy of the homothetically shrinking ellipse with axis ratio ``r`` and small axis ``b``.

    On the ellipse ``(r b cos t, b sin t)`` the density is the squared
    speed of the parameterisation, ``b^2 (r^2 sin^2 t + cos^2 t)``; the
    parameter follows from the normal through ``tan t = n_y / (r n_x)``,
    which gives ``gamma(lam) = (r b)^2 / (r^2 cos^2 lam + sin^2 lam)``.
    """
    if r < 1 or b <= 0:
        raise ModelError(f"ellipse model needs r >= 1 and b > 0, got r={r}, b={b}")
    a2 = (r * b) ** 2
    r2 = r * r

    def q(lam):
        return r2 * np.cos(lam) ** 2 + np.sin(lam) ** 2

    def dq(lam):
        return (1.0 - r2) * np.sin(2 * lam)

    def d2q(lam):
        return 2.0 * (1.0 - r2) * np.cos(2 * lam)

    return EnergyModel(
        "ellipse",
        lambda lam: a2 / q(lam),
        lambda lam: -a2 * dq(lam) / q(lam) ** 2,
        lambda lam: a2 * (2.0 * dq(lam) ** 2 / q(lam) ** 3 - d2q(lam) / q(lam) ** 2),
        extension=PRESCRIBED,
        d_factor=float(d_factor),
        params=(float(r), float(b)),
    )


def ellipse_gamma_parametric(theta, r: float, b: float):
    """Ellipse energy written in the curve parameter: ``b^2 (r^2 sin^2 t + cos^2 t)``."""
    theta = np.asarray(theta, dtype=float)
    return b * b * (r * r * np.sin(theta) ** 2 + np.cos(theta) ** 2)


def tabulated_model(path, name: str | None = None) -> EnergyModel:
    """Model from a CSV table of ``(lam, gamma)`` rows, interpolated by a periodic cubic spline."""
    path = Path(path)
    rows = []
    with path.open() as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                if rows:
                    raise ModelError(f"{path}: bad row {row}") from None
    data = np.array(sorted(rows))
    if len(data) < 4:
        raise ModelError(f"{path}: need at least 4 samples")
    lam, g = data[:, 0], data[:, 1]
    if lam[0] < 0 or lam[-1] >= 2 * np.pi:
        raise ModelError(f"{path}: angles must lie in [0, 2 pi)")
    if np.any(g <= 0):
        raise ModelError(f"{path}: energies must be positive")
    spline = CubicSpline(np.r_[lam, lam[0] + 2 * np.pi], np.r_[g, g[0]], bc_type="periodic")
    d1 = spline.derivative(1)
    d2 = spline.derivative(2)

    def wrap(f):
        return lambda x: f(np.mod(x, 2 * np.pi))

    return EnergyModel(name or path.stem, wrap(spline), wrap(d1), wrap(d2), params=())


_FACTORIES: dict[str, Callable[..., EnergyModel]] = {
    "constant": constant_model,
    "sixfold377": sixfold377_model,
    "fourfold": fourfold_model,
    "ellipse": ellipse_model,
}


def builtin_models() -> dict[str, Callable[..., EnergyModel]]:
    """Catalog of model factories by name."""
    return dict(_FACTORIES)


def get_model(name: str, *params: float) -> EnergyModel:
    """Build a model from its catalog name and parameters.

    ``name`` may carry its parameters inline, as in ``"ellipse(2, 0.2)"``;
    a path to a ``.csv`` file loads a tabulated model.
    """
    m = re.fullmatch(r"\s*([A-Za-z_][\w]*)\s*(?:\((.*)\))?\s*", name)
    if m is None:
        if name.endswith(".csv"):
            return tabulated_model(name)
        raise ModelError(f"unknown energy model {name!r}")
    key, inline = m.group(1), m.group(2)
    if inline:
        params = tuple(float(v) for v in inline.split(",") if v.strip()) + tuple(params)
    if key not in _FACTORIES:
        raise ModelError(f"unknown energy model {key!r}; known: {', '.join(sorted(_FACTORIES))}")
    try:
        return _FACTORIES[key](*params)
    except TypeError as exc:
        raise ModelError(f"bad parameters for model {key!r}: {exc}") from None


def contour_energy(model: EnergyModel, normals: np.ndarray, lengths: np.ndarray) -> float:
    """Discrete line integral of ``gamma`` over segments with the given normals and lengths."""
    return float(np.sum(model.gamma_of_normal(normals) * lengths))
