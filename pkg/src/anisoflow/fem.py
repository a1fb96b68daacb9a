"""Backward-Euler P1 discretization of the level-set transport equation.

For test functions ``w`` the step solves

    int (phi1 - phi0)/dt w + int mu D grad(w).grad(phi1) + int mu div(D).grad(phi1) w = 0

with SUPG test functions ``w + tau c.grad(w)`` on the time and convective
terms, ``c = mu div(D)``. Coefficients are frozen at the old time level so
each step is one linear solve. No boundary integral is assembled, which
imposes the natural (zero-flux) condition on the domain boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .energy import EnergyModel, d_tensor, require_admissible
from .levelset import LevelSet, normals, reinitialize
from .mesh import TriMesh, divergence_of_tensor

logger = logging.getLogger(__name__)

# mid-edge quadrature: basis values at the midpoints of edges (0,1), (1,2), (2,0)
_MID_EDGE = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
_LOCAL_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0


class SolverError(RuntimeError):
    """The iterative solver did not reach the requested residual reduction."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class StepParams:
    dt: float
    mu: float = 1.0
    solver_rel_tol: float = 1e-8
    solver_max_iter: int = 2000
    supg: bool = True
    restart: int = 50

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.mu < 0:
            raise ValueError(f"mobility must be non-negative, got {self.mu}")
        if not 0 < self.solver_rel_tol < 1:
            raise ValueError("solver_rel_tol must lie in (0, 1)")
        if self.solver_max_iter < 1:
            raise ValueError("solver_max_iter must be at least 1")


@dataclass(eq=False)
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    unknown: np.ndarray

    def __post_init__(self):
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n) or self.rhs.shape != (n,) or self.unknown.shape != (n,):
            raise ValueError("inconsistent system dimensions")
        if np.any(np.isnan(self.matrix.data)):
            raise ValueError("matrix holds NaN entries")


@dataclass
class SolveInfo:
    iterations: int
    residual: float


@dataclass
class StepInfo:
    iterations: int
    residual: float
    degenerate_normals: int
    fields: dict = field(default_factory=dict)


class _Pattern:
    """CSR sparsity pattern of the P1 element-to-global scatter on one mesh."""

    def __init__(self, mesh: TriMesh):
        t = mesh.triangles
        n = mesh.n_nodes
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        keys, self.inverse = np.unique(rows * n + cols, return_inverse=True)
        self.indices = (keys % n).astype(np.int32)
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(keys // n, minlength=n), out=self.indptr[1:])
        self.shape = (n, n)
        self.nnz = keys.size

    def build(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.inverse, weights=local.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


_PATTERNS: dict[int, tuple[TriMesh, _Pattern]] = {}


def _pattern(mesh: TriMesh) -> _Pattern:
    hit = _PATTERNS.get(id(mesh))
    if hit is None or hit[0] is not mesh:
        if len(_PATTERNS) > 8:
            _PATTERNS.clear()
        hit = (mesh, _Pattern(mesh))
        _PATTERNS[id(mesh)] = hit
    return hit[1]


def supg_tau(mesh: TriMesh, c: np.ndarray, D: np.ndarray | None = None) -> np.ndarray:
    """Per-element SUPG parameter.

    ``tau = h_e / (2 |c|_e) * xi(Pe)`` with ``xi(Pe) = coth(Pe) - 1/Pe`` and
    ``Pe = |c|_e h_e / (2 k_e)``, where ``k_e`` is the diffusivity along the
    streamline. Without ``D`` (or where ``k_e`` vanishes) ``xi = 1``, the pure
    convective limit. ``tau`` is zero where the element speed is below 1e-12.
    """
    ce = c[mesh.triangles].mean(axis=1)
    speed = np.linalg.norm(ce, axis=1)
    tau = np.zeros(mesh.n_triangles)
    fast = speed >= 1e-12
    h = mesh.element_size[fast]
    tau[fast] = h / (2.0 * speed[fast])
    if D is not None:
        De = np.asarray(D, dtype=float)[mesh.triangles[fast]].mean(axis=1)
        u = ce[fast] / speed[fast, None]
        k = De[:, 0] * u[:, 0] ** 2 + 2.0 * De[:, 2] * u[:, 0] * u[:, 1] + De[:, 1] * u[:, 1] ** 2
        xi = np.ones_like(k)
        diffusive = k > 0
        pe = speed[fast][diffusive] * h[diffusive] / (2.0 * k[diffusive])
        small = pe < 1e-3
        xi_d = np.empty_like(pe)
        xi_d[small] = pe[small] / 3.0 - pe[small] ** 3 / 45.0
        big = ~small
        xi_d[big] = 1.0 / np.tanh(pe[big]) - 1.0 / pe[big]
        xi[diffusive] = xi_d
        tau[fast] *= xi
    return tau


def local_matrices(mesh: TriMesh, D: np.ndarray, divD: np.ndarray, params: StepParams):
    """Element matrices ``(lhs, time)`` of shape ``(M, 3, 3)``; the right-hand side is ``time @ phi_old``."""
    area = mesh.areas
    G = mesh.shape_gradients  # (M, 3, 2)
    tri = mesh.triangles
    mu = params.mu

    mass = area[:, None, None] * _LOCAL_MASS
    De = D[tri].mean(axis=1)  # exact integral of the linear tensor over the element
    Gx, Gy = G[:, :, 0], G[:, :, 1]
    DGx = De[:, 0, None] * Gx + De[:, 2, None] * Gy
    DGy = De[:, 2, None] * Gx + De[:, 1, None] * Gy
    stiff = (mu * area)[:, None, None] * (DGx[:, :, None] * Gx[:, None, :] + DGy[:, :, None] * Gy[:, None, :])

    c = mu * np.asarray(divD, dtype=float)
    cq = np.matmul(_MID_EDGE, c[tri])  # (M, q, 2) velocity at quadrature points
    cg = np.matmul(cq, G.transpose(0, 2, 1))  # (M, q, j) c . grad(psi_j)
    w = (area / 3.0)[:, None, None]
    conv = w * np.matmul(_MID_EDGE.T, cg)

    time = mass
    lhs_extra = conv
    if params.supg:
        tau = supg_tau(mesh, c, mu * D)
        wt = w * tau[:, None, None]
        cgT = cg.transpose(0, 2, 1)
        time = mass + wt * np.matmul(cgT, _MID_EDGE)
        lhs_extra = conv + wt * np.matmul(cgT, cg)
    lhs = time / params.dt + stiff + lhs_extra
    return lhs, time


def assemble_step(mesh: TriMesh, phi, D, divD, params: StepParams) -> SparseSystem:
    """Assemble the linear system of one backward-Euler step."""
    phi = phi.phi if isinstance(phi, LevelSet) else np.asarray(phi, dtype=float)
    D = np.asarray(D, dtype=float)
    divD = np.asarray(divD, dtype=float)
    n = mesh.n_nodes
    if phi.shape != (n,) or D.shape != (n, 3) or divD.shape != (n, 2):
        raise ValueError(
            f"fields do not match the mesh ({n} nodes): phi {phi.shape}, D {D.shape}, divD {divD.shape}"
        )
    lhs, time = local_matrices(mesh, D, divD, params)
    pattern = _pattern(mesh)
    A = pattern.build(lhs)
    T = pattern.build(time)
    rhs = (T @ phi) / params.dt
    return SparseSystem(A, rhs, phi.copy())


def solve(system: SparseSystem, params: StepParams, x0: np.ndarray | None = None) -> tuple[np.ndarray, SolveInfo]:
    """ILU-preconditioned restarted GMRES.

    Raises SolverError when ``|b - A x| / |b|`` does not drop below
    ``params.solver_rel_tol`` within ``params.solver_max_iter`` iterations.
    """
    A = system.matrix.tocsc()
    b = system.rhs
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveInfo(0, 0.0)
    try:
        ilu = spla.spilu(A, drop_tol=1e-4, fill_factor=10, permc_spec="MMD_AT_PLUS_A")
        M = spla.LinearOperator(A.shape, ilu.solve)
    except RuntimeError as exc:
        logger.debug("ILU failed (%s); running unpreconditioned", exc)
        M = None
    count = 0

    def callback(_):
        nonlocal count
        count += 1

    x0 = system.unknown if x0 is None else x0
    x, _ = spla.gmres(
        A,
        b,
        x0=x0,
        rtol=params.solver_rel_tol,
        atol=0.0,
        restart=params.restart,
        maxiter=max(1, params.solver_max_iter // params.restart + 1),
        M=M,
        callback=callback,
        callback_type="pr_norm",
    )
    residual = float(np.linalg.norm(b - A @ x) / bnorm)
    if not np.all(np.isfinite(x)) or residual > params.solver_rel_tol or count > params.solver_max_iter:
        raise SolverError("GMRES did not converge", residual if np.isfinite(residual) else np.inf, count)
    return x, SolveInfo(count, residual)


def step_fields(ls: LevelSet, model: EnergyModel, variant: str) -> dict:
    """Normals, energy and diffusion fields of the current level set."""
    n, degenerate = normals(ls)
    D = d_tensor(model, n, variant)
    return {
        "normal": n,
        "degenerate": degenerate,
        "gamma": np.asarray(model.gamma_of_normal(n), dtype=float),
        "D": D,
        "divD": divergence_of_tensor(ls.mesh, D),
    }


def advance(
    ls: LevelSet,
    model: EnergyModel,
    variant: str,
    params: StepParams,
    force: bool = False,
) -> tuple[LevelSet, StepInfo]:
    """One step: fields from the current normals, assemble, solve, reinitialize.

    Raises InadmissibleModelError for a non positive-definite anisotropic
    model unless ``force``, SolverError on solver failure and
    UniformSignError once the interface has vanished.
    """
    if variant == "aniso" and not force:
        require_admissible(model)
    f = step_fields(ls, model, variant)
    system = assemble_step(ls.mesh, ls.phi, f["D"], f["divD"], params)
    phi, info = solve(system, params)
    new = reinitialize(ls.with_phi(phi))
    if not np.all(np.isfinite(new.phi)):
        raise FloatingPointError("level set became non-finite")
    return new, StepInfo(info.iterations, info.residual, int(f["degenerate"].sum()), f)
