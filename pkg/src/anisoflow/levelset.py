"""Signed-distance level sets on P1 meshes.

Sign convention: ``phi > 0`` inside the closed interface. The zero
iso-line is extracted per triangle by linear interpolation (marching
triangles) and reinitialization rebuilds the field from the exact distance
of every node to that polyline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .mesh import MeshError, TriMesh, element_gradients, recover_nodal_gradient

ZERO_SHIFT = 1e-14
DEGENERATE_GRADIENT = 1e-8
# largest misfit (in units of h) between rescaled strip values and polygon distances
# for which the strip keeps its own values during reinitialization
STRIP_MISFIT = 0.1


class UniformSignError(ValueError):
    """The level set has no zero crossing: the interface has vanished (or never existed)."""


@dataclass(eq=False)
class LevelSet:
    mesh: TriMesh
    phi: np.ndarray
    band_width: float | None = None

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.shape != (self.mesh.n_nodes,):
            raise ValueError(f"phi must have shape ({self.mesh.n_nodes},), got {self.phi.shape}")
        if self.band_width is None:
            self.band_width = 6.0 * self.mesh.h

    def with_phi(self, phi: np.ndarray) -> LevelSet:
        return LevelSet(self.mesh, phi, self.band_width)

    def band(self) -> np.ndarray:
        """Mask of nodes within ``band_width`` of the interface."""
        return np.abs(self.phi) <= self.band_width

    def has_interface(self) -> bool:
        return bool(np.any(self.phi > 0) and np.any(self.phi <= 0))


@dataclass(eq=False)
class Contour:
    """Zero iso-line as a soup of segments.

    Each segment is oriented with the positive side of the level set on its
    left; ``normals`` are the unit element gradients of ``phi`` (pointing
    towards increasing ``phi``) of the parent triangles.
    """

    segments: np.ndarray  # (S, 2, 2)
    triangles: np.ndarray  # (S,)
    normals: np.ndarray  # (S, 2)

    @property
    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.segments[:, 1] - self.segments[:, 0], axis=1)

    @property
    def length(self) -> float:
        return float(self.lengths.sum())

    @property
    def midpoints(self) -> np.ndarray:
        return self.segments.mean(axis=1)

    def __len__(self) -> int:
        return len(self.segments)

    def to_csv(self, path) -> Path:
        """Write the segments as ``x, y, segment`` rows, two per segment."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "segment"])
            for k, seg in enumerate(self.segments):
                for x, y in seg:
                    w.writerow([f"{x:.16g}", f"{y:.16g}", k])
        return path


# --------------------------------------------------------------------------
# initial conditions


def init_circle(mesh: TriMesh, center, radius: float) -> LevelSet:
    if radius <= 0:
        raise ValueError("radius must be positive")
    _check_inside(mesh, center, radius, radius)
    c = np.asarray(center, dtype=float)
    return LevelSet(mesh, radius - np.linalg.norm(mesh.nodes - c, axis=1))


def init_ellipse(mesh: TriMesh, center, a: float, b: float, samples: int = 256) -> LevelSet:
    """Exact signed distance to the axis-aligned ellipse ``(a cos t, b sin t)`` around ``center``."""
    if not a >= b > 0:
        raise ValueError(f"need a >= b > 0, got a={a}, b={b}")
    _check_inside(mesh, center, a, b)
    p = mesh.nodes - np.asarray(center, dtype=float)
    dist = ellipse_distance(p, a, b, samples)
    inside = (p[:, 0] / a) ** 2 + (p[:, 1] / b) ** 2 < 1.0
    return LevelSet(mesh, np.where(inside, dist, -dist))


def ellipse_distance(p: np.ndarray, a: float, b: float, samples: int = 256) -> np.ndarray:
    """Unsigned distance from points ``p`` (centred coordinates) to the ellipse.

    Uses the quarter symmetry, picks the best of ``samples`` parameter
    values and bisects the stationarity condition inside the bracketing
    sample interval.
    """
    x = np.abs(p[:, 0])[:, None]
    y = np.abs(p[:, 1])[:, None]
    theta = np.linspace(0.0, 0.5 * np.pi, samples)
    d2 = (x - a * np.cos(theta)) ** 2 + (y - b * np.sin(theta)) ** 2
    best = np.argmin(d2, axis=1)
    step = theta[1] - theta[0]
    lo = np.maximum(theta[best] - step, 0.0)
    hi = np.minimum(theta[best] + step, 0.5 * np.pi)
    x, y = x[:, 0], y[:, 0]
    c2 = a * a - b * b

    def slope(t):
        # derivative of half the squared distance with respect to the parameter
        s, c = np.sin(t), np.cos(t)
        return a * x * s - b * y * c - c2 * s * c

    g_lo = slope(lo)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        g_mid = slope(mid)
        left = np.sign(g_mid) == np.sign(g_lo)
        lo = np.where(left, mid, lo)
        g_lo = np.where(left, g_mid, g_lo)
        hi = np.where(left, hi, mid)
    t = 0.5 * (lo + hi)
    d_root = np.hypot(x - a * np.cos(t), y - b * np.sin(t))
    return np.minimum(d_root, np.sqrt(d2[np.arange(len(x)), best]))


def init_polyline(mesh: TriMesh, vertices) -> LevelSet:
    """Signed distance to a closed polyline; positive inside (even-odd rule)."""
    v = np.asarray(vertices, dtype=float)
    if np.allclose(v[0], v[-1]):
        v = v[:-1]
    if len(v) < 3:
        raise ValueError("a closed polyline needs at least 3 distinct vertices")
    segments = np.stack([v, np.roll(v, -1, axis=0)], axis=1)
    xmin, ymin, xmax, ymax = mesh.bounds
    if v[:, 0].min() <= xmin or v[:, 0].max() >= xmax or v[:, 1].min() <= ymin or v[:, 1].max() >= ymax:
        raise MeshError("polyline is not strictly inside the domain")
    dist = distance_to_segments(mesh.nodes, segments)
    inside = _points_in_polygon(mesh.nodes, v)
    return LevelSet(mesh, np.where(inside, dist, -dist))


def read_polyline_csv(path) -> np.ndarray:
    """Read ``x, y`` vertex rows (header optional) of a closed polyline."""
    rows = []
    with Path(path).open() as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                if rows:
                    raise
    return np.array(rows)


def _points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    for (x1, y1), (x2, y2) in zip(poly, np.roll(poly, -1, axis=0)):
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xc)
    return inside


def _check_inside(mesh: TriMesh, center, rx: float, ry: float) -> None:
    cx, cy = center
    xmin, ymin, xmax, ymax = mesh.bounds
    if not (xmin < cx - rx and cx + rx < xmax and ymin < cy - ry and cy + ry < ymax):
        raise MeshError(f"shape centred at {tuple(center)} with half-axes ({rx}, {ry}) leaves the domain")


# --------------------------------------------------------------------------
# contour and distance


def extract_contour(ls: LevelSet) -> Contour:
    """Marching-triangles extraction of the zero iso-line of a P1 level set."""
    mesh = ls.mesh
    phi = np.where(ls.phi == 0.0, ZERO_SHIFT, ls.phi)
    if np.all(phi > 0) or np.all(phi < 0):
        raise UniformSignError("level set has a uniform sign: no interface")
    f = phi[mesh.triangles]
    pos = f > 0
    npos = pos.sum(axis=1)
    cut = np.flatnonzero((npos == 1) | (npos == 2))
    f = f[cut]
    pos = pos[cut]
    tri = mesh.triangles[cut]
    # the odd vertex is the one whose sign differs from the other two
    lone_is_pos = npos[cut] == 1
    lone = np.where(lone_is_pos, np.argmax(pos, axis=1), np.argmin(pos, axis=1))
    j = (lone + 1) % 3
    k = (lone + 2) % 3
    rows = np.arange(len(cut))
    p = mesh.nodes[tri]
    fl, fj, fk = f[rows, lone], f[rows, j], f[rows, k]
    pl, pj, pk = p[rows, lone], p[rows, j], p[rows, k]
    sj = (fl / (fl - fj))[:, None]
    sk = (fl / (fl - fk))[:, None]
    qj = pl + sj * (pj - pl)
    qk = pl + sk * (pk - pl)

    grad = element_gradients(mesh, phi)[cut]
    norm = np.linalg.norm(grad, axis=1)
    normals = grad / norm[:, None]
    seg = np.stack([qj, qk], axis=1)
    # orient so the positive side lies to the left of the direction of travel
    d = qk - qj
    left = np.column_stack([-d[:, 1], d[:, 0]])
    flip = np.einsum("ij,ij->i", left, normals) < 0
    seg[flip] = seg[flip][:, ::-1]
    return Contour(seg, cut, normals)


def distance_to_segments(
    points: np.ndarray, segments: np.ndarray, bin_size: float | None = None, return_index: bool = False
):
    """Exact Euclidean distance from each point to the nearest of ``segments``.

    Segments are grouped into a uniform grid of bins, each carrying the
    tight bounding box of its members. Per point, the bin with the nearest
    box is scanned first and every other bin is skipped when its box is
    farther than the best distance found so far. With ``return_index`` the
    index of a nearest segment is returned as well.
    """
    points = np.ascontiguousarray(points, dtype=float)
    segments = np.ascontiguousarray(segments, dtype=float).reshape(-1, 2, 2)
    if len(segments) == 0:
        raise ValueError("no segments")
    mids = segments.mean(axis=1)
    if bin_size is None:
        length = np.linalg.norm(segments[:, 1] - segments[:, 0], axis=1)
        bin_size = max(8.0 * float(np.median(length)), 1e-12)
    lo = mids.min(axis=0)
    cell = np.floor((mids - lo) / bin_size).astype(np.int64)
    key = cell[:, 0] * (int(cell[:, 1].max()) + 1) + cell[:, 1]
    order = np.argsort(key, kind="stable")
    segments = segments[order]
    key = key[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    ends = np.r_[starts[1:], len(key)]
    xs = segments[..., 0]
    ys = segments[..., 1]
    boxes = np.column_stack([
        np.minimum.reduceat(xs.min(axis=1), starts),
        np.minimum.reduceat(ys.min(axis=1), starts),
        np.maximum.reduceat(xs.max(axis=1), starts),
        np.maximum.reduceat(ys.max(axis=1), starts),
    ])
    out = np.empty(len(points))
    nearest = np.empty(len(points), dtype=np.int64)
    _binned_distance(points, segments, starts, ends, boxes, out, nearest)
    if return_index:
        return out, order[nearest]
    return out


@njit(cache=True, parallel=False)
def _binned_distance(points, segments, starts, ends, boxes, out, nearest):  # pragma: no cover - compiled
    nb = starts.shape[0]
    boxd = np.empty(nb)
    for p in range(points.shape[0]):
        px = points[p, 0]
        py = points[p, 1]
        first = 0
        for b in range(nb):
            dx = max(boxes[b, 0] - px, 0.0, px - boxes[b, 2])
            dy = max(boxes[b, 1] - py, 0.0, py - boxes[b, 3])
            boxd[b] = dx * dx + dy * dy
            if boxd[b] < boxd[first]:
                first = b
        best = np.inf
        arg = starts[first]
        for s in range(starts[first], ends[first]):
            d = _seg_dist2(px, py, segments[s])
            if d < best:
                best = d
                arg = s
        for b in range(nb):
            if b == first or boxd[b] >= best:
                continue
            for s in range(starts[b], ends[b]):
                d = _seg_dist2(px, py, segments[s])
                if d < best:
                    best = d
                    arg = s
        out[p] = np.sqrt(best)
        nearest[p] = arg


@njit(cache=True, inline="always")
def _seg_dist2(px, py, seg):  # pragma: no cover - compiled
    ax = seg[0, 0]
    ay = seg[0, 1]
    abx = seg[1, 0] - ax
    aby = seg[1, 1] - ay
    apx = px - ax
    apy = py - ay
    denom = abx * abx + aby * aby
    t = 0.0
    if denom > 0.0:
        t = (apx * abx + apy * aby) / denom
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    dx = apx - t * abx
    dy = apy - t * aby
    return dx * dx + dy * dy


def segment_distance_brute(points: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Reference O(points x segments) distance, used for checking the binned search."""
    points = np.asarray(points, dtype=float)
    segments = np.asarray(segments, dtype=float)
    a = segments[:, 0]
    ab = segments[:, 1] - a
    out = np.empty(len(points))
    for start in range(0, len(points), 1024):
        p = points[start:start + 1024, None, :]
        ap = p - a
        denom = np.einsum("ij,ij->i", ab, ab)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(denom > 0, np.einsum("pij,ij->pi", ap, ab) / denom, 0.0)
        t = np.clip(t, 0.0, 1.0)
        out[start:start + 1024] = np.linalg.norm(ap - t[..., None] * ab, axis=-1).min(axis=1)
    return out


def reinitialize(ls: LevelSet) -> LevelSet:
    """Replace ``phi`` by a signed distance to its own zero iso-line, keeping that line in place.

    Nodes of the triangles cut by the interface keep their values times one
    common factor, the least-squares fit of those values to the distances to
    the marching-triangles polygon. A common factor leaves every zero
    crossing where it was, so the interface does not move and a second call
    returns the same field. Plain polygon distances there would move the
    interpolated zero line inwards by about ``curvature h^2 / 8`` per call.

    Every other node gets its distance to the polygon plus the gap between
    the kept values and the polygon distances, interpolated at its closest
    point, so the field stays a consistent distance across the cut band.

    If the rescaled strip values miss the polygon distances by more than
    ``STRIP_MISFIT * h`` somewhere (a field far from a distance function),
    every node simply gets its signed polygon distance.
    """
    mesh = ls.mesh
    contour = extract_contour(ls)
    phi = np.where(ls.phi == 0.0, ZERO_SHIFT, ls.phi)
    sign = np.where(phi > 0, 1.0, -1.0)
    dist, seg = distance_to_segments(mesh.nodes, contour.segments, return_index=True)
    out = sign * dist
    strip = np.unique(mesh.triangles[contour.triangles])
    p, d = phi[strip], out[strip]
    alpha = float(np.dot(p, d) / np.dot(p, p))
    if np.max(np.abs(alpha * p - d)) > STRIP_MISFIT * mesh.h:
        return ls.with_phi(out)
    gap = np.zeros(mesh.n_nodes)
    gap[strip] = alpha * p - d

    # closest point on the nearest segment, then P1 interpolation of the gap in its triangle
    a = contour.segments[seg, 0]
    ab = contour.segments[seg, 1] - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.divide(np.einsum("ij,ij->i", mesh.nodes - a, ab), denom, out=np.zeros(len(denom)), where=denom > 0)
    foot = a + np.clip(t, 0.0, 1.0)[:, None] * ab
    tri = contour.triangles[seg]
    corners = mesh.triangles[tri]
    grads = mesh.shape_gradients[tri]
    x0 = mesh.nodes[corners[:, 0]]
    lam = np.einsum("nij,nj->ni", grads, foot - x0)
    lam[:, 0] += 1.0
    out += np.einsum("ni,ni->n", lam, gap[corners])
    out[strip] = alpha * p
    return ls.with_phi(out)


def normals(ls: LevelSet) -> tuple[np.ndarray, np.ndarray]:
    """Unit normal ``grad(phi)/|grad(phi)|`` from the recovered nodal gradient.

    Returns ``(n, degenerate)``; nodes where the gradient norm falls below
    ``1e-8`` get the normal ``(1, 0)`` and are flagged.
    """
    g = recover_nodal_gradient(ls.mesh, ls.phi)
    norm = np.linalg.norm(g, axis=1)
    degenerate = norm < DEGENERATE_GRADIENT
    n = np.empty_like(g)
    ok = ~degenerate
    n[ok] = g[ok] / norm[ok, None]
    n[degenerate] = (1.0, 0.0)
    return n, degenerate


def contour_hausdorff(c1: Contour, c2: Contour) -> float:
    """Symmetric Hausdorff distance between two contours, sampled at segment endpoints."""
    p1 = c1.segments.reshape(-1, 2)
    p2 = c2.segments.reshape(-1, 2)
    d12 = distance_to_segments(p1, c2.segments).max()
    d21 = distance_to_segments(p2, c1.segments).max()
    return float(max(d12, d21))
