"""Conforming P1 triangular meshes of rectangular domains.

Nodal fields are plain numpy arrays indexed by node: shape ``(N,)`` for
scalars, ``(N, 2)`` for vectors and ``(N, 3)`` for symmetric tensors stored
as ``(xx, yy, xy)``. :class:`NodalField` wraps one of these with its mesh
when the kind has to travel with the data (VTK export, validation).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

FIELD_KINDS = ("scalar", "vector2", "symTensor2")


class MeshError(ValueError):
    """Invalid mesh geometry, dimensions or connectivity."""


class GmshParseError(MeshError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormatError(MeshError):
    pass


@dataclass(eq=False)
class TriMesh:
    """Triangular mesh with counter-clockwise connectivity.

    Attributes:
        nodes: ``(N, 2)`` node coordinates.
        triangles: ``(M, 3)`` node indices, counter-clockwise.
        boundary_edges: ``(B, 2)`` node pairs of edges with a single incident triangle.
        h: target element size used to build the mesh.
        bounds: ``(xmin, ymin, xmax, ymax)`` of the declared rectangular domain.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    h: float
    bounds: tuple[float, float, float, float]

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.boundary_edges = np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        self.bounds = tuple(float(b) for b in self.bounds)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshError(f"nodes must have shape (N, 2), got {self.nodes.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError(f"triangles must have shape (M, 3), got {self.triangles.shape}")
        if len(self.triangles) == 0:
            raise MeshError("mesh has no triangles")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def shape_gradients(self) -> np.ndarray:
        """``(M, 3, 2)`` constant gradients of the three P1 basis functions."""
        p = self.nodes[self.triangles]
        # grad of basis i is the inward-rotated opposite edge over twice the area
        x, y = p[..., 0], p[..., 1]
        two_a = 2.0 * self.signed_areas
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        return np.stack([gx, gy], axis=2) / two_a[:, None, None]

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        """``(M, 3)`` lengths of edges (0,1), (1,2), (2,0) of each triangle."""
        p = self.nodes[self.triangles]
        return np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2)

    @property
    def element_size(self) -> np.ndarray:
        """Longest edge of each triangle."""
        return self.edge_lengths.max(axis=1)

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and the number of incident triangles of each."""
        return _unique_edges(self.triangles)

    @cached_property
    def triangle_edges(self) -> np.ndarray:
        """``(M, 3)`` indices into ``edges[0]`` of the local edges (0,1), (1,2), (2,0)."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        base = int(self.triangles.max()) + 1
        _, inverse = np.unique(e[:, 0] * base + e[:, 1], return_inverse=True)
        return inverse.reshape(-1, 3)

    @cached_property
    def node_adjacency(self) -> sp.csr_matrix:
        """Symmetric node-node adjacency of the one-ring, diagonal included."""
        t = self.triangles
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_nodes,) * 2)
        a.sum_duplicates()
        a.data[:] = 1.0
        return a

    @cached_property
    def node_triangle_incidence(self) -> sp.csr_matrix:
        """``(N, M)`` incidence matrix, 1 where the node is a vertex of the triangle."""
        rows = self.triangles.ravel()
        cols = np.repeat(np.arange(self.n_triangles), 3)
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_nodes, self.n_triangles))

    @cached_property
    def spr_operators(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        return _build_spr_operators(self)

    def locate(self, point, tol: float = 1e-12) -> tuple[int, np.ndarray]:
        """Return ``(triangle, barycentric coordinates)`` of the triangle containing ``point``."""
        q = np.asarray(point, dtype=float)
        p = self.nodes[self.triangles]
        two_a = 2.0 * self.signed_areas
        l1 = ((p[:, 2, 0] - p[:, 1, 0]) * (q[1] - p[:, 1, 1]) - (p[:, 2, 1] - p[:, 1, 1]) * (q[0] - p[:, 1, 0])) / two_a
        l2 = ((p[:, 0, 0] - p[:, 2, 0]) * (q[1] - p[:, 2, 1]) - (p[:, 0, 1] - p[:, 2, 1]) * (q[0] - p[:, 2, 0])) / two_a
        l3 = 1.0 - l1 - l2
        lam = np.stack([l1, l2, l3], axis=1)
        inside = np.flatnonzero(lam.min(axis=1) >= -tol)
        if inside.size == 0:
            raise MeshError(f"point {tuple(q)} lies outside the mesh")
        k = inside[np.argmax(lam[inside].min(axis=1))]
        return int(k), lam[k]

    def interpolate(self, values: np.ndarray, point) -> float | np.ndarray:
        """P1 interpolation of a nodal field at an arbitrary point."""
        k, lam = self.locate(point)
        return lam @ np.asarray(values)[self.triangles[k]]


@dataclass(eq=False)
class NodalField:
    """Per-node values of a scalar, vector or symmetric-tensor field."""

    mesh: TriMesh
    values: np.ndarray
    kind: str = field(default="")

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        inferred = field_kind(self.values)
        if not self.kind:
            self.kind = inferred
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.kind != inferred:
            raise ValueError(f"values of shape {self.values.shape} do not match kind {self.kind!r}")
        if len(self.values) != self.mesh.n_nodes:
            raise ValueError(f"field has {len(self.values)} entries for {self.mesh.n_nodes} nodes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")


def field_kind(values: np.ndarray) -> str:
    values = np.asarray(values)
    if values.ndim == 1:
        return "scalar"
    if values.ndim == 2 and values.shape[1] == 2:
        return "vector2"
    if values.ndim == 2 and values.shape[1] == 3:
        return "symTensor2"
    raise ValueError(f"cannot interpret array of shape {values.shape} as a nodal field")


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, NodalField) else np.asarray(f, dtype=float)


# --------------------------------------------------------------------------
# construction


def generate_rect_mesh(width: float, height: float, h: float, origin=(0.0, 0.0)) -> TriMesh:
    """Structured triangulation of ``[x0, x0+width] x [y0, y0+height]``.

    Cells are squares of side at most ``h``; cell counts are rounded up to
    even numbers so the domain centre is a node. Cell diagonals alternate
    in a checkerboard pattern, which keeps the mesh mirror-symmetric about
    both centre lines.
    """
    if not (width > 0 and height > 0 and h > 0):
        raise MeshError(f"width, height and h must be positive, got {width}, {height}, {h}")
    if h > min(width, height):
        raise MeshError(f"h={h} exceeds the domain size")
    nx = _even_cells(width, h)
    ny = _even_cells(height, h)
    x0, y0 = origin
    xs = x0 + np.linspace(0.0, width, nx + 1)
    ys = y0 + np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    i, j = i.ravel(), j.ravel()
    n00 = j * (nx + 1) + i
    n10 = n00 + 1
    n01 = n00 + nx + 1
    n11 = n01 + 1
    even = (i + j) % 2 == 0
    # even cells split along (00)-(11), odd cells along (10)-(01)
    t1 = np.where(even[:, None], np.column_stack([n00, n10, n11]), np.column_stack([n00, n10, n01]))
    t2 = np.where(even[:, None], np.column_stack([n00, n11, n01]), np.column_stack([n10, n11, n01]))
    triangles = np.vstack([t1, t2])
    bounds = (x0, y0, x0 + width, y0 + height)
    mesh = TriMesh(nodes, triangles, _boundary_edges(triangles), float(h), bounds)
    logger.debug("generated %d nodes, %d triangles", mesh.n_nodes, mesh.n_triangles)
    return mesh


def _even_cells(length: float, h: float) -> int:
    n = int(np.ceil(length / h - 1e-9))
    return n + (n % 2)


def _unique_edges(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = np.sort(triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    base = int(triangles.max()) + 1
    keys, counts = np.unique(e[:, 0] * base + e[:, 1], return_counts=True)
    return np.column_stack([keys // base, keys % base]), counts


def _boundary_edges(triangles: np.ndarray) -> np.ndarray:
    uniq, counts = _unique_edges(triangles)
    return uniq[counts == 1]


def import_gmsh(path, bounds=None) -> TriMesh:
    """Read a 2D triangle mesh from a Gmsh MSH 2.2 ASCII file.

    Elements other than 3-node triangles (type 2) are skipped; clockwise
    triangles are reordered to counter-clockwise. ``bounds`` defaults to
    the bounding box of the nodes.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    pos = 0

    def next_line(eof_ok: bool = False) -> tuple[int, str] | None:
        nonlocal pos
        while pos < len(lines):
            pos += 1
            text = lines[pos - 1].strip()
            if text:
                return pos, text
        if eof_ok:
            return None
        raise GmshParseError("unexpected end of file", pos)

    node_ids: dict[int, int] = {}
    coords: list[tuple[float, float]] = []
    tris: list[list[int]] = []
    seen_format = False
    while (item := next_line(eof_ok=True)) is not None:
        lineno, text = item
        if text == "$MeshFormat":
            lineno, text = next_line()
            parts = text.split()
            if len(parts) < 3:
                raise GmshParseError("malformed $MeshFormat header", lineno)
            if parts[0] != "2.2":
                raise UnsupportedFormatError(f"unsupported MSH version {parts[0]} (only 2.2 is read)")
            if parts[1] != "0":
                raise UnsupportedFormatError("binary MSH files are not supported")
            seen_format = True
            _expect(next_line(), "$EndMeshFormat")
        elif text == "$Nodes":
            lineno, text = next_line()
            count = _parse_int(text, lineno)
            for _ in range(count):
                lineno, text = next_line()
                parts = text.split()
                if len(parts) < 4:
                    raise GmshParseError("node line needs id x y z", lineno)
                try:
                    node_ids[int(parts[0])] = len(coords)
                    coords.append((float(parts[1]), float(parts[2])))
                except ValueError as exc:
                    raise GmshParseError(f"bad node entry: {exc}", lineno) from None
            _expect(next_line(), "$EndNodes")
        elif text == "$Elements":
            lineno, text = next_line()
            count = _parse_int(text, lineno)
            for _ in range(count):
                lineno, text = next_line()
                try:
                    parts = [int(v) for v in text.split()]
                except ValueError:
                    raise GmshParseError(f"bad element entry {text!r}", lineno) from None
                if len(parts) < 3:
                    raise GmshParseError("element line too short", lineno)
                etype, ntags = parts[1], parts[2]
                if etype != 2:
                    continue
                vert = parts[3 + ntags:]
                if len(vert) != 3:
                    raise GmshParseError("triangle must list 3 nodes", lineno)
                try:
                    tris.append([node_ids[v] for v in vert])
                except KeyError as exc:
                    raise GmshParseError(f"unknown node id {exc.args[0]}", lineno) from None
            _expect(next_line(), "$EndElements")
        elif text.startswith("$") and not text.startswith("$End"):
            # skip unknown sections such as $PhysicalNames
            end = "$End" + text[1:]
            while next_line()[1] != end:
                pass
    if not seen_format:
        raise GmshParseError("missing $MeshFormat section", 1)
    if not tris:
        raise MeshError(f"{path} contains no triangle elements")

    nodes = np.array(coords, dtype=float)
    triangles = np.array(tris, dtype=np.int64)
    # drop nodes not referenced by any triangle (e.g. geometry points)
    used = np.unique(triangles)
    remap = -np.ones(len(nodes), dtype=np.int64)
    remap[used] = np.arange(used.size)
    nodes = nodes[used]
    triangles = remap[triangles]

    p = nodes[triangles]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    cw = area2 < 0
    triangles[cw] = triangles[cw][:, [0, 2, 1]]
    if bounds is None:
        bounds = (*nodes.min(axis=0), *nodes.max(axis=0))
    lengths = np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2)
    return TriMesh(nodes, triangles, _boundary_edges(triangles), float(np.mean(lengths)), bounds)


def _expect(item: tuple[int, str], token: str) -> None:
    lineno, text = item
    if text != token:
        raise GmshParseError(f"expected {token}, found {text!r}", lineno)


def _parse_int(text: str, lineno: int) -> int:
    try:
        return int(text.split()[0])
    except (ValueError, IndexError):
        raise GmshParseError(f"expected an integer count, found {text!r}", lineno) from None


def audit_mesh(mesh: TriMesh, tol: float = 1e-12) -> list[str]:
    """Check the mesh invariants; returns a list of violations (empty if valid)."""
    problems = []
    if np.any(mesh.signed_areas <= 0):
        problems.append(f"{int(np.sum(mesh.signed_areas <= 0))} triangles with non-positive signed area")
    _, counts = mesh.edges
    if np.any(counts > 2):
        problems.append(f"{int(np.sum(counts > 2))} edges shared by more than two triangles")
    xmin, ymin, xmax, ymax = mesh.bounds
    span = max(xmax - xmin, ymax - ymin)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    outside = (x < xmin - tol * span) | (x > xmax + tol * span) | (y < ymin - tol * span) | (y > ymax + tol * span)
    if np.any(outside):
        problems.append(f"{int(outside.sum())} nodes outside the declared domain")
    expected = _boundary_edges(mesh.triangles)
    got = np.unique(np.sort(mesh.boundary_edges, axis=1), axis=0)
    if got.shape != expected.shape or np.any(got != expected):
        problems.append("boundaryEdges differs from the set of single-triangle edges")
    if np.setdiff1d(np.arange(mesh.n_nodes), mesh.triangles).size:
        problems.append("mesh has nodes without incident triangles")
    return problems


# --------------------------------------------------------------------------
# differential operators


def element_gradient(mesh: TriMesh, field, tri: int) -> np.ndarray:
    """Exact gradient of the P1 interpolant of ``field`` on triangle ``tri``."""
    if not -mesh.n_triangles <= tri < mesh.n_triangles:
        raise IndexError(f"triangle index {tri} out of range for {mesh.n_triangles} triangles")
    f = _values(field)
    return f[mesh.triangles[tri]] @ mesh.shape_gradients[tri]


def element_gradients(mesh: TriMesh, field) -> np.ndarray:
    """``(M, 2)`` gradients of a scalar P1 field on every triangle."""
    f = _values(field)
    return np.einsum("mi,mik->mk", f[mesh.triangles], mesh.shape_gradients)


def recover_nodal_gradient(mesh: TriMesh, field) -> np.ndarray:
    """Patch-recovered nodal gradient of a scalar P1 field, shape ``(N, 2)``.

    At each node a linear polynomial is fitted in the least-squares sense
    to the field values on the vertices of the incident triangles, and its
    slope is returned. Nodes whose patch is rank deficient use the
    area-weighted mean of the incident element gradients.
    """
    f = _values(field)
    gx, gy = mesh.spr_operators
    return np.column_stack([gx @ f, gy @ f])


def divergence_of_tensor(mesh: TriMesh, D) -> np.ndarray:
    """Row divergence of a symmetric tensor field: ``out[a] = d_x D[x,a] + d_y D[y,a]``."""
    d = _values(D)
    gx, gy = mesh.spr_operators
    xx, yy, xy = d[:, 0], d[:, 1], d[:, 2]
    return np.column_stack([gx @ xx + gy @ xy, gx @ xy + gy @ yy])


def _build_spr_operators(mesh: TriMesh, rcond: float = 1e-10) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    adj = mesh.node_adjacency.tocoo()
    i, j = adj.row, adj.col
    d = mesh.nodes[j] - mesh.nodes[i]
    # scale offsets by the local patch size to keep the normal equations well conditioned
    scale = np.zeros(mesh.n_nodes)
    np.maximum.at(scale, i, np.abs(d).max(axis=1))
    scale[scale == 0] = 1.0
    d = d / scale[i, None]
    v = np.column_stack([np.ones(len(i)), d])
    outer = v[:, :, None] * v[:, None, :]
    M = np.zeros((mesh.n_nodes, 3, 3))
    np.add.at(M, i, outer)

    sv = np.linalg.svd(M, compute_uv=False)
    ok = sv[:, -1] > rcond * sv[:, 0]
    Minv = np.zeros_like(M)
    Minv[ok] = np.linalg.inv(M[ok])
    w = np.einsum("eab,eb->ea", Minv[i], v)[:, 1:] / scale[i, None]
    keep = ok[i]
    n = mesh.n_nodes
    gx = sp.csr_matrix((w[keep, 0], (i[keep], j[keep])), shape=(n, n))
    gy = sp.csr_matrix((w[keep, 1], (i[keep], j[keep])), shape=(n, n))

    bad = np.flatnonzero(~ok)
    if bad.size:
        logger.debug("SPR fallback to element averaging at %d nodes", bad.size)
        fx, fy = _area_weighted_operators(mesh, bad)
        gx = gx + fx
        gy = gy + fy
    return gx.tocsr(), gy.tocsr()


def _area_weighted_operators(mesh: TriMesh, nodes: np.ndarray):
    """Sparse rows mapping a field to area-weighted mean element gradients at ``nodes``."""
    n = mesh.n_nodes
    inc = mesh.node_triangle_incidence[nodes].tocoo()
    node = nodes[inc.row]
    tri = inc.col
    area = mesh.areas[tri]
    total = np.bincount(inc.row, weights=area, minlength=len(nodes))
    weight = area / total[inc.row]
    g = mesh.shape_gradients[tri]  # (K, 3, 2)
    rows = np.repeat(node, 3)
    cols = mesh.triangles[tri].ravel()
    fx = sp.csr_matrix(((weight[:, None] * g[:, :, 0]).ravel(), (rows, cols)), shape=(n, n))
    fy = sp.csr_matrix(((weight[:, None] * g[:, :, 1]).ravel(), (rows, cols)), shape=(n, n))
    return fx, fy


# --------------------------------------------------------------------------
# output


def write_vtk(path, mesh: TriMesh, fields: dict | None = None, title: str = "anisoflow") -> Path:
    """Write the mesh and nodal fields as a legacy ASCII VTK unstructured grid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or {}
    n, m = mesh.n_nodes, mesh.n_triangles
    out = [
        "# vtk DataFile Version 3.0",
        title[:255],
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {n} double",
    ]
    out.extend(f"{x:.16g} {y:.16g} 0" for x, y in mesh.nodes)
    out.append(f"CELLS {m} {4 * m}")
    out.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles)
    out.append(f"CELL_TYPES {m}")
    out.extend(["5"] * m)
    if fields:
        out.append(f"POINT_DATA {n}")
    for name, f in fields.items():
        values = _values(f)
        kind = field_kind(values)
        if len(values) != n:
            raise ValueError(f"field {name!r} has {len(values)} entries for {n} nodes")
        if kind == "scalar":
            out.append(f"SCALARS {name} double 1")
            out.append("LOOKUP_TABLE default")
            out.extend(f"{v:.16g}" for v in values)
        elif kind == "vector2":
            out.append(f"VECTORS {name} double")
            out.extend(f"{a:.16g} {b:.16g} 0" for a, b in values)
        else:
            out.append(f"TENSORS {name} double")
            out.extend(f"{xx:.16g} {xy:.16g} 0\n{xy:.16g} {yy:.16g} 0\n0 0 0" for xx, yy, xy in values)
    path.write_text("\n".join(out) + "\n")
    return path
