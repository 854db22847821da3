"""Triangulations of disks and ellipses, plus electrode placement.

Meshes are built from concentric rings of nodes: ring ``i`` sits at radius
``i * dr`` and carries ``6 * i`` nodes, and each annulus between two rings is
stitched with a shorter-diagonal sweep.  The result is quasi-uniform and fully
deterministic.  Ellipses are obtained by the affine map ``(x, y) -> (a x, b y)``
applied to a unit-disk mesh, so boundary nodes sit exactly on the ellipse.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import MeshError

# Hard cap on element count; keeps runaway target_h values from eating memory.
MAX_ELEMENTS = 400_000


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable 2D triangulation.

    Attributes
    ----------
    nodes : (n, 2) float array
    elements : (L, 3) int array, counterclockwise
    boundary_edges : (B, 2) int array, oriented counterclockwise along the boundary
    boundary_owner : (B,) int array, element owning each boundary edge
    element_areas : (L,) float array
    neighbors : tuple of int arrays, ``neighbors[l]`` lists elements sharing an
        edge with ``l``
    semi_axes : (a, b) of the domain; ``a == b`` for a disk
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    boundary_owner: np.ndarray
    element_areas: np.ndarray
    neighbors: tuple
    semi_axes: tuple
    _adjacency: sparse.csr_matrix = field(repr=False)

    @classmethod
    def from_triangles(cls, nodes, elements, semi_axes) -> "Mesh":
        nodes = np.asarray(nodes, dtype=float)
        elements = np.asarray(elements, dtype=np.int64)
        areas = signed_areas(nodes, elements)
        if np.any(areas <= 0):
            bad = int(np.flatnonzero(areas <= 0)[0])
            raise MeshError(f"element {bad} has nonpositive signed area {areas[bad]:.3e}")

        L = len(elements)
        local = np.array([[0, 1], [1, 2], [2, 0]])
        directed = elements[:, local].reshape(-1, 2)
        owner = np.repeat(np.arange(L), 3)
        key = np.sort(directed, axis=1)
        order = np.lexsort((key[:, 1], key[:, 0]))
        key_s = key[order]
        same_next = np.all(key_s[1:] == key_s[:-1], axis=1)
        if np.any(same_next[1:] & same_next[:-1]):
            raise MeshError("an edge is shared by more than two elements")

        counts = np.ones(len(key_s), dtype=int)
        counts[1:] += same_next
        counts[:-1] += same_next
        interior_first = np.flatnonzero(same_next)
        e1 = owner[order[interior_first]]
        e2 = owner[order[interior_first + 1]]
        bnd = np.sort(order[counts == 1])

        rows = np.concatenate([e1, e2])
        cols = np.concatenate([e2, e1])
        adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(L, L))
        adj.sort_indices()
        neighbors = tuple(
            _frozen(adj.indices[adj.indptr[i]:adj.indptr[i + 1]], np.int64) for i in range(L)
        )
        return cls(
            nodes=_frozen(nodes, float),
            elements=_frozen(elements, np.int64),
            boundary_edges=_frozen(directed[bnd], np.int64),
            boundary_owner=_frozen(owner[bnd], np.int64),
            element_areas=_frozen(areas, float),
            neighbors=neighbors,
            semi_axes=(float(semi_axes[0]), float(semi_axes[1])),
            _adjacency=adj,
        )

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 element adjacency (edge sharing)."""
        return self._adjacency.copy()

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    @property
    def area(self) -> float:
        return float(self.element_areas.sum())

    def diameters(self) -> np.ndarray:
        """Longest edge of every element."""
        p = self.nodes[self.elements]
        d = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.linalg.norm(d, axis=2).max(axis=1)

    def boundary_angle(self, points) -> np.ndarray:
        """Parametric angle in ``[0, 2 pi)`` of points on (or near) the boundary."""
        a, b = self.semi_axes
        p = np.atleast_2d(points)
        return np.mod(np.arctan2(p[:, 1] / b, p[:, 0] / a), 2 * np.pi)

    def boundary_point(self, theta) -> np.ndarray:
        a, b = self.semi_axes
        theta = np.asarray(theta, dtype=float)
        return np.stack([a * np.cos(theta), b * np.sin(theta)], axis=-1)

    def distance_to_boundary(self, points) -> np.ndarray:
        """Approximate distance from interior points to the boundary polygon."""
        p = np.atleast_2d(points)
        e = self.nodes[self.boundary_edges]
        a, d = e[:, 0], e[:, 1] - e[:, 0]
        out = np.full(len(p), np.inf)
        for start, vec in zip(a, d):
            t = np.clip(((p - start) @ vec) / (vec @ vec), 0.0, 1.0)
            out = np.minimum(out, np.linalg.norm(p - (start + t[:, None] * vec), axis=1))
        return out


def signed_areas(nodes, elements) -> np.ndarray:
    p = nodes[elements]
    v1 = p[:, 1] - p[:, 0]
    v2 = p[:, 2] - p[:, 0]
    return 0.5 * (v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])


def _ring_mesh(n_rings: int):
    """Unit-disk nodes and triangles with ``n_rings`` rings."""
    nodes = [np.zeros((1, 2))]
    offsets = [0]
    counts = [1]
    start = 1
    for i in range(1, n_rings + 1):
        n = 6 * i
        th = 2 * np.pi * np.arange(n) / n
        r = i / n_rings
        ring = np.column_stack([r * np.cos(th), r * np.sin(th)])
        if i == n_rings:
            ring = np.column_stack([np.cos(th), np.sin(th)])
        nodes.append(ring)
        offsets.append(start)
        counts.append(n)
        start += n
    nodes = np.vstack(nodes)

    tris = [(0, 1 + k, 1 + (k + 1) % 6) for k in range(6)]
    for i in range(2, n_rings + 1):
        tris.extend(_stitch(nodes, offsets[i - 1], counts[i - 1], offsets[i], counts[i]))
    return nodes, np.array(tris, dtype=np.int64)


def _stitch(nodes, a0, na, b0, nb):
    """Triangulate the strip between two closed rings, both starting at angle 0."""
    tris = []
    i = j = 0
    while i < na or j < nb:
        ai, aj = a0 + i % na, a0 + (i + 1) % na
        bi, bj = b0 + j % nb, b0 + (j + 1) % nb
        if i == na:
            advance_outer = True
        elif j == nb:
            advance_outer = False
        else:
            # shorter new diagonal wins
            d_outer = np.sum((nodes[ai] - nodes[bj]) ** 2)
            d_inner = np.sum((nodes[aj] - nodes[bi]) ** 2)
            advance_outer = d_outer <= d_inner
        if advance_outer:
            tris.append((ai, bi, bj))
            j += 1
        else:
            tris.append((ai, bi, aj))
            i += 1
    return tris


def _fix_orientation(nodes, tris):
    area = signed_areas(nodes, tris)
    flip = area < 0
    tris = tris.copy()
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def _n_rings(extent: float, target_h: float) -> int:
    n = math.ceil(extent / target_h - 1e-12)
    if 3 * n * (n + 1) > MAX_ELEMENTS:
        raise MeshError(
            f"target_h={target_h:g} needs about {6 * n * n} elements, over the budget of {MAX_ELEMENTS}"
        )
    return max(n, 1)


def build_disk_mesh(radius: float, target_h: float) -> Mesh:
    """Quasi-uniform triangulation of the disk of given radius about the origin."""
    if radius <= 0 or target_h <= 0:
        raise MeshError("radius and target_h must be positive")
    if target_h >= radius:
        raise MeshError(f"target_h={target_h:g} is not smaller than the radius {radius:g}")
    nodes, tris = _ring_mesh(_n_rings(radius, target_h))
    nodes = radius * nodes
    return Mesh.from_triangles(nodes, _fix_orientation(nodes, tris), (radius, radius))


def build_ellipse_mesh(a: float, b: float, target_h: float) -> Mesh:
    """Triangulation of ``x^2/a^2 + y^2/b^2 < 1`` with boundary nodes on the ellipse."""
    if a <= 0 or b <= 0 or target_h <= 0:
        raise MeshError("semi-axes and target_h must be positive")
    if target_h >= min(a, b):
        raise MeshError(f"target_h={target_h:g} is not smaller than min(a, b)={min(a, b):g}")
    nodes, tris = _ring_mesh(_n_rings(max(a, b), target_h))
    nodes = nodes * np.array([a, b])
    return Mesh.from_triangles(nodes, _fix_orientation(nodes, tris), (a, b))


@dataclass(frozen=True, eq=False)
class ElectrodeLayout:
    """Electrodes as arcs of the boundary parametrization.

    ``arcs[j] = (start, end)`` in radians with ``start < end`` (``end`` may exceed
    ``2 pi`` for an arc straddling angle zero).  ``edge_map[j]`` indexes rows of
    ``mesh.boundary_edges``.  ``mesh`` is the triangulation refined so that every
    electrode endpoint is a node; downstream solvers must use it.
    """

    mesh: Mesh
    arcs: np.ndarray
    edge_map: tuple
    contact_constants: np.ndarray

    @property
    def count(self) -> int:
        return len(self.arcs)

    @property
    def centers(self) -> np.ndarray:
        return np.mod(self.arcs.mean(axis=1), 2 * np.pi)

    def lengths(self) -> np.ndarray:
        """Discrete electrode lengths (sum of covered boundary-edge lengths)."""
        e = self.mesh.nodes[self.mesh.boundary_edges]
        ell = np.linalg.norm(e[:, 1] - e[:, 0], axis=1)
        return np.array([ell[m].sum() for m in self.edge_map])


def electrode_arcs(count: int, width: float, offsets: Sequence[float]) -> np.ndarray:
    offsets = np.zeros(count) if offsets is None else np.asarray(offsets, dtype=float)
    if offsets.shape != (count,):
        raise MeshError(f"expected {count} angular offsets, got {offsets.shape}")
    centers = 2 * np.pi * np.arange(count) / count + offsets
    starts = np.mod(centers - width / 2, 2 * np.pi)
    return np.column_stack([starts, starts + width])


def check_disjoint(arcs: np.ndarray, tol: float = 1e-12) -> None:
    """Raise if any two closed arcs intersect; reports the first offending pair."""
    E = len(arcs)
    order = np.argsort(arcs[:, 0], kind="stable")
    for pos in range(E):
        j, k = order[pos], order[(pos + 1) % E]
        gap = arcs[k, 0] - arcs[j, 1]
        if pos == E - 1:
            gap += 2 * np.pi
        if gap <= tol:
            raise MeshError(f"electrodes {min(j, k)} and {max(j, k)} overlap or touch")


def place_electrodes(
    mesh: Mesh,
    count: int,
    arc_length: float,
    angular_offsets: Sequence[float] | None = None,
    contact_constants: Sequence[float] | float = 1.0,
) -> ElectrodeLayout:
    """Place ``count`` equal electrodes evenly on the boundary.

    Electrode ``j`` is centred at ``2 pi j / count + offset_j``.  On a disk of
    radius ``R`` its angular width is ``arc_length / R``; on an ellipse the width
    is measured on the parametrization ``(a cos t, b sin t)``, i.e. it is the
    arc length of the corresponding electrode on the unit circle.

    Boundary nodes close to an endpoint are slid onto it; otherwise the boundary
    edge holding the endpoint is split.
    """
    if count < 2:
        raise MeshError("need at least two electrodes")
    a, b = mesh.semi_axes
    width = arc_length / a if a == b else arc_length
    if count * width > 2 * np.pi:
        raise MeshError("total electrode length exceeds the boundary length")
    arcs = electrode_arcs(count, width, angular_offsets)
    check_disjoint(arcs)

    c = np.broadcast_to(np.asarray(contact_constants, dtype=float), (count,)).copy()
    if np.any(c <= 0):
        raise MeshError("contact constants must be positive")

    refined = _insert_boundary_nodes(mesh, np.mod(arcs.ravel(), 2 * np.pi))
    theta = refined.boundary_angle(refined.nodes)
    edges = refined.boundary_edges
    t0, t1 = theta[edges[:, 0]], theta[edges[:, 1]]
    mid = np.mod(t0 + 0.5 * np.mod(t1 - t0, 2 * np.pi), 2 * np.pi)
    edge_map = []
    for j, (s, e) in enumerate(arcs):
        inside = np.mod(mid - s, 2 * np.pi) < (e - s)
        if not inside.any():
            raise MeshError(f"electrode {j} covers no boundary edge")
        edge_map.append(_frozen(np.flatnonzero(inside), np.int64))
    return ElectrodeLayout(
        mesh=refined,
        arcs=_frozen(arcs, float),
        edge_map=tuple(edge_map),
        contact_constants=_frozen(c, float),
    )


def _insert_boundary_nodes(mesh: Mesh, angles: np.ndarray) -> Mesh:
    nodes = mesh.nodes.copy()
    elements = mesh.elements.copy()
    edges = [tuple(e) for e in mesh.boundary_edges]
    owner = list(mesh.boundary_owner)
    pinned: set[int] = set()

    for th in angles:
        node_th = mesh.boundary_angle(nodes)
        # locate the boundary edge whose angular span holds th
        for idx, (p, q) in enumerate(edges):
            span = np.mod(node_th[q] - node_th[p], 2 * np.pi)
            rel = np.mod(th - node_th[p], 2 * np.pi)
            if rel <= span:
                break
        else:  # pragma: no cover - the boundary is closed
            raise MeshError(f"could not locate boundary angle {th}")
        p, q = edges[idx]
        rel_q = span - rel
        if min(rel, rel_q) <= 1e-12 * max(span, 1.0):
            pinned.add(p if rel <= rel_q else q)
            continue
        # slide a free node when the endpoint is within a quarter edge of it
        for node, dist in ((p, rel), (q, rel_q)):
            if dist < 0.25 * span and node not in pinned:
                nodes[node] = mesh.boundary_point(th)
                pinned.add(node)
                break
        else:
            new = len(nodes)
            nodes = np.vstack([nodes, mesh.boundary_point(th)])
            l = owner[idx]
            tri = list(elements[l])
            r = next(v for v in tri if v != p and v != q)
            elements[l] = (p, new, r)
            elements = np.vstack([elements, (new, q, r)])
            edges[idx:idx + 1] = [(p, new), (new, q)]
            owner[idx:idx + 1] = [l, len(elements) - 1]
            pinned.add(new)
    return Mesh.from_triangles(nodes, _fix_orientation(nodes, elements), mesh.semi_axes)


def locate_points(mesh: Mesh, points, k: int = 12) -> np.ndarray:
    """Index of the element containing each point, or -1 when outside the mesh.

    Candidates are the ``k`` elements with nearest centroids; among containing
    elements the lowest index wins, so points on shared edges resolve
    deterministically.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    k = min(k, mesh.n_elements)
    _, cand = cKDTree(mesh.centroids).query(pts, k=k)
    cand = np.sort(cand.reshape(len(pts), k), axis=1)
    p = mesh.nodes[mesh.elements[cand]]  # (P, k, 3, 2)
    v0 = p[:, :, 1] - p[:, :, 0]
    v1 = p[:, :, 2] - p[:, :, 0]
    w = pts[:, None, :] - p[:, :, 0]
    det = v0[..., 0] * v1[..., 1] - v0[..., 1] * v1[..., 0]
    l1 = (w[..., 0] * v1[..., 1] - w[..., 1] * v1[..., 0]) / det
    l2 = (v0[..., 0] * w[..., 1] - v0[..., 1] * w[..., 0]) / det
    tol = 1e-12
    inside = (l1 >= -tol) & (l2 >= -tol) & (l1 + l2 <= 1 + tol)
    hit = inside.any(axis=1)
    first = np.argmax(inside, axis=1)
    return np.where(hit, cand[np.arange(len(pts)), first], -1)


def write_mesh_csv(directory, mesh: Mesh, layout: ElectrodeLayout | None = None) -> None:
    """Write ``nodes.csv``, ``elements.csv`` and optionally ``electrodes.csv``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y"])
        for i, (x, y) in enumerate(mesh.nodes):
            w.writerow([i, f"{x:.17g}", f"{y:.17g}"])
    with open(out / "elements.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "n0", "n1", "n2"])
        for i, tri in enumerate(mesh.elements):
            w.writerow([i, *map(int, tri)])
    if layout is not None:
        with open(out / "electrodes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "start_angle", "end_angle"])
            for i, (s, e) in enumerate(layout.arcs):
                w.writerow([i, f"{s:.17g}", f"{e:.17g}"])
