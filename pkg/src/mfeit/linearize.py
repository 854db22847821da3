"""Sensitivity matrix and multifrequency data vectors of the linearized problem.

Rows are indexed by current-pattern pairs: ``j = N*m + n`` (0-based) holds the
pairing of patterns ``m`` and ``n``.  ``M[j, l]`` is the integral of
``grad v*_n . grad v*_m`` over inversion element ``l``, where ``v*`` are the
unit-conductivity reference potentials computed on a (finer) forward mesh.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import spectral
from .errors import ConfigError, MeshError
from .forward import p1_gradients
from .mesh import Mesh, locate_points


def pair_index(N: int, m: int, n: int) -> int:
    return N * m + n


def index_map(N: int) -> np.ndarray:
    """``(J, 2)`` array whose row ``j`` is the pattern pair ``(m, n)``."""
    m, n = np.divmod(np.arange(N * N), N)
    return np.column_stack([m, n])


def transfer_matrix(source: Mesh, target: Mesh) -> sparse.csr_matrix:
    """0/1 matrix ``T`` (source elements x target elements) assigning each source
    element to the target element containing its centroid.

    Centroids that fall just outside the target polygon (the finer mesh bulges
    past the coarser inscribed polygon) go to the nearest target element.
    """
    c = source.centroids
    owner = locate_points(target, c)
    miss = np.flatnonzero(owner < 0)
    if miss.size:
        dist, near = cKDTree(target.centroids).query(c[miss])
        limit = 2.0 * target.diameters().max()
        if np.any(dist > limit):
            raise MeshError(
                f"{int(np.sum(dist > limit))} source elements lie far outside the target mesh; "
                "the meshes do not cover the same domain"
            )
        owner[miss] = near
    rows = np.arange(source.n_elements)
    return sparse.csr_matrix(
        (np.ones(source.n_elements), (rows, owner)), shape=(source.n_elements, target.n_elements)
    )


def assemble_sensitivity(inversion_mesh: Mesh, forward_mesh: Mesh, potentials) -> np.ndarray:
    """Sensitivity matrix ``M`` of shape ``(N*N, L_inv)``.

    ``potentials`` is an ``(N, n_nodes)`` array of reference potentials on
    ``forward_mesh``.  Gradients are constant per forward element; each
    inversion element accumulates the exact per-element integrals of the
    forward elements whose centroids it contains.
    """
    V = np.asarray(potentials, dtype=float)
    if V.ndim != 2 or V.shape[1] != forward_mesh.n_nodes:
        raise ConfigError("potentials must be (N, n_nodes) on the forward mesh")
    N = V.shape[0]
    G = np.einsum("ecd,nec->ned", p1_gradients(forward_mesh), V[:, forward_mesh.elements])
    P = np.einsum("med,ned->mne", G, G) * forward_mesh.element_areas
    T = transfer_matrix(forward_mesh, inversion_mesh)
    return np.asarray((T.T @ P.reshape(N * N, -1).T).T)


def assemble_data_cem(measured, reference_V, patterns, s0) -> np.ndarray:
    """Data matrix ``X`` (J x Q) from electrode voltages.

    ``X_j(w) = s0(w)^2 * sum_i (I_{n,i} V_{m,i} - I_{m,i} U_{n,i})`` with the
    frequency-dependent reference ``V_m = V*_m / s0(w)``.

    Parameters
    ----------
    measured : (Q, N, E) voltages ``U_n(w_q)``
    reference_V : (N, E) voltages ``V*_m`` for unit conductivity
    patterns : (N, E) injected currents
    s0 : (Q,) background profile values
    """
    U = np.asarray(measured, dtype=float)
    Vs = np.asarray(reference_V, dtype=float)
    P = np.asarray(patterns, dtype=float)
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    if U.ndim != 3 or U.shape[0] != len(s0):
        raise ConfigError(f"measured voltages must be (Q, N, E) with Q={len(s0)}, got {U.shape}")
    if U.shape[1:] != P.shape or Vs.shape != P.shape:
        raise ConfigError("pattern, reference and measurement counts do not match")
    N = P.shape[0]
    G1 = Vs @ P.T  # [m, n] = V*_m . I_n
    cols = []
    for q in range(len(s0)):
        G2 = P @ U[q].T  # [m, n] = I_m . U_n
        cols.append((s0[q] * G1 - s0[q] ** 2 * G2).reshape(N * N))
    return np.column_stack(cols)


def assemble_data_continuum(measured, reference_v, fluxes, boundary_mass, s0) -> np.ndarray:
    """Continuum analogue of :func:`assemble_data_cem` using boundary traces.

    ``measured`` is (Q, N, n_nodes), ``reference_v`` and ``fluxes`` are (N, n_nodes);
    ``boundary_mass`` is the trace mass matrix giving ``int f v ds = f @ B @ v``.
    """
    u = np.asarray(measured, dtype=float)
    v = np.asarray(reference_v, dtype=float)
    f = np.asarray(fluxes, dtype=float)
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    if u.ndim != 3 or u.shape[0] != len(s0):
        raise ConfigError(f"measured potentials must be (Q, N, n) with Q={len(s0)}")
    if u.shape[1:] != f.shape or v.shape != f.shape:
        raise ConfigError("flux, reference and measurement shapes do not match")
    N = f.shape[0]
    Bf = np.asarray((boundary_mass @ f.T).T)  # (N, n)
    G1 = v @ Bf.T  # [m, n] = int f_n v*_m
    cols = []
    for q in range(len(s0)):
        G2 = Bf @ u[q].T  # [m, n] = int f_m u_n
        cols.append((s0[q] * G1 - s0[q] ** 2 * G2).reshape(N * N))
    return np.column_stack(cols)


@dataclass
class SensitivitySystem:
    M: np.ndarray
    X: np.ndarray
    frequencies: np.ndarray
    s0_values: np.ndarray
    index_map: np.ndarray = field(init=False)

    def __post_init__(self):
        J = self.M.shape[0]
        N = int(round(np.sqrt(J)))
        if N * N != J:
            raise ConfigError(f"row count {J} is not a perfect square")
        if self.X.shape != (J, len(self.frequencies)):
            raise ConfigError(f"X must be ({J}, {len(self.frequencies)}), got {self.X.shape}")
        if not (np.all(np.isfinite(self.M)) and np.all(np.isfinite(self.X))):
            raise ConfigError("sensitivity system has non-finite entries")
        self.index_map = index_map(N)

    def write_csv(self, directory) -> None:
        """Dump ``sensitivity.csv`` and ``data_w<q>.csv`` as dense tables."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sensitivity.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            for row in self.M:
                w.writerow([f"{v:.17g}" for v in row])
        for q in range(self.X.shape[1]):
            with open(out / f"data_w{q}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                for v in self.X[:, q]:
                    w.writerow([f"{v:.17g}"])


@dataclass
class LinearSystem:
    """One decoupled system ``M a = rhs`` recovering abundance ``index``."""

    index: int
    M: np.ndarray
    rhs: np.ndarray


def build_system(M, X, S, mode: str = "direct", active=None, frequencies=None) -> list[LinearSystem]:
    """Decouple ``M A S = X`` into per-abundance systems.

    ``mode='direct'`` gives one system per profile row with ``Y = X S^+``;
    ``active`` optionally restricts the rows (abundances known to vanish, e.g.
    an unperturbed background, are dropped from the unmixing).
    ``mode='difference'`` forward-differences data and profiles in frequency,
    keeps the profile rows in ``active`` and decouples with the differenced
    spectral matrix, giving ``len(active)`` systems.
    """
    M = np.asarray(M, dtype=float)
    X = np.asarray(X, dtype=float)
    if mode == "direct":
        sm = S if isinstance(S, spectral.SpectralMatrix) else spectral.spectral_matrix(S)
        rows = list(range(sm.S.shape[0])) if active is None else [int(k) for k in active]
        if rows != list(range(sm.S.shape[0])):
            if len(set(rows)) != len(rows) or min(rows) < 0 or max(rows) >= sm.S.shape[0]:
                raise ConfigError(f"invalid active set {rows}")
            sm = spectral.spectral_matrix(sm.S[rows])
        if sm.S.shape[1] < sm.S.shape[0]:
            raise spectral.RankError(
                f"{sm.S.shape[1]} frequencies cannot separate {sm.S.shape[0]} profiles",
                rank=sm.rank,
                condition=sm.condition,
            )
        Y = spectral.decouple(X, sm)
        return [LinearSystem(k, M, y) for k, y in zip(rows, Y)]
    if mode == "difference":
        if active is None or frequencies is None:
            raise ConfigError("difference mode needs the active set and the frequencies")
        Sd, Xd = spectral.difference_system(X, S, active, frequencies)
        Y = spectral.decouple(Xd, Sd)
        return [LinearSystem(int(p), M, y) for p, y in zip(active, Y)]
    raise ConfigError(f"unknown mode {mode!r}")
