"""Piecewise-linear FEM for the Neumann conductivity problem and the complete electrode model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import ConfigError, SolverError
from .mesh import ElectrodeLayout, Mesh

ZERO_SUM_TOL = 1e-12


def p1_gradients(mesh: Mesh) -> np.ndarray:
    """Gradients of the three barycentric basis functions on every element, shape (L, 3, 2)."""
    p = mesh.nodes[mesh.elements]
    # rotate opposite edges by 90 degrees, divide by twice the area
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    g = np.stack([-e[..., 1], e[..., 0]], axis=-1)
    return g / (2.0 * mesh.element_areas[:, None, None])


def _check_sigma(mesh: Mesh, sigma) -> np.ndarray:
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (mesh.n_elements,))
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ConfigError("conductivity must be finite and positive on every element")
    return sigma


def stiffness_matrix(mesh: Mesh, sigma) -> sparse.csr_matrix:
    sigma = _check_sigma(mesh, sigma)
    g = p1_gradients(mesh)
    ke = np.einsum("lid,ljd->lij", g, g) * (sigma * mesh.element_areas)[:, None, None]
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    n = mesh.n_nodes
    return sparse.csr_matrix((ke.ravel(), (rows, cols)), shape=(n, n))


def boundary_mass_matrix(mesh: Mesh, edges=None) -> sparse.csr_matrix:
    """Exact P1 trace mass matrix ``int u v ds`` over the given boundary edges (default: all)."""
    e = mesh.boundary_edges if edges is None else mesh.boundary_edges[edges]
    ell = np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1)
    local = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    vals = ell[:, None, None] * local
    rows = np.repeat(e, 2, axis=1).ravel()
    cols = np.tile(e, (1, 2)).ravel()
    n = mesh.n_nodes
    return sparse.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, n))


def boundary_weights(mesh: Mesh) -> np.ndarray:
    """``int phi_i ds`` for every node (zero for interior nodes)."""
    return np.asarray(boundary_mass_matrix(mesh).sum(axis=1)).ravel()


def flux_pattern(mesh: Mesh, func) -> np.ndarray:
    """Sample a boundary current density ``func(theta)`` at boundary nodes.

    The result is shifted by a constant so that its boundary integral vanishes.
    Interior entries are zero.
    """
    f = np.zeros(mesh.n_nodes)
    bn = mesh.boundary_nodes
    f[bn] = func(mesh.boundary_angle(mesh.nodes[bn]))
    w = boundary_weights(mesh)
    f[bn] -= (w @ f) / w.sum()
    return f


def trig_flux_patterns(mesh: Mesh, count: int) -> list[np.ndarray]:
    """``count`` continuum patterns cos(t), sin(t), cos(2t), sin(2t), ..."""
    out = []
    for i in range(count):
        n = i // 2 + 1
        fn = np.cos if i % 2 == 0 else np.sin
        out.append(flux_pattern(mesh, lambda t, n=n, fn=fn: fn(n * t)))
    return out


class ContinuumSolver:
    """Factorized Neumann problem with zero boundary mean, for one (mesh, sigma) pair.

    The constraint ``int u ds = 0`` enters through a single Lagrange multiplier.
    """

    def __init__(self, mesh: Mesh, sigma=1.0):
        self.mesh = mesh
        self.K = stiffness_matrix(mesh, sigma)
        self.B = boundary_mass_matrix(mesh)
        self.w = np.asarray(self.B.sum(axis=1)).ravel()
        n = mesh.n_nodes
        w = sparse.csr_matrix(self.w[None, :])
        self.system = sparse.bmat([[self.K, w.T], [w, None]], format="csc")
        try:
            self._lu = splu(self.system)
        except RuntimeError as exc:
            raise SolverError(f"singular continuum system: {exc}") from exc
        self._n = n

    def rhs(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != (self._n,):
            raise ConfigError(f"flux must have one value per node ({self._n}), got {f.shape}")
        total = self.w @ f
        if abs(total) > ZERO_SUM_TOL * max(1.0, np.abs(self.w) @ np.abs(f)):
            raise ConfigError(f"boundary flux does not integrate to zero ({total:.3e})")
        return self.B @ f

    def solve(self, f) -> np.ndarray:
        b = np.concatenate([self.rhs(f), [0.0]])
        x = self._lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SolverError("continuum solve produced non-finite values")
        return x[: self._n]


def solve_continuum(mesh: Mesh, sigma, f) -> np.ndarray:
    """Nodal potential for boundary flux ``f`` (nodal values), normalized to zero boundary mean."""
    return ContinuumSolver(mesh, sigma).solve(f)


@dataclass(frozen=True, eq=False)
class CemSolution:
    u: np.ndarray
    U: np.ndarray


class CemSolver:
    """Factorized complete electrode model for fixed mesh, layout, sigma and contact impedances.

    Unknowns are nodal potentials ``u``, electrode voltages ``U`` and one
    multiplier enforcing ``sum(U) = 0``.
    """

    def __init__(self, layout: ElectrodeLayout, sigma=1.0, z=None):
        mesh = layout.mesh
        self.mesh = mesh
        self.layout = layout
        E = layout.count
        z = layout.contact_constants if z is None else np.broadcast_to(np.asarray(z, dtype=float), (E,))
        if np.any(~np.isfinite(z)) or np.any(z <= 0):
            raise ConfigError("contact impedances must be positive")
        self.z = np.array(z, dtype=float)
        n = mesh.n_nodes
        A = stiffness_matrix(mesh, sigma)
        cols, lens = [], []
        for j in range(E):
            Bj = boundary_mass_matrix(mesh, layout.edge_map[j])
            A = A + Bj / self.z[j]
            bj = np.asarray(Bj.sum(axis=1)).ravel()
            cols.append(-bj / self.z[j])
            lens.append(bj.sum())
        self.electrode_lengths = np.array(lens)
        C = sparse.csr_matrix(np.column_stack(cols))
        D = sparse.diags(self.electrode_lengths / self.z)
        ones = sparse.csr_matrix(np.ones((1, E)))
        self.system = sparse.bmat(
            [[A, C, None], [C.T, D, ones.T], [None, ones, None]], format="csc"
        )
        self._B = [boundary_mass_matrix(mesh, layout.edge_map[j]) for j in range(E)]
        try:
            self._lu = splu(self.system)
        except RuntimeError as exc:
            raise SolverError(f"singular CEM system: {exc}") from exc
        self._n, self._E = n, E

    def rhs(self, I) -> np.ndarray:
        I = np.asarray(I, dtype=float)
        if I.shape != (self._E,):
            raise ConfigError(f"current pattern must have {self._E} entries, got {I.shape}")
        if abs(I.sum()) > ZERO_SUM_TOL * max(1.0, np.abs(I).sum()):
            raise ConfigError(f"injected currents do not sum to zero ({I.sum():.3e})")
        return np.concatenate([np.zeros(self._n), I, [0.0]])

    def solve(self, I) -> CemSolution:
        x = self._lu.solve(self.rhs(I))
        if not np.all(np.isfinite(x)):
            raise SolverError("CEM solve produced non-finite values")
        n, E = self._n, self._E
        return CemSolution(u=x[:n], U=x[n:n + E])

    def residual(self, I, sol: CemSolution) -> float:
        """Relative residual of the discrete system for a computed solution."""
        b = self.rhs(I)
        # recover the multiplier by least squares on its only coupling rows
        x = np.concatenate([sol.u, sol.U, [0.0]])
        r = self.system @ x - b
        lam = -r[self._n:self._n + self._E].mean()
        x[-1] = lam
        r = self.system @ x - b
        return float(np.linalg.norm(r) / max(np.linalg.norm(b), 1e-300))

    def electrode_currents(self, sol: CemSolution) -> np.ndarray:
        """Currents ``z_j^{-1} int_{e_j} (U_j - u) ds`` recovered from the solution."""
        out = np.empty(self._E)
        for j, Bj in enumerate(self._B):
            bj = np.asarray(Bj.sum(axis=1)).ravel()
            out[j] = (sol.U[j] * bj.sum() - bj @ sol.u) / self.z[j]
        return out


def solve_cem(layout: ElectrodeLayout, sigma, z, I) -> CemSolution:
    """Solve the CEM once; ``layout.mesh`` is the computational mesh."""
    return CemSolver(layout, sigma, z).solve(I)


def trig_current_patterns(E: int, centers=None) -> np.ndarray:
    """The ``E - 1`` trigonometric electrode current patterns, shape (E-1, E).

    Ordered cos(t), sin(t), cos(2t), sin(2t), ..., with cosines for
    ``n = 1..E//2`` and sines for ``n = 1..(E-1)//2``; each row has zero sum.
    ``centers`` defaults to the nominal angles ``2 pi j / E``.
    """
    if E < 2:
        raise ConfigError("need at least two electrodes")
    theta = 2 * np.pi * np.arange(E) / E if centers is None else np.asarray(centers, dtype=float)
    rows = []
    for n in range(1, E // 2 + 1):
        rows.append(np.cos(n * theta))
        if n <= (E - 1) // 2:
            rows.append(np.sin(n * theta))
    P = np.array(rows)
    P -= P.mean(axis=1, keepdims=True)
    return P


def reference_solutions(layout: ElectrodeLayout, contact, patterns) -> list[CemSolution]:
    """CEM solutions for unit conductivity and ``z = contact``, one factorization for all patterns."""
    solver = CemSolver(layout, 1.0, contact)
    return [solver.solve(I) for I in patterns]


def reference_solutions_continuum(mesh: Mesh, fluxes) -> list[np.ndarray]:
    solver = ContinuumSolver(mesh, 1.0)
    return [solver.solve(f) for f in fluxes]
