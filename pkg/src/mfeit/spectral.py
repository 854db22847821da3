"""Spectral profiles, the spectral matrix, and decoupling of multifrequency data.

Data at ``Q`` frequencies obey ``X = M A S`` with ``S[k, q] = s_k(omega_q)``.
When ``S`` has full row rank the systems decouple as ``M A_k = Y_k`` with
``Y = X S^+``.  This module also provides the forward-difference variant used
for difference imaging and polynomial moments for partial recovery.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, RankError

#: singular values below RANK_RTOL * sigma_max count as zero
RANK_RTOL = 1e-10
#: Vandermonde condition number above which poly_moments warns
VANDERMONDE_COND_WARN = 1e8


class IllConditionedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Profile:
    """One spectral profile, either polynomial coefficients or a table.

    ``poly`` holds ascending coefficients ``[a0, a1, ...]``; ``table`` holds the
    profile value at each working frequency.
    """

    poly: tuple | None = None
    table: tuple | None = None

    def __post_init__(self):
        if (self.poly is None) == (self.table is None):
            raise ConfigError("a profile needs exactly one of 'poly' or 'table'")

    @classmethod
    def from_config(cls, obj) -> "Profile":
        if isinstance(obj, Profile):
            return obj
        if not isinstance(obj, dict) or len(obj) != 1 or not ({"poly", "table"} & obj.keys()):
            raise ConfigError(f"profile must be {{'poly': [...]}} or {{'table': [...]}}, got {obj!r}")
        if "poly" in obj:
            return cls(poly=tuple(float(c) for c in obj["poly"]))
        return cls(table=tuple(float(v) for v in obj["table"]))

    def to_config(self) -> dict:
        return {"poly": list(self.poly)} if self.poly is not None else {"table": list(self.table)}

    def __call__(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        if self.poly is not None:
            return np.polynomial.polynomial.polyval(omega, np.asarray(self.poly))
        values = np.asarray(self.table)
        if values.shape != omega.shape:
            raise ConfigError(
                f"tabulated profile has {values.size} values but {omega.size} frequencies were requested"
            )
        return values.copy()


@dataclass(frozen=True)
class SpectralModel:
    """Profiles ``s_0..s_K`` and working frequencies; ``s_0`` is the known background."""

    profiles: tuple
    frequencies: tuple
    background_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(Profile.from_config(p) for p in self.profiles))
        object.__setattr__(self, "frequencies", tuple(float(w) for w in self.frequencies))
        w = np.asarray(self.frequencies)
        if len(w) < 1:
            raise ConfigError("need at least one frequency")
        if len(self.profiles) < 1:
            raise ConfigError("need at least the background profile")
        if np.any(np.diff(w) <= 0):
            raise ConfigError("frequencies must be strictly increasing")
        if self.background_index != 0:
            raise ConfigError("the background profile must have index 0")

    @property
    def K(self) -> int:
        return len(self.profiles) - 1

    @property
    def Q(self) -> int:
        return len(self.frequencies)

    def s0(self) -> np.ndarray:
        return self.profiles[0](np.asarray(self.frequencies))


@dataclass(frozen=True)
class SpectralMatrix:
    S: np.ndarray
    rank: int
    condition: float

    @property
    def full_row_rank(self) -> bool:
        return self.rank == self.S.shape[0]


def spectral_matrix(S) -> SpectralMatrix:
    """Wrap a raw ``(K+1, Q)`` array, computing its numerical rank."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    bad = np.argwhere(~np.isfinite(S))
    if len(bad):
        k, q = map(int, bad[0])
        raise ConfigError(f"non-finite spectral value at (k={k}, q={q})")
    sv = np.linalg.svd(S, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return SpectralMatrix(S, 0, np.inf)
    keep = sv > RANK_RTOL * sv[0]
    rank = int(keep.sum())
    return SpectralMatrix(S, rank, float(sv[0] / sv[rank - 1]))


def sample_spectral_matrix(model: SpectralModel) -> SpectralMatrix:
    w = np.asarray(model.frequencies)
    rows = []
    for k, p in enumerate(model.profiles):
        row = p(w)
        if not np.all(np.isfinite(row)):
            q = int(np.flatnonzero(~np.isfinite(row))[0])
            raise ConfigError(f"profile {k} is not finite at frequency index {q}")
        rows.append(row)
    return spectral_matrix(np.vstack(rows))


def _as_sm(S) -> SpectralMatrix:
    return S if isinstance(S, SpectralMatrix) else spectral_matrix(S)


def right_inverse(S) -> np.ndarray:
    """Minimum-norm right inverse ``S^+`` with ``S @ S^+ = I``.

    Computed from the thin SVD ``S = U diag(s) V^T`` as ``V diag(1/s) U^T``.
    """
    sm = _as_sm(S)
    K1 = sm.S.shape[0]
    if sm.rank != K1:
        raise RankError(
            f"spectral matrix has rank {sm.rank} < {K1}; full decoupling is impossible",
            rank=sm.rank,
            condition=sm.condition,
        )
    U, s, Vt = np.linalg.svd(sm.S, full_matrices=False)
    return (Vt.T / s) @ U.T


def decouple(X, S) -> list[np.ndarray]:
    """Split ``X`` (J x Q) into ``Y_0..Y_K`` with ``Y = X S^+``."""
    X = np.asarray(X, dtype=float)
    Sp = right_inverse(S)
    if X.shape[1] != Sp.shape[0]:
        raise ConfigError(f"X has {X.shape[1]} columns, S has {Sp.shape[0]} frequencies")
    Y = X @ Sp
    return [Y[:, k].copy() for k in range(Y.shape[1])]


def weighted_fd(X1, X2, S) -> np.ndarray:
    """Weighted frequency difference ``(s0(w1)/det S) (X2 - s0(w2)/s0(w1) X1)``.

    This is the second column of ``[X1 X2] S^{-1}`` for a 2x2 spectral matrix.
    """
    S = np.asarray(S.S if isinstance(S, SpectralMatrix) else S, dtype=float)
    if S.shape != (2, 2):
        raise ConfigError("weighted_fd needs a 2x2 spectral matrix")
    det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
    if det == 0 or S[0, 0] == 0 or not np.isfinite(det):
        raise RankError("spectral matrix is singular", rank=spectral_matrix(S).rank)
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    return (S[0, 0] / det) * (X2 - (S[0, 1] / S[0, 0]) * X1)


def forward_difference(values, frequencies) -> np.ndarray:
    """Forward differences along the last axis: ``(v[q+1] - v[q]) / (w[q+1] - w[q])``."""
    w = np.asarray(frequencies, dtype=float)
    if w.size < 2:
        raise ConfigError("difference imaging needs at least two frequencies")
    dw = np.diff(w)
    if np.any(dw <= 0):
        raise ConfigError("frequencies must be distinct and increasing")
    return np.diff(np.asarray(values, dtype=float), axis=-1) / dw


def difference_system(X, S, active: Sequence[int], frequencies) -> tuple[SpectralMatrix, np.ndarray]:
    """Forward-differenced spectral matrix restricted to ``active`` rows, and differenced data.

    Returns ``(S_diff, X_diff)`` with ``S_diff`` of shape ``(|P|, Q-1)`` and
    ``X_diff`` of shape ``(J, Q-1)``.
    """
    sm = _as_sm(S)
    active = [int(p) for p in active]
    if not active:
        raise ConfigError("active set must not be empty")
    if len(set(active)) != len(active) or min(active) < 0 or max(active) >= sm.S.shape[0]:
        raise ConfigError(f"invalid active set {active} for K+1={sm.S.shape[0]}")
    Sd = forward_difference(sm.S[active], frequencies)
    Xd = forward_difference(X, frequencies)
    return spectral_matrix(Sd), Xd


def poly_moments(X, frequencies, degree: int) -> list[np.ndarray]:
    """Least-squares polynomial moments ``B_0..B_N`` of each data row in ``omega``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w = np.asarray(frequencies, dtype=float)
    if degree < 0:
        raise ConfigError("degree must be nonnegative")
    if len(np.unique(w)) != len(w):
        raise ConfigError("frequencies must be distinct")
    if len(w) < degree + 1:
        raise ConfigError(f"degree {degree} needs at least {degree + 1} frequencies, got {len(w)}")
    V = np.vander(w, degree + 1, increasing=True)
    cond = np.linalg.cond(V)
    if cond > VANDERMONDE_COND_WARN:
        warnings.warn(f"Vandermonde matrix is ill-conditioned (cond={cond:.2e})", IllConditionedWarning)
    coef, *_ = np.linalg.lstsq(V, X.T, rcond=None)
    return [coef[n].copy() for n in range(degree + 1)]


def partial_recover(B: Sequence[np.ndarray], alpha0: Sequence[float], n: int) -> np.ndarray:
    """Combination ``alpha0[0] B_n - alpha0[n] B_0``, proportional to ``Y_1`` when K=1.

    The proportionality constant depends on the unknown profile ``s_1`` and is
    nonzero only if ``s_0`` and ``s_1`` are incoherent; that is the caller's call.
    """
    if n == 0:
        raise ConfigError("n=0 gives an uninformative combination")
    if n >= len(B):
        raise ConfigError(f"moment index {n} out of range for {len(B)} moments")
    a = list(alpha0) + [0.0] * (len(B) - len(alpha0))
    return a[0] * np.asarray(B[n], dtype=float) - a[n] * np.asarray(B[0], dtype=float)
