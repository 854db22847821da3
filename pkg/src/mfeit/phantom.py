"""Ground-truth phantoms, noisy voltage sweeps and recovery metrics."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MeshError
from .forward import CemSolver
from .mesh import ElectrodeLayout, Mesh, build_disk_mesh, build_ellipse_mesh, place_electrodes
from .spectral import SpectralModel, sample_spectral_matrix

LINEAR_REGIME_WARN = 0.5


class LinearRegimeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Inclusion:
    """Axis-aligned rectangle ``[cx-hx, cx+hx) x [cy-hy, cy+hy)`` of one abundance."""

    center: tuple
    half_widths: tuple
    abundance: int
    contrast: float = 1.0

    @classmethod
    def square(cls, center, half_width, abundance, contrast=1.0) -> "Inclusion":
        return cls(tuple(center), (half_width, half_width), abundance, contrast)

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        (cx, cy), (hx, hy) = self.center, self.half_widths
        return (
            (p[:, 0] >= cx - hx) & (p[:, 0] < cx + hx) & (p[:, 1] >= cy - hy) & (p[:, 1] < cy + hy)
        )

    def corners(self) -> np.ndarray:
        (cx, cy), (hx, hy) = self.center, self.half_widths
        return np.array([[cx - hx, cy - hy], [cx + hx, cy - hy], [cx + hx, cy + hy], [cx - hx, cy + hy]])

    def overlaps(self, other: "Inclusion") -> bool:
        (ax, ay), (ahx, ahy) = self.center, self.half_widths
        (bx, by), (bhx, bhy) = other.center, other.half_widths
        return abs(ax - bx) < ahx + bhx and abs(ay - by) < ahy + bhy

    def to_config(self) -> dict:
        return {
            "center": list(self.center),
            "half_widths": list(self.half_widths),
            "abundance": self.abundance,
            "contrast": self.contrast,
        }


@dataclass(frozen=True)
class PhantomSpec:
    """Inclusions, their spectral model, the true domain and electrode shifts.

    ``domain`` is ``("disk",)`` for the unit disk or ``("ellipse", a, b)``.
    """

    inclusions: tuple
    spectral: SpectralModel
    domain: tuple = ("disk",)
    electrode_offsets: tuple | None = None
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "inclusions", tuple(self.inclusions))
        K = self.spectral.K
        a, b = self.semi_axes
        for i, inc in enumerate(self.inclusions):
            if not 0 <= inc.abundance <= K:
                raise ConfigError(f"inclusion {i} uses abundance {inc.abundance} but K={K}")
            c = inc.corners()
            if np.any((c[:, 0] / a) ** 2 + (c[:, 1] / b) ** 2 >= 1.0):
                raise ConfigError(f"inclusion {i} is not strictly inside the domain")
            for j in range(i):
                if inc.overlaps(self.inclusions[j]):
                    raise ConfigError(f"inclusions {j} and {i} overlap")
        if self.inclusions:
            S = sample_spectral_matrix(self.spectral).S
            peak = max(abs(inc.contrast) * np.abs(S[inc.abundance]).max() for inc in self.inclusions)
            if peak > LINEAR_REGIME_WARN:
                warnings.warn(
                    f"conductivity perturbation up to {peak:.2f} may leave the linear regime",
                    LinearRegimeWarning,
                )

    @property
    def semi_axes(self) -> tuple:
        if self.domain[0] == "disk":
            return (1.0, 1.0)
        if self.domain[0] == "ellipse":
            return (float(self.domain[1]), float(self.domain[2]))
        raise ConfigError(f"unknown domain {self.domain!r}")

    @property
    def n_abundances(self) -> int:
        return self.spectral.K + 1

    @classmethod
    def from_config(cls, d: dict) -> "PhantomSpec":
        """Inverse of :meth:`to_config`."""
        try:
            incs = [
                Inclusion(tuple(i["center"]), tuple(i["half_widths"]), int(i["abundance"]), float(i.get("contrast", 1.0)))
                for i in d.get("inclusions", [])
            ]
            model = SpectralModel(profiles=d["profiles"], frequencies=d["frequencies"])
            offsets = d.get("electrode_offsets")
            return cls(
                tuple(incs),
                model,
                tuple(d.get("domain", ("disk",))),
                None if offsets is None else tuple(float(o) for o in offsets),
                d.get("name", "custom"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed phantom spec: {exc!r}") from exc

    def to_config(self) -> dict:
        return {
            "name": self.name,
            "inclusions": [inc.to_config() for inc in self.inclusions],
            "profiles": [p.to_config() for p in self.spectral.profiles],
            "frequencies": list(self.spectral.frequencies),
            "domain": list(self.domain),
            "electrode_offsets": None if self.electrode_offsets is None else list(self.electrode_offsets),
        }


def rasterize_phantom(spec: PhantomSpec, mesh: Mesh) -> np.ndarray:
    """Per-abundance element values, shape ``(K+1, L)``.

    An element takes an inclusion's contrast when its centroid lies in the
    inclusion.  If ``mesh`` covers a different ellipse than the phantom's true
    domain, centroids are first carried to the true domain by the axis scaling
    between the two, which is how truth is compared on the computational mesh.
    """
    scale = np.array(spec.semi_axes) / np.array(mesh.semi_axes)
    c = mesh.centroids * scale
    out = np.zeros((spec.n_abundances, mesh.n_elements))
    for inc in spec.inclusions:
        hit = inc.contains(c)
        if np.any(out[:, hit] != 0):
            raise ConfigError("overlapping inclusions after rasterization")
        out[inc.abundance, hit] = inc.contrast
    return out


def conductivity(abundances: np.ndarray, s_column: np.ndarray) -> np.ndarray:
    """``sigma = s0 + sum_k s_k * A_k`` at one frequency (``A_0`` is the background perturbation)."""
    return s_column[0] + s_column @ abundances


@dataclass
class NoisySweep:
    """Electrode voltages for all frequencies and patterns, shape ``(Q, N, E)``."""

    voltages: np.ndarray
    clean: np.ndarray
    background: np.ndarray
    noise: np.ndarray
    epsilon: float
    seed: int
    frequencies: tuple

    def write(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for q in range(self.voltages.shape[0]):
            with open(out / f"sweep_w{q}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                E = self.voltages.shape[2]
                w.writerow(["pattern"] + [f"U{j}" for j in range(E)])
                for n, row in enumerate(self.voltages[q]):
                    w.writerow([n] + [f"{v:.17g}" for v in row])
        meta = {"epsilon": self.epsilon, "seed": self.seed, "frequencies": list(self.frequencies)}
        (out / "sweep_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def noise_rng(seed: int, q: int, n: int) -> np.random.Generator:
    """Generator for frequency ``q`` and pattern ``n``: PCG64 keyed by ``(seed, q, n)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), q, n])))


def simulate_sweep(
    spec: PhantomSpec,
    layout: ElectrodeLayout,
    patterns,
    epsilon: float,
    seed: int,
    contact=None,
) -> NoisySweep:
    """Simulate CEM voltages on ``layout.mesh`` and add Gaussian noise.

    At frequency ``w_q`` the conductivity is ``s0 + sum_k s_k A_k`` and the
    contact impedances are ``c / s0``.  For every pattern the noise is
    ``epsilon * max_j |U_j - U_j(sigma_0)| * eta`` with ``eta`` standard normal,
    then re-grounded to zero mean.
    """
    if epsilon < 0:
        raise ConfigError("noise level must be nonnegative")
    P = np.asarray(patterns, dtype=float)
    c = layout.contact_constants if contact is None else np.broadcast_to(np.asarray(contact, float), (layout.count,))
    S = sample_spectral_matrix(spec.spectral).S
    A = rasterize_phantom(spec, layout.mesh)
    Q, (N, E) = S.shape[1], P.shape
    clean = np.empty((Q, N, E))
    back = np.empty((Q, N, E))
    noise = np.zeros((Q, N, E))
    for q in range(Q):
        s0 = S[0, q]
        if s0 <= 0:
            raise ConfigError(f"background profile is nonpositive at frequency index {q}")
        sigma = conductivity(A, S[:, q])
        if np.any(sigma <= 0):
            raise ConfigError(f"conductivity becomes nonpositive at frequency index {q}")
        z = c / s0
        truth = CemSolver(layout, sigma, z)
        ref = CemSolver(layout, s0, z)
        for n in range(N):
            clean[q, n] = truth.solve(P[n]).U
            back[q, n] = ref.solve(P[n]).U
            scale = epsilon * np.abs(clean[q, n] - back[q, n]).max()
            if scale > 0:
                eta = noise_rng(seed, q, n).standard_normal(E)
                v = scale * eta
                noise[q, n] = v - v.mean()
    return NoisySweep(
        voltages=clean + noise,
        clean=clean,
        background=back,
        noise=noise,
        epsilon=float(epsilon),
        seed=int(seed),
        frequencies=tuple(spec.spectral.frequencies),
    )


def deformed_truth(
    spec: PhantomSpec,
    target_h: float,
    count: int = 16,
    arc_length: float = np.pi / 16,
    contact=1.0,
) -> ElectrodeLayout:
    """Mesh the true domain and place electrodes on it.

    On an ellipse the electrodes occupy the same parameter intervals as the
    nominal unit-disk electrodes.  Electrode offsets (misplacement) shift
    electrodes without changing their length.
    """
    a, b = spec.semi_axes
    if not (0.7 <= a <= 1.3 and 0.7 <= b <= 1.3):
        raise MeshError(f"deformation ({a}, {b}) is outside the supported range [0.7, 1.3]")
    mesh = build_disk_mesh(1.0, target_h) if a == b == 1.0 else build_ellipse_mesh(a, b, target_h)
    offsets = spec.electrode_offsets
    return place_electrodes(mesh, count, arc_length, offsets, contact)


@dataclass(frozen=True)
class Metrics:
    relative_error: float
    jaccard: float
    max_abs: float
    absolute: bool = False

    def as_dict(self) -> dict:
        return {
            "relative_error": float(self.relative_error),
            "jaccard": float(self.jaccard),
            "max_abs": float(self.max_abs),
            "error_is_absolute": bool(self.absolute),
        }


def support(A, threshold: float) -> np.ndarray:
    """``{l : |A_l| > threshold * max |A|}``; empty for the zero vector."""
    a = np.abs(np.asarray(A, dtype=float))
    m = a.max() if a.size else 0.0
    return a > threshold * m if m > 0 else np.zeros(a.shape, dtype=bool)


def jaccard(s1, s2) -> float:
    union = np.count_nonzero(s1 | s2)
    return 1.0 if union == 0 else np.count_nonzero(s1 & s2) / union


def metrics(A_rec, A_ref, support_threshold: float = 0.25, weights=None) -> Metrics:
    """Relative error, support Jaccard index and peak magnitude of a recovery.

    ``weights`` (e.g. element areas) turns the error into an L2 function norm.
    When ``A_ref`` is zero the absolute error norm is reported instead.
    """
    A_rec = np.asarray(A_rec, dtype=float)
    A_ref = np.asarray(A_ref, dtype=float)
    if A_rec.shape != A_ref.shape:
        raise ConfigError(f"shape mismatch {A_rec.shape} vs {A_ref.shape}")
    w = np.ones(A_rec.shape) if weights is None else np.asarray(weights, dtype=float)
    diff = np.sqrt(np.sum(w * (A_rec - A_ref) ** 2))
    ref = np.sqrt(np.sum(w * A_ref**2))
    absolute = ref == 0
    err = float(diff if absolute else diff / ref)
    jac = jaccard(support(A_rec, support_threshold), support(A_ref, support_threshold))
    return Metrics(err, float(jac), float(np.abs(A_rec).max(initial=0.0)), absolute)


# Built-in phantoms.  Inclusion positions are qualitative ("top left, top right,
# bottom" etc.); sizes are our constants.
_W = (0.0, 0.5, 1.0)
_ONE = {"poly": [1.0]}


def _spec(name, incs, profiles, domain=("disk",), offsets=None):
    model = SpectralModel(profiles=[_ONE] + profiles, frequencies=_W)
    return PhantomSpec(tuple(incs), model, domain, offsets, name)


def _exam1(name, s2):
    incs = [
        Inclusion.square((-0.4, 0.35), 0.15, 1),
        Inclusion.square((0.4, 0.35), 0.15, 1),
        Inclusion.square((0.0, -0.45), 0.15, 2),
    ]
    return _spec(name, incs, [{"poly": [0.1, 0.1]}, {"poly": [0.0, s2]}])


def _exam2(name, s1, contrasts=(1.0, 1.0, 1.0)):
    incs = [
        Inclusion((-0.45, 0.4), (0.2, 0.12), 1, contrasts[0]),
        Inclusion((0.45, 0.4), (0.2, 0.12), 2, contrasts[1]),
        Inclusion((0.0, -0.5), (0.2, 0.12), 3, contrasts[2]),
    ]
    return _spec(name, incs, [{"poly": [s1, s1]}, {"poly": [0.0, 0.0, 0.1]}, {"poly": [0.1, 0.2]}])


def _exam3(name, a, b):
    incs = [Inclusion.square((0.0, 0.4), 0.15, 1), Inclusion.square((0.0, -0.4), 0.15, 2)]
    return _spec(name, incs, [{"poly": [0.2, 0.2]}, {"poly": [0.0, 0.0, 0.1]}], ("ellipse", a, b))


def _exam4(name):
    incs = [Inclusion((0.0, 0.45), (0.2, 0.12), 1), Inclusion((0.0, -0.45), (0.2, 0.12), 2)]
    offsets = tuple(np.pi / 32 if j % 2 else 0.0 for j in range(16))
    return _spec(name, incs, [{"poly": [0.2, 0.2]}, {"poly": [0.0, 0.0, 0.1]}], offsets=offsets)


def builtin_phantoms() -> dict:
    """Named example phantoms keyed by ``exam1i``, ``exam1ii``, ..."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinearRegimeWarning)
        specs = [
            _exam1("exam1i", 0.2),
            _exam1("exam1ii", 0.02),
            _exam2("exam2i", 0.2),
            _exam2("exam2ii", 0.02),
            _exam2("exam2c", 0.2, (1.5, 1.0, 0.5)),
            _exam3("exam3i", 1.1, 0.9),
            _exam3("exam3ii", 1.2, 0.8),
            _exam4("exam4"),
        ]
    return {s.name: s for s in specs}


def builtin_phantom(name: str) -> PhantomSpec:
    specs = builtin_phantoms()
    if name not in specs:
        raise ConfigError(f"unknown phantom {name!r}; choose from {sorted(specs)}")
    return specs[name]
