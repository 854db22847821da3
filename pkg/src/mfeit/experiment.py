"""Config-driven experiments: phantom, simulated sweep, linear system, GIST, report.

A run is fully determined by its JSON config (and seed).  Outputs are written
into a staging directory next to the target and moved into place only when
every stage succeeded, so a failed run leaves nothing behind.
"""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import shutil
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, MfeitError
from .forward import reference_solutions, trig_current_patterns
from .linearize import assemble_data_cem, assemble_sensitivity, build_system, transfer_matrix
from .mesh import build_disk_mesh, place_electrodes, write_mesh_csv
from .phantom import (
    LinearRegimeWarning,
    PhantomSpec,
    builtin_phantom,
    deformed_truth,
    jaccard,
    metrics,
    rasterize_phantom,
    simulate_sweep,
    support,
)
from .recon import GistConfig, gist_solve
from .spectral import partial_recover, poly_moments, sample_spectral_matrix, spectral_matrix

MODES = ("direct", "difference", "partial_poly", "static")

#: GIST options used by experiments unless the config overrides them
GIST_DEFAULTS = {
    "alpha": 1e-2,
    "beta": 0.5,
    "relative_alpha": True,
    "column_scaling": True,
    "box": [0.0, 1.0],
    "max_iters": 8000,
    "rel_change_tol": 1e-6,
}
#: bounds for the background perturbation, which may have either sign
BACKGROUND_BOX = [-0.9, 10.0]


def _phantom(obj) -> PhantomSpec:
    if isinstance(obj, PhantomSpec):
        return obj
    if isinstance(obj, str):
        return builtin_phantom(obj)
    if isinstance(obj, dict):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LinearRegimeWarning)
            return PhantomSpec.from_config(obj)
    raise ConfigError(f"phantom must be a built-in name or an inline spec, got {type(obj).__name__}")


def _gist(opts: dict, box=None) -> GistConfig:
    d = dict(opts)
    if box is not None:
        d["box"] = box
    return GistConfig.from_dict(d)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.

    ``h_sim`` defaults to ``h_inv / 2``.  ``active`` lists the abundances that
    are unmixed; by default every profile when the sampled spectral matrix has
    full row rank, else all but the background.  ``gist`` holds GIST options for
    ``k >= 1``; the background uses ``background_box`` as its bounds.
    """

    phantom: PhantomSpec
    mode: str = "direct"
    h_inv: float = 0.1
    h_sim: float | None = None
    epsilon: float = 0.01
    seed: int = 0
    electrodes: int = 16
    arc_length: float = np.pi / 16
    contact: float = 1.0
    active: tuple | None = None
    frequency_index: int = 0
    degree: int | None = None
    moment: int = 1
    gist: dict = field(default_factory=lambda: dict(GIST_DEFAULTS))
    background_box: tuple = tuple(BACKGROUND_BOX)
    support_threshold: float = 0.25
    name: str = "experiment"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.h_sim is None:
            object.__setattr__(self, "h_sim", self.h_inv / 2)
        if not (self.h_inv > 0 and self.h_sim > 0):
            raise ConfigError("mesh sizes must be positive")
        if self.h_inv < self.h_sim:
            raise ConfigError(f"inversion h={self.h_inv} is finer than simulation h={self.h_sim}")
        if self.epsilon < 0:
            raise ConfigError("noise level must be nonnegative")
        merged = dict(GIST_DEFAULTS)
        merged.update(self.gist)
        object.__setattr__(self, "gist", merged)
        _gist(merged)  # validate early
        _gist(merged, self.background_box)
        K1 = self.phantom.n_abundances
        if self.active is not None:
            act = tuple(int(k) for k in self.active)
            if not act or len(set(act)) != len(act) or min(act) < 0 or max(act) >= K1:
                raise ConfigError(f"invalid active set {list(self.active)} for K+1={K1}")
            object.__setattr__(self, "active", act)
        if self.mode == "difference" and self.active is None:
            raise ConfigError("difference mode requires the active set")
        Q = self.phantom.spectral.Q
        if self.mode == "static" and not 0 <= self.frequency_index < Q:
            raise ConfigError(f"frequency_index {self.frequency_index} out of range for Q={Q}")
        if self.mode == "partial_poly" and self.phantom.spectral.K != 1:
            raise ConfigError("partial_poly mode needs exactly one unknown profile (K=1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        d = dict(d)
        if "phantom" not in d:
            raise ConfigError("experiment config needs a 'phantom'")
        unknown = set(d) - set(cls.__dataclass_fields__) - {"out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d.pop("out", None)
        d["phantom"] = _phantom(d["phantom"])
        for key in ("background_box", "active"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "phantom": self.phantom.to_config(),
            "mode": self.mode,
            "h_inv": self.h_inv,
            "h_sim": self.h_sim,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "electrodes": self.electrodes,
            "arc_length": self.arc_length,
            "contact": self.contact,
            "active": None if self.active is None else list(self.active),
            "frequency_index": self.frequency_index,
            "degree": self.degree,
            "moment": self.moment,
            "gist": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.gist.items())},
            "background_box": list(self.background_box),
            "support_threshold": self.support_threshold,
        }

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["seed"] = int(seed)
        return ExperimentConfig.from_dict(d)


def config_hash(echo: dict) -> str:
    return hashlib.sha256(json.dumps(echo, sort_keys=True).encode()).hexdigest()


class _Stages:
    """Names the failing stage on any package error and records stage timings."""

    def __init__(self):
        self.timing = {}
        self._name = None

    def __call__(self, name):
        self._name = name
        return self

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, etype, exc, tb):
        self.timing[self._name] = round(1e3 * (time.perf_counter() - self._t0), 3)
        if isinstance(exc, MfeitError) and not getattr(exc, "stage", None):
            exc.stage = self._name
            if exc.args:
                exc.args = (f"[{self._name}] {exc.args[0]}",) + exc.args[1:]
        return False


@dataclass
class Setup:
    """Everything the inversion needs, built once per (mesh sizes, phantom, noise)."""

    inversion_mesh: object
    layout: object
    truth_layout: object
    patterns: np.ndarray
    M: np.ndarray
    X: np.ndarray
    S: np.ndarray
    truth: np.ndarray
    sweep: object


def default_active(S) -> list[int]:
    """All rows if ``S`` has full row rank, else every row but the background."""
    K1 = np.asarray(S).shape[0]
    return list(range(K1)) if spectral_matrix(S).full_row_rank else list(range(1, K1))


def _computational_layout(config: ExperimentConfig, h: float):
    mesh = build_disk_mesh(1.0, h)
    return place_electrodes(mesh, config.electrodes, config.arc_length, None, config.contact)


def prepare(config: ExperimentConfig, stages: _Stages | None = None) -> Setup:
    stages = stages or _Stages()
    spec = config.phantom
    with stages("mesh"):
        layout = _computational_layout(config, config.h_sim)
        perfect = spec.semi_axes == (1.0, 1.0) and not spec.electrode_offsets
        if perfect:
            truth_layout = layout
        else:
            truth_layout = deformed_truth(spec, config.h_sim, config.electrodes, config.arc_length, config.contact)
        inv = build_disk_mesh(1.0, config.h_inv)
    P = trig_current_patterns(config.electrodes)
    with stages("simulate"):
        sweep = simulate_sweep(spec, truth_layout, P, config.epsilon, config.seed, config.contact)
    with stages("linearize"):
        refs = reference_solutions(layout, config.contact, P)
        M = assemble_sensitivity(inv, layout.mesh, np.array([r.u for r in refs]))
        S = sample_spectral_matrix(spec.spectral).S
        X = assemble_data_cem(sweep.voltages, np.array([r.U for r in refs]), P, S[0])
    truth = rasterize_phantom(spec, inv)
    return Setup(inv, layout, truth_layout, P, M, X, S, truth, sweep)


def _solve(setup: Setup, config: ExperimentConfig, y, k):
    box = config.background_box if k == 0 else None
    return gist_solve(setup.M, y, _gist(config.gist, box), W=setup.inversion_mesh.adjacency)


def recover(setup: Setup, config: ExperimentConfig) -> dict:
    """Run the configured inversion; returns ``{label: GistResult}``.

    Labels are abundance indices, or ``"static"`` for single-frequency imaging.
    """
    mode = config.mode
    if mode in ("direct", "difference"):
        active = list(config.active) if config.active is not None else default_active(setup.S)
        systems = build_system(
            setup.M, setup.X, setup.S, mode=mode, active=active,
            frequencies=config.phantom.spectral.frequencies,
        )
        return {sys_.index: _solve(setup, config, sys_.rhs, sys_.index) for sys_ in systems}
    if mode == "static":
        y = setup.X[:, config.frequency_index]
        return {"static": _solve(setup, config, y, 0)}
    # partial_poly: Y_1 up to an unknown (possibly negative) factor
    w = config.phantom.spectral.frequencies
    degree = len(w) - 1 if config.degree is None else config.degree
    B = poly_moments(setup.X, w, degree)
    s0 = config.phantom.spectral.profiles[0]
    if s0.poly is None:
        raise ConfigError("partial_poly mode needs a polynomial background profile")
    y = partial_recover(B, s0.poly, config.moment)
    opts = dict(config.gist)
    opts["box"] = [None, None]
    return {1: gist_solve(setup.M, y, GistConfig.from_dict(opts), W=setup.inversion_mesh.adjacency)}


def _fit_scale(a, ref) -> float:
    den = float(a @ a)
    return float(a @ ref) / den if den > 0 else 0.0


def evaluate(results: dict, setup: Setup, config: ExperimentConfig) -> list[dict]:
    """Truth-based metrics per recovered abundance (area-weighted relative L2 error)."""
    w = setup.inversion_mesh.element_areas
    thr = config.support_threshold
    out = []
    if "static" in results:
        a = results["static"].A
        for k in range(1, setup.truth.shape[0]):
            m = metrics(a, setup.truth[k], thr, w)
            out.append({"k": k, "recovery": "static", **m.as_dict()})
        return out
    for k, res in sorted(results.items()):
        a = res.A
        entry = {"k": k, "recovery": config.mode}
        if config.mode == "partial_poly":
            a = _fit_scale(a, setup.truth[k]) * a
            entry["scale_fitted"] = True
        entry.update(metrics(a, setup.truth[k], thr, w).as_dict())
        entry["converged"] = bool(res.converged)
        entry["iterations"] = len(res.log)
        out.append(entry)
    supp = {k: support(r.A, thr) for k, r in results.items() if k != 0}
    keys = sorted(supp)
    for i, k in enumerate(keys):
        for j in keys[i + 1:]:
            out.append({"k": [k, j], "cross_jaccard": jaccard(supp[k], supp[j])})
    return out


def _write_vector(path: Path, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "value"])
        for i, v in enumerate(values):
            w.writerow([i, f"{v:.17g}"])


def _stage_dir(out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))


def _publish(stage: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(stage.iterdir()):
        target = out / item.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        shutil.move(str(item), str(target))
    stage.rmdir()


def _provenance(echo: dict) -> dict:
    return {
        "config_hash": config_hash(echo),
        "package_version": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def _write_json(path: Path, obj) -> None:
    # json emits the shortest repr of each float, which round-trips exactly
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def run_experiment(config: ExperimentConfig, out) -> dict:
    """Run one experiment and write its artifacts into ``out``; returns the report."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    out = Path(out)
    stages = _Stages()
    stage = _stage_dir(out)
    try:
        setup = prepare(config, stages)
        with stages("recon"):
            results = recover(setup, config)
        with stages("write"):
            write_mesh_csv(stage / "mesh" / "inversion", setup.inversion_mesh)
            write_mesh_csv(stage / "mesh" / "forward", setup.layout.mesh, setup.layout)
            if setup.truth_layout is not setup.layout:
                write_mesh_csv(stage / "mesh" / "truth", setup.truth_layout.mesh, setup.truth_layout)
            setup.sweep.write(stage / "sweep")
            if "static" in results:
                _write_vector(stage / "recovered_static.csv", results["static"].A)
                results["static"].write_log(stage / "gist_log_static.csv")
            else:
                L = setup.inversion_mesh.n_elements
                for k in range(setup.truth.shape[0]):
                    # abundances outside the active set are taken as zero
                    res = results.get(k)
                    _write_vector(stage / f"recovered_k{k}.csv", np.zeros(L) if res is None else res.A)
                    if res is not None:
                        res.write_log(stage / f"gist_log_k{k}.csv")
            echo = config.to_dict()
            report = {
                "config_echo": echo,
                "metrics": evaluate(results, setup, config),
                "recovered": sorted(str(k) for k in results),
                "seed": config.seed,
                "timing_ms": dict(stages.timing),
                "provenance": _provenance(echo),
            }
            _write_json(stage / "report.json", report)
        _publish(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return report


# ----------------------------------------------------------------------------
# mesh / noise / regularization study


@dataclass(frozen=True)
class Table1Config:
    """Grid of inversion mesh sizes, noise levels and regularization parameters.

    Every cell is compared with the recovery on the finest mesh at the same
    ``alpha`` and the smallest noise level.  Data for all cells are simulated
    on one mesh of size ``h_sim`` (default: half the finest inversion size).
    """

    phantom: PhantomSpec
    h: tuple = (0.127, 0.0636, 0.0318)
    epsilons: tuple = (1e-3, 3e-3, 1e-2)
    alphas: tuple = (5e-3, 1e-2, 5e-2)
    h_sim: float | None = None
    seed: int = 0
    electrodes: int = 16
    arc_length: float = np.pi / 16
    contact: float = 1.0
    gist: dict = field(default_factory=lambda: dict(GIST_DEFAULTS))
    active: tuple | None = None
    name: str = "table1"

    def __post_init__(self):
        h = tuple(sorted((float(v) for v in self.h), reverse=True))
        if len(h) < 2 or len(set(h)) != len(h) or h[-1] <= 0:
            raise ConfigError("need at least two distinct positive mesh sizes")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "epsilons", tuple(sorted(float(e) for e in self.epsilons)))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not self.epsilons or self.epsilons[0] < 0:
            raise ConfigError("noise levels must be nonnegative")
        if not self.alphas or min(self.alphas) < 0:
            raise ConfigError("alphas must be nonnegative")
        if self.h_sim is None:
            object.__setattr__(self, "h_sim", h[-1] / 2)
        if self.h_sim > h[-1]:
            raise ConfigError("simulation mesh must be at least as fine as every inversion mesh")
        merged = dict(GIST_DEFAULTS)
        merged.update(self.gist)
        object.__setattr__(self, "gist", merged)

    @classmethod
    def from_dict(cls, d: dict) -> "Table1Config":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__) - {"out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d.pop("out", None)
        d["phantom"] = _phantom(d.get("phantom", "exam1i"))
        for key in ("h", "epsilons", "alphas", "active"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "phantom": self.phantom.to_config(),
            "h": list(self.h),
            "epsilons": list(self.epsilons),
            "alphas": list(self.alphas),
            "h_sim": self.h_sim,
            "seed": self.seed,
            "electrodes": self.electrodes,
            "arc_length": self.arc_length,
            "contact": self.contact,
            "gist": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.gist.items())},
            "active": None if self.active is None else list(self.active),
        }

    def with_seed(self, seed: int) -> "Table1Config":
        d = self.to_dict()
        d["seed"] = int(seed)
        return Table1Config.from_dict(d)


def run_table1(config: Table1Config, out) -> dict:
    """Relative errors over the (alpha, epsilon, h) grid; writes ``table1.csv``.

    Returns a report whose ``errors[a][e][i]`` is the error for ``alphas[a]``,
    ``epsilons[e]`` and ``h[i]``.
    """
    if not isinstance(config, Table1Config):
        config = Table1Config.from_dict(config)
    out = Path(out)
    stages = _Stages()
    stage = _stage_dir(out)
    spec = config.phantom
    try:
        with stages("mesh"):
            layout = place_electrodes(
                build_disk_mesh(1.0, config.h_sim), config.electrodes, config.arc_length, None, config.contact
            )
            meshes = [build_disk_mesh(1.0, h) for h in config.h]
        P = trig_current_patterns(config.electrodes)
        S = sample_spectral_matrix(spec.spectral).S
        active = list(config.active) if config.active is not None else default_active(S)
        with stages("simulate"):
            sweeps = [simulate_sweep(spec, layout, P, eps, config.seed, config.contact) for eps in config.epsilons]
        with stages("linearize"):
            refs = reference_solutions(layout, config.contact, P)
            V = np.array([r.u for r in refs])
            Uref = np.array([r.U for r in refs])
            Ms = [assemble_sensitivity(m, layout.mesh, V) for m in meshes]
            Xs = [assemble_data_cem(sw.voltages, Uref, P, S[0]) for sw in sweeps]
        with stages("recon"):
            rec = {}
            for a, alpha in enumerate(config.alphas):
                gc = _gist(dict(config.gist, alpha=alpha))
                for e in range(len(config.epsilons)):
                    for i, mesh in enumerate(meshes):
                        systems = build_system(Ms[i], Xs[e], S, mode="direct", active=active)
                        rec[a, e, i] = np.array(
                            [gist_solve(Ms[i], s.rhs, gc, W=mesh.adjacency).A for s in systems]
                        )
        with stages("compare"):
            fine = meshes[-1]
            T = [transfer_matrix(fine, m) for m in meshes]
            w = fine.element_areas
            truth = rasterize_phantom(spec, fine)[active]
            nA, nE, nH = len(config.alphas), len(config.epsilons), len(meshes)
            errors = np.zeros((nA, nE, nH))
            truth_err = np.zeros((nA, nE, nH))
            for (a, e, i), A in rec.items():
                on_fine = np.array([T[i] @ row for row in A])
                ref = rec[a, 0, nH - 1]
                den = np.sqrt(np.sum(w * ref**2))
                diff = np.sqrt(np.sum(w * (on_fine - ref) ** 2))
                errors[a, e, i] = diff / den if den > 0 else diff
                truth_err[a, e, i] = np.sqrt(np.sum(w * (on_fine - truth) ** 2)) / np.sqrt(np.sum(w * truth**2))
        with stages("write"):
            _write_table(stage / "table1.csv", config, errors)
            with open(stage / "table1_long.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["alpha", "epsilon", "h", "relative_error", "error_vs_truth"])
                for a, e, i in np.ndindex(errors.shape):
                    wr.writerow([
                        f"{config.alphas[a]:.17g}", f"{config.epsilons[e]:.17g}", f"{config.h[i]:.17g}",
                        f"{errors[a, e, i]:.17g}", f"{truth_err[a, e, i]:.17g}",
                    ])
            echo = config.to_dict()
            report = {
                "config_echo": echo,
                "errors": errors.tolist(),
                "errors_vs_truth": truth_err.tolist(),
                "active": active,
                "seed": config.seed,
                "timing_ms": dict(stages.timing),
                "provenance": _provenance(echo),
            }
            _write_json(stage / "report.json", report)
        _publish(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return report


def _write_table(path: Path, config: Table1Config, errors) -> None:
    """One row per noise level, columns grouped by alpha then h."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon"] + [f"alpha={a:g};h={h:g}" for a in config.alphas for h in config.h])
        for e, eps in enumerate(config.epsilons):
            w.writerow([f"{eps:.17g}"] + [f"{errors[a, e, i]:.17g}" for a in range(len(config.alphas)) for i in range(len(config.h))])


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
