import numpy as np
import pytest

from mfeit.errors import ConfigError, MeshError, RankError
from mfeit.forward import (
    ContinuumSolver,
    boundary_mass_matrix,
    reference_solutions,
    reference_solutions_continuum,
    solve_cem,
    stiffness_matrix,
    trig_current_patterns,
    trig_flux_patterns,
)
from mfeit.linearize import (
    SensitivitySystem,
    assemble_data_cem,
    assemble_data_continuum,
    assemble_sensitivity,
    build_system,
    index_map,
    pair_index,
    transfer_matrix,
)
from mfeit.mesh import Mesh, build_disk_mesh, build_ellipse_mesh, place_electrodes
from mfeit.phantom import Inclusion, PhantomSpec, rasterize_phantom, simulate_sweep
from mfeit.spectral import SpectralModel, decouple, sample_spectral_matrix, weighted_fd

P = trig_current_patterns(16)


@pytest.fixture(scope="module")
def setup():
    layout = place_electrodes(build_disk_mesh(1.0, 0.08), 16, np.pi / 16)
    refs = reference_solutions(layout, 1.0, P)
    V = np.array([r.u for r in refs])
    inv = build_disk_mesh(1.0, 0.16)
    M = assemble_sensitivity(inv, layout.mesh, V)
    return layout, refs, V, inv, M


def _spec(contrast, profiles=({"poly": [1.0]}, {"poly": [0.1, 0.2]}), w=(0.0, 1.0)):
    return PhantomSpec(
        (Inclusion.square((0.3, 0.2), 0.2, 1, contrast),),
        SpectralModel(profiles, w),
    )


def test_index_map():
    assert pair_index(15, 2, 3) == 33
    assert tuple(index_map(15)[33]) == (2, 3)


def test_sensitivity_symmetry_and_diagonal(setup):
    *_, M = setup
    N = 15
    for m in range(N):
        for n in range(N):
            assert np.array_equal(M[pair_index(N, m, n)], M[pair_index(N, n, m)])
        assert np.all(M[pair_index(N, m, m)] >= 0)
    assert np.all(np.isfinite(M))


def test_column_sums_match_bilinear_form(setup):
    layout, _, V, inv, M = setup
    K = stiffness_matrix(layout.mesh, 1.0)
    G = V @ (K @ V.T)
    assert np.abs(M.sum(axis=1) - G.ravel()).max() <= 1e-10 * np.abs(G).max()
    # the same totals on the forward mesh itself: elements partition the domain
    M_fwd = assemble_sensitivity(layout.mesh, layout.mesh, V)
    assert np.allclose(M_fwd.sum(axis=1), M.sum(axis=1), rtol=1e-12, atol=1e-12)


def test_disjoint_meshes_rejected():
    m = build_disk_mesh(1.0, 0.3)
    far = Mesh.from_triangles(m.nodes + 10.0, m.elements, (1.0, 1.0))
    with pytest.raises(MeshError):
        transfer_matrix(build_disk_mesh(1.0, 0.3), far)


@pytest.mark.parametrize("s0", [1.0, 0.5, 2.0])
def test_unperturbed_body_gives_zero_data(setup, s0):
    layout, refs, *_ = setup
    U = np.array([solve_cem(layout, s0, 1.0 / s0, I).U for I in P])
    X = assemble_data_cem(U[None], np.array([r.U for r in refs]), P, [s0])
    assert np.abs(X).max() < 1e-9


def test_linearized_data_close_to_model(setup):
    layout, refs, V, inv, M = setup
    spec = _spec(0.1)
    sw = simulate_sweep(spec, layout, P, 0.0, 0)
    S = sample_spectral_matrix(spec.spectral).S
    X = assemble_data_cem(sw.voltages, np.array([r.U for r in refs]), P, S[0])
    # the forward mesh resolves the inclusion better than the inversion mesh
    M_fwd = assemble_sensitivity(layout.mesh, layout.mesh, V)
    lin = M_fwd @ rasterize_phantom(spec, layout.mesh).T @ S
    assert np.linalg.norm(X - lin) < 0.15 * np.linalg.norm(lin)


def test_data_scale_with_background(setup):
    # scaling every profile by c scales X by c, so the decoupled data are unchanged
    layout, refs, *_ = setup
    Uref = np.array([r.U for r in refs])
    out = []
    for c in (1.0, 2.5):
        spec = _spec(0.1, ({"poly": [c]}, {"poly": [0.1 * c, 0.2 * c]}))
        sw = simulate_sweep(spec, layout, P, 0.0, 0)
        S = sample_spectral_matrix(spec.spectral)
        X = assemble_data_cem(sw.voltages, Uref, P, S.S[0])
        out.append((X, decouple(X, S)[1]))
    assert np.allclose(out[1][0], 2.5 * out[0][0], rtol=1e-9, atol=1e-12)
    assert np.allclose(out[1][1], out[0][1], rtol=1e-9, atol=1e-12)


def test_doubling_contrast_doubles_data(setup):
    layout, refs, *_ = setup
    Uref = np.array([r.U for r in refs])
    X = []
    for c in (0.025, 0.05):
        sw = simulate_sweep(_spec(c), layout, P, 0.0, 0)
        X.append(assemble_data_cem(sw.voltages, Uref, P, [1.0, 1.0]))
    assert np.linalg.norm(X[1] - 2 * X[0]) < 0.05 * np.linalg.norm(X[1])


def test_continuum_data():
    mesh = build_disk_mesh(1.0, 0.1)
    f = np.array(trig_flux_patterns(mesh, 6))
    v = np.array(reference_solutions_continuum(mesh, f))
    B = boundary_mass_matrix(mesh)
    X0 = assemble_data_continuum(v[None], v, f, B, [1.0])
    assert np.abs(X0).max() < 1e-10
    sigma = 1.0 + 0.1 * rasterize_phantom(_spec(1.0), mesh)[1]
    solver = ContinuumSolver(mesh, sigma)
    u = np.array([solver.solve(fn) for fn in f])
    X = assemble_data_continuum(u[None], v, f, B, [1.0]).reshape(6, 6)
    assert np.abs(X - X.T).max() <= 1e-6 * np.abs(X).max()
    assert np.abs(X).max() > 1e-4


def test_data_shape_mismatch(setup):
    with pytest.raises(ConfigError):
        assemble_data_cem(np.zeros((2, 15, 16)), np.zeros((15, 16)), P, [1.0])


def test_build_system_two_frequencies_is_weighted_fd():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((9, 5))
    X = rng.standard_normal((9, 2))
    S = np.array([[1.0, 1.2], [0.1, 0.4]])
    systems = build_system(M, X, S)
    assert [s.index for s in systems] == [0, 1]
    assert np.allclose(systems[1].rhs, weighted_fd(X[:, 0], X[:, 1], S), rtol=1e-12)


def test_build_system_difference_constant_background():
    X = np.array([[1.0, 3.0], [2.0, 2.5]])
    S = np.array([[1.0, 1.0], [0.0, 0.5]])
    (sys_,) = build_system(np.eye(2), X, S, mode="difference", active=[1], frequencies=[0.0, 1.0])
    assert sys_.index == 1
    assert np.allclose(sys_.rhs, (X[:, 1] - X[:, 0]) / 0.5)


def test_build_system_errors():
    S = np.ones((3, 2))
    with pytest.raises(RankError):
        build_system(np.eye(2), np.ones((2, 2)), S)
    with pytest.raises(ConfigError):
        build_system(np.eye(2), np.ones((2, 2)), S, mode="difference")
    with pytest.raises(ConfigError):
        build_system(np.eye(2), np.ones((2, 2)), S, mode="nope")


def test_sensitivity_system_write(tmp_path):
    sysm = SensitivitySystem(np.ones((4, 3)), np.zeros((4, 2)), np.array([0.0, 1.0]), np.ones(2))
    assert sysm.index_map.shape == (4, 2)
    sysm.write_csv(tmp_path)
    assert (tmp_path / "data_w1.csv").exists()
    with pytest.raises(ConfigError):
        SensitivitySystem(np.ones((3, 3)), np.zeros((3, 1)), np.array([0.0]), np.ones(1))


def test_transfer_between_ellipse_and_disk_is_partition():
    T = transfer_matrix(build_disk_mesh(1.0, 0.1), build_disk_mesh(1.0, 0.2))
    assert np.all(np.asarray(T.sum(axis=1)).ravel() == 1)
    T2 = transfer_matrix(build_ellipse_mesh(1.05, 0.95, 0.1), build_disk_mesh(1.0, 0.2))
    assert np.all(np.asarray(T2.sum(axis=1)).ravel() == 1)
