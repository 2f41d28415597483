"""Geometry oracles: brute-force stress, filter/sort selection, greedy
isolation, direct RBF evaluation, and the displacement-cap property."""

from collections import defaultdict

import numpy as np
import pytest

from advreal import geometry
from advreal.errors import DomainError
from advreal.geometry import (
    ControlPointSet,
    GarmentMesh,
    StressField,
    TpsConfig,
    compute_vertex_stress,
    deform,
    sample_target_offsets,
    select_control_points,
    select_high_stress,
    solve_tps_weights,
    tps_displacement,
)


def random_mesh(rng, max_vertices=200):
    n = int(rng.integers(4, max_vertices + 1))
    verts = rng.uniform(-1.0, 1.0, size=(n, 3))
    n_edges = int(rng.integers(n, 3 * n))
    pairs = set()
    while len(pairs) < n_edges:
        i, j = rng.integers(0, n, size=2)
        if i != j:
            pairs.add((min(i, j), max(i, j)))
    edges = np.array(sorted(pairs), dtype=np.int64)
    weights = rng.uniform(0.0, 2.0, size=len(edges))
    return GarmentMesh(verts, edges, weights, np.empty((0, 3), dtype=np.int64))


def stress_oracle(mesh):
    adj = defaultdict(list)
    for (i, j), w in zip(mesh.edges, mesh.adjacency_weights):
        adj[i].append((j, w))
        adj[j].append((i, w))
    sigma = np.zeros(mesh.n_vertices)
    for i in range(mesh.n_vertices):
        for j, w in adj[i]:
            sigma[i] += w * np.linalg.norm(mesh.vertices[j] - mesh.vertices[i])
    return sigma


# -- compute_vertex_stress ---------------------------------------------------


def test_isolated_vertex_has_zero_stress():
    mesh = GarmentMesh(
        np.array([[0.0, 0, 0], [1.0, 0, 0], [5.0, 5, 5]]),
        np.array([[0, 1]]),
        np.array([1.0]),
        np.empty((0, 3)),
    )
    sigma = compute_vertex_stress(mesh).sigma
    assert sigma[2] == 0.0


def test_two_vertices_unit_distance():
    mesh = GarmentMesh(
        np.array([[0.0, 0, 0], [1.0, 0, 0]]),
        np.array([[0, 1]]),
        np.array([1.0]),
        np.empty((0, 3)),
    )
    assert np.allclose(compute_vertex_stress(mesh).sigma, [1.0, 1.0])


def test_stress_matches_double_loop_oracle():
    rng = np.random.default_rng(10)
    for _ in range(20):
        mesh = random_mesh(rng, max_vertices=50)
        sigma = compute_vertex_stress(mesh).sigma
        assert np.abs(sigma - stress_oracle(mesh)).max() < 1e-12


def test_empty_mesh_raises():
    mesh = GarmentMesh(np.empty((0, 3)), np.empty((0, 2)), np.empty(0), np.empty((0, 3)))
    with pytest.raises(DomainError, match="empty mesh"):
        compute_vertex_stress(mesh)


# -- select_high_stress --------------------------------------------------------


def test_select_all_below_threshold():
    assert select_high_stress(StressField([0.1, 0.2]), 0.5).size == 0


def test_select_example_ordering():
    out = select_high_stress(StressField([0.9, 0.7, 1.2]), 0.8)
    assert out.tolist() == [2, 0]


def test_select_matches_filter_sort_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        sigma = rng.uniform(0, 2, size=rng.integers(1, 60))
        thres = rng.uniform(0, 2)
        got = select_high_stress(StressField(sigma), thres).tolist()
        expect = sorted(
            [i for i in range(len(sigma)) if sigma[i] > thres],
            key=lambda i: (-sigma[i], i),
        )
        assert got == expect


def test_select_ties_break_by_index():
    out = select_high_stress(StressField([1.0, 1.0, 0.5, 1.0]), 0.9)
    assert out.tolist() == [0, 1, 3]


# -- select_control_points -----------------------------------------------------


def greedy_oracle(candidates, sigma, positions, gamma, rho, n_min):
    target = max(n_min, int(np.floor(rho * len(candidates))))
    accepted = []
    for i in candidates:
        if len(accepted) >= target:
            break
        radius = gamma / sigma[i] if sigma[i] > 0 else np.inf
        if all(np.linalg.norm(positions[i] - positions[j]) >= radius for j in accepted):
            accepted.append(i)
    return accepted


def test_single_candidate_always_selected():
    stress = StressField([2.0])
    cps = select_control_points(np.array([0]), stress, np.array([[0.0, 0, 0]]), 1.0, 1.0, 0)
    assert cps.indices.tolist() == [0]


def test_control_points_match_greedy_oracle():
    rng = np.random.default_rng(12)
    n = 100
    positions = rng.uniform(0, 1, size=(n, 3))
    sigma = rng.uniform(0.5, 3.0, size=n)
    stress = StressField(sigma)
    candidates = select_high_stress(stress, 0.0)
    cps = select_control_points(candidates, stress, positions, 0.01, 0.2, 4)
    expect = greedy_oracle(candidates, sigma, positions, 0.01, 0.2, 4)
    assert cps.indices.tolist() == expect


def test_coincident_candidates_keep_higher_stress():
    positions = np.array([[0.0, 0, 0], [0.0, 0, 0]])
    stress = StressField([2.0, 1.0])
    candidates = select_high_stress(stress, 0.0)
    cps = select_control_points(candidates, stress, positions, 0.5, 1.0, 2)
    assert cps.indices.tolist() == [0]
    assert cps.warning  # lower bound could not be met


def test_empty_candidates_warn():
    cps = select_control_points(np.array([], dtype=int), StressField([1.0]),
                                np.zeros((1, 3)), 0.1, 0.5, 2)
    assert len(cps) == 0 and cps.warning


def test_monotone_isolation_invariant():
    rng = np.random.default_rng(13)
    for _ in range(10):
        n = 60
        positions = rng.uniform(0, 1, size=(n, 3))
        sigma = rng.uniform(0.1, 4.0, size=n)
        stress = StressField(sigma)
        candidates = select_high_stress(stress, 0.0)
        cps = select_control_points(candidates, stress, positions, 0.05, 0.3, 2)
        if len(cps) < 2:
            continue
        dmin = min(
            np.linalg.norm(cps.positions[a] - cps.positions[b])
            for a in range(len(cps))
            for b in range(a + 1, len(cps))
        )
        assert dmin >= 0.05 / sigma[cps.indices].max() - 1e-12


# -- solve_tps_weights ---------------------------------------------------------


def test_zero_offsets_give_zero_weights():
    rng = np.random.default_rng(14)
    pos = rng.uniform(0, 1, (6, 3))
    cps = ControlPointSet(np.arange(6), pos, np.zeros((6, 3)))
    w = solve_tps_weights(cps)
    assert np.allclose(w, 0.0)


def test_single_point_ridge_solve():
    cps = ControlPointSet(np.array([0]), np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
    w = solve_tps_weights(cps, ridge=1e-8)
    # direct linear solve oracle: (phi(0) + ridge) * w = offset
    assert np.allclose((0.0 + 1e-8) * w, [[0.0, 0.0, 1.0]], atol=1e-8)


@pytest.mark.parametrize("kernel", ["linear", "gaussian"])
def test_interpolation_residual(kernel):
    rng = np.random.default_rng(15)
    pos = rng.uniform(0, 1, (5, 3))
    offsets = rng.uniform(-0.1, 0.1, (5, 3))
    cps = ControlPointSet(np.arange(5), pos, offsets)
    w = solve_tps_weights(cps, kernel=kernel)
    diff = pos[:, None, :] - pos[None, :, :]
    r = np.linalg.norm(diff, axis=2)
    phi = r if kernel == "linear" else np.exp(-(r**2))
    residual = np.abs((phi + 1e-8 * np.eye(5)) @ w - offsets).max()
    assert residual < 1e-8


# -- deform ----------------------------------------------------------------------


def small_grid_mesh():
    xs, ys = np.meshgrid(np.linspace(0, 1, 4), np.linspace(0, 1, 4))
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(16)], axis=1)
    faces = []
    for i in range(3):
        for j in range(3):
            a = i * 4 + j
            faces.append([a, a + 1, a + 4])
            faces.append([a + 1, a + 5, a + 4])
    return GarmentMesh.from_faces(verts, np.array(faces))


def test_identity_deformation():
    mesh = small_grid_mesh()
    stress = compute_vertex_stress(mesh)
    cps = ControlPointSet(np.array([0, 5]), mesh.vertices[[0, 5]], np.zeros((2, 3)))
    cfg = TpsConfig(noise_scale=0.0, rng_seed=3)
    out = deform(mesh, cps, stress, cfg)
    assert np.abs(out.vertices - mesh.vertices).max() == 0.0


def test_deform_matches_rbf_sum_oracle():
    rng = np.random.default_rng(16)
    mesh = small_grid_mesh()
    stress = compute_vertex_stress(mesh)
    idx = np.array([0, 5, 10])
    offsets = rng.uniform(-0.01, 0.01, (3, 3))
    cps = ControlPointSet(idx, mesh.vertices[idx], offsets)
    cfg = TpsConfig(noise_scale=0.0, max_displacement=10.0, stress_gain=0.0, rng_seed=0)
    out = deform(mesh, cps, stress, cfg)
    w = solve_tps_weights(cps)
    # per-vertex direct evaluation
    for vi in range(mesh.n_vertices):
        expected = mesh.vertices[vi].copy()
        for k in range(3):
            expected += w[k] * np.linalg.norm(mesh.vertices[vi] - cps.positions[k])
        assert np.allclose(out.vertices[vi], expected, atol=1e-10)


def test_forced_clamp_hits_cap_exactly():
    mesh = GarmentMesh(
        np.array([[0.0, 0, 0], [1.0, 0, 0]]),
        np.array([[0, 1]]),
        np.array([1.0]),
        np.empty((0, 3)),
    )
    stress = compute_vertex_stress(mesh)  # sigma = [1, 1]
    cap = 0.05 * (1.0 + 0.5 * stress.sigma[0])
    offset = np.array([[0.0, 0.0, 2.0 * cap]])
    cps = ControlPointSet(np.array([0]), mesh.vertices[:1], offset)
    cfg = TpsConfig(noise_scale=0.0, max_displacement=0.05, stress_gain=0.5, rng_seed=0)
    out = deform(mesh, cps, stress, cfg)
    # vertex 0 sits on the control point: phi(0)=0 so only vertex 1 moves;
    # its raw displacement is w*phi(1) = 2*cap/1e-8 * 1 >> cap -> clamped
    disp = np.linalg.norm(out.vertices[1] - mesh.vertices[1])
    cap1 = 0.05 * (1.0 + 0.5 * stress.sigma[1])
    assert abs(disp - cap1) < 1e-9


def test_deform_determinism_and_cap_property():
    rng = np.random.default_rng(17)
    mesh = small_grid_mesh()
    stress = compute_vertex_stress(mesh)
    candidates = select_high_stress(stress, 0.0)
    cps = select_control_points(candidates, stress, mesh.vertices, 0.01, 0.3, 2)
    cps = sample_target_offsets(cps, 0.05, rng)
    cfg = TpsConfig(noise_scale=0.02, max_displacement=0.05, stress_gain=0.5, rng_seed=99)
    out1 = deform(mesh, cps, stress, cfg)
    out2 = deform(mesh, cps, stress, cfg)
    assert (out1.vertices == out2.vertices).all()  # bit-identical
    disp = np.linalg.norm(out1.vertices - mesh.vertices, axis=1)
    cap = cfg.max_displacement * (1.0 + cfg.stress_gain * stress.sigma)
    assert (disp <= cap + 1e-9).all()


def test_noise_statistics():
    # zero offsets, unit noise, huge cap: displacement IS the noise sample
    mesh = GarmentMesh(
        np.array([[0.0, 0, 0], [1.0, 0, 0]]),
        np.array([[0, 1]]),
        np.array([1.0]),
        np.empty((0, 3)),
    )
    stress = compute_vertex_stress(mesh)
    cps = ControlPointSet(np.empty(0, dtype=int), np.empty((0, 3)), np.empty((0, 3)))
    n = 10_000
    acc = np.zeros(3)
    for seed in range(n):
        cfg = TpsConfig(noise_scale=1.0, max_displacement=1e9, stress_gain=0.0, rng_seed=seed)
        out = deform(mesh, cps, stress, cfg)
        acc += out.vertices[0] - mesh.vertices[0]
    mean = acc / n
    assert np.abs(mean).max() < 5.0 / np.sqrt(n)


# -- OBJ ingestion ----------------------------------------------------------------


def test_obj_round_trip(tmp_path):
    mesh = small_grid_mesh()
    path = tmp_path / "grid.obj"
    geometry.save_obj(mesh, path)
    loaded = geometry.load_obj(path)
    assert np.allclose(loaded.vertices, mesh.vertices)
    assert (loaded.faces == mesh.faces).all()
    # adjacency derived from faces matches construction
    assert (loaded.edges == mesh.edges).all()


def test_obj_quad_triangulation(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    mesh = geometry.load_obj(path)
    assert mesh.faces.shape[0] == 2


def test_obj_malformed_vertex(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0\n")
    with pytest.raises(DomainError):
        geometry.load_obj(path)


def test_inverse_degree_weights_symmetric():
    mesh = small_grid_mesh()
    w = geometry.adjacency_weights_for(mesh.edges, mesh.n_vertices, "inverse_degree")
    assert (w > 0).all()
    # symmetric by construction: one weight per undirected edge


# -- person fixture ---------------------------------------------------------------


def test_person_model_valid():
    model = geometry.build_person(np.random.default_rng(0))
    model.body.validate()
    model.garment.validate()
    assert model.garment_is_patch.any()
    uv = model.garment_uv[model.garment_is_patch]
    assert np.isfinite(uv).all()
    assert uv.min() >= 0.0 and uv.max() <= 1.0
    # full body spans the configured person height
    ys = np.concatenate([model.body.vertices[:, 1], model.garment.vertices[:, 1]])
    assert abs((ys.max() - ys.min()) - geometry.PERSON_HEIGHT) < 1e-6


def test_garment_has_high_stress_candidates_at_default_threshold():
    model = geometry.build_person(np.random.default_rng(1))
    stress = compute_vertex_stress(model.garment)
    assert (stress.sigma > 0.8).sum() >= 8
