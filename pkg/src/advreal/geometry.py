"""Garment mesh representation and non-rigid deformation.

The deformation pipeline: per-vertex stress accumulated from weighted neighbor
distances -> thresholded high-stress candidates -> greedily isolated control
points -> radial-basis displacement field with a seeded stochastic term ->
stress-capped vertex displacements.

Also ships Wavefront OBJ ingestion and the procedural low-poly person
(body + garment) used as the rendering fixture.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, NumericalError

DEFAULT_RIDGE = 1e-8


@dataclass
class GarmentMesh:
    """Triangle mesh with symmetric per-edge adjacency weights.

    vertices: (V,3) float; edges: (E,2) int vertex pairs; adjacency_weights:
    (E,) nonnegative float (one weight per undirected edge); faces: (F,3) int.
    """

    vertices: np.ndarray
    edges: np.ndarray
    adjacency_weights: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.adjacency_weights = np.asarray(self.adjacency_weights, dtype=np.float64).reshape(-1)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def validate(self) -> None:
        if self.n_vertices == 0:
            raise DomainError("empty mesh")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= self.n_vertices:
                raise DomainError("edge references an invalid vertex index")
            if (self.edges[:, 0] == self.edges[:, 1]).any():
                raise DomainError("degenerate edge (self loop)")
        if self.adjacency_weights.shape[0] != self.edges.shape[0]:
            raise DomainError("adjacency weight count does not match edge count")
        if (self.adjacency_weights < 0).any():
            raise DomainError("negative adjacency weight")
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
                raise DomainError("face references an invalid vertex index")
            a, b, c = self.faces[:, 0], self.faces[:, 1], self.faces[:, 2]
            if ((a == b) | (b == c) | (a == c)).any():
                raise DomainError("degenerate face (repeated vertex index)")

    @classmethod
    def from_faces(cls, vertices, faces, weight_mode: str = "unit") -> "GarmentMesh":
        """Build a mesh whose edges and weights are derived from the faces."""
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        edges = edges_from_faces(faces)
        weights = adjacency_weights_for(edges, vertices.shape[0], mode=weight_mode)
        mesh = cls(vertices, edges, weights, faces)
        mesh.validate()
        return mesh


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def adjacency_weights_for(edges: np.ndarray, n_vertices: int, mode: str = "unit") -> np.ndarray:
    """'unit' gives w_ij = 1; 'inverse_degree' gives w_ij = 2/(deg_i + deg_j),
    which stays symmetric."""
    if mode == "unit":
        return np.ones(edges.shape[0], dtype=np.float64)
    if mode == "inverse_degree":
        deg = np.zeros(n_vertices, dtype=np.float64)
        np.add.at(deg, edges.ravel(), 1.0)
        return 2.0 / (deg[edges[:, 0]] + deg[edges[:, 1]])
    raise DomainError(f"unknown adjacency weight mode {mode!r}")


@dataclass
class StressField:
    """Per-vertex nonnegative stress, index-aligned with a mesh."""

    sigma: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)

    def validate(self, mesh: GarmentMesh | None = None) -> None:
        if (self.sigma < 0).any():
            raise DomainError("negative stress value")
        if mesh is not None and self.sigma.shape[0] != mesh.n_vertices:
            raise DomainError("stress length does not match vertex count")


@dataclass
class ControlPointSet:
    """Deformation anchors selected from high-stress vertices.

    `warning` is set when the input candidate list was empty or was exhausted
    before the configured lower bound on the count could be met.
    """

    indices: np.ndarray
    positions: np.ndarray
    target_offsets: np.ndarray
    n_min: int = 0
    warning: bool = False

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.target_offsets = np.asarray(self.target_offsets, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return int(self.indices.shape[0])


@dataclass
class TpsConfig:
    """Deformation configuration.

    kernel: 'linear' (phi(r) = r) or 'gaussian' (phi(r) = exp(-(r/scale)^2)).
    noise_scale / noise_covariance drive the seeded stochastic term; the raw
    displacement of vertex i is rescaled so its norm never exceeds
    max_displacement * (1 + stress_gain * sigma_i).
    """

    kernel: str = "linear"
    noise_scale: float = 0.01
    noise_covariance: np.ndarray = field(default_factory=lambda: np.eye(3))
    max_displacement: float = 0.03
    stress_gain: float = 0.5
    rng_seed: int = 0
    kernel_scale: float = 1.0
    ridge: float = DEFAULT_RIDGE

    def __post_init__(self):
        self.noise_covariance = np.asarray(self.noise_covariance, dtype=np.float64).reshape(3, 3)
        if self.noise_scale < 0:
            raise DomainError("noise_scale must be >= 0")
        if self.max_displacement <= 0:
            raise DomainError("max_displacement must be > 0")
        if self.stress_gain < 0:
            raise DomainError("stress_gain must be >= 0")
        if not np.allclose(self.noise_covariance, self.noise_covariance.T, atol=1e-12):
            raise DomainError("noise_covariance must be symmetric")
        if np.linalg.eigvalsh(self.noise_covariance).min() < -1e-12:
            raise DomainError("noise_covariance must be positive semi-definite")


def compute_vertex_stress(mesh: GarmentMesh) -> StressField:
    """sigma_i = sum over neighbors j of w_ij * ||v_j - v_i||."""
    mesh.validate()
    sigma = np.zeros(mesh.n_vertices, dtype=np.float64)
    if mesh.edges.size:
        i, j = mesh.edges[:, 0], mesh.edges[:, 1]
        d = np.linalg.norm(mesh.vertices[j] - mesh.vertices[i], axis=1)
        wd = mesh.adjacency_weights * d
        np.add.at(sigma, i, wd)
        np.add.at(sigma, j, wd)
    return StressField(sigma)


def select_high_stress(stress: StressField, sigma_thres: float) -> np.ndarray:
    """Vertices with sigma strictly above the threshold, ordered by descending
    stress; ties broken by ascending vertex index."""
    if sigma_thres < 0:
        raise DomainError("sigma_thres must be >= 0")
    sigma = stress.sigma
    idx = np.nonzero(sigma > sigma_thres)[0]
    if idx.size == 0:
        return idx
    order = np.lexsort((idx, -sigma[idx]))
    return idx[order]


def select_control_points(
    candidates: np.ndarray,
    stress: StressField,
    positions: np.ndarray,
    gamma: float,
    rho: float,
    n_min: int,
) -> ControlPointSet:
    """Greedy scan of the stress-ordered candidates; a candidate is accepted
    when it keeps distance >= gamma / sigma(candidate) from every point
    accepted so far. Stops at max(n_min, floor(rho * |candidates|)) points."""
    if gamma <= 0:
        raise DomainError("gamma must be > 0")
    if not 0 < rho <= 1:
        raise DomainError("rho must be in (0, 1]")
    if n_min < 0:
        raise DomainError("n_min must be >= 0")
    candidates = np.asarray(candidates, dtype=np.int64).reshape(-1)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if candidates.size == 0:
        return ControlPointSet(
            indices=np.empty(0, dtype=np.int64),
            positions=np.empty((0, 3)),
            target_offsets=np.empty((0, 3)),
            n_min=n_min,
            warning=True,
        )
    target = max(n_min, int(np.floor(rho * candidates.size)))
    accepted: list[int] = []
    for vi in candidates:
        if len(accepted) >= target:
            break
        p = positions[vi]
        s = stress.sigma[vi]
        radius = gamma / s if s > 0 else np.inf
        ok = True
        for vj in accepted:
            if np.linalg.norm(p - positions[vj]) < radius:
                ok = False
                break
        if ok:
            accepted.append(int(vi))
    indices = np.asarray(accepted, dtype=np.int64)
    return ControlPointSet(
        indices=indices,
        positions=positions[indices],
        target_offsets=np.zeros((indices.size, 3)),
        n_min=n_min,
        warning=indices.size < target,
    )


def sample_target_offsets(
    control: ControlPointSet, delta_max: float, rng: np.random.Generator
) -> ControlPointSet:
    """Random unit directions with magnitudes ~ U(0, delta_max)."""
    k = len(control)
    if k == 0:
        return control
    direction = rng.standard_normal((k, 3))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    magnitude = rng.uniform(0.0, delta_max, size=(k, 1))
    return replace(control, target_offsets=direction / norms * magnitude)


def _phi(r: np.ndarray, kernel: str, scale: float) -> np.ndarray:
    if kernel == "linear":
        return r
    if kernel == "gaussian":
        return np.exp(-((r / scale) ** 2))
    raise DomainError(f"unknown kernel {kernel!r}")


def solve_tps_weights(
    control: ControlPointSet,
    kernel: str = "linear",
    ridge: float = DEFAULT_RIDGE,
    kernel_scale: float = 1.0,
) -> np.ndarray:
    """Solve (Phi + ridge*I) w = target_offsets for the radial-basis weights."""
    k = len(control)
    if k == 0:
        raise DomainError("cannot solve weights for an empty control set")
    diff = control.positions[:, None, :] - control.positions[None, :, :]
    phi = _phi(np.linalg.norm(diff, axis=2), kernel, kernel_scale)
    a = phi + ridge * np.eye(k)
    try:
        w = np.linalg.solve(a, control.target_offsets)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"singular kernel matrix (cond ~ {np.linalg.cond(phi):.3e})"
        ) from exc
    residual = np.abs(a @ w - control.target_offsets).max(initial=0.0)
    if not np.isfinite(w).all() or residual > 1e-8 * max(1.0, np.abs(control.target_offsets).max(initial=0.0)):
        raise NumericalError(
            f"kernel system ill-conditioned: residual {residual:.3e}, "
            f"cond ~ {np.linalg.cond(a):.3e}"
        )
    return w


def tps_displacement(
    points: np.ndarray,
    control: ControlPointSet,
    weights: np.ndarray,
    kernel: str = "linear",
    kernel_scale: float = 1.0,
) -> np.ndarray:
    """Evaluate sum_k w_k * phi(||p - c_k||) at each query point."""
    if len(control) == 0:
        return np.zeros_like(np.asarray(points, dtype=np.float64))
    diff = np.asarray(points, dtype=np.float64)[:, None, :] - control.positions[None, :, :]
    phi = _phi(np.linalg.norm(diff, axis=2), kernel, kernel_scale)
    return phi @ weights


def deform(
    mesh: GarmentMesh,
    control: ControlPointSet,
    stress: StressField,
    cfg: TpsConfig,
) -> GarmentMesh:
    """Displace every vertex by the radial-basis field plus seeded Gaussian
    noise, then rescale each raw displacement to respect the stress cap.

    Topology (edges, faces, weights) is carried over unchanged.
    """
    mesh.validate()
    stress.validate(mesh)
    verts = mesh.vertices
    if len(control) > 0:
        weights = solve_tps_weights(control, cfg.kernel, cfg.ridge, cfg.kernel_scale)
        disp = tps_displacement(verts, control, weights, cfg.kernel, cfg.kernel_scale)
    else:
        disp = np.zeros_like(verts)
    if cfg.noise_scale > 0:
        rng = np.random.default_rng(cfg.rng_seed)
        z = rng.standard_normal(verts.shape)
        disp = disp + cfg.noise_scale * z @ _covariance_factor(cfg.noise_covariance).T
    cap = cfg.max_displacement * (1.0 + cfg.stress_gain * stress.sigma)
    norms = np.linalg.norm(disp, axis=1)
    scale = np.ones_like(norms)
    moving = norms > 0
    scale[moving] = np.minimum(1.0, cap[moving] / norms[moving])
    return GarmentMesh(
        vertices=verts + scale[:, None] * disp,
        edges=mesh.edges,
        adjacency_weights=mesh.adjacency_weights,
        faces=mesh.faces,
    )


def _covariance_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix L with L @ L.T = cov, tolerant of semi-definite inputs."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None)))


# ---------------------------------------------------------------------------
# Wavefront OBJ ingestion
# ---------------------------------------------------------------------------


def load_obj(path, weight_mode: str = "unit") -> GarmentMesh:
    """Read v/f records; faces with more than 3 vertices are fan-triangulated.
    Adjacency is derived from the faces."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise DomainError(f"{path}:{lineno}: malformed vertex record")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    i = int(head)
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise DomainError(f"{path}:{lineno}: face with fewer than 3 vertices")
                for t in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[t], idx[t + 1]])
    if not verts:
        raise DomainError("empty mesh")
    return GarmentMesh.from_faces(np.asarray(verts), np.asarray(faces), weight_mode)


def save_obj(mesh: GarmentMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------------------
# Procedural person fixture
# ---------------------------------------------------------------------------

PERSON_HEIGHT = 1.75  # model units (meters)


def _box_grid(bounds, subdiv):
    """Subdivided axis-aligned box; vertices welded across face seams.

    bounds: ((x0,x1),(y0,y1),(z0,z1)); subdiv: segment counts per axis.
    """
    (x0, x1), (y0, y1), (z0, z1) = bounds
    nx, ny, nz = subdiv
    key_to_index: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []

    def vid(p):
        key = (round(p[0] * 1e6), round(p[1] * 1e6), round(p[2] * 1e6))
        if key not in key_to_index:
            key_to_index[key] = len(verts)
            verts.append(p)
        return key_to_index[key]

    def lerp(a, b, t, n):
        return a + (b - a) * (t / n)

    # (fixed axis, fixed value, u axis, v axis, u segs, v segs, flip winding)
    sides = [
        (2, z0, 0, 1, nx, ny, True),
        (2, z1, 0, 1, nx, ny, False),
        (0, x0, 2, 1, nz, ny, False),
        (0, x1, 2, 1, nz, ny, True),
        (1, y0, 0, 2, nx, nz, False),
        (1, y1, 0, 2, nx, nz, True),
    ]
    lo = (x0, y0, z0)
    hi = (x1, y1, z1)
    for axis, value, ua, va, nu, nv, flip in sides:
        for iu in range(nu):
            for iv in range(nv):
                corner = []
                for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    p = [0.0, 0.0, 0.0]
                    p[axis] = value
                    p[ua] = lerp(lo[ua], hi[ua], iu + du, nu)
                    p[va] = lerp(lo[va], hi[va], iv + dv, nv)
                    corner.append(vid(tuple(p)))
                a, b, c, d = corner
                if flip:
                    faces.append((a, c, b))
                    faces.append((a, d, c))
                else:
                    faces.append((a, b, c))
                    faces.append((a, c, d))
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def _merge(parts):
    verts = []
    faces = []
    offset = 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + offset)
        offset += v.shape[0]
    return np.concatenate(verts), np.concatenate(faces)


@dataclass
class PersonModel:
    """Render-ready person: a rigid body mesh plus the deformable garment.

    garment_uv maps each garment face corner into patch texture coordinates
    (NaN on faces that do not carry the patch); garment_is_patch marks the
    front-panel faces; albedo arrays are per-face RGB.
    """

    body: GarmentMesh
    garment: GarmentMesh
    garment_uv: np.ndarray
    garment_is_patch: np.ndarray
    body_albedo: np.ndarray
    garment_albedo: np.ndarray
    height: float = PERSON_HEIGHT


_GARMENT_X = (-0.21, 0.21)
_GARMENT_Y = (0.76, 1.50)
_GARMENT_Z = (-0.125, 0.125)


def build_garment() -> GarmentMesh:
    """Shirt shell: subdivided torso box plus two sleeves."""
    torso = _box_grid((_GARMENT_X, _GARMENT_Y, _GARMENT_Z), (4, 5, 2))
    sleeve_l = _box_grid(((0.19, 0.34), (1.12, 1.48), (-0.065, 0.065)), (2, 3, 1))
    sleeve_r = _box_grid(((-0.34, -0.19), (1.12, 1.48), (-0.065, 0.065)), (2, 3, 1))
    verts, faces = _merge([torso, sleeve_l, sleeve_r])
    return GarmentMesh.from_faces(verts, faces)


def garment_patch_uv(garment: GarmentMesh) -> tuple[np.ndarray, np.ndarray]:
    """Patch UVs for the front panel (faces lying on the -z garment plane).

    Returns (uv (F,3,2) with NaN off-panel, is_patch (F,) bool). u runs left to
    right across the chest, v runs top to bottom, each spanning [0,1].
    """
    x0, x1 = _GARMENT_X
    y0, y1 = _GARMENT_Y
    z_front = _GARMENT_Z[0]
    fv = garment.vertices[garment.faces]  # (F,3,3)
    is_patch = (np.abs(fv[:, :, 2] - z_front) < 1e-9).all(axis=1)
    uv = np.full((garment.faces.shape[0], 3, 2), np.nan)
    u = (fv[:, :, 0] - x0) / (x1 - x0)
    v = (y1 - fv[:, :, 1]) / (y1 - y0)
    uv[is_patch, :, 0] = u[is_patch]
    uv[is_patch, :, 1] = v[is_patch]
    return uv, is_patch


_SKIN_TONES = np.array(
    [[0.87, 0.72, 0.60], [0.76, 0.57, 0.42], [0.55, 0.38, 0.26], [0.94, 0.80, 0.69]]
)


def build_person(rng: np.random.Generator | None = None) -> PersonModel:
    """Assemble the low-poly person; colors are drawn from rng when given."""
    rng = rng if rng is not None else np.random.default_rng(0)
    head = _box_grid(((-0.09, 0.09), (1.50, 1.75), (-0.09, 0.09)), (1, 1, 1))
    torso = _box_grid(((-0.18, 0.18), (0.78, 1.50), (-0.10, 0.10)), (2, 3, 1))
    arm_l = _box_grid(((0.20, 0.30), (0.85, 1.46), (-0.05, 0.05)), (1, 3, 1))
    arm_r = _box_grid(((-0.30, -0.20), (0.85, 1.46), (-0.05, 0.05)), (1, 3, 1))
    leg_l = _box_grid(((0.03, 0.16), (0.0, 0.80), (-0.08, 0.08)), (1, 3, 1))
    leg_r = _box_grid(((-0.16, -0.03), (0.0, 0.80), (-0.08, 0.08)), (1, 3, 1))

    skin = _SKIN_TONES[rng.integers(0, len(_SKIN_TONES))]
    pants = rng.uniform(0.05, 0.55, size=3)
    shirt = rng.uniform(0.10, 0.90, size=3)

    parts = [head, torso, arm_l, arm_r, leg_l, leg_r]
    part_colors = [skin, skin, skin, skin, pants, pants]
    verts, faces = _merge(parts)
    body = GarmentMesh.from_faces(verts, faces)
    body_albedo = np.concatenate(
        [np.tile(col, (f.shape[0], 1)) for (_, f), col in zip(parts, part_colors)]
    )

    garment = build_garment()
    uv, is_patch = garment_patch_uv(garment)
    garment_albedo = np.tile(shirt, (garment.faces.shape[0], 1))
    return PersonModel(
        body=body,
        garment=garment,
        garment_uv=uv,
        garment_is_patch=is_patch,
        body_albedo=body_albedo,
        garment_albedo=garment_albedo,
    )


def deform_garment(
    model: PersonModel,
    sigma_thres: float,
    gamma: float,
    rho: float,
    n_min: int,
    cfg: TpsConfig,
    rng: np.random.Generator,
) -> GarmentMesh:
    """Full deformation pass over the model's garment with sampled offsets."""
    stress = compute_vertex_stress(model.garment)
    candidates = select_high_stress(stress, sigma_thres)
    control = select_control_points(
        candidates, stress, model.garment.vertices, gamma, rho, n_min
    )
    control = sample_target_offsets(control, cfg.max_displacement, rng)
    return deform(model.garment, control, stress, cfg)
