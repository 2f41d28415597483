"""Adversarial patch state, transform pipelines, losses, and the joint
2D/3D optimization loop.

The 2D branch pastes the transformed patch at the center of a person box in a
corpus image; the 3D branch renders a deformed-garment person wearing the
patch into a background at a perspective-consistent box, photometrically
aligned by the relighting optimizer. Both branches expose the sparse
pixel-to-texel jacobian, so the patch gradient is assembled by backpropagating
the detector's input gradient through the recorded sampling operations.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry, metrics, render, scene
from .detect import GRID, Detection, PERSON_LABEL, ShakedropCfg, ToyDetector, input_gradient
from .errors import AdvRealError, DomainError, NumericalError
from .render import TexelRecords
from .scene import BoundingBox, Camera, RelightParams, RenderParams

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Patch:
    """Optimized texture plus optimizer state.

    texels stay clamped to [0, 1]; `provenance` records the config hash the
    patch was produced under.
    """

    texels: np.ndarray
    iteration: int = 0
    rng_seed: int = 0
    provenance: str = ""
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None

    def __post_init__(self):
        self.texels = np.asarray(self.texels, dtype=np.float64)
        if self.texels.ndim != 3 or self.texels.shape[2] != 3:
            raise DomainError("patch texels must be HxWx3")
        if self.texels.min() < 0.0 or self.texels.max() > 1.0:
            raise DomainError("patch texels must lie in [0, 1]")

    @classmethod
    def random(cls, size: int = 300, rng_seed: int = 0, provenance: str = "") -> "Patch":
        rng = np.random.default_rng(rng_seed)
        return cls(rng.uniform(0.0, 1.0, size=(size, size, 3)), 0, rng_seed, provenance)

    @classmethod
    def uniform(cls, value: float, size: int = 300, provenance: str = "") -> "Patch":
        return cls(np.full((size, size, 3), float(value)), 0, 0, provenance)


@dataclass
class LossWeights:
    w_det2d: float = 1.0
    w_det3d: float = 1.0
    w_tv: float = 2.5

    def __post_init__(self):
        if min(self.w_det2d, self.w_det3d, self.w_tv) < 0:
            raise DomainError("loss weights must be nonnegative")
        if self.w_det2d == self.w_det3d == self.w_tv == 0:
            raise DomainError("at least one loss weight must be positive")


@dataclass
class Transform2D:
    rotation: float = 0.0
    scale: float = 1.0
    offset: tuple[float, float] = (0.0, 0.0)  # fractions of box width/height
    occlusion: float | None = None
    noise: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise DomainError("scale must be > 0")
        if self.occlusion is not None and not 0.0 <= self.occlusion < 1.0:
            raise DomainError("occlusion fraction must lie in [0, 1)")


def sample_transform2d(rng: np.random.Generator, cfg) -> Transform2D:
    occl = cfg.occlusion_fraction if rng.random() < cfg.occlusion_prob else None
    return Transform2D(
        rotation=np.deg2rad(rng.uniform(-cfg.rot_deg, cfg.rot_deg)),
        scale=rng.uniform(cfg.scale_lo, cfg.scale_hi),
        offset=(rng.uniform(-cfg.offset_frac, cfg.offset_frac),
                rng.uniform(-cfg.offset_frac, cfg.offset_frac)),
        occlusion=occl,
        noise=cfg.noise_amp,
    )


@dataclass
class BranchSample:
    """One evaluated attack branch: the composited image, the box it must
    protect, and everything needed to push gradients back onto the patch."""

    image: np.ndarray
    gt_box: BoundingBox
    records: TexelRecords | None = None
    pixel_chain: np.ndarray | None = None  # d(image)/d(render), per pixel/channel
    live_mask: np.ndarray | None = None
    detections: list[Detection] | None = None


def apply_2d(
    texels: np.ndarray,
    image: np.ndarray,
    gt_box: BoundingBox,
    t: Transform2D,
    rng: np.random.Generator | None = None,
    rel_height: float = 0.3,
    with_records: bool = False,
) -> BranchSample:
    """Rotate/scale/offset the patch and composite it at the box center.

    The patch is scaled so its height covers rel_height * t.scale of the box
    height. Occlusion replaces a centered square of the texture with gray
    before pasting; additive noise perturbs the pasted pixels only.
    """
    image = np.asarray(image, dtype=np.float64)
    img_h, img_w = image.shape[0], image.shape[1]
    if not gt_box.inside(img_h, img_w):
        raise DomainError("ground-truth box extends outside the image")
    th, tw = texels.shape[0], texels.shape[1]
    live_mask = None
    tex = texels
    if t.occlusion:
        tex, live_mask = metrics.occlude_patch_center(texels, t.occlusion)

    s_img = rel_height * t.scale * gt_box.height / th  # image pixels per texel
    cx, cy = gt_box.center
    cx += t.offset[0] * gt_box.width
    cy += t.offset[1] * gt_box.height
    c, s = np.cos(t.rotation), np.sin(t.rotation)
    # forward: (y_img, x_img) = R @ (ty - cty, tx - ctx) * s_img + (cy, cx)
    # kernel wants the inverse map from pixel centers to texel coordinates
    rot_inv = np.array([[c, s], [-s, c]]) / s_img
    cty, ctx = (th - 1) / 2.0, (tw - 1) / 2.0
    off = np.array([cty, ctx]) - rot_inv @ np.array([cy, cx])

    half_diag = 0.5 * s_img * np.hypot(th, tw)
    y0 = int(np.floor(cy - half_diag))
    y1 = int(np.ceil(cy + half_diag)) + 1
    x0 = int(np.floor(cx - half_diag))
    x1 = int(np.ceil(cx + half_diag)) + 1
    if y0 < 0 or x0 < 0 or y1 > img_h or x1 > img_w:
        warnings.warn("scaled patch exceeds the image; paste clipped", stacklevel=2)
    y0, x0 = max(y0, 0), max(x0, 0)
    y1, x1 = min(y1, img_h), min(x1, img_w)

    out, recs = render.kernels.paste_affine(image, tex, rot_inv, off, y0, y1, x0, x1)
    rec_y, rec_x, rec_idx, rec_w = recs
    if t.noise > 0 and rng is not None and rec_y.size:
        noise = rng.uniform(-t.noise, t.noise, size=(rec_y.size, 3))
        out[rec_y, rec_x] = np.clip(out[rec_y, rec_x] + noise, 0.0, 1.0)
    records = None
    if with_records:
        records = TexelRecords(
            pix_y=rec_y, pix_x=rec_x, tex_idx=rec_idx, tex_w=rec_w,
            scale=np.ones(rec_y.size), tex_shape=(th, tw),
        )
    return BranchSample(image=out, gt_box=gt_box, records=records, live_mask=live_mask)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def detection_loss(detections: list[Detection], gt_box: BoundingBox, tau: float = 0.5) -> float:
    """Highest confidence among person detections overlapping the ground
    truth at IoU >= tau; 0 when no candidate qualifies."""
    if not 0.0 < tau < 1.0:
        raise DomainError("tau must lie in (0, 1)")
    best = 0.0
    for det in detections:
        if det.label == PERSON_LABEL and metrics.iou(det.box, gt_box) >= tau:
            best = max(best, det.confidence)
    return best


def detection_loss_grid(conf: np.ndarray, boxes: np.ndarray, gt_box: BoundingBox, tau: float):
    """Grid-level twin of detection_loss returning the confidence-seed
    gradient used by the attack backward pass."""
    g = np.zeros_like(conf)
    ix = np.maximum(0.0, np.minimum(boxes[:, 2], gt_box.x_max) - np.maximum(boxes[:, 0], gt_box.x_min))
    iy = np.maximum(0.0, np.minimum(boxes[:, 3], gt_box.y_max) - np.maximum(boxes[:, 1], gt_box.y_min))
    inter = ix * iy
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = areas + gt_box.area - inter
    ious = np.where(union > 0, inter / union, 0.0)
    qualified = ious >= tau
    if not qualified.any():
        return 0.0, g
    masked = np.where(qualified, conf, -np.inf)
    i_star = int(np.argmax(masked))
    g[i_star] = 1.0
    return float(conf[i_star]), g


def tv_loss(patch) -> float:
    """Sum of absolute horizontal and vertical neighbor differences over all
    channels."""
    texels = patch.texels if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    if texels.ndim == 2:
        texels = texels[:, :, None]
    return float(
        np.abs(np.diff(texels, axis=0)).sum() + np.abs(np.diff(texels, axis=1)).sum()
    )


def tv_loss_grad(texels: np.ndarray):
    value = 0.0
    g = np.zeros_like(texels)
    dv = texels[1:] - texels[:-1]
    sv = np.sign(dv)
    value += np.abs(dv).sum()
    g[1:] += sv
    g[:-1] -= sv
    dh = texels[:, 1:] - texels[:, :-1]
    sh = np.sign(dh)
    value += np.abs(dh).sum()
    g[:, 1:] += sh
    g[:, :-1] -= sh
    return float(value), g


def total_loss(sample2d, sample3d, patch, weights: LossWeights, tau: float = 0.5):
    """Weighted sum of the two branch detection losses and the patch TV term.
    Both samples must have been evaluated with the current patch state."""
    l2 = detection_loss(sample2d.detections, sample2d.gt_box, tau)
    l3 = detection_loss(sample3d.detections, sample3d.gt_box, tau)
    ltv = tv_loss(patch)
    breakdown = {
        "det2d": weights.w_det2d * l2,
        "det3d": weights.w_det3d * l3,
        "tv": weights.w_tv * ltv,
    }
    return sum(breakdown.values()), breakdown


# ---------------------------------------------------------------------------
# Patch update
# ---------------------------------------------------------------------------


def patch_step(patch: Patch, gradient: np.ndarray, mode: str = "adaptive", step: float = 0.01) -> Patch:
    """Descend the loss: 'sign' applies -step * sign(grad) (with sign(0)=0),
    'adaptive' applies a first/second-moment update at rate `step`. Texels are
    clamped to [0, 1]; the input patch is left untouched on failure."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != patch.texels.shape:
        raise DomainError("gradient shape must match the patch texels")
    if not np.isfinite(gradient).all():
        raise NumericalError("non-finite patch gradient")
    if mode == "sign":
        new_tex = patch.texels - step * np.sign(gradient)
        m, v = patch.adam_m, patch.adam_v
    elif mode == "adaptive":
        m = patch.adam_m if patch.adam_m is not None else np.zeros_like(patch.texels)
        v = patch.adam_v if patch.adam_v is not None else np.zeros_like(patch.texels)
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * gradient
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * gradient * gradient
        t = patch.iteration + 1
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        new_tex = patch.texels - step * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    else:
        raise DomainError(f"unknown patch step mode {mode!r}")
    return replace(
        patch,
        texels=np.clip(new_tex, 0.0, 1.0),
        iteration=patch.iteration + 1,
        adam_m=m,
        adam_v=v,
    )


# ---------------------------------------------------------------------------
# 3D branch pipeline
# ---------------------------------------------------------------------------


@dataclass
class Scene3DContext:
    """Frozen placement for one 3D sample: everything except the patch."""

    model: geometry.PersonModel
    garment: geometry.GarmentMesh
    params: RenderParams
    box: BoundingBox
    background: np.ndarray
    relight: tuple[float, float, np.ndarray] | None = None


def prepare_3d_context(
    background: np.ndarray,
    avoid_boxes,
    cfg,
    rng_scene: np.random.Generator,
    rng_geom: np.random.Generator,
    slot: int = 0,
    forced_azimuth: float | None = None,
) -> Scene3DContext:
    """Sample a placement and a garment deformation for one 3D branch draw.

    slot cycles through the human / near / far boxes of the draw so batches
    cover the sampled distance range.
    """
    camera = Camera(cfg.camera.focal, cfg.camera.person_height, cfg.camera.image_size)
    draw = scene.timespace_sample(background, rng_scene, camera, avoid_boxes=tuple(avoid_boxes))
    box = (draw.b_human, draw.b_near, draw.b_far)[slot % 3]
    params = scene.derive_render_params(box, draw.v_orient, camera)
    if forced_azimuth is not None:
        params = replace(params, azimuth=forced_azimuth)
    model = geometry.build_person(rng_geom)
    tps = geometry.TpsConfig(
        kernel=cfg.geometry.kernel,
        kernel_scale=cfg.geometry.kernel_scale,
        noise_scale=cfg.geometry.noise_scale,
        max_displacement=cfg.geometry.max_displacement,
        stress_gain=cfg.geometry.stress_gain,
        rng_seed=int(rng_geom.integers(2**31)),
    )
    garment = geometry.deform_garment(
        model, cfg.geometry.sigma_thres, cfg.geometry.gamma, cfg.geometry.rho,
        cfg.geometry.n_min, tps, rng_geom,
    )
    return Scene3DContext(model=model, garment=garment, params=params, box=box,
                          background=background)


def realize_3d_branch(
    texels: np.ndarray,
    ctx: Scene3DContext,
    cfg,
    with_records: bool = False,
) -> BranchSample:
    """Render the patched person into the context placement, fit (or reuse)
    the relighting correction, and composite onto the background."""
    camera = Camera(cfg.camera.focal, cfg.camera.person_height, cfg.camera.image_size)
    out_size = ctx.background.shape[0]
    rr = render.rasterize(
        ctx.model, texels, ctx.params, out_size,
        camera=camera, garment=ctx.garment, box=ctx.box, with_records=with_records,
    )
    if ctx.relight is None:
        ds = max(1, int(cfg.relight.train_downsample))
        comp = scene.composite(rr.image, rr.mask, ctx.background)
        i_o = scene.crop(comp, ctx.box)[::ds, ::ds]
        i_r = scene.crop(ctx.background, ctx.box)[::ds, ::ds]
        rcfg = RelightParams(
            alpha_bounds=(cfg.relight.alpha_lo, cfg.relight.alpha_hi),
            beta_bounds=(cfg.relight.beta_lo, cfg.relight.beta_hi),
            reg_alpha=cfg.relight.reg_alpha,
            reg_beta=cfg.relight.reg_beta,
            reg_theta=cfg.relight.reg_theta,
            lr=cfg.relight.lr,
            iters=cfg.relight.train_iters,
        )
        fit = scene.relight_optimize(i_o, i_r, rcfg)
        ctx.relight = (fit.alpha, fit.beta, fit.theta)
    alpha, beta, theta = ctx.relight
    relit = scene.apply_relight(rr.image, alpha, beta, theta)
    in_range = ((relit > 0.0) & (relit < 1.0)).astype(np.float64)
    relit = np.clip(relit, 0.0, 1.0)
    image = scene.composite(relit, rr.mask, ctx.background)
    gt_box = render.mask_bbox(rr.mask)
    chain = None
    if with_records:
        chain = rr.mask[:, :, None] * in_range * (alpha + 2.0 * theta[:3][None, None, :] * rr.image)
    return BranchSample(image=image, gt_box=gt_box, records=rr.records, pixel_chain=chain)


def build_eval_samples(texels, scenes, cfg, forced_azimuth: float | None = None):
    """Deterministic patched eval set: one 3D composited sample per scene.

    `scenes` is a list of (background image, gt boxes to avoid) pairs; returns
    (image, [gt_box]) pairs consumable by metrics.evaluate_corpus.
    """
    texels = texels.texels if isinstance(texels, Patch) else np.asarray(texels, dtype=np.float64)
    samples = []
    for idx, (image, boxes) in enumerate(scenes):
        rng_scene = np.random.default_rng([cfg.seeds.scene, 7001, idx])
        rng_geom = np.random.default_rng([cfg.seeds.geometry, 7001, idx])
        ctx = prepare_3d_context(image, boxes, cfg, rng_scene, rng_geom, slot=0,
                                 forced_azimuth=forced_azimuth)
        branch = realize_3d_branch(texels, ctx, cfg)
        samples.append((branch.image, [branch.gt_box]))
    return samples


# ---------------------------------------------------------------------------
# Gradient assembly and training loop
# ---------------------------------------------------------------------------


def branch_loss_and_grad(
    detector: ToyDetector,
    branch: BranchSample,
    tau: float,
    tex_shape: tuple[int, int],
    shakedrop: ShakedropCfg | None = None,
    rng: np.random.Generator | None = None,
):
    """Detection loss of one branch plus its gradient w.r.t. the patch."""

    def loss_fn(conf, boxes):
        return detection_loss_grid(conf, boxes, branch.gt_box, tau)

    value, g_img = input_gradient(detector, branch.image, loss_fn, shakedrop, rng)
    if branch.pixel_chain is not None:
        g_img = g_img * branch.pixel_chain
    g_tex = np.zeros((tex_shape[0], tex_shape[1], 3))
    if branch.records is not None:
        branch.records.accumulate(g_img, g_tex, branch.live_mask)
    return value, g_tex


class TrainError(AdvRealError):
    """Raised when a training round fails; carries the round index and the
    path of the serialized resume state."""

    def __init__(self, round_index: int, state_path, cause: BaseException):
        super().__init__(f"training aborted at round {round_index}: {cause}")
        self.round_index = round_index
        self.state_path = state_path


TRACE_FIELDS = ("round", "L_det2d", "L_det3d", "L_tv", "total")


@dataclass
class TrainResult:
    patch: Patch
    trace: list[dict]


def train(
    patch: Patch,
    scenes: list[tuple[np.ndarray, list[BoundingBox]]],
    detector: ToyDetector,
    cfg,
    rounds: int | None = None,
    state_dir=None,
    progress=None,
) -> TrainResult:
    """Joint 2D/3D patch optimization.

    Per round: a 2D batch of patched corpus persons and a 3D batch of rendered
    patched persons are pushed through the detector with shakedrop, per-sample
    gradients are averaged per branch, the TV gradient is added, and one patch
    step is applied. Returns the final patch and the per-round loss trace.
    """
    if not scenes:
        raise DomainError("training requires at least one scene")
    n_rounds = cfg.attack.rounds if rounds is None else rounds
    weights = LossWeights(cfg.attack.w_det2d, cfg.attack.w_det3d, cfg.attack.w_tv)
    sd_cfg = ShakedropCfg(cfg.shakedrop.p_s, cfg.shakedrop.k, cfg.shakedrop.enabled)
    trace: list[dict] = []
    tex_shape = patch.texels.shape[:2]
    person_scenes = [s for s in scenes if s[1]]
    if not person_scenes:
        raise DomainError("training requires scenes with ground-truth person boxes")

    for rnd in range(n_rounds):
        try:
            rng_t = np.random.default_rng([cfg.seeds.transforms, rnd])
            rng_s = np.random.default_rng([cfg.seeds.scene, rnd])
            rng_g = np.random.default_rng([cfg.seeds.geometry, rnd])
            rng_sd = np.random.default_rng([cfg.seeds.shakedrop, rnd])

            g_total = np.zeros_like(patch.texels)
            loss2d = 0.0
            for _ in range(cfg.attack.batch_2d):
                image, boxes = person_scenes[int(rng_t.integers(len(person_scenes)))]
                gt = boxes[int(rng_t.integers(len(boxes)))]
                t2d = sample_transform2d(rng_t, cfg.attack)
                branch = apply_2d(
                    patch.texels, image, gt, t2d, rng_t,
                    rel_height=cfg.attack.patch_rel_height, with_records=True,
                )
                val, g = branch_loss_and_grad(detector, branch, cfg.attack.tau,
                                              tex_shape, sd_cfg, rng_sd)
                loss2d += val
                g_total += (weights.w_det2d / cfg.attack.batch_2d) * g
            loss2d /= cfg.attack.batch_2d

            loss3d = 0.0
            for i in range(cfg.attack.batch_3d):
                image, boxes = scenes[int(rng_s.integers(len(scenes)))]
                ctx = prepare_3d_context(image, boxes, cfg, rng_s, rng_g, slot=i)
                branch = realize_3d_branch(patch.texels, ctx, cfg, with_records=True)
                val, g = branch_loss_and_grad(detector, branch, cfg.attack.tau,
                                              tex_shape, sd_cfg, rng_sd)
                loss3d += val
                g_total += (weights.w_det3d / cfg.attack.batch_3d) * g
            loss3d /= cfg.attack.batch_3d

            ltv, g_tv = tv_loss_grad(patch.texels)
            g_total += weights.w_tv * g_tv

            total = weights.w_det2d * loss2d + weights.w_det3d * loss3d + weights.w_tv * ltv
            trace.append({
                "round": rnd, "L_det2d": loss2d, "L_det3d": loss3d,
                "L_tv": ltv, "total": total,
            })
            patch = patch_step(patch, g_total, cfg.attack.mode, cfg.attack.lr)
            if progress is not None:
                progress(rnd, trace[-1])
        except Exception as exc:
            state_path = None
            if state_dir is not None:
                state_path = str(state_dir / "resume_state.npz")
                np.savez(
                    state_path,
                    texels=patch.texels,
                    iteration=patch.iteration,
                    round=rnd,
                    adam_m=patch.adam_m if patch.adam_m is not None else np.zeros(0),
                    adam_v=patch.adam_v if patch.adam_v is not None else np.zeros(0),
                )
            raise TrainError(rnd, state_path, exc) from exc
    return TrainResult(patch=patch, trace=trace)


# ---------------------------------------------------------------------------
# Patch persistence
# ---------------------------------------------------------------------------


def save_patch(patch: Patch, out_dir, extra: dict | None = None) -> None:
    """patch.png (8-bit), patch_state.npz (full precision + optimizer state),
    patch.json sidecar."""
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    arr = (np.clip(patch.texels, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(out_dir / "patch.png")
    np.savez(
        out_dir / "patch_state.npz",
        texels=patch.texels,
        iteration=patch.iteration,
        adam_m=patch.adam_m if patch.adam_m is not None else np.zeros(0),
        adam_v=patch.adam_v if patch.adam_v is not None else np.zeros(0),
    )
    sidecar = {
        "size": list(patch.texels.shape),
        "iteration": patch.iteration,
        "rng_seed": patch.rng_seed,
        "provenance": patch.provenance,
    }
    if extra:
        sidecar.update(extra)
    with open(out_dir / "patch.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_patch(path) -> Patch:
    """Load texels from a .npz state file or an 8-bit PNG."""
    from PIL import Image

    path = str(path)
    if path.endswith(".npz"):
        data = np.load(path)
        m = data["adam_m"]
        v = data["adam_v"]
        return Patch(
            texels=data["texels"],
            iteration=int(data["iteration"]),
            adam_m=m if m.size else None,
            adam_v=v if v.size else None,
        )
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return Patch(texels=arr)
