"""Scene placement and photometric matching.

Covers the perspective-consistent sampling of person boxes on a background,
recovery of render parameters from a box, mask compositing, SSIM, and the
gradient-based relighting optimizer that aligns a render to its background
slice.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DomainError, NumericalError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box, origin top-left, x_min < x_max, y_min < y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DomainError(f"invalid box {self.as_tuple()}")

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @property
    def area(self) -> float:
        return self.width * self.height

    def inside(self, height: int, width: int) -> bool:
        return 0 <= self.x_min and 0 <= self.y_min and self.x_max <= width and self.y_max <= height

    def slices(self):
        return (
            slice(int(round(self.y_min)), int(round(self.y_max))),
            slice(int(round(self.x_min)), int(round(self.x_max))),
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera over a flat ground plane."""

    focal: float = 416.0
    person_height: float = 1.75
    image_size: int = 416

    def box_height(self, distance: float) -> float:
        return self.focal * self.person_height / distance

    def distance_for_height(self, box_height: float) -> float:
        return self.focal * self.person_height / box_height


DISTANCE_RANGE = (1.0, 4.0)


@dataclass
class RenderParams:
    """Placement of the person model relative to the camera."""

    scale: float
    distance: float
    elevation: float
    azimuth: float
    orientation: np.ndarray

    def __post_init__(self):
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(2)
        if self.scale <= 0:
            raise DomainError("scale must be > 0")
        if not DISTANCE_RANGE[0] <= self.distance <= DISTANCE_RANGE[1]:
            raise DomainError(f"distance {self.distance} outside {DISTANCE_RANGE}")
        if not -np.pi <= self.azimuth < np.pi:
            raise DomainError("azimuth must lie in [-pi, pi)")


@dataclass
class SceneSample:
    """One composited training/eval instance."""

    background: np.ndarray
    gt_box: BoundingBox
    params: RenderParams
    mask: np.ndarray
    render: np.ndarray
    background_slice: np.ndarray

    def validate(self) -> None:
        if self.render.shape != self.background.shape:
            raise DomainError("render and background shapes differ")
        if self.mask.shape != self.background.shape[:2]:
            raise DomainError("mask shape does not match image")
        vals = np.unique(self.mask)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise DomainError("mask must be binary")
        ys, xs = np.nonzero(self.mask)
        if ys.size:
            if (
                ys.min() < np.floor(self.gt_box.y_min)
                or ys.max() >= np.ceil(self.gt_box.y_max)
                or xs.min() < np.floor(self.gt_box.x_min)
                or xs.max() >= np.ceil(self.gt_box.x_max)
            ):
                raise DomainError("mask support extends outside the ground-truth box")


@dataclass
class TimespaceDraw:
    b_human: BoundingBox
    b_near: BoundingBox
    b_far: BoundingBox
    v_orient: np.ndarray

    def __iter__(self):
        return iter((self.b_human, self.b_near, self.b_far, self.v_orient))


def _boxes_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _box_at(cx: float, cy: float, w: float, h: float) -> BoundingBox:
    x0 = round(cx - w / 2.0)
    y0 = round(cy - h / 2.0)
    return BoundingBox(x0, y0, x0 + round(w), y0 + round(h))


MIN_PERSON_HEIGHT = 32


def timespace_sample(
    background: np.ndarray,
    rng: np.random.Generator,
    camera: Camera = Camera(),
    v_orient: np.ndarray | None = None,
    avoid_boxes: tuple[BoundingBox, ...] = (),
    max_tries: int = 64,
) -> TimespaceDraw:
    """Draw a person box plus its nearer and farther companions.

    Heights follow the pinhole law (h proportional to 1/distance); the three
    boxes are spaced along the orientation vector and all land inside the
    image. Placement retries to keep IoU with `avoid_boxes` below 0.3.
    """
    img_h, img_w = background.shape[0], background.shape[1]
    if v_orient is not None:
        v_orient = np.asarray(v_orient, dtype=np.float64).reshape(2)
        norm = np.linalg.norm(v_orient)
        if norm == 0:
            raise DomainError("orientation vector must be nonzero")
        v_orient = v_orient / norm

    d_lo, d_hi = DISTANCE_RANGE
    h_hi = min(0.95 * img_h, camera.box_height(d_lo))
    h_lo = max(MIN_PERSON_HEIGHT, camera.box_height(d_hi))
    step_ratio = 1.18  # distance ratio between adjacent boxes
    if h_lo * step_ratio >= h_hi / step_ratio:
        raise DomainError(
            f"background {img_w}x{img_h} too small for a {MIN_PERSON_HEIGHT}px person box"
        )

    best = None
    best_overlap = np.inf
    for _ in range(max_tries):
        v = v_orient
        if v is None:
            angle = rng.uniform(0.0, 2.0 * np.pi)
            v = np.array([np.cos(angle), np.sin(angle)])
        d_human = rng.uniform(
            camera.distance_for_height(h_hi / step_ratio),
            camera.distance_for_height(h_lo * step_ratio),
        )
        aspect = 0.4 * rng.uniform(0.85, 1.15)  # width:height, human proportions
        heights = {
            "human": camera.box_height(d_human),
            "near": camera.box_height(d_human / step_ratio),
            "far": camera.box_height(d_human * step_ratio),
        }
        step = 0.55 * heights["human"]
        placed = None
        while step >= 1.0:
            lo_x, hi_x = 0.0, float(img_w)
            lo_y, hi_y = 0.0, float(img_h)
            for s, h in ((0.0, heights["human"]), (1.0, heights["near"]), (-1.0, heights["far"])):
                w = aspect * h
                lo_x = max(lo_x, w / 2.0 + 1 - s * step * v[0])
                hi_x = min(hi_x, img_w - w / 2.0 - 1 - s * step * v[0])
                lo_y = max(lo_y, h / 2.0 + 1 - s * step * v[1])
                hi_y = min(hi_y, img_h - h / 2.0 - 1 - s * step * v[1])
            if lo_x < hi_x and lo_y < hi_y:
                cx = rng.uniform(lo_x, hi_x)
                cy = rng.uniform(lo_y, hi_y)
                placed = (cx, cy, step)
                break
            step *= 0.7
        if placed is None:
            continue
        cx, cy, step = placed
        boxes = TimespaceDraw(
            b_human=_box_at(cx, cy, aspect * heights["human"], heights["human"]),
            b_near=_box_at(cx + step * v[0], cy + step * v[1], aspect * heights["near"], heights["near"]),
            b_far=_box_at(cx - step * v[0], cy - step * v[1], aspect * heights["far"], heights["far"]),
            v_orient=v,
        )
        if not all(b.inside(img_h, img_w) for b in (boxes.b_human, boxes.b_near, boxes.b_far)):
            continue
        overlap = max((_boxes_iou(boxes.b_human, a) for a in avoid_boxes), default=0.0)
        if overlap < 0.3:
            return boxes
        if overlap < best_overlap:
            best_overlap = overlap
            best = boxes
    if best is not None:
        return best
    raise DomainError("could not place person boxes inside the background")


def derive_render_params(
    box: BoundingBox, v_orient: np.ndarray, camera: Camera = Camera()
) -> RenderParams:
    """Invert the pinhole model: box height -> distance and scale; orientation
    -> azimuth; vertical position -> elevation under the flat-ground model."""
    if camera.focal <= 0:
        raise DomainError("camera focal length must be > 0")
    h_box = box.height
    if h_box <= 0:
        raise DomainError("zero-height box")
    v = np.asarray(v_orient, dtype=np.float64).reshape(2)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise DomainError("orientation vector must be nonzero")
    v = v / norm
    d = camera.distance_for_height(h_box)
    lo, hi = DISTANCE_RANGE
    if d < lo or d > hi:
        clamped = min(max(d, lo), hi)
        warnings.warn(
            f"derived distance {d:.3f} m outside [{lo}, {hi}]; clamped to {clamped:.3f}",
            stacklevel=2,
        )
        d = clamped
    azimuth = float(np.arctan2(-v[0], v[1]))
    if azimuth >= np.pi:
        azimuth -= 2.0 * np.pi
    cy = box.center[1]
    elevation = float(np.arctan2(cy - camera.image_size / 2.0, camera.focal))
    return RenderParams(
        scale=h_box / (camera.focal * camera.person_height),
        distance=d,
        elevation=elevation,
        azimuth=azimuth,
        orientation=v,
    )


def composite(render: np.ndarray, mask: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Per-pixel selection: mask * render + (1 - mask) * background."""
    render = np.asarray(render, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if render.shape != background.shape or mask.shape != render.shape[:2]:
        raise DomainError("composite inputs must share dimensions")
    m = mask[..., None] if render.ndim == 3 else mask
    return m * render + (1.0 - m) * background


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(t**2) / (2.0 * sigma**2))
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, gradient: bool = False):
    """Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
    stabilizers C1=(0.01)^2 and C2=(0.03)^2 on unit dynamic range, averaged
    over channels. With gradient=True also returns d(ssim)/da.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError("ssim inputs must share dimensions")
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
        b = b[..., None]
    h, w, nc = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DomainError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window")
    k = gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    total = 0.0
    grad = np.zeros_like(a) if gradient else None
    n_out = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1) * nc
    for c in range(nc):
        x = a[:, :, c]
        y = b[:, :, c]
        mu1 = kernels.blur_valid(x, k)
        mu2 = kernels.blur_valid(y, k)
        s11 = kernels.blur_valid(x * x, k) - mu1 * mu1
        s22 = kernels.blur_valid(y * y, k) - mu2 * mu2
        s12 = kernels.blur_valid(x * y, k) - mu1 * mu2
        a1 = 2.0 * mu1 * mu2 + c1
        a2 = 2.0 * s12 + c2
        b1 = mu1 * mu1 + mu2 * mu2 + c1
        b2 = s11 + s22 + c2
        s_map = (a1 * a2) / (b1 * b2)
        total += s_map.sum()
        if gradient:
            g_s = 1.0 / n_out
            g_a1 = g_s * a2 / (b1 * b2)
            g_a2 = g_s * a1 / (b1 * b2)
            g_b1 = -g_s * s_map / b1
            g_b2 = -g_s * s_map / b2
            g_mu1 = 2.0 * mu2 * g_a1 + 2.0 * mu1 * g_b1
            g_s11 = g_b2
            g_s12 = 2.0 * g_a2
            combined = g_mu1 - 2.0 * g_s11 * mu1 - g_s12 * mu2
            grad[:, :, c] = (
                kernels.blur_valid_adjoint(combined, k)
                + 2.0 * x * kernels.blur_valid_adjoint(g_s11, k)
                + y * kernels.blur_valid_adjoint(g_s12, k)
            )
    value = float(total / n_out)
    if not gradient:
        return value
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad


# ---------------------------------------------------------------------------
# Relighting
# ---------------------------------------------------------------------------


@dataclass
class RelightParams:
    """Contrast/brightness/bias correction state and optimizer settings.

    theta holds six per-channel coefficients: theta[:3] scale the squared
    image (nonlinear correction), theta[3:] are per-channel biases. The
    correction degrades to a scalar bias when theta[:3] = 0.
    """

    alpha: float = 1.0
    beta: float = 0.0
    theta: np.ndarray = field(default_factory=lambda: np.zeros(6))
    alpha_bounds: tuple[float, float] = (0.5, 1.5)
    beta_bounds: tuple[float, float] = (-0.3, 0.3)
    reg_alpha: float = 1e-3
    reg_beta: float = 1e-3
    reg_theta: float = 1e-3
    lr: float = 0.05
    iters: int = 100

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(6)
        if self.alpha_bounds[0] >= self.alpha_bounds[1]:
            raise DomainError("alpha bounds must satisfy lo < hi")
        if self.beta_bounds[0] >= self.beta_bounds[1]:
            raise DomainError("beta bounds must satisfy lo < hi")
        if self.iters < 1:
            raise DomainError("iters must be >= 1")


@dataclass
class RelightResult:
    alpha: float
    beta: float
    theta: np.ndarray
    image: np.ndarray
    loss_initial: float
    loss_final: float


def apply_relight(image: np.ndarray, alpha: float, beta: float, theta: np.ndarray) -> np.ndarray:
    """alpha * I + beta + theta_quad * I^2 + theta_bias, per channel."""
    theta = np.asarray(theta, dtype=np.float64).reshape(6)
    quad = theta[:3][None, None, :]
    bias = theta[3:][None, None, :]
    return alpha * image + beta + quad * image * image + bias


def relight_optimize(render: np.ndarray, real_slice: np.ndarray, cfg: RelightParams) -> RelightResult:
    """Adam descent on 1 - ssim(corrected render, real slice) plus quadratic
    penalties pulling (alpha, beta, theta) toward (1, 0, 0); alpha and beta are
    clipped into their bounds after every step. Returns the best iterate."""
    render = np.asarray(render, dtype=np.float64)
    real_slice = np.asarray(real_slice, dtype=np.float64)
    if render.shape != real_slice.shape:
        raise DomainError("render and real slice must share dimensions")
    if render.ndim != 3 or render.shape[2] != 3:
        raise DomainError("relighting expects HxWx3 images")

    params = np.concatenate([[cfg.alpha, cfg.beta], cfg.theta])
    m = np.zeros(8)
    v = np.zeros(8)
    b1, b2, eps = 0.9, 0.999, 1e-8
    render_sq = render * render

    def losses_and_grad(p):
        alpha, beta = p[0], p[1]
        theta = p[2:]
        img = apply_relight(render, alpha, beta, theta)
        sim, g_img = ssim(img, real_slice, gradient=True)
        g_img = -g_img  # minimizing 1 - ssim
        reg = (
            cfg.reg_alpha * (alpha - 1.0) ** 2
            + cfg.reg_beta * beta**2
            + cfg.reg_theta * float(theta @ theta)
        )
        loss = (1.0 - sim) + reg
        g = np.empty(8)
        g[0] = float((g_img * render).sum()) + 2.0 * cfg.reg_alpha * (alpha - 1.0)
        g[1] = float(g_img.sum()) + 2.0 * cfg.reg_beta * beta
        g[2:5] = (g_img * render_sq).sum(axis=(0, 1)) + 2.0 * cfg.reg_theta * theta[:3]
        g[5:8] = g_img.sum(axis=(0, 1)) + 2.0 * cfg.reg_theta * theta[3:]
        return loss, g

    best_params = params.copy()
    best_loss = np.inf
    loss_initial = None
    for t in range(1, cfg.iters + 1):
        loss, g = losses_and_grad(params)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite relighting loss at iteration {t}")
        if loss_initial is None:
            loss_initial = loss
        if loss < best_loss:
            best_loss = loss
            best_params = params.copy()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        params = params - cfg.lr * m_hat / (np.sqrt(v_hat) + eps)
        params[0] = min(max(params[0], cfg.alpha_bounds[0]), cfg.alpha_bounds[1])
        params[1] = min(max(params[1], cfg.beta_bounds[0]), cfg.beta_bounds[1])
    final_loss, _ = losses_and_grad(params)
    if np.isfinite(final_loss) and final_loss < best_loss:
        best_loss = final_loss
        best_params = params.copy()
    alpha, beta = float(best_params[0]), float(best_params[1])
    theta = best_params[2:].copy()
    image = np.clip(apply_relight(render, alpha, beta, theta), 0.0, 1.0)
    return RelightResult(
        alpha=alpha,
        beta=beta,
        theta=theta,
        image=image,
        loss_initial=float(loss_initial),
        loss_final=float(best_loss),
    )


# ---------------------------------------------------------------------------
# Sample export
# ---------------------------------------------------------------------------


def crop(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    ys, xs = box.slices()
    return image[ys, xs]


def save_scene_sample(sample: SceneSample, png_path, seed: int | None = None) -> None:
    """Composite PNG plus a JSON sidecar with the placement parameters."""
    from PIL import Image

    img = composite(sample.render, sample.mask, sample.background)
    arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(png_path)
    sidecar = {
        "box": [sample.gt_box.x_min, sample.gt_box.y_min, sample.gt_box.x_max, sample.gt_box.y_max],
        "params": {
            "scale": sample.params.scale,
            "distance": sample.params.distance,
            "elevation": sample.params.elevation,
            "azimuth": sample.params.azimuth,
            "orientation": sample.params.orientation.tolist(),
        },
        "seed": seed,
    }
    with open(str(png_path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
