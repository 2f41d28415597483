"""Toy person detector with hand-rolled forward/backward passes.

A small single-stage grid scorer: five stride-2 convolutions take the
416x416x3 input down to a 13x13 grid interleaved with two residual blocks;
a 1x1 head emits (confidence logit, x/y offsets, w/h log-scales) per cell
against a single person-sized anchor. Gradients are propagated manually,
which is what lets the shakedrop regularizer rescale the forward residual
branch and its backward flow with independently drawn coefficients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DomainError, NumericalError
from .scene import BoundingBox

PERSON_LABEL = 1
INPUT_SIZE = 416
GRID = 13
CELL = INPUT_SIZE // GRID
ANCHOR = (112.0, 280.0)  # (w, h) pixels
LEAK = 0.1
NMS_IOU = 0.45
CONF_FLOOR = 0.01
T_CLIP = 3.0  # bound on w/h log-scales during decoding

# (name, in_ch, out_ch, kernel, stride, pad); residual blocks carry two 3x3
# convolutions at the same width.
_CONVS = [
    ("c0", 3, 8, 3, 2, 1),
    ("c1", 8, 16, 3, 2, 1),
    ("c2", 16, 16, 3, 2, 1),
    ("c3", 16, 32, 3, 2, 1),
    ("r1", 32, 32, 3, 1, 1),
    ("c4", 32, 32, 3, 2, 1),
    ("r2", 32, 32, 3, 1, 1),
    ("head", 32, 5, 1, 1, 0),
]
_RESIDUAL = {"r1", "r2"}


@dataclass
class Detection:
    box: BoundingBox
    confidence: float
    label: int = PERSON_LABEL


@dataclass
class ShakedropCfg:
    """Bernoulli/uniform fusion coefficients applied to residual branches."""

    p_s: float = 0.9
    k: float = 0.5
    enabled: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_s <= 1.0:
            raise DomainError("p_s must lie in [0, 1]")
        if not 0.0 <= self.k < 1.0:
            raise DomainError("k must lie in [0, 1)")


def _fusion_coeff(gamma: int, omega: float) -> float:
    # gamma + omega - gamma*omega; gamma is Bernoulli so this selects exactly
    # 1.0 or omega, keeping the forced-identity cases bit-exact
    return 1.0 if gamma == 1 else omega


@dataclass
class ShakedropDraw:
    gamma1: int
    gamma2: int
    omega: float

    @property
    def forward_coeff(self) -> float:
        return _fusion_coeff(self.gamma1, self.omega)

    @property
    def backward_coeff(self) -> float:
        return _fusion_coeff(self.gamma2, self.omega)


IDENTITY_DRAW = ShakedropDraw(gamma1=1, gamma2=1, omega=1.0)


def shakedrop_draw(cfg: ShakedropCfg, rng: np.random.Generator) -> ShakedropDraw:
    """Draw gamma1, gamma2 ~ Bernoulli(p_s) independently and a shared
    omega ~ U(1-k, 1+k)."""
    if not cfg.enabled:
        return IDENTITY_DRAW
    gamma1 = 1 if rng.random() < cfg.p_s else 0
    gamma2 = 1 if rng.random() < cfg.p_s else 0
    omega = rng.uniform(1.0 - cfg.k, 1.0 + cfg.k)
    return ShakedropDraw(gamma1=gamma1, gamma2=gamma2, omega=omega)


def shakedrop_forward(x_in, h_fn, cfg: ShakedropCfg, rng=None, draw: ShakedropDraw | None = None):
    """x_in + (gamma1 + omega - gamma1*omega) * H(x_in)."""
    if draw is None:
        draw = shakedrop_draw(cfg, rng)
    return x_in + draw.forward_coeff * h_fn(x_in)


def shakedrop_backward(g_out, dh_fn, cfg: ShakedropCfg, rng=None, draw: ShakedropDraw | None = None):
    """g_out + (gamma2 + omega - gamma2*omega) * VJP_H(g_out)."""
    if draw is None:
        draw = shakedrop_draw(cfg, rng)
    return g_out + draw.backward_coeff * dh_fn(g_out)


def _leaky(z):
    return np.where(z > 0, z, LEAK * z)


def _leaky_grad(z):
    return np.where(z > 0, 1.0, LEAK)


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class ToyDetector:
    """Deterministic grid scorer over 416x416 RGB inputs in [0, 1]."""

    input_size = INPUT_SIZE

    def __init__(self, weights: dict[str, np.ndarray]):
        self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}

    # -- construction -------------------------------------------------------

    @classmethod
    def random_init(cls, seed: int = 0) -> "ToyDetector":
        rng = np.random.default_rng(seed)
        weights = {}
        for name, ic, oc, k, _s, _p in _CONVS:
            layers = ("a", "b") if name in _RESIDUAL else ("",)
            for suffix in layers:
                key = f"{name}.{suffix}" if suffix else name
                fan_in = ic * k * k
                weights[f"{key}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(oc, ic, k, k))
                weights[f"{key}.b"] = np.zeros(oc)
        # bias the confidence logit low so an untrained net stays quiet
        weights["head.b"] = np.array([-4.0, 0.0, 0.0, 0.0, 0.0])
        return cls(weights)

    @classmethod
    def load(cls, path) -> "ToyDetector":
        return cls(load_weights(path))

    def save(self, path) -> None:
        save_weights(self.weights, path)

    # -- forward / backward -------------------------------------------------

    def _check_input(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (INPUT_SIZE, INPUT_SIZE, 3):
            raise DomainError(
                f"detector expects {INPUT_SIZE}x{INPUT_SIZE}x3 input, got {image.shape}"
            )
        return image

    def forward_grid(
        self,
        image: np.ndarray,
        shakedrop: ShakedropCfg | None = None,
        rng: np.random.Generator | None = None,
    ):
        """Run the network; returns the (5, 13, 13) grid and a cache for the
        backward pass. Shakedrop draws happen once per residual block, in
        layer order, from `rng`."""
        image = self._check_input(image)
        x = np.ascontiguousarray(image.transpose(2, 0, 1))
        cache: dict[str, object] = {"input_shape": x.shape}
        sd = shakedrop if shakedrop is not None else ShakedropCfg(enabled=False)
        for name, ic, oc, k, s, p in _CONVS:
            if name in _RESIDUAL:
                draw = shakedrop_draw(sd, rng) if sd.enabled else IDENTITY_DRAW
                za = kernels.conv2d_forward(x, self.weights[f"{name}.a.w"], self.weights[f"{name}.a.b"], s, p)
                a = _leaky(za)
                h = kernels.conv2d_forward(a, self.weights[f"{name}.b.w"], self.weights[f"{name}.b.b"], s, p)
                cache[f"{name}.x"] = x
                cache[f"{name}.za"] = za
                cache[f"{name}.a"] = a
                cache[f"{name}.draw"] = draw
                x = x + draw.forward_coeff * h
            else:
                cache[f"{name}.x"] = x
                z = kernels.conv2d_forward(x, self.weights[f"{name}.w"], self.weights[f"{name}.b"], s, p)
                if name == "head":
                    x = z
                else:
                    cache[f"{name}.z"] = z
                    x = _leaky(z)
        return x, cache

    def backward_grid(
        self,
        cache: dict,
        g_grid: np.ndarray,
        need_input_grad: bool = True,
        need_weight_grads: bool = False,
    ):
        """Backpropagate a gradient on the output grid. Returns
        (g_input (H,W,3) or None, weight gradient dict or None)."""
        wgrads: dict[str, np.ndarray] | None = {} if need_weight_grads else None
        g = np.asarray(g_grid, dtype=np.float64)
        for name, ic, oc, k, s, p in reversed(_CONVS):
            if name in _RESIDUAL:
                draw: ShakedropDraw = cache[f"{name}.draw"]
                coeff = draw.backward_coeff
                g_h = coeff * g
                a = cache[f"{name}.a"]
                if need_weight_grads:
                    gw, gb = kernels.conv2d_backward_weights(g_h, a, k, k, s, p)
                    wgrads[f"{name}.b.w"] = gw
                    wgrads[f"{name}.b.b"] = gb
                g_a = kernels.conv2d_backward_input(g_h, self.weights[f"{name}.b.w"], a.shape, s, p)
                g_za = g_a * _leaky_grad(cache[f"{name}.za"])
                x_in = cache[f"{name}.x"]
                if need_weight_grads:
                    gw, gb = kernels.conv2d_backward_weights(g_za, x_in, k, k, s, p)
                    wgrads[f"{name}.a.w"] = gw
                    wgrads[f"{name}.a.b"] = gb
                g = g + kernels.conv2d_backward_input(g_za, self.weights[f"{name}.a.w"], x_in.shape, s, p)
            else:
                if name != "head":
                    g = g * _leaky_grad(cache[f"{name}.z"])
                x_in = cache[f"{name}.x"]
                if need_weight_grads:
                    gw, gb = kernels.conv2d_backward_weights(g, x_in, k, k, s, p)
                    wgrads[f"{name}.w"] = gw
                    wgrads[f"{name}.b"] = gb
                if name == "c0" and not need_input_grad:
                    g = None
                else:
                    g = kernels.conv2d_backward_input(g, self.weights[f"{name}.w"], x_in.shape, s, p)
        g_input = None
        if need_input_grad:
            g_input = g.transpose(1, 2, 0)
        return g_input, wgrads

    # -- decoding -----------------------------------------------------------

    def decode(self, grid: np.ndarray):
        """Grid -> per-cell (confidence, xyxy box). Returns (conf (169,),
        boxes (169,4)) in image pixels."""
        t_conf = grid[0].ravel()
        tx = grid[1].ravel()
        ty = grid[2].ravel()
        tw = np.clip(grid[3].ravel(), -T_CLIP, T_CLIP)
        th = np.clip(grid[4].ravel(), -T_CLIP, T_CLIP)
        jj, ii = np.meshgrid(np.arange(GRID), np.arange(GRID))  # ii = row, jj = col
        cx = (jj.ravel() + _sigmoid(tx)) * CELL
        cy = (ii.ravel() + _sigmoid(ty)) * CELL
        w = ANCHOR[0] * np.exp(tw)
        h = ANCHOR[1] * np.exp(th)
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        return _sigmoid(t_conf), boxes

    def detect(
        self,
        image: np.ndarray,
        shakedrop: ShakedropCfg | None = None,
        rng: np.random.Generator | None = None,
        nms: bool = True,
        conf_floor: float = CONF_FLOOR,
    ) -> list[Detection]:
        grid, _ = self.forward_grid(image, shakedrop, rng)
        conf, boxes = self.decode(grid)
        keep = conf >= conf_floor
        conf = conf[keep]
        boxes = boxes[keep]
        if nms and conf.size:
            sel = nms_indices(conf, boxes, NMS_IOU)
            conf = conf[sel]
            boxes = boxes[sel]
        detections = []
        for c, (x0, y0, x1, y1) in zip(conf, boxes):
            x0 = max(0.0, min(float(x0), INPUT_SIZE - 1.0))
            y0 = max(0.0, min(float(y0), INPUT_SIZE - 1.0))
            x1 = max(0.0, min(float(x1), float(INPUT_SIZE)))
            y1 = max(0.0, min(float(y1), float(INPUT_SIZE)))
            if x1 - x0 < 1.0 or y1 - y0 < 1.0:
                continue
            detections.append(Detection(BoundingBox(x0, y0, x1, y1), float(c), PERSON_LABEL))
        return detections


def _box_iou_xyxy(a: np.ndarray, b: np.ndarray) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def nms_indices(conf: np.ndarray, boxes: np.ndarray, iou_thres: float = NMS_IOU) -> np.ndarray:
    """Greedy non-maximum suppression; ties broken by ascending index."""
    order = np.lexsort((np.arange(conf.size), -conf))
    keep: list[int] = []
    suppressed = np.zeros(conf.size, dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        for j in order:
            if j == i or suppressed[j]:
                continue
            if _box_iou_xyxy(boxes[i], boxes[j]) > iou_thres:
                suppressed[j] = True
    return np.asarray(keep, dtype=np.int64)


def input_gradient(
    model: ToyDetector,
    image: np.ndarray,
    loss_fn,
    shakedrop: ShakedropCfg | None = None,
    rng: np.random.Generator | None = None,
):
    """d(loss)/d(image) for a loss over decoded detections.

    loss_fn(conf (169,), boxes (169,4)) must return (value, d(loss)/d(conf));
    box coordinates act as gates only, so no gradient flows through them.
    """
    grid, cache = model.forward_grid(image, shakedrop, rng)
    conf, boxes = model.decode(grid)
    value, g_conf = loss_fn(conf, boxes)
    g_grid = np.zeros_like(grid)
    g_grid[0] = (np.asarray(g_conf, dtype=np.float64) * conf * (1.0 - conf)).reshape(GRID, GRID)
    g_image, _ = model.backward_grid(cache, g_grid, need_input_grad=True)
    if not np.isfinite(g_image).all():
        raise NumericalError("non-finite input gradient")
    return value, g_image


# ---------------------------------------------------------------------------
# Weight fixture format: little-endian f4 arrays with shape headers
# ---------------------------------------------------------------------------

_MAGIC = b"ADVW"
_VERSION = 1


def save_weights(weights: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(weights)))
        for name in sorted(weights):
            arr = np.ascontiguousarray(weights[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    weights: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DomainError(f"{path}: not a detector weight file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise DomainError(f"{path}: unsupported weight file version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            weights[name] = data.astype(np.float64)
    return weights
