"""Run configuration, synthetic corpus generation, and orchestration support.

The config is a nested dataclass tree that serializes to JSON; every field has
a default, values can be overridden from a config file and from ADVREAL_*
environment variables, and the canonical serialization is hashed so artifacts
can state exactly which configuration produced them.

The synthetic corpus replaces photographic datasets: procedurally textured
backgrounds with one rendered synthetic person each, ground-truth boxes from
the render silhouette, a train/test split, and a poor-lighting subset made by
scaling luminance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import detect, geometry, kernels, render, scene
from .errors import DomainError, ManifestError
from .scene import BoundingBox, Camera


@dataclass
class Seeds:
    geometry: int = 101
    scene: int = 202
    shakedrop: int = 303
    transforms: int = 404
    patch: int = 505
    corpus: int = 606
    fixture: int = 707


@dataclass
class CameraConfig:
    focal: float = 416.0
    person_height: float = 1.75
    image_size: int = 416


@dataclass
class GeometryConfig:
    sigma_thres: float = 0.8
    gamma: float = 0.01
    rho: float = 0.2
    n_min: int = 4
    kernel: str = "linear"
    kernel_scale: float = 1.0
    noise_scale: float = 0.01
    max_displacement: float = 0.03
    stress_gain: float = 0.5
    weight_mode: str = "unit"


@dataclass
class RelightConfig:
    lr: float = 0.05
    iters: int = 100
    train_iters: int = 20
    train_downsample: int = 2
    alpha_lo: float = 0.5
    alpha_hi: float = 1.5
    beta_lo: float = -0.3
    beta_hi: float = 0.3
    reg_alpha: float = 1e-3
    reg_beta: float = 1e-3
    reg_theta: float = 1e-3


@dataclass
class DetectorConfig:
    weights: str = ""  # empty -> bundled fixture
    nms_iou: float = 0.45
    conf_floor: float = 0.01


@dataclass
class ShakedropSettings:
    p_s: float = 0.9
    k: float = 0.5
    enabled: bool = True


@dataclass
class AttackSettings:
    patch_size: int = 300
    rounds: int = 800
    lr: float = 0.01
    mode: str = "adaptive"
    batch_2d: int = 8
    batch_3d: int = 8
    w_det2d: float = 1.0
    w_det3d: float = 1.0
    w_tv: float = 2.5
    tau: float = 0.5
    rot_deg: float = 20.0
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    offset_frac: float = 0.1
    occlusion_prob: float = 0.3
    occlusion_fraction: float = 1.0 / 9.0
    noise_amp: float = 0.02
    patch_rel_height: float = 0.3


@dataclass
class MetricsSettings:
    iou_thres: float = 0.5
    conf_thres: float = 0.5
    iou_grid: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    conf_grid: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])


@dataclass
class CorpusSettings:
    n_scenes: int = 562
    style: str = "mixed"  # gradient | noise | tiled | mixed
    adequate_fraction: float = 450.0 / 562.0
    train_fraction: float = 462.0 / 562.0
    light_lo: float = 0.35
    light_hi: float = 0.6
    path: str = "corpus"


@dataclass
class RunConfig:
    seeds: Seeds = field(default_factory=Seeds)
    camera: CameraConfig = field(default_factory=CameraConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    relight: RelightConfig = field(default_factory=RelightConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    shakedrop: ShakedropSettings = field(default_factory=ShakedropSettings)
    attack: AttackSettings = field(default_factory=AttackSettings)
    metrics: MetricsSettings = field(default_factory=MetricsSettings)
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def camera_model(self) -> Camera:
        return Camera(self.camera.focal, self.camera.person_height, self.camera.image_size)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, list):
        return [float(v) for v in value.split(",")]
    return value


def _apply_overrides(cfg: RunConfig, data: dict, origin: str) -> None:
    for section, fields in data.items():
        if not hasattr(cfg, section):
            raise DomainError(f"{origin}: unknown config section {section!r}")
        target = getattr(cfg, section)
        if not dataclasses.is_dataclass(target):
            setattr(cfg, section, fields)
            continue
        for name, value in fields.items():
            if not hasattr(target, name):
                raise DomainError(f"{origin}: unknown config field {section}.{name}")
            setattr(target, name, value)


def load_config(path=None, env: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- config file <- ADVREAL_SECTION_FIELD env vars <- overrides."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            _apply_overrides(cfg, json.load(fh), str(path))
    env = os.environ if env is None else env
    for key, value in env.items():
        if not key.startswith("ADVREAL_") or key == "ADVREAL_NUMBA":
            continue
        parts = key[len("ADVREAL_"):].lower()
        if parts == "output_dir":
            cfg.output_dir = value
            continue
        section, _, fname = parts.partition("_")
        if section not in _SECTIONS:
            continue
        target = getattr(cfg, section)
        while fname and not hasattr(target, fname):
            # field names may themselves contain underscores
            head, _, rest = fname.partition("_")
            if not rest:
                fname = ""
                break
            candidate = fname
            fname = None
            for f in dataclasses.fields(target):
                if f.name == candidate:
                    fname = candidate
                    break
            if fname is None:
                fname = candidate
                break
        if fname and hasattr(target, fname):
            setattr(target, fname, _coerce(value, getattr(target, fname)))
    if overrides:
        _apply_overrides(cfg, overrides, "overrides")
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json() + "\n")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SyntheticCorpusSpec:
    """What to generate: scene count, background style, the placement seed,
    and the luminance multiplier range for the poor-lighting subset."""

    n_scenes: int = 32
    style: str = "mixed"
    seed: int = 606
    light_range: tuple[float, float] = (0.35, 0.6)
    adequate_fraction: float = 450.0 / 562.0
    train_fraction: float = 462.0 / 562.0
    image_size: int = 416

    def __post_init__(self):
        if self.n_scenes < 1:
            raise DomainError("n_scenes must be >= 1")
        if min(self.light_range) <= 0:
            raise DomainError("lighting multipliers must be > 0")


_STYLES = ("gradient", "noise", "tiled")


def _smooth(img: np.ndarray, taps: int = 7) -> np.ndarray:
    k = scene.gaussian_window(taps, taps / 4.0)
    pad = taps // 2
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        padded = np.pad(img[:, :, c], pad, mode="edge")
        out[:, :, c] = kernels.blur_valid(padded, k)
    return out


def make_background(style: str, rng: np.random.Generator, size: int = 416) -> np.ndarray:
    """Procedural background in one of the three styles plus light clutter."""
    if style == "mixed":
        style = _STYLES[rng.integers(0, len(_STYLES))]
    if style == "gradient":
        c0 = rng.uniform(0.1, 0.9, size=3)
        c1 = rng.uniform(0.1, 0.9, size=3)
        angle = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:size, 0:size] / (size - 1)
        t = (np.cos(angle) * xs + np.sin(angle) * ys + 1.0) / 2.0
        img = c0[None, None, :] + (c1 - c0)[None, None, :] * t[:, :, None]
    elif style == "noise":
        coarse = rng.uniform(0.05, 0.95, size=(size // 16, size // 16, 3))
        img = np.kron(coarse, np.ones((16, 16, 1)))
        img = _smooth(img, 9)
    elif style == "tiled":
        tile = int(rng.integers(24, 72))
        palette = rng.uniform(0.1, 0.9, size=(4, 3))
        ys, xs = np.mgrid[0:size, 0:size]
        idx = ((ys // tile) + (xs // tile)) % palette.shape[0]
        img = palette[idx]
    else:
        raise DomainError(f"unknown background style {style!r}")
    # clutter rectangles give the detector hard negatives
    for _ in range(int(rng.integers(2, 7))):
        w = int(rng.integers(size // 12, size // 3))
        h = int(rng.integers(size // 12, size // 3))
        x0 = int(rng.integers(0, size - w))
        y0 = int(rng.integers(0, size - h))
        color = rng.uniform(0.05, 0.95, size=3)
        alpha = rng.uniform(0.4, 0.9)
        img[y0 : y0 + h, x0 : x0 + w] = (
            (1 - alpha) * img[y0 : y0 + h, x0 : x0 + w] + alpha * color
        )
    return np.clip(img, 0.0, 1.0)


def _render_scene(spec: SyntheticCorpusSpec, cfg: RunConfig, idx: int):
    """One corpus scene: background, composited person, silhouette gt box."""
    rng = np.random.default_rng([spec.seed, idx])
    camera = Camera(cfg.camera.focal, cfg.camera.person_height, spec.image_size)
    background = make_background(spec.style, rng, spec.image_size)
    model = geometry.build_person(rng)
    draw = scene.timespace_sample(background, rng, camera)
    params = scene.derive_render_params(draw.b_human, draw.v_orient, camera)
    tps = geometry.TpsConfig(
        kernel=cfg.geometry.kernel,
        kernel_scale=cfg.geometry.kernel_scale,
        noise_scale=cfg.geometry.noise_scale,
        max_displacement=cfg.geometry.max_displacement,
        stress_gain=cfg.geometry.stress_gain,
        rng_seed=int(rng.integers(2**31)),
    )
    garment = geometry.deform_garment(
        model, cfg.geometry.sigma_thres, cfg.geometry.gamma, cfg.geometry.rho,
        cfg.geometry.n_min, tps, rng,
    )
    rr = render.rasterize(model, None, params, spec.image_size, camera=camera,
                          garment=garment, box=draw.b_human)
    image = scene.composite(rr.image, rr.mask, background)
    gt = render.mask_bbox(rr.mask)
    return image, gt


def generate_corpus(spec: SyntheticCorpusSpec, out_dir, cfg: RunConfig | None = None) -> Path:
    """Write scene PNGs plus a JSON-lines manifest; deterministic per spec.

    Scenes are assigned to the adequate/poor lighting subsets and to the
    train/test split by index, so the same spec always produces byte-identical
    output. Returns the manifest path.
    """
    cfg = cfg if cfg is not None else RunConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = spec.n_scenes
    n_adequate = int(round(spec.adequate_fraction * n))
    n_train = int(round(spec.train_fraction * n))
    order = np.random.default_rng([spec.seed, 77]).permutation(n)
    lighting = np.full(n, "adequate", dtype=object)
    lighting[order[n_adequate:]] = "poor"
    split = np.full(n, "train", dtype=object)
    split[order[::-1][: n - n_train]] = "test"

    from PIL import Image

    records = []
    for idx in range(n):
        image, gt = _render_scene(spec, cfg, idx)
        if lighting[idx] == "poor":
            mult = np.random.default_rng([spec.seed, idx, 5]).uniform(*spec.light_range)
            image = image * mult
        name = f"scene_{idx:04d}.png"
        arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(out_dir / name)
        records.append({
            "image": name,
            "boxes": [[int(gt.x_min), int(gt.y_min), int(gt.x_max), int(gt.y_max)]],
            "split": str(split[idx]),
            "lighting": str(lighting[idx]),
        })
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


@dataclass
class CorpusSample:
    image_path: Path
    boxes: list[BoundingBox]
    split: str
    lighting: str

    def load_image(self) -> np.ndarray:
        from PIL import Image

        return np.asarray(Image.open(self.image_path).convert("RGB"), dtype=np.float64) / 255.0


def ingest_corpus(path) -> list[CorpusSample]:
    """Read a manifest (file or directory containing manifest.jsonl) and
    validate every record; ordering follows the manifest."""
    path = Path(path)
    manifest = path / "manifest.jsonl" if path.is_dir() else path
    if not manifest.exists():
        raise ManifestError(f"manifest not found at {manifest}")
    base = manifest.parent
    samples: list[CorpusSample] = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"record {lineno}: invalid JSON ({exc})") from exc
            for key in ("image", "boxes", "split", "lighting"):
                if key not in rec:
                    raise ManifestError(f"record {lineno}: missing field {key!r}")
            img_path = base / rec["image"]
            if not img_path.exists():
                raise ManifestError(f"record {lineno}: missing image file {img_path}")
            from PIL import Image

            with Image.open(img_path) as im:
                w, h = im.size
            boxes = []
            for bi, b in enumerate(rec["boxes"]):
                if len(b) != 4:
                    raise ManifestError(f"record {lineno}: box {bi} malformed")
                try:
                    box = BoundingBox(*[float(v) for v in b])
                except DomainError as exc:
                    raise ManifestError(f"record {lineno}: box {bi} invalid ({exc})") from exc
                if not box.inside(h, w):
                    raise ManifestError(f"record {lineno}: box {bi} out of image bounds")
                boxes.append(box)
            samples.append(CorpusSample(img_path, boxes, rec["split"], rec["lighting"]))
    return samples


def corpus_scenes(samples: list[CorpusSample], split: str | None = None):
    """Materialize (image, boxes) pairs, optionally filtered by split."""
    out = []
    for s in samples:
        if split is not None and s.split != split:
            continue
        out.append((s.load_image(), s.boxes))
    return out


# ---------------------------------------------------------------------------
# Detector fixture training
# ---------------------------------------------------------------------------

FIXTURE_NAME = "toy_detector_weights.bin"


def default_weights_path() -> Path:
    return Path(__file__).parent / "fixtures" / FIXTURE_NAME


def load_detector(cfg: RunConfig) -> detect.ToyDetector:
    path = Path(cfg.detector.weights) if cfg.detector.weights else default_weights_path()
    if not path.exists():
        raise DomainError(
            f"detector weights not found at {path}; run `advreal train-detector-fixture`"
        )
    return detect.ToyDetector.load(path)


def _grid_targets(boxes: list[BoundingBox]):
    """Per-cell confidence targets and box regression targets."""
    conf_t = np.zeros((detect.GRID, detect.GRID))
    box_t = np.zeros((detect.GRID, detect.GRID, 4))
    for box in boxes:
        cx, cy = box.center
        j = min(int(cx // detect.CELL), detect.GRID - 1)
        i = min(int(cy // detect.CELL), detect.GRID - 1)
        conf_t[i, j] = 1.0
        fx = cx / detect.CELL - j
        fy = cy / detect.CELL - i
        box_t[i, j] = (
            fx, fy,
            np.log(max(box.width, 1.0) / detect.ANCHOR[0]),
            np.log(max(box.height, 1.0) / detect.ANCHOR[1]),
        )
    return conf_t, box_t


_W_OBJ = 5.0
_W_NOOBJ = 0.5
_W_BOX = 2.0


def _detection_loss_grads(grid: np.ndarray, conf_t: np.ndarray, box_t: np.ndarray):
    """BCE on the confidence logits plus L2 box regression on positive cells;
    returns (loss, d(loss)/d(grid))."""
    g = np.zeros_like(grid)
    sig = 1.0 / (1.0 + np.exp(-grid[0]))
    pos = conf_t > 0.5
    w = np.where(pos, _W_OBJ, _W_NOOBJ)
    eps = 1e-9
    bce = -(conf_t * np.log(sig + eps) + (1 - conf_t) * np.log(1 - sig + eps))
    loss = float((w * bce).sum())
    g[0] = w * (sig - conf_t)
    if pos.any():
        sx = 1.0 / (1.0 + np.exp(-grid[1]))
        sy = 1.0 / (1.0 + np.exp(-grid[2]))
        dx = sx - box_t[:, :, 0]
        dy = sy - box_t[:, :, 1]
        dw = grid[3] - box_t[:, :, 2]
        dh = grid[4] - box_t[:, :, 3]
        for dv, ch, slope in ((dx, 1, sx * (1 - sx)), (dy, 2, sy * (1 - sy)),
                              (dw, 3, None), (dh, 4, None)):
            loss += float(_W_BOX * (dv[pos] ** 2).sum())
            grad = 2.0 * _W_BOX * dv
            if slope is not None:
                grad = grad * slope
            g[ch][pos] = grad[pos]
    return loss, g


def _fixture_stream(samples: list[CorpusSample], cfg: RunConfig, rng: np.random.Generator):
    """Endless training items: corpus scenes, pure backgrounds, and pipeline
    composites wearing control patches (gray / white / noise) so the detector
    is robust to the evaluation distribution."""
    from . import attack

    scenes = corpus_scenes(samples)
    control = [
        np.full((64, 64, 3), 0.5),
        np.full((64, 64, 3), 1.0),
        np.random.default_rng(12).uniform(0, 1, (64, 64, 3)),
    ]
    while True:
        r = rng.random()
        if r < 0.55:
            image, boxes = scenes[int(rng.integers(len(scenes)))]
            yield image, boxes
        elif r < 0.75:
            bg = make_background("mixed", rng, cfg.camera.image_size)
            yield bg, []
        else:
            image, boxes = scenes[int(rng.integers(len(scenes)))]
            tex = control[int(rng.integers(len(control)))]
            try:
                ctx = attack.prepare_3d_context(image, boxes, cfg, rng, rng,
                                                slot=int(rng.integers(3)))
                branch = attack.realize_3d_branch(tex, ctx, cfg)
                yield branch.image, [branch.gt_box] + list(boxes)
            except DomainError:
                yield image, boxes


def _adam_update(weights, grads, state, lr, t):
    for name, g in grads.items():
        m, v = state.setdefault(name, (np.zeros_like(g), np.zeros_like(g)))
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        state[name] = (m, v)
        m_hat = m / (1 - 0.9**t)
        v_hat = v / (1 - 0.999**t)
        weights[name] -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def clean_recall(model: detect.ToyDetector, scenes, iou_thres=0.5, conf_thres=0.5) -> float:
    hits = 0
    total = 0
    from . import metrics as metrics_mod

    for image, boxes in scenes:
        dets = model.detect(image)
        for gt in boxes:
            total += 1
            if any(
                d.confidence >= conf_thres and metrics_mod.iou(d.box, gt) >= iou_thres
                for d in dets
            ):
                hits += 1
    return hits / total if total else 0.0


def train_detector_fixture(
    cfg: RunConfig,
    samples: list[CorpusSample],
    out_path,
    max_iters: int = 1200,
    batch: int = 8,
    lr: float = 1e-3,
    target_recall: float = 0.97,
    log=None,
) -> detect.ToyDetector:
    """Train the bundled detector on the synthetic corpus until it reaches the
    target clean recall (early stopped), then write the f32 weight fixture."""
    rng = np.random.default_rng(cfg.seeds.fixture)
    model = detect.ToyDetector.random_init(cfg.seeds.fixture)
    stream = _fixture_stream(samples, cfg, rng)
    state: dict = {}
    eval_scenes = corpus_scenes(samples)[: min(len(samples), 48)]
    t = 0
    for it in range(1, max_iters + 1):
        agg: dict[str, np.ndarray] = {}
        batch_loss = 0.0
        for _ in range(batch):
            image, boxes = next(stream)
            grid, cache = model.forward_grid(image)
            conf_t, box_t = _grid_targets(boxes)
            loss, g_grid = _detection_loss_grads(grid, conf_t, box_t)
            batch_loss += loss
            _, wgrads = model.backward_grid(cache, g_grid, need_input_grad=False,
                                            need_weight_grads=True)
            for name, g in wgrads.items():
                agg[name] = agg.get(name, 0.0) + g / batch
        t += 1
        _adam_update(model.weights, agg, state, lr, t)
        if it % 60 == 0 or it == max_iters:
            rec = clean_recall(model, eval_scenes)
            if log is not None:
                log(f"iter {it}: batch loss {batch_loss / batch:.3f}, clean recall {rec:.3f}")
            if rec >= target_recall and it >= 180:
                break
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(out_path)
    return model
