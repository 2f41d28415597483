"""Detection-quality and attack-success metrics.

An attack on one sample counts as successful when no emitted detection passes
all three gates against the ground truth: IoU >= iou_thres, confidence >=
conf_thres, person class. Corpus precision/recall use greedy one-to-one
matching by descending confidence.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .detect import PERSON_LABEL, Detection
from .errors import DomainError
from .scene import BoundingBox


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _check_thres(value: float, name: str) -> None:
    if not 0.0 < value < 1.0:
        raise DomainError(f"{name} must lie in (0, 1)")


def attack_success(
    detections: list[Detection],
    gt_box: BoundingBox,
    iou_thres: float = 0.5,
    conf_thres: float = 0.5,
) -> bool:
    """True iff no detection simultaneously clears the IoU, confidence and
    person-class predicates against the ground-truth box."""
    _check_thres(iou_thres, "iou_thres")
    _check_thres(conf_thres, "conf_thres")
    for det in detections:
        if (
            det.label == PERSON_LABEL
            and det.confidence >= conf_thres
            and iou(det.box, gt_box) >= iou_thres
        ):
            return False
    return True


@dataclass
class EvalReport:
    asr: float
    precision: float
    recall: float
    f1: float
    avg_confidence: float
    counts: tuple[int, int, int, int, int]  # (tp, fp, fn, successes, total)
    thresholds: tuple[float, float]  # (iou_thres, conf_thres)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "asr": self.asr,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "avg_confidence": self.avg_confidence,
            "counts": {
                "tp": self.counts[0],
                "fp": self.counts[1],
                "fn": self.counts[2],
                "successes": self.counts[3],
                "total": self.counts[4],
            },
            "thresholds": {"iou": self.thresholds[0], "conf": self.thresholds[1]},
            "flags": sorted(self.flags),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    CSV_FIELDS = ("iou_thres", "conf_thres", "asr", "precision", "recall", "f1",
                  "avg_confidence", "tp", "fp", "fn", "successes", "total", "flags")

    def csv_row(self) -> list:
        return [
            self.thresholds[0], self.thresholds[1], self.asr, self.precision,
            self.recall, self.f1, self.avg_confidence,
            *self.counts, ";".join(sorted(self.flags)),
        ]


def evaluate_detections(
    per_sample: list[tuple[list[Detection], list[BoundingBox]]],
    iou_thres: float = 0.5,
    conf_thres: float = 0.5,
) -> EvalReport:
    """Score cached (detections, ground-truth boxes) pairs at one threshold
    setting. A sample counts as an attack success when every one of its
    ground-truth boxes is unprotected by a qualifying detection."""
    _check_thres(iou_thres, "iou_thres")
    _check_thres(conf_thres, "conf_thres")
    if not per_sample:
        raise DomainError("empty corpus")
    tp = fp = fn = 0
    successes = 0
    conf_sum = 0.0
    conf_count = 0
    flags: set[str] = set()
    for detections, gt_boxes in per_sample:
        for det in detections:
            conf_sum += det.confidence
            conf_count += 1
        sample_success = all(
            attack_success(detections, gt, iou_thres, conf_thres) for gt in gt_boxes
        ) if gt_boxes else True
        successes += int(sample_success)
        strong = [
            d for d in detections
            if d.label == PERSON_LABEL and d.confidence >= conf_thres
        ]
        strong.sort(key=lambda d: -d.confidence)
        matched = [False] * len(gt_boxes)
        for det in strong:
            best_j = -1
            best_iou = iou_thres
            for j, gt in enumerate(gt_boxes):
                if matched[j]:
                    continue
                v = iou(det.box, gt)
                if v >= best_iou:
                    best_iou = v
                    best_j = j
            if best_j >= 0:
                matched[best_j] = True
                tp += 1
            else:
                fp += 1
        fn += matched.count(False)
    total = len(per_sample)
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        flags.add("precision_zero_division")
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        flags.add("recall_zero_division")
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        flags.add("f1_zero_division")
    if conf_count > 0:
        avg_conf = conf_sum / conf_count
    else:
        avg_conf = 0.0
        flags.add("no_detections")
    return EvalReport(
        asr=successes / total,
        precision=precision,
        recall=recall,
        f1=f1,
        avg_confidence=avg_conf,
        counts=(tp, fp, fn, successes, total),
        thresholds=(iou_thres, conf_thres),
        flags=sorted(flags),
    )


def evaluate_corpus(samples, detector, iou_thres: float = 0.5, conf_thres: float = 0.5) -> EvalReport:
    """Run the detector over (image, gt_boxes) samples and score the result.

    `detector` is either a callable image -> detections or an object with a
    .detect(image) method.
    """
    detect_fn = detector.detect if hasattr(detector, "detect") else detector
    per_sample = [(detect_fn(image), list(gts)) for image, gts in samples]
    if not per_sample:
        raise DomainError("empty corpus")
    return evaluate_detections(per_sample, iou_thres, conf_thres)


def sweep(samples, detector, iou_grid, conf_grid) -> list[EvalReport]:
    """One EvalReport per (iou, conf) grid cell; detections run once per
    sample and are re-scored at every threshold pair."""
    iou_grid = list(iou_grid)
    conf_grid = list(conf_grid)
    if not iou_grid or not conf_grid:
        raise DomainError("threshold grids must be nonempty")
    for v in iou_grid + conf_grid:
        _check_thres(v, "threshold")
    detect_fn = detector.detect if hasattr(detector, "detect") else detector
    per_sample = [(detect_fn(image), list(gts)) for image, gts in samples]
    if not per_sample:
        raise DomainError("empty corpus")
    return [
        evaluate_detections(per_sample, it, ct)
        for it in iou_grid
        for ct in conf_grid
    ]


def sweep_to_csv(reports: list[EvalReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EvalReport.CSV_FIELDS)
        for report in reports:
            writer.writerow(report.csv_row())


OCCLUSION_FRACTION = 1.0 / 9.0
OCCLUSION_GRAY = 0.5


def occlude_patch_center(texels: np.ndarray, fraction: float = OCCLUSION_FRACTION,
                         gray: float = OCCLUSION_GRAY):
    """Overwrite a centered square covering `fraction` of the patch area with
    gray. Returns (occluded texels, live mask) where live marks texels that
    still influence the output."""
    h, w = texels.shape[0], texels.shape[1]
    side_h = int(round(np.sqrt(fraction) * h))
    side_w = int(round(np.sqrt(fraction) * w))
    y0 = (h - side_h) // 2
    x0 = (w - side_w) // 2
    out = np.array(texels, dtype=np.float64, copy=True)
    out[y0 : y0 + side_h, x0 : x0 + side_w] = gray
    live = np.ones((h, w), dtype=bool)
    live[y0 : y0 + side_h, x0 : x0 + side_w] = False
    return out, live


def occlusion_protocol(
    patch,
    scenes,
    detector,
    config=None,
    iou_thres: float = 0.5,
    conf_thres: float = 0.5,
) -> EvalReport:
    """Evaluate the corpus with the center-occluded patch substituted through
    the standard composited-render pipeline. A 300x300 patch gets exactly the
    100x100 gray square; other sizes get a warning and the same 1/9 area."""
    from . import attack  # local import; attack builds the eval pipeline
    from . import harness

    texels = patch.texels if hasattr(patch, "texels") else np.asarray(patch)
    if texels.shape[0] != 300 or texels.shape[1] != 300:
        warnings.warn(
            f"occlusion protocol expects a 300x300 patch, got "
            f"{texels.shape[0]}x{texels.shape[1]}; applying a scaled 1/9-area square",
            stacklevel=2,
        )
    occluded, _ = occlude_patch_center(texels)
    cfg = config if config is not None else harness.RunConfig()
    samples = attack.build_eval_samples(occluded, scenes, cfg)
    return evaluate_corpus(samples, detector, iou_thres, conf_thres)
