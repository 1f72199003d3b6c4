"""Tile-reassembly evaluation: per-class IOU, per-image mIOU, test-set mmIOU.

The test protocol per image: break it into non-overlapping tiles, predict
each tile's mask, unite the predictions, then score the reassembled mask
against ground truth on the covered region (the residual border that does
not fit a whole tile is excluded rather than padded).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import MaskVolume, Volume, write_pgm
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

__all__ = [
    "worker_count",
    "predict_slice_mask",
    "iou_per_class",
    "miou_image",
    "mmiou",
    "confusion_matrix",
    "ImageResult",
    "SegmentationReport",
    "evaluate_testset",
    "report_to_json",
    "report_to_csv",
    "export_mask_pgm",
]


def worker_count() -> int:
    """Worker-thread cap: SEISTILE_THREADS, defaulting to machine parallelism."""
    env = os.environ.get("SEISTILE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"SEISTILE_THREADS={env!r} is not an integer") from None
        if n < 1:
            raise ConfigError("SEISTILE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def predict_slice_mask(model, image: np.ndarray, tile_h: int, tile_w: int,
                       batch_size: int = 16) -> np.ndarray:
    """Reassembled class mask for one slice, u8, covering
    floor(H/tile_h)*tile_h x floor(W/tile_w)*tile_w pixels.

    Ties in the per-pixel argmax go to the lowest class index; batch norm
    runs in inference mode.
    """
    h, w = image.shape
    if tile_h > h or tile_w > w:
        raise ConfigError(f"tile {tile_h}x{tile_w} larger than slice {h}x{w}")
    hc, wc = (h // tile_h) * tile_h, (w // tile_w) * tile_w
    origins = [(r, c) for r in range(0, hc, tile_h) for c in range(0, wc, tile_w)]
    tiles = np.stack([image[r : r + tile_h, c : c + tile_w] for r, c in origins])
    tiles = tiles[..., None].astype(model.dtype, copy=False)  # T x th x tw x 1

    out = np.zeros((hc, wc), dtype=np.uint8)
    for start in range(0, len(origins), batch_size):
        batch = tiles[start : start + batch_size]
        logits = model.forward(Tensor(batch), train=False).data
        classes = np.argmax(logits, axis=3).astype(np.uint8)
        for (r, c), tile_mask in zip(origins[start : start + batch_size], classes):
            out[r : r + tile_h, c : c + tile_w] = tile_mask
    return out


def iou_per_class(pred: np.ndarray, gt: np.ndarray, num_classes: int = 7) -> np.ndarray:
    """IOU_c = |pred==c and gt==c| / |pred==c or gt==c|; empty union scores 1.

    The vacuous 1.0 keeps all-class averaging well defined on images where a
    class is absent and correctly predicted absent.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} disagree")
    ious = np.empty(num_classes, dtype=np.float64)
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = np.logical_or(p, g).sum()
        ious[c] = 1.0 if union == 0 else np.logical_and(p, g).sum() / union
    return ious


def miou_image(ious) -> float:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ContractError("mIOU of an empty IOU vector")
    # fsum: correctly-rounded, so the mean is exactly permutation-invariant
    return math.fsum(ious) / ious.size


def mmiou(mious) -> float:
    mious = np.asarray(list(mious), dtype=np.float64)
    if mious.size == 0:
        raise ContractError("mmIOU of an empty image list")
    return math.fsum(mious) / mious.size


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int = 7) -> np.ndarray:
    """Pixel counts indexed [gt_class, pred_class]."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} disagree")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


@dataclass
class ImageResult:
    index: int
    ious: np.ndarray  # per-class, length num_classes
    miou: float


@dataclass
class SegmentationReport:
    images: list[ImageResult]
    mmiou: float
    per_class_mean: np.ndarray  # mean over images of per-image per-class IOU
    confusion: np.ndarray  # num_classes x num_classes, [gt, pred]
    coverage_h: int
    coverage_w: int
    num_classes: int = 7
    tile_h: int = 0
    tile_w: int = 0
    extra: dict = field(default_factory=dict)


def evaluate_testset(model, volume: Volume, masks: MaskVolume, test_indices,
                     tile_h: int, tile_w: int) -> SegmentationReport:
    """Run the reassembly protocol over the given slices.

    Per-image metrics are computed on the covered region only; images may be
    predicted in parallel but are always aggregated in ascending index order.
    """
    test_indices = sorted(int(i) for i in test_indices)
    if not test_indices:
        raise ContractError("empty test-slice list")
    for i in test_indices:
        if not 0 <= i < volume.num_slices:
            raise ConfigError(f"test slice {i} outside volume with {volume.num_slices} slices")
    num_classes = masks.num_classes

    def one(i: int):
        pred = predict_slice_mask(model, volume.slice(i), tile_h, tile_w)
        hc, wc = pred.shape
        gt = masks.slice(i)[:hc, :wc]
        ious = iou_per_class(pred, gt, num_classes)
        return ImageResult(index=i, ious=ious, miou=miou_image(ious)), confusion_matrix(pred, gt, num_classes)

    workers = min(worker_count(), len(test_indices))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, test_indices))
    else:
        results = [one(i) for i in test_indices]

    images = [r for r, _ in results]
    confusion = np.sum([c for _, c in results], axis=0)
    per_class = np.stack([r.ious for r in images]).mean(axis=0)
    h, w = volume.data.shape[1:]
    return SegmentationReport(
        images=images,
        mmiou=mmiou([r.miou for r in images]),
        per_class_mean=per_class,
        confusion=confusion,
        coverage_h=(h // tile_h) * tile_h,
        coverage_w=(w // tile_w) * tile_w,
        num_classes=num_classes,
        tile_h=tile_h,
        tile_w=tile_w,
    )


def report_to_json(report: SegmentationReport) -> str:
    doc = {
        "mmiou": report.mmiou,
        "num_classes": report.num_classes,
        "tile": [report.tile_h, report.tile_w],
        "coverage": [report.coverage_h, report.coverage_w],
        "per_class_mean_iou": [float(v) for v in report.per_class_mean],
        "confusion": report.confusion.tolist(),
        "images": [
            {"index": r.index, "ious": [float(v) for v in r.ious], "miou": r.miou}
            for r in report.images
        ],
    }
    doc.update(report.extra)
    return json.dumps(doc, indent=2, sort_keys=True)


def report_to_csv(report: SegmentationReport) -> str:
    """One row per image: index, IOU per class, mIOU; final row the mmIOU."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image"] + [f"iou_{c}" for c in range(report.num_classes)] + ["miou"])
    for r in report.images:
        writer.writerow([r.index] + [f"{v:.6f}" for v in r.ious] + [f"{r.miou:.6f}"])
    writer.writerow(["mmiou"] + [""] * report.num_classes + [f"{report.mmiou:.6f}"])
    return buf.getvalue()


def export_mask_pgm(path, mask: np.ndarray, num_classes: int = 7) -> None:
    """Write a class mask as PGM with classes spread over the gray range."""
    step = 255 // (num_classes - 1) if num_classes > 1 else 255
    write_pgm(path, mask.astype(np.uint16) * step)
