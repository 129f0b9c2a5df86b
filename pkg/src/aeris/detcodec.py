"""CenterNet-style box <-> map codec and the detection losses.

Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner, in pixels of
the network input. Maps live at output stride 4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

OUTPUT_STRIDE = 4
MIN_IOU = 0.7
WH_WEIGHT = 0.1
OFFSET_WEIGHT = 1.0
FOCAL_EPS = 1e-12


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    class_id: int = 0

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    w: float
    h: float
    class_id: int
    score: float

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(self.x, self.y, self.w, self.h, self.class_id)

    def scaled(self, factor: float) -> "Detection":
        return Detection(self.x * factor, self.y * factor, self.w * factor, self.h * factor,
                         self.class_id, self.score)


@dataclass
class TargetMaps:
    heatmap: np.ndarray  # (K, h, w)
    wh: np.ndarray  # (2, h, w), map units
    offset: np.ndarray  # (2, h, w)
    mask: np.ndarray  # (h, w) bool, cells carrying a regression target
    skipped: int = 0


def output_hw(input_hw) -> tuple[int, int]:
    return tuple(-(-int(v) // OUTPUT_STRIDE) for v in input_hw)


def gaussian_radius(box_hw, min_iou: float = MIN_IOU) -> float:
    """Largest corner displacement that keeps IoU with the box >= ``min_iou``.

    Three configurations are solved in closed form and the tightest wins:
    both corners translated together, both moved inwards, both moved outwards.
    """
    h, w = float(box_hw[0]), float(box_hw[1])
    if h <= 0 or w <= 0:
        return 0.0
    m = float(min_iou)
    hw_sum, area = h + w, h * w

    # translation: (h-r)(w-r) = 2m/(1+m) * hw
    c1 = area * (1 - 2 * m / (1 + m))
    r1 = (hw_sum - math.sqrt(max(hw_sum**2 - 4 * c1, 0.0))) / 2
    # shrink: (h-2r)(w-2r) = m * hw
    c2 = area * (1 - m)
    r2 = (2 * hw_sum - math.sqrt(max(4 * hw_sum**2 - 16 * c2, 0.0))) / 8
    # grow: (h+2r)(w+2r) = hw / m
    c3 = area * (1 - 1 / m)
    r3 = (-2 * hw_sum + math.sqrt(max(4 * hw_sum**2 - 16 * c3, 0.0))) / 8
    return max(0.0, min(r1, r2, r3))


def draw_gaussian(heatmap: np.ndarray, center, radius: int) -> None:
    """Element-wise max of an unnormalised Gaussian peak (1.0 at ``center``) into ``heatmap``."""
    diameter = 2 * radius + 1
    sigma = diameter / 6
    r = np.arange(-radius, radius + 1)
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma * sigma))
    cx, cy = center
    hh, ww = heatmap.shape
    top, bottom = min(cy, radius), min(hh - cy, radius + 1)
    left, right = min(cx, radius), min(ww - cx, radius + 1)
    region = heatmap[cy - top:cy + bottom, cx - left:cx + right]
    patch = g[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(region, patch, out=region)


def clip_box(box: BoundingBox, image_hw) -> BoundingBox | None:
    H, W = image_hw
    if box.w > 0 and box.h > 0 and box.x >= 0 and box.y >= 0 and box.x + box.w <= W and box.y + box.h <= H:
        return box
    x0, y0 = max(box.x, 0.0), max(box.y, 0.0)
    x1, y1 = min(box.x + box.w, float(W)), min(box.y + box.h, float(H))
    if x1 <= x0 or y1 <= y0:
        return None
    return BoundingBox(x0, y0, x1 - x0, y1 - y0, box.class_id)


def encode_targets(boxes, map_hw, num_classes: int, min_iou: float = MIN_IOU) -> TargetMaps:
    """Splat boxes (input pixel coords) onto stride-4 maps.

    Overlapping centres share the heatmap via max; the later box owns the
    wh/offset regression target at a shared cell.
    """
    mh, mw = map_hw
    heat = np.zeros((num_classes, mh, mw))
    wh = np.zeros((2, mh, mw))
    off = np.zeros((2, mh, mw))
    mask = np.zeros((mh, mw), dtype=bool)
    skipped = 0
    image_hw = (mh * OUTPUT_STRIDE, mw * OUTPUT_STRIDE)
    for box in boxes:
        b = clip_box(box, image_hw)
        if b is None:
            skipped += 1
            continue
        cx, cy = b.center
        fx, fy = cx / OUTPUT_STRIDE, cy / OUTPUT_STRIDE
        ix, iy = min(int(math.floor(fx)), mw - 1), min(int(math.floor(fy)), mh - 1)
        bw, bh = b.w / OUTPUT_STRIDE, b.h / OUTPUT_STRIDE
        radius = max(0, int(gaussian_radius((bh, bw), min_iou)))
        draw_gaussian(heat[b.class_id], (ix, iy), radius)
        wh[:, iy, ix] = (bw, bh)
        off[:, iy, ix] = (fx - ix, fy - iy)
        mask[iy, ix] = True
    return TargetMaps(heat, wh, off, mask, skipped)


def stack_targets(targets) -> dict[str, torch.Tensor]:
    return {
        "heatmap": torch.from_numpy(np.stack([t.heatmap for t in targets])),
        "wh": torch.from_numpy(np.stack([t.wh for t in targets])),
        "offset": torch.from_numpy(np.stack([t.offset for t in targets])),
        "mask": torch.from_numpy(np.stack([t.mask for t in targets])),
    }


def focal_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Penalty-reduced pixel-wise focal loss (alpha=2, beta=4), normalised by the peak count."""
    eps = max(FOCAL_EPS, torch.finfo(pred.dtype).eps)
    p = pred.clamp(eps, 1 - eps)
    pos = target.eq(1).to(pred.dtype)
    neg = 1 - pos
    pos_loss = torch.log(p) * (1 - p) ** 2 * pos
    neg_loss = torch.log(1 - p) * p**2 * (1 - target) ** 4 * neg
    n = pos.sum().clamp(min=1.0)
    return -(pos_loss.sum() + neg_loss.sum()) / n


def reg_l1_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over masked cells; ``pred``/``target`` are ``(B, C, h, w)``, mask ``(B, h, w)``."""
    m = mask.unsqueeze(1).to(pred.dtype).expand_as(pred)
    count = m.sum()
    if count == 0:
        return (pred * 0).sum()
    return (torch.abs(pred - target) * m).sum() / count


def detection_loss(outputs, targets: dict) -> tuple[torch.Tensor, dict]:
    """``l_obj`` = focal + 0.1 * wh + offset."""
    hm = focal_loss(outputs.heatmap, targets["heatmap"].to(outputs.heatmap.dtype))
    wh = reg_l1_loss(outputs.wh, targets["wh"].to(outputs.wh.dtype), targets["mask"])
    off = reg_l1_loss(outputs.offset, targets["offset"].to(outputs.offset.dtype), targets["mask"])
    total = hm + WH_WEIGHT * wh + OFFSET_WEIGHT * off
    return total, {"hm": hm, "wh": wh, "off": off}


def find_peaks(heat: np.ndarray) -> np.ndarray:
    """Boolean mask of 3x3 local maxima, one cell per plateau.

    Adjacent local maxima are necessarily equal, so each 8-connected group of
    candidates is a plateau; its first cell in row-major order is kept.
    """
    pooled = ndimage.maximum_filter(heat, size=3, mode="constant", cval=-np.inf)
    cand = heat == pooled
    labels, n = ndimage.label(cand, structure=np.ones((3, 3), dtype=bool))
    keep = np.zeros_like(cand)
    if n:
        flat = labels.ravel()
        _, first = np.unique(flat, return_index=True)
        first = first[flat[first] > 0]
        keep.flat[first] = True
    return keep


def decode_detections(heatmap, wh, offset, top_k: int = 100, score_thresh: float = 0.0) -> list[Detection]:
    """Decode one image's maps ``(K, h, w)``, ``(2, h, w)``, ``(2, h, w)`` into detections.

    Ties in score are broken by (class, row, col) order so output is deterministic.
    """
    heatmap, wh, offset = (np.asarray(a, dtype=np.float64) for a in (heatmap, wh, offset))
    cands = []
    for k in range(heatmap.shape[0]):
        ys, xs = np.nonzero(find_peaks(heatmap[k]))
        scores = heatmap[k, ys, xs]
        sel = scores >= score_thresh
        for y, x, s in zip(ys[sel], xs[sel], scores[sel]):
            cands.append((-s, k, y, x))
    cands.sort()
    dets = []
    for neg_s, k, y, x in cands[:top_k]:
        cx = (x + offset[0, y, x]) * OUTPUT_STRIDE
        cy = (y + offset[1, y, x]) * OUTPUT_STRIDE
        bw = max(wh[0, y, x], 0.0) * OUTPUT_STRIDE
        bh = max(wh[1, y, x], 0.0) * OUTPUT_STRIDE
        dets.append(Detection(cx - bw / 2, cy - bh / 2, bw, bh, int(k), float(-neg_s)))
    return dets
