"""COCO-protocol box AP with size buckets, pre-upscale sweeps and FPS timing."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .degradation import resize
from .detcodec import BoundingBox, Detection, decode_detections

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, float("inf")),
}


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = IOU_THRESHOLDS
    max_dets: int = 100
    area_ranges: dict = field(default_factory=lambda: dict(AREA_RANGES))
    upscale: int = 1
    score_thresh: float = 0.01

    def __post_init__(self):
        t = list(self.iou_thresholds)
        if not t or t != sorted(t):
            raise ValueError("iou_thresholds must be non-empty and ascending")
        if int(self.upscale) != self.upscale or self.upscale < 1:
            raise ValueError("upscale must be a positive integer")


@dataclass
class EvalResult:
    """Values in [0, 1]; a bucket without ground truth reports NaN."""

    AP: float
    AP50: float
    AP75: float
    AP_s: float
    AP_m: float
    AP_l: float
    per_class: dict
    counts: dict

    def as_dict(self) -> dict:
        return {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75,
                "AP_s": self.AP_s, "AP_m": self.AP_m, "AP_l": self.AP_l}


def iou(a, b) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` xywh arrays."""
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    d0, g0 = dets[:, None, :2], gts[None, :, :2]
    d1, g1 = d0 + dets[:, None, 2:], g0 + gts[None, :, 2:]
    wh = np.clip(np.minimum(d1, g1) - np.maximum(d0, g0), 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (dets[:, 2] * dets[:, 3])[:, None] + (gts[:, 2] * gts[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def _xywh(items):
    return np.array([[b.x, b.y, b.w, b.h] for b in items], dtype=np.float64).reshape(-1, 4)


def _match_image(ious, gt_ignore, det_area_ok, thresh):
    """Greedy COCO matching for one (image, class); dets must be score-sorted.

    Returns per-det (matched, ignored) flags.
    """
    nd, ng = ious.shape
    gt_taken = np.zeros(ng, dtype=bool)
    matched = np.zeros(nd, dtype=bool)
    ignored = np.zeros(nd, dtype=bool)
    order = np.argsort(gt_ignore, kind="stable")  # non-ignored first
    floor = min(thresh, 1 - 1e-10)
    reachable = (ious >= floor).any(axis=1) if ng else np.zeros(nd, dtype=bool)
    for d in range(nd):
        if not reachable[d]:
            ignored[d] = not det_area_ok[d]
            continue
        best, best_iou = -1, floor
        for g in order:
            if gt_taken[g]:
                continue
            if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                break
            if ious[d, g] < best_iou:
                continue
            best, best_iou = g, ious[d, g]
        if best > -1:
            gt_taken[best] = True
            matched[d] = True
            ignored[d] = gt_ignore[best]
        else:
            ignored[d] = not det_area_ok[d]
    return matched, ignored


def _ap_from_matches(scores, matched, ignored, n_pos):
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    keep = ~ignored[order]
    tp = matched[order][keep]
    fp = ~tp
    tps, fps = np.cumsum(tp), np.cumsum(fp)
    q = np.zeros(len(RECALL_POINTS))
    if len(tp):
        rec = tps / n_pos
        prec = tps / np.maximum(tps + fps, np.finfo(float).eps)
        prec = np.maximum.accumulate(prec[::-1])[::-1]
        idx = np.searchsorted(rec, RECALL_POINTS, side="left")
        valid = idx < len(rec)
        q[valid] = prec[idx[valid]]
    return float(q.mean())


def _class_ids(dets_per_image, gts_per_image):
    ids = set()
    for g in gts_per_image:
        ids.update(b.class_id for b in g)
    return sorted(ids)


def _evaluate_class(dets_per_image, gts_per_image, cls, thresholds, area_range, max_dets):
    """AP per IoU threshold for one class and area bucket (NaN row when no GT)."""
    lo, hi = area_range
    per_t = {t: ([], [], []) for t in thresholds}
    n_pos = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        g = [b for b in gts if b.class_id == cls]
        d = sorted((x for x in dets if x.class_id == cls), key=lambda x: -x.score)[:max_dets]
        garea = np.array([b.w * b.h for b in g])
        gign = (garea < lo) | (garea >= hi) if len(g) else np.zeros(0, dtype=bool)
        n_pos += int((~gign).sum())
        if not d:
            continue
        darea = np.array([x.w * x.h for x in d])
        dok = (darea >= lo) & (darea < hi)
        ious = iou_matrix(_xywh(d), _xywh(g))
        scores = np.array([x.score for x in d])
        for t in thresholds:
            m, ig = _match_image(ious, gign, dok, t)
            per_t[t][0].append(scores)
            per_t[t][1].append(m)
            per_t[t][2].append(ig)
    out = {}
    for t, (s, m, ig) in per_t.items():
        if s:
            out[t] = _ap_from_matches(np.concatenate(s), np.concatenate(m), np.concatenate(ig), n_pos)
        else:
            out[t] = float("nan") if n_pos == 0 else 0.0
    return out, n_pos


def match_and_ap(dets_per_image, gts_per_image, iou_thresh: float, area_range=AREA_RANGES["all"],
                 max_dets: int = 100) -> float:
    """COCO AP at one IoU threshold, averaged over classes that have ground truth.

    Greedy matching in score order, 101-point interpolated precision.
    """
    vals = []
    for cls in _class_ids(dets_per_image, gts_per_image):
        ap, n = _evaluate_class(dets_per_image, gts_per_image, cls, [iou_thresh], area_range, max_dets)
        if n:
            vals.append(ap[iou_thresh])
    return float(np.mean(vals)) if vals else 0.0


def compute_ap(dets_per_image, gts_per_image, cfg: EvalConfig = EvalConfig()) -> EvalResult:
    classes = _class_ids(dets_per_image, gts_per_image)
    table, counts, per_class = {}, {}, {}
    for name, rng in cfg.area_ranges.items():
        rows, total = [], 0
        for cls in classes:
            ap, n = _evaluate_class(dets_per_image, gts_per_image, cls, cfg.iou_thresholds, rng, cfg.max_dets)
            total += n
            if n:
                rows.append([ap[t] for t in cfg.iou_thresholds])
                if name == "all":
                    per_class[cls] = float(np.mean(rows[-1]))
        counts[name] = total
        table[name] = np.array(rows) if rows else None

    def mean(name, col=None):
        a = table.get(name)
        if a is None:
            return float("nan")
        return float(a.mean()) if col is None else float(a[:, col].mean())

    ts = list(cfg.iou_thresholds)
    return EvalResult(
        AP=mean("all") if classes else 0.0,
        AP50=mean("all", ts.index(0.5)) if 0.5 in ts else float("nan"),
        AP75=mean("all", ts.index(0.75)) if 0.75 in ts else float("nan"),
        AP_s=mean("small"),
        AP_m=mean("medium"),
        AP_l=mean("large"),
        per_class=per_class,
        counts=counts,
    )


# ---------------------------------------------------------------------------
# detectors
# ---------------------------------------------------------------------------

Detector = Callable[[np.ndarray], list]


class ModelDetector:
    """Wraps a network: ``forward_infer`` + peak decoding, one image at a time."""

    def __init__(self, model, top_k: int = 100, score_thresh: float = 0.01):
        self.model = model
        self.top_k = top_k
        self.score_thresh = score_thresh

    @torch.no_grad()
    def __call__(self, image: np.ndarray) -> list:
        self.model.eval()
        dtype = next(self.model.parameters()).dtype
        x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)[None]
        x, crop = pad_to_stride(x, self.model.cfg.stride)
        out = self.model.forward_infer(x)
        hm, wh, off = (t[0].double().numpy() for t in out)
        return decode_detections(hm, wh, off, self.top_k, self.score_thresh)


def pad_to_stride(x: torch.Tensor, stride: int):
    """Zero-pad bottom/right so both sides are at least ``stride`` pixels."""
    h, w = x.shape[-2:]
    ph, pw = max(0, stride - h), max(0, stride - w)
    if ph or pw:
        x = torch.nn.functional.pad(x, (0, pw, 0, ph))
    return x, (h, w)


class OracleDetector:
    """Ground-truth adapter: :func:`evaluate` hands it the record instead of pixels.

    Under a pre-upscale ratio it behaves as if it had answered on the upscaled
    image, so its boxes come back in evaluation coordinates either way.
    """

    def boxes_for(self, rec) -> list:
        return [Detection(b.x, b.y, b.w, b.h, b.class_id, 1.0) for b in rec.boxes]


class EmptyDetector:
    def __call__(self, image):
        return []


def evaluate(detector, dataset, cfg: EvalConfig = EvalConfig(), require_manifest: bool = True) -> EvalResult:
    """Run ``detector`` over a (degraded) dataset and compute bucketed AP.

    With ``cfg.upscale > 1`` each input is bicubic-upscaled by that integer
    ratio first and detections are divided by it again.
    """
    if require_manifest:
        m = dataset.manifest
        if m is None:
            raise ValueError("dataset has no manifest; evaluation would not be reproducible")
        if m.params and set(m.params) != {r.image_id for r in dataset.records}:
            raise ValueError("manifest does not match the dataset's image ids")
    dets, gts = [], []
    r = int(cfg.upscale)
    for rec in dataset.records:
        if isinstance(detector, OracleDetector):
            d = detector.boxes_for(rec)
        else:
            img = rec.image
            if r > 1:
                img = np.clip(resize(img, (img.shape[0] * r, img.shape[1] * r), "bicubic"), 0, 1)
                d = [x.scaled(1.0 / r) for x in detector(img)]
            else:
                d = detector(img)
        dets.append(d)
        gts.append(rec.boxes)
    return compute_ap(dets, gts, cfg)


def scale_curve(detector, dataset, ratios: Sequence[int] = (1, 2, 4), out_dir=None, seed: int = 0,
                cfg: EvalConfig = EvalConfig()) -> list:
    """AP / AP_s / AP_m / AP_l for each pre-upscale ratio; optionally writes CSV + SVG."""
    rows = []
    for r in ratios:
        res = evaluate(detector, dataset, EvalConfig(cfg.iou_thresholds, cfg.max_dets, cfg.area_ranges, int(r),
                                                     cfg.score_thresh))
        rows.append((int(r), res))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_results(out_dir / "scale_curve.csv", rows, seed)
        plot_scale_curve(out_dir / "scale_curve.svg", rows)
    return rows


RESULT_FIELDS = ("metric", "value", "bucket", "ratio", "seed")
_BUCKET_OF = {"AP": "all", "AP50": "all", "AP75": "all", "AP_s": "small", "AP_m": "medium", "AP_l": "large"}


def write_results(path, rows, seed: int = 0) -> None:
    """CSV with header ``metric,value,bucket,ratio,seed``; one line per metric per ratio."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_FIELDS)
        for ratio, res in rows:
            for k, v in res.as_dict().items():
                w.writerow([k, f"{v:.6f}", _BUCKET_OF[k], ratio, seed])


def read_results(path) -> list:
    with open(path, newline="") as f:
        return [dict(r, value=float(r["value"]), ratio=int(r["ratio"]), seed=int(r["seed"]))
                for r in csv.DictReader(f)]


def plot_scale_curve(path, rows) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ratios = [r for r, _ in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for key, label in (("AP", "AP"), ("AP_s", "AP small"), ("AP_m", "AP medium"), ("AP_l", "AP large")):
        ax.plot(ratios, [100 * getattr(res, key) for _, res in rows], marker="o", label=label)
    ax.set_xlabel("up-scale ratio")
    ax.set_ylabel("mAP")
    ax.set_xticks(ratios)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


@torch.no_grad()
def fps_benchmark(model, input_hw=(128, 128), n_runs: int = 50, warmup: int = 10, batch: int = 1) -> dict:
    """Frames/sec of ``forward_infer``: median with 5th/95th percentiles over ``n_runs``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.rand(batch, 3, *input_hw, generator=torch.Generator().manual_seed(0)).to(dtype)
    times = []
    with torch.inference_mode():
        for _ in range(warmup):
            model.forward_infer(x)
        for _ in range(max(1, n_runs)):
            t0 = time.perf_counter()
            model.forward_infer(x)
            times.append(time.perf_counter() - t0)
    fps = batch / np.asarray(times)
    return {"median": float(np.median(fps)), "p5": float(np.percentile(fps, 5)),
            "p95": float(np.percentile(fps, 95)), "n_runs": len(times)}
