"""Accuracy, macro-F1, subset F1, comparison tables and GradCAM for CNN branches.

F1 averaging is macro (unweighted over classes) everywhere.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbones import MiniCNN, _as_tensor
from .tensor import ConfigurationError, DimensionError

F1_AVERAGING = "macro"


class UnsupportedArchitectureError(ConfigurationError):
    pass


def _labels(predictions, targets):
    p = np.asarray(predictions, dtype=np.int64).ravel()
    t = np.asarray(targets, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise DimensionError(f"{len(p)} predictions vs {len(t)} targets")
    return p, t


def confusion(predictions, targets, k: int) -> np.ndarray:
    """``C[true, pred]`` counts."""
    p, t = _labels(predictions, targets)
    if len(p) and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= k):
        raise IndexError(f"label outside [0, {k})")
    c = np.zeros((k, k), dtype=np.int64)
    np.add.at(c, (t, p), 1)
    return c


def top1(predictions, targets) -> float:
    p, t = _labels(predictions, targets)
    if len(t) == 0:
        raise ConfigurationError("top1 of an empty set")
    return 100.0 * float(np.count_nonzero(p == t)) / len(t)


def per_class_f1(conf: np.ndarray) -> np.ndarray:
    """F1 per class from a confusion matrix; 0 where precision+recall is undefined."""
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1)  # 2TP + FP + FN
    out = np.zeros(len(conf))
    nz = denom > 0
    out[nz] = 2.0 * tp[nz] / denom[nz]
    return out


def macro_f1(predictions, targets, k: int) -> float:
    """Unweighted mean of per-class F1; empty classes count as 0."""
    return float(per_class_f1(confusion(predictions, targets, k)).mean())


def subset_f1(predictions, targets, subset, k: int | None = None) -> float:
    """Mean of the full-confusion per-class F1 over ``subset`` only."""
    subset = sorted(set(int(c) for c in subset))
    if not subset:
        raise ConfigurationError("subset must be non-empty")
    p, t = _labels(predictions, targets)
    if k is None:
        k = int(max(p.max(initial=0), t.max(initial=0), subset[-1])) + 1
    return float(per_class_f1(confusion(p, t, k))[subset].mean())


@dataclass
class MetricsReport:
    top1: float
    macro_f1: float
    per_class_f1: list
    confusion: list
    subset: list | None = None
    subset_f1: float | None = None
    averaging: str = F1_AVERAGING

    @classmethod
    def from_predictions(cls, predictions, targets, k: int, subset=None) -> "MetricsReport":
        conf = confusion(predictions, targets, k)
        f1 = per_class_f1(conf)
        total = conf.sum()
        rep = cls(top1=100.0 * float(np.trace(conf)) / total if total else 0.0,
                  macro_f1=float(f1.mean()), per_class_f1=f1.tolist(), confusion=conf.tolist())
        if subset:
            rep.subset = sorted(int(c) for c in subset)
            rep.subset_f1 = float(f1[rep.subset].mean())
        return rep

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["top1", f"{self.top1:.4f}"])
        w.writerow([f"{self.averaging}_f1", f"{self.macro_f1:.6f}"])
        if self.subset_f1 is not None:
            w.writerow([f"subset_f1[{' '.join(map(str, self.subset))}]", f"{self.subset_f1:.6f}"])
        for i, v in enumerate(self.per_class_f1):
            w.writerow([f"f1[{i}]", f"{v:.6f}"])
        return buf.getvalue()


# -- comparison tables --------------------------------------------------------
TABLE_COLUMNS = ("top1", "macro_f1", "subset_f1")


def table_report(runs) -> list[dict]:
    """Rows of ``(name, descriptor, metrics...)`` with best/worst flags per column.

    Ties share the flag: every run equal to the column max is ``best``.
    """
    rows = []
    for desc, rep in runs:
        rows.append({"name": desc.get("name") if isinstance(desc, dict) else str(desc),
                     "descriptor": desc,
                     **{c: getattr(rep, c) for c in TABLE_COLUMNS},
                     "best": [], "worst": []})
    for c in TABLE_COLUMNS:
        vals = [r[c] for r in rows if r[c] is not None]
        if not vals:
            continue
        hi, lo = max(vals), min(vals)
        for r in rows:
            if r[c] is None:
                continue
            if r[c] == hi:
                r["best"].append(c)
            if r[c] == lo:
                r["worst"].append(c)
    return rows


def table_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", *TABLE_COLUMNS, "best", "worst"])
    for r in rows:
        w.writerow([r["name"], *("" if r[c] is None else f"{r[c]:.6f}" for c in TABLE_COLUMNS),
                    ";".join(r["best"]), ";".join(r["worst"])])
    return buf.getvalue()


# -- GradCAM -----------------------------------------------------------------
@dataclass
class Heatmap:
    grid: np.ndarray
    layer: str
    class_index: int
    meta: dict = field(default_factory=dict)

    @property
    def argmax_cell(self) -> tuple[int, int]:
        return tuple(int(v) for v in np.unravel_index(int(self.grid.argmax()), self.grid.shape))


def cam_from_activation(act: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """``ReLU(sum_k alpha_k A_k)`` normalised by its max; ``act``/``grad`` are ``[C,h,w]``."""
    alpha = grad.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, act, axes=1), 0.0)
    m = cam.max()
    return cam / m if m > 0 else np.zeros_like(cam)


def gradcam(model, x1, x2=None, class_idx=None, branch: str = "roi") -> list[Heatmap]:
    """GradCAM maps for a batch, read at the last block output of a CNN branch.

    ``class_idx`` defaults to the predicted class; the score is the
    pre-softmax logit.  Works on an RveRNet (``branch`` picks roi / xroi) or
    a standalone classifier.
    """
    if hasattr(model, "roi_backbone"):
        bb = model.roi_backbone if branch == "roi" else model.xroi_backbone
    else:
        bb = model.backbone
    if bb is None:
        raise ConfigurationError(f"model has no {branch} branch")
    if not isinstance(bb, MiniCNN):
        raise UnsupportedArchitectureError(
            f"GradCAM needs a mini_cnn branch, {branch} branch is {bb.kind}")
    dtype = bb.dtype
    if hasattr(model, "roi_backbone"):
        logits = model.logits(_as_tensor(x1, dtype) if model.uses_roi else None,
                              _as_tensor(x2, dtype) if model.uses_xroi else None)
    else:
        logits = model.logits(_as_tensor(x1, dtype))
    n, k = logits.shape
    if class_idx is None:
        cls = logits.data.argmax(axis=1)
    else:
        cls = np.broadcast_to(np.asarray(class_idx, dtype=np.int64), (n,))
        if cls.min() < 0 or cls.max() >= k:
            raise IndexError(f"class index outside [0, {k})")
    for p in model.parameters().values():
        p.zero_grad()
    act = bb.last_activation
    # samples are independent, so one backward over the summed scores
    # yields each sample's own gradient
    sel = np.zeros((n, k), dtype=logits.dtype)
    sel[np.arange(n), cls] = 1.0
    (logits * sel).sum().backward()
    out = []
    for i in range(n):
        out.append(Heatmap(cam_from_activation(act.data[i].astype(np.float64),
                                               act.grad[i].astype(np.float64)),
                           f"{branch}.blocks.{bb.config.depth - 1}", int(cls[i])))
    for p in model.parameters().values():
        p.zero_grad()
    return out


def upsample_nearest(grid: np.ndarray, side: int) -> np.ndarray:
    h, w = grid.shape
    if side % h or side % w:
        raise DimensionError(f"cannot upsample {grid.shape} to {side} by an integer factor")
    return np.repeat(np.repeat(grid, side // h, axis=0), side // w, axis=1)


def save_heatmap_png(hm: Heatmap, path, side: int) -> Path:
    img = np.round(upsample_nearest(hm.grid, side) * 255.0).astype(np.uint8)
    path = Path(path)
    Image.fromarray(img, mode="L").save(path)
    return path


def roi_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Inclusive ``(y0, x0, y1, x1)`` of the nonzero mask pixels."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ConfigurationError("empty ROI mask")
    return int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max())


def argmax_in_bbox(hm: Heatmap, mask: np.ndarray) -> bool:
    """Does the heatmap's peak cell overlap the ROI bounding box?"""
    side = mask.shape[-1]
    h, w = hm.grid.shape
    cy, cx = hm.argmax_cell
    sy, sx = side // h, side // w
    y0, x0, y1, x1 = roi_bbox(mask)
    return not (cy * sy > y1 or (cy + 1) * sy - 1 < y0 or cx * sx > x1 or (cx + 1) * sx - 1 < x0)
