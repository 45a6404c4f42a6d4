"""Patch permutation and lossy translocation, plus the top-1 decline harness."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ConfigurationError, DimensionError

TARGETS = ("roi", "xroi", "both")

# fixed reference offsets, defined on 224-pixel inputs
REFERENCE_OFFSETS = ((-30, 63), (60, -85), (37, 139))
REFERENCE_SIDE = 224


@dataclass(frozen=True)
class PermutationSpec:
    patch_side: int = 16
    seed: int = 0
    target: str = "roi"

    @property
    def label(self) -> str:
        return f"permute{self.patch_side}@{self.target}"


@dataclass(frozen=True)
class TranslocationSpec:
    dx: int = 0
    dy: int = 0
    target: str = "xroi"

    @property
    def label(self) -> str:
        return f"translocate({self.dx},{self.dy})@{self.target}"


def _check_target(target):
    if target not in TARGETS:
        raise ConfigurationError(f"unknown perturbation target {target!r}; expected one of {TARGETS}")


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    cls = {"permute": PermutationSpec, "translocate": TranslocationSpec}.get(kind)
    if cls is None:
        raise ConfigurationError(f"perturbation kind must be 'permute' or 'translocate', got {kind!r}")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown {kind} keys: {sorted(unknown)}")
    spec = cls(**d)
    _check_target(spec.target)
    return spec


def spec_to_dict(spec) -> dict:
    kind = "permute" if isinstance(spec, PermutationSpec) else "translocate"
    return {"kind": kind, **asdict(spec)}


def default_translocations(side: int, target: str = "xroi") -> list[TranslocationSpec]:
    """The three fixed reference offsets rescaled to ``side`` pixels and rounded."""
    f = side / REFERENCE_SIDE
    return [TranslocationSpec(int(round(dx * f)), int(round(dy * f)), target)
            for dx, dy in REFERENCE_OFFSETS]


def default_specs(side: int, patch_side: int = 16, seed: int = 0) -> list:
    return ([PermutationSpec(patch_side, seed, t) for t in TARGETS]
            + default_translocations(side))


# -- operators --------------------------------------------------------------
def patch_permutation(n_patches: int, seed) -> np.ndarray:
    """Uniform random ordering of ``n_patches`` drawn from ``seed``."""
    return np.random.default_rng(seed).permutation(n_patches)


def permute_patches(image: np.ndarray, patch_side: int, seed=None,
                    perm: np.ndarray | None = None) -> np.ndarray:
    """Rearrange non-overlapping square patches.

    Output patch ``j`` (raster order) is input patch ``perm[j]``; the same
    rearrangement applies to every channel.  Works on ``[..., S, S]``.
    """
    s = image.shape[-1]
    if image.shape[-2] != s or patch_side <= 0 or s % patch_side:
        raise DimensionError(
            f"image side {image.shape[-2:]} not divisible into {patch_side}-pixel patches")
    g = s // patch_side
    if perm is None:
        perm = patch_permutation(g * g, seed)
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(g * g)):
        raise ConfigurationError(f"perm is not a permutation of {g * g} patches")
    lead = image.shape[:-2]
    x = image.reshape(lead + (g, patch_side, g, patch_side))
    x = np.moveaxis(x, -3, -2).reshape(lead + (g * g, patch_side, patch_side))
    x = x[..., perm, :, :]
    x = x.reshape(lead + (g, g, patch_side, patch_side))
    return np.moveaxis(x, -2, -3).reshape(image.shape).copy()


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    return np.argsort(perm)


def translocate(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content ``dx`` right and ``dy`` down; pixels leaving the frame are lost.

    Vacated pixels are black (0).  No wrap-around.
    """
    h, w = image.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        raise ConfigurationError(f"offset ({dx}, {dy}) out of range for a {h}x{w} image")
    out = np.zeros_like(image)
    src_y = slice(max(0, -dy), h - max(0, dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = image[..., src_y, src_x]
    return out


def apply_spec(spec, images: np.ndarray) -> np.ndarray:
    """Apply ``spec`` to a batch ``[N,3,S,S]``; permutations are per-image."""
    if isinstance(spec, TranslocationSpec):
        return translocate(images, spec.dx, spec.dy)
    out = np.empty_like(images)
    s = images.shape[-1]
    if s % spec.patch_side:
        raise DimensionError(f"image side {s} not divisible by patch side {spec.patch_side}")
    n_patches = (s // spec.patch_side) ** 2
    for i, img in enumerate(images):
        out[i] = permute_patches(img, spec.patch_side, perm=patch_permutation(n_patches, [spec.seed, i]))
    return out


# -- reports ----------------------------------------------------------------
@dataclass
class DeclineReport:
    baseline_top1: float
    rows: list = field(default_factory=list)
    roi_kind: str | None = None
    xroi_kind: str | None = None
    descriptor: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"baseline_top1": self.baseline_top1, "roi_kind": self.roi_kind,
                "xroi_kind": self.xroi_kind, "rows": self.rows, "descriptor": self.descriptor}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["roi_kind", "xroi_kind", "perturbation", "target", "baseline_top1",
                    "perturbed_top1", "delta"])
        w.writerow([self.roi_kind, self.xroi_kind, "none", "", f"{self.baseline_top1:.4f}",
                    f"{self.baseline_top1:.4f}", "0.0000"])
        for r in self.rows:
            w.writerow([self.roi_kind, self.xroi_kind, r["label"], r["spec"]["target"],
                        f"{self.baseline_top1:.4f}", f"{r['perturbed_top1']:.4f}",
                        f"{r['delta']:.4f}"])
        return buf.getvalue()


def _top1(pred, labels) -> float:
    return 100.0 * float(np.count_nonzero(pred == labels)) / len(labels)


def perturbation_eval(model, test, specs, batch_size: int = 100) -> DeclineReport:
    """Baseline top-1, then top-1 with each spec applied to x1, x2 or both."""
    x1, x2, labels = test.x1, test.x2, test.labels
    if len(labels) == 0:
        raise ConfigurationError("perturbation_eval needs a non-empty test set")
    dtype = model.dtype
    x1 = x1.astype(dtype, copy=False)
    x2 = x2.astype(dtype, copy=False)
    base = _top1(model.predict(x1, x2, batch_size), labels)
    roi = getattr(model, "roi_backbone", None)
    xroi = getattr(model, "xroi_backbone", None)
    report = DeclineReport(base, [], roi.kind if roi else None, xroi.kind if xroi else None,
                           descriptor=model.descriptor())
    for spec in specs:
        _check_target(spec.target)
        p1 = apply_spec(spec, x1) if spec.target in ("roi", "both") else x1
        p2 = apply_spec(spec, x2) if spec.target in ("xroi", "both") else x2
        acc = _top1(model.predict(p1, p2, batch_size), labels)
        report.rows.append({"label": spec.label, "spec": spec_to_dict(spec),
                            "perturbed_top1": acc, "delta": acc - base})
    return report


def aggregate_by_architecture(reports) -> list[dict]:
    """Mean delta per (roi kind, extra-ROI kind, perturbation) cell."""
    cells: dict[tuple, list[float]] = {}
    for rep in reports:
        for r in rep.rows:
            key = (rep.roi_kind, rep.xroi_kind, r["label"], r["spec"]["target"])
            cells.setdefault(key, []).append(r["delta"])
    out = []
    for (rk, xk, label, target), deltas in cells.items():
        out.append({"roi_kind": rk, "xroi_kind": xk, "perturbation": label, "target": target,
                    "mean_delta": float(np.mean(np.asarray(deltas, dtype=np.float64))),
                    "n_reports": len(deltas)})
    return out


def aggregate_to_csv(rows: list[dict]) -> str:
    """Table layout: one line per architecture pair, one column per perturbation."""
    labels = list(dict.fromkeys(r["perturbation"] for r in rows))
    pairs = list(dict.fromkeys((r["roi_kind"], r["xroi_kind"]) for r in rows))
    lookup = {(r["roi_kind"], r["xroi_kind"], r["perturbation"]): r["mean_delta"] for r in rows}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["roi_kind", "xroi_kind"] + labels)
    for rk, xk in pairs:
        w.writerow([rk, xk] + [f"{lookup[(rk, xk, lb)]:.4f}" if (rk, xk, lb) in lookup else ""
                               for lb in labels])
    return buf.getvalue()
