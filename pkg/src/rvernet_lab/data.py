"""Cut-out pairs, the synthetic context-ambiguity dataset, and PNG datasets.

A :class:`LabeledImage` carries an image plus a binary ROI mask.  Splitting
it gives a :class:`CutoutPair`: ``x1`` keeps only ROI pixels, ``x2`` keeps
everything else, both with black (0) fill, so ``x1 + x2`` is the original.

The synthetic generator builds images whose ROI object is drawn from a
per-sample stream that ignores the label.  The two classes of the
"ambiguous pair" use the same ROI colour, so sample ``i`` of one class and
sample ``i`` of the other have bit-identical ROI cut-outs; only the objects
around the ROI tell them apart.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ConfigurationError, DimensionError


class DatasetError(ValueError):
    """A dataset on disk is missing, malformed or inconsistent."""


@dataclass
class LabeledImage:
    image: np.ndarray  # [3,S,S] float32 in [0,1]
    mask: np.ndarray  # [S,S] float32, exactly {0,1}; 1 = ROI
    label: int
    meta: str = ""
    split: str = "train"


@dataclass
class CutoutPair:
    x1: np.ndarray
    x2: np.ndarray
    label: int


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round trips are exact."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
            .astype(np.float32) / np.float32(255))


def validate_mask(mask: np.ndarray) -> None:
    bad = int(np.count_nonzero((mask != 0) & (mask != 1)))
    if bad:
        raise ValueError(f"mask is not binary: {bad} pixel(s) outside {{0, 1}}")


def apply_mask(li: LabeledImage) -> CutoutPair:
    validate_mask(li.mask)
    if li.mask.shape != li.image.shape[1:]:
        raise DimensionError(f"mask {li.mask.shape} does not match image {li.image.shape}")
    m = li.mask.astype(li.image.dtype)
    return CutoutPair(li.image * m, li.image * (1 - m), li.label)


def horizontal_flip(pair: CutoutPair, p: float, rng: np.random.Generator) -> CutoutPair:
    """Mirror both cut-outs together with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"flip probability must lie in [0, 1], got {p}")
    if rng.random() < p:
        return CutoutPair(pair.x1[..., ::-1].copy(), pair.x2[..., ::-1].copy(), pair.label)
    return pair


def flip_batch(x1: np.ndarray, x2: np.ndarray, p: float, rng: np.random.Generator):
    """Batched :func:`horizontal_flip`: one coin per sample, shared by x1 and x2."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"flip probability must lie in [0, 1], got {p}")
    flip = rng.random(len(x1)) < p
    if not flip.any():
        return x1, x2
    x1 = x1.copy()
    x2 = x2.copy()
    x1[flip] = x1[flip][..., ::-1]
    x2[flip] = x2[flip][..., ::-1]
    return x1, x2


# -- synthetic generator ----------------------------------------------------
AMBIGUOUS_ROI_COLOR = (0.85, 0.18, 0.12)
GENERIC_CONTEXT = (("square", (0.50, 0.34, 0.20)), ("disk", (0.55, 0.55, 0.58)))
PAIR_CONTEXT = (("bar", (0.95, 0.80, 0.30)), ("disk", (0.92, 0.92, 0.85)))


ROI_PATTERNS = ("hsplit", "vsplit", "quadrants", "concentric")
PATTERN_COLORS = ((0.30, 0.75, 0.35), (0.25, 0.40, 0.90))


def default_vocab(num_classes: int, ambiguous_pair: tuple[int, int]) -> dict:
    """ROI appearance and context vocabulary for each class.

    The other classes paint the ROI disk in the same two colours, in equal
    areas, and differ only by how the colours are arranged; each further
    group of four gets a new colour pair.  Every arrangement maps to itself
    under a horizontal flip.
    """
    a, b = ambiguous_pair
    others = [k for k in range(num_classes) if k not in (a, b)]
    vocab = {}
    for idx, k in enumerate(others):
        group, pat = divmod(idx, len(ROI_PATTERNS))
        if group == 0:
            c1, c2 = PATTERN_COLORS
        else:
            hue = (0.12 + 0.23 * group) % 1.0
            c1 = colorsys.hsv_to_rgb(hue, 0.7, 0.85)
            c2 = colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.7, 0.85)
        vocab[k] = {"roi_color": [round(c, 4) for c in c1],
                    "roi_color2": [round(c, 4) for c in c2],
                    "roi_pattern": ROI_PATTERNS[pat],
                    "context": [[s, list(c)] for s, c in GENERIC_CONTEXT]}
    for k, ctx in zip((a, b), PAIR_CONTEXT):
        vocab[k] = {"roi_color": list(AMBIGUOUS_ROI_COLOR), "roi_pattern": "plain",
                    "context": [[ctx[0], list(ctx[1])]]}
    return {str(k): vocab[k] for k in range(num_classes)}


def _pattern(side, kind, cy, cx, r):
    """Boolean map: True where the ROI takes its second colour."""
    yy, xx = np.mgrid[:side, :side]
    if kind == "plain":
        return np.zeros((side, side), bool)
    if kind == "hsplit":
        return yy >= cy
    if kind == "vsplit":
        return xx >= cx
    if kind == "quadrants":
        return (yy >= cy) ^ (xx >= cx)
    if kind == "concentric":
        # inner disk of radius r/sqrt(2) holds half the area
        return (yy - cy) ** 2 + (xx - cx) ** 2 > r * r / 2
    raise ConfigurationError(f"unknown ROI pattern {kind!r}")


@dataclass
class SyntheticSpec:
    image_side: int = 64
    num_classes: int = 6
    ambiguous_pair: tuple = (0, 1)
    samples_per_class: int = 400
    test_per_class: int = 100
    context_vocab: dict = field(default_factory=dict)
    noise_std: float = 0.03
    seed: int = 7

    def validate(self) -> "SyntheticSpec":
        if self.samples_per_class <= 0:
            raise ConfigurationError("samples_per_class must be positive")
        if not 0 <= self.test_per_class <= self.samples_per_class:
            raise ConfigurationError("test_per_class must lie in [0, samples_per_class]")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        a, b = self.ambiguous_pair
        if a == b or not (0 <= a < self.num_classes and 0 <= b < self.num_classes):
            raise ConfigurationError(f"invalid ambiguous pair {self.ambiguous_pair}")
        if self.image_side < 24:
            raise ConfigurationError("image_side must be at least 24")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        return self

    @property
    def vocab(self) -> dict:
        return self.context_vocab or default_vocab(self.num_classes, tuple(self.ambiguous_pair))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ambiguous_pair"] = list(self.ambiguous_pair)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        if "ambiguous_pair" in d:
            d["ambiguous_pair"] = tuple(d["ambiguous_pair"])
        return cls(**d).validate()


def _stream(seed: int, *key: int) -> np.random.Generator:
    # counter-style keys: every (purpose, class, index) gets its own stream
    return np.random.default_rng([seed, *key])


_ROI, _CONTEXT, _NOISE, _BG = 0, 1, 2, 3


def _disk(side, cy, cx, r):
    yy, xx = np.mgrid[:side, :side]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _shape_mask(side, kind, cy, cx, size):
    yy, xx = np.mgrid[:side, :side]
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size * size
    if kind == "bar":
        return (np.abs(yy - cy) <= max(1.5, size / 2)) & (np.abs(xx - cx) <= size * 1.3)
    return (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)


def _render(spec: SyntheticSpec, label: int, index: int) -> LabeledImage:
    s = spec.image_side
    vocab = spec.vocab[str(label)]
    scale = s / 64.0
    # background: label-independent
    bg_rng = _stream(spec.seed, _BG, index)
    img = np.empty((3, s, s))
    img[:] = bg_rng.uniform(0.08, 0.22, size=3)[:, None, None]
    # ROI geometry and colour jitter: keyed by index only, never by label
    roi_rng = _stream(spec.seed, _ROI, index)
    r = roi_rng.uniform(9, 13) * scale
    cy, cx = roi_rng.uniform(r + 2, s - r - 2, size=2)
    jitter = roi_rng.uniform(-0.05, 0.05, size=3)
    mask = _disk(s, cy, cx, r)
    # context objects: the only label-dependent part outside the ROI colour
    ctx_rng = _stream(spec.seed, _CONTEXT, label, index)
    n_ctx = int(ctx_rng.integers(1, 4))
    placed = 0
    for _ in range(200):
        if placed == n_ctx:
            break
        kind, color = vocab["context"][int(ctx_rng.integers(len(vocab["context"])))]
        size = ctx_rng.uniform(5, 8) * scale
        oy, ox = ctx_rng.uniform(size + 1, s - size - 1, size=2)
        if np.hypot(oy - cy, ox - cx) < r + 1.5 * size + 2:
            continue
        m = _shape_mask(s, kind, oy, ox, size)
        img[:, m] = np.asarray(color)[:, None]
        placed += 1
    c1 = np.clip(np.asarray(vocab["roi_color"]) + jitter, 0, 1)
    c2 = np.clip(np.asarray(vocab.get("roi_color2", vocab["roi_color"])) + jitter, 0, 1)
    second = _pattern(s, vocab.get("roi_pattern", "plain"), cy, cx, r)
    img[:, mask & ~second] = c1[:, None]
    img[:, mask & second] = c2[:, None]
    # noise before masking keeps the cut-outs exactly complementary
    noise_rng = _stream(spec.seed, _NOISE, index)
    img = img + noise_rng.normal(0.0, spec.noise_std, size=img.shape)
    split = "test" if index >= spec.samples_per_class - spec.test_per_class else "train"
    return LabeledImage(quantize(img), mask.astype(np.float32), label,
                        meta=f"synthetic:{label}:{index}", split=split)


def generate_synthetic(spec: SyntheticSpec) -> list[LabeledImage]:
    """Deterministic in ``spec``; ordered class-major then by index."""
    spec.validate()
    return [_render(spec, k, i) for k in range(spec.num_classes)
            for i in range(spec.samples_per_class)]


def class_names(spec: SyntheticSpec) -> list[str]:
    a, b = spec.ambiguous_pair
    return [f"ambiguous_{'a' if k == a else 'b'}" if k in (a, b) else f"class_{k}"
            for k in range(spec.num_classes)]


# -- on-disk datasets -------------------------------------------------------
def save_dataset(dataset: list[LabeledImage], out_dir, names: list[str] | None = None) -> Path:
    """Write ``images/*.png``, ``masks/*.png`` and ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, li in enumerate(dataset):
        sid = f"{i:06d}"
        rgb = np.round(li.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(out / "images" / f"{sid}.png")
        Image.fromarray((li.mask * 255).astype(np.uint8), mode="L").save(out / "masks" / f"{sid}.png")
        entries.append({"id": sid, "image": f"images/{sid}.png", "mask": f"masks/{sid}.png",
                        "label": int(li.label), "split": li.split, "source": li.meta})
    if names is None:
        k = max((li.label for li in dataset), default=-1) + 1
        names = [f"class_{j}" for j in range(k)]
    manifest = {"classes": list(names), "samples": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(manifest_path) -> dict:
    path = Path(manifest_path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(manifest, list):
        manifest = {"classes": [], "samples": manifest}
    if "samples" not in manifest:
        raise DatasetError(f"{path}: manifest has no 'samples' list")
    return manifest


def load_dataset(manifest_path) -> list[LabeledImage]:
    path = Path(manifest_path)
    manifest = read_manifest(path)
    root = path.parent
    out = []
    for e in manifest["samples"]:
        for key in ("id", "image", "mask", "label"):
            if key not in e:
                raise DatasetError(f"{path}: sample entry missing {key!r}: {e}")
        img_path, mask_path = root / e["image"], root / e["mask"]
        for p in (img_path, mask_path):
            if not p.is_file():
                raise DatasetError(f"missing file: {p}")
        rgb = np.asarray(Image.open(img_path).convert("RGB"))
        m = np.asarray(Image.open(mask_path).convert("L"))
        if rgb.shape[:2] != m.shape:
            raise DatasetError(
                f"{e['id']}: image {rgb.shape[:2]} and mask {m.shape} sizes differ")
        bad = int(np.count_nonzero((m != 0) & (m != 255)))
        if bad:
            raise DatasetError(f"{mask_path}: mask not binary ({bad} pixel(s) not 0 or 255)")
        image = rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255)
        out.append(LabeledImage(image, (m == 255).astype(np.float32), int(e["label"]),
                                meta=str(e.get("source", e["id"])), split=e.get("split", "train")))
    return out


def filter_classes(dataset: list[LabeledImage], excluded) -> tuple[list[LabeledImage], dict]:
    """Drop samples of ``excluded`` classes and re-index the rest densely.

    Returns the filtered list and the ``{old_label: new_label}`` map.
    """
    excluded = set(int(k) for k in excluded)
    present = sorted({li.label for li in dataset})
    kept = [k for k in present if k not in excluded]
    if present and not kept:
        raise ConfigurationError("excluding every class leaves nothing to train on")
    mapping = {old: new for new, old in enumerate(kept)}
    out = [LabeledImage(li.image, li.mask, mapping[li.label], li.meta, li.split)
           for li in dataset if li.label in mapping]
    return out, mapping


@dataclass
class PairArrays:
    """Stacked cut-outs for one split, ready for batched training."""
    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray
    masks: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def images(self) -> np.ndarray:
        return self.x1 + self.x2

    def subset(self, idx) -> "PairArrays":
        return PairArrays(self.x1[idx], self.x2[idx], self.labels[idx], self.masks[idx])


def to_arrays(dataset: list[LabeledImage], split: str | None = None) -> PairArrays:
    items = [li for li in dataset if split is None or li.split == split]
    if not items:
        s = dataset[0].image.shape[-1] if dataset else 0
        empty = np.zeros((0, 3, s, s), np.float32)
        return PairArrays(empty, empty.copy(), np.zeros(0, np.int64), np.zeros((0, s, s), np.float32))
    pairs = [apply_mask(li) for li in items]
    return PairArrays(np.stack([p.x1 for p in pairs]), np.stack([p.x2 for p in pairs]),
                      np.array([p.label for p in pairs], dtype=np.int64),
                      np.stack([li.mask for li in items]))
