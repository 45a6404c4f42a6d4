"""The dual-branch ROI / extra-ROI classifier and a single-backbone classifier.

``RveRNetModel`` evaluates ``softmax(W2 relu(W1 [f(x1); g(x2)] + b1) + b2)``
where ``f`` sees the ROI-only cut-out and ``g`` the complementary one.  The
ablation modes drop one branch and narrow ``W1`` accordingly.
"""
from __future__ import annotations

import numpy as np

from .backbones import (Backbone, BackboneConfig, _as_tensor, build_backbone,
                        fan_in_uniform)
from .tensor import (ConfigurationError, ContractError, Tensor, concat,
                     linear, relu, softmax)

MODES = ("both", "roi_only", "xroi_only")


def _head_params(rng, d_in, hidden, k, dtype, prefix="head"):
    return {
        f"{prefix}/linear1.w": Tensor(fan_in_uniform(rng, (hidden, d_in)).astype(dtype), requires_grad=True),
        f"{prefix}/linear1.b": Tensor(np.zeros(hidden, dtype), requires_grad=True),
        f"{prefix}/linear2.w": Tensor(fan_in_uniform(rng, (k, hidden)).astype(dtype), requires_grad=True),
        f"{prefix}/linear2.b": Tensor(np.zeros(k, dtype), requires_grad=True),
    }


class RveRNetModel:
    def __init__(self, roi_backbone: Backbone | None, xroi_backbone: Backbone | None,
                 head: dict, num_classes: int, mode: str = "both"):
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.roi_backbone = roi_backbone
        self.xroi_backbone = xroi_backbone
        self.head = head
        self.num_classes = num_classes
        self.mode = mode
        expected = self.concat_width()
        if head["head/linear1.w"].shape[1] != expected:
            raise ConfigurationError(
                f"linear1 takes {head['head/linear1.w'].shape[1]} inputs, branches give {expected}")

    def concat_width(self) -> int:
        w = 0
        if self.mode in ("both", "roi_only"):
            w += self.roi_backbone.feature_dim
        if self.mode in ("both", "xroi_only"):
            w += self.xroi_backbone.feature_dim
        return w

    @property
    def dtype(self):
        return self.head["head/linear1.w"].dtype

    @property
    def uses_roi(self) -> bool:
        return self.mode in ("both", "roi_only")

    @property
    def uses_xroi(self) -> bool:
        return self.mode in ("both", "xroi_only")

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors under ``roi/``, ``xroi/`` and ``head/`` prefixes."""
        out = {}
        if self.roi_backbone is not None:
            out.update({f"roi/{k}": v for k, v in self.roi_backbone.params.items()})
        if self.xroi_backbone is not None:
            out.update({f"xroi/{k}": v for k, v in self.xroi_backbone.params.items()})
        out.update(self.head)
        return out

    def features(self, x1=None, x2=None) -> Tensor:
        parts = []
        if self.uses_roi:
            if x1 is None:
                raise ContractError(f"mode {self.mode} needs the ROI input x1")
            parts.append(self.roi_backbone(x1))
        if self.uses_xroi:
            if x2 is None:
                raise ContractError(f"mode {self.mode} needs the extra-ROI input x2")
            parts.append(self.xroi_backbone(x2))
        return parts[0] if len(parts) == 1 else concat(parts, axis=-1)

    def head_logits(self, feats: Tensor) -> Tensor:
        h = self.head
        z = relu(linear(feats, h["head/linear1.w"], h["head/linear1.b"]))
        return linear(z, h["head/linear2.w"], h["head/linear2.b"])

    def logits(self, x1=None, x2=None) -> Tensor:
        return self.head_logits(self.features(x1, x2))

    def class_probabilities(self, x1=None, x2=None) -> Tensor:
        return softmax(self.logits(x1, x2), axis=-1)

    def predict(self, x1=None, x2=None, batch_size: int = 100) -> np.ndarray:
        n = len(x1) if x1 is not None else len(x2)
        out = []
        for lo in range(0, n, batch_size):
            a = None if x1 is None or not self.uses_roi else x1[lo:lo + batch_size]
            b = None if x2 is None or not self.uses_xroi else x2[lo:lo + batch_size]
            out.append(self.logits(a, b).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def descriptor(self) -> dict:
        return {
            "mode": self.mode,
            "num_classes": self.num_classes,
            "roi": self.roi_backbone.config.to_dict() if self.roi_backbone else None,
            "xroi": self.xroi_backbone.config.to_dict() if self.xroi_backbone else None,
            "hidden": self.head["head/linear1.w"].shape[0],
        }


def build_rvernet(roi_cfg: BackboneConfig | None, xroi_cfg: BackboneConfig | None,
                  num_classes: int, hidden: int | None = None, mode: str = "both",
                  seed: int = 0, dtype=np.float32) -> RveRNetModel:
    """Two independently initialised backbones plus the integration head.

    Seeds for the two branches and the head are split off ``seed`` so the
    same branch config gets the same initial weights in every ablation leg.
    """
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    roi_seed, xroi_seed, head_seed = np.random.SeedSequence(seed).spawn(3)
    roi = xroi = None
    if mode in ("both", "roi_only"):
        if roi_cfg is None:
            raise ConfigurationError(f"mode {mode} needs a ROI backbone config")
        roi = build_backbone(roi_cfg, seed=roi_seed, dtype=dtype, role="roi_f")
    if mode in ("both", "xroi_only"):
        if xroi_cfg is None:
            raise ConfigurationError(f"mode {mode} needs an extra-ROI backbone config")
        xroi = build_backbone(xroi_cfg, seed=xroi_seed, dtype=dtype, role="xroi_g")
    d_in = (roi.feature_dim if roi else 0) + (xroi.feature_dim if xroi else 0)
    if hidden is None:
        hidden = (roi or xroi).feature_dim
    head = _head_params(np.random.default_rng(head_seed), d_in, hidden, num_classes, dtype)
    return RveRNetModel(roi, xroi, head, num_classes, mode)


class Classifier:
    """One backbone with a linear head; used for standalone teachers/students.

    A ``mini_deit`` backbone gets a second head on its distillation token.
    Once the classifier is marked ``distilled`` inference averages the two
    heads' logits; before that only the class head is read.
    """

    def __init__(self, backbone: Backbone, head: dict, distilled: bool = False):
        self.backbone = backbone
        self.head = head
        self.distilled = distilled
        self.num_classes = head["head/cls.w"].shape[0]

    @property
    def has_dist_head(self) -> bool:
        return "head/dist.w" in self.head

    def parameters(self) -> dict[str, Tensor]:
        out = {f"backbone/{k}": v for k, v in self.backbone.params.items()}
        out.update(self.head)
        return out

    def head_outputs(self, image) -> tuple[Tensor, Tensor | None]:
        """(class-head logits, distillation-head logits or None)."""
        h = self.head
        if self.has_dist_head:
            cls_state, dist_state = self.backbone.forward_tokens(
                _as_tensor(image, self.backbone.dtype))
            return (linear(cls_state, h["head/cls.w"], h["head/cls.b"]),
                    linear(dist_state, h["head/dist.w"], h["head/dist.b"]))
        feats = self.backbone(image)
        return linear(feats, h["head/cls.w"], h["head/cls.b"]), None

    def logits(self, image) -> Tensor:
        cls_logits, dist_logits = self.head_outputs(image)
        if dist_logits is None or not self.distilled:
            return cls_logits
        return (cls_logits + dist_logits) * 0.5

    def class_probabilities(self, image) -> Tensor:
        return softmax(self.logits(image), axis=-1)

    def predict(self, image, batch_size: int = 100) -> np.ndarray:
        out = [self.logits(image[lo:lo + batch_size]).data.argmax(axis=1)
               for lo in range(0, len(image), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def descriptor(self) -> dict:
        return {"standalone": self.backbone.config.to_dict(), "distilled": self.distilled,
                "num_classes": self.num_classes}


def build_classifier(cfg: BackboneConfig, num_classes: int, seed: int = 0,
                     dtype=np.float32) -> Classifier:
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    b_seed, h_seed = np.random.SeedSequence(seed).spawn(2)
    backbone = build_backbone(cfg, seed=b_seed, dtype=dtype, role="standalone")
    rng = np.random.default_rng(h_seed)
    f = cfg.feature_dim
    head = {
        "head/cls.w": Tensor(fan_in_uniform(rng, (num_classes, f)).astype(dtype), requires_grad=True),
        "head/cls.b": Tensor(np.zeros(num_classes, dtype), requires_grad=True),
    }
    if cfg.kind == "mini_deit":
        head["head/dist.w"] = Tensor(fan_in_uniform(rng, (num_classes, f)).astype(dtype), requires_grad=True)
        head["head/dist.b"] = Tensor(np.zeros(num_classes, dtype), requires_grad=True)
    return Classifier(backbone, head)


def load_parameters(params: dict[str, Tensor], values: dict[str, np.ndarray],
                    prefix_map: dict[str, str] | None = None, strict: bool = True) -> None:
    """Copy arrays into ``params`` in place, casting to each tensor's dtype."""
    prefix_map = prefix_map or {}
    for name, arr in values.items():
        for src, dst in prefix_map.items():
            if name.startswith(src):
                name = dst + name[len(src):]
                break
        if name not in params:
            if strict:
                raise KeyError(f"checkpoint parameter {name!r} not in model")
            continue
        t = params[name]
        if t.shape != tuple(arr.shape):
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data = np.array(arr, dtype=t.dtype)
