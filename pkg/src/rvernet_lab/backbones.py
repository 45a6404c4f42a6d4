"""Miniature CNN / ViT / DeiT / MLP-Mixer feature extractors.

Every backbone maps ``[N, 3, S, S]`` images to ``[N, feature_dim]`` and
keeps its parameters in a flat, ordered ``{name: Tensor}`` dict so the
checkpoint writer and the optimizer can treat all models alike.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .tensor import (ConfigurationError, DimensionError, Tensor,
                     broadcast_rows, concat, conv2d, gelu, global_avg_pool,
                     layer_norm, linear, multi_head_self_attention, relu6,
                     reshape, transpose)

KINDS = ("mini_cnn", "mini_vit", "mini_deit", "mini_mixer")
ROLES = ("roi_f", "xroi_g", "standalone")


@dataclass
class BackboneConfig:
    kind: str = "mini_vit"
    feature_dim: int = 128
    depth: int = 4
    width: int = 128
    heads: int = 4
    patch_size: int = 16
    use_pos_embed: bool = True
    image_side: int = 64
    mlp_ratio: int = 4
    expand_ratio: int = 2

    def validate(self) -> "BackboneConfig":
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        if self.feature_dim <= 0 or self.width <= 0 or self.image_side <= 0:
            raise ConfigurationError("feature_dim, width and image_side must be positive")
        if self.depth < 0:
            raise ConfigurationError("depth must be >= 0")
        if self.kind == "mini_cnn":
            if self.width % 4:
                raise ConfigurationError("mini_cnn width must be a multiple of 4")
        else:
            if self.patch_size <= 0 or self.image_side % self.patch_size:
                raise ConfigurationError(
                    f"image_side {self.image_side} not divisible by patch_size {self.patch_size}")
            if self.kind != "mini_mixer" and (self.heads <= 0 or self.width % self.heads):
                raise ConfigurationError(f"heads={self.heads} must divide width={self.width}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


def fan_in_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for a ``[out, in]`` weight."""
    bound = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


class _Params:
    """Registers named tensors drawn from one RNG stream, in call order."""

    def __init__(self, seed, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.store: dict[str, Tensor] = {}

    def add(self, name, value):
        self.store[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        return self.store[name]

    def linear(self, name, d_in, d_out):
        # the 0.02 ViT convention assumes width ~768; at desk widths it
        # starves the gradients, so linears use the fan-in rule
        self.add(f"{name}.w", fan_in_uniform(self.rng, (d_out, d_in)))
        self.add(f"{name}.b", np.zeros(d_out))

    def conv(self, name, c_out, c_in_per_group, k, bias=True):
        # He init on fan_in: with no batch norm to rescale, the fan_out
        # variant shrinks depthwise activations ~hidden-fold per block
        std = np.sqrt(2.0 / (c_in_per_group * k * k))
        self.add(f"{name}.w", self.rng.standard_normal((c_out, c_in_per_group, k, k)) * std)
        if bias:
            self.add(f"{name}.b", np.zeros(c_out))

    def norm(self, name, d):
        self.add(f"{name}.g", np.ones(d))
        self.add(f"{name}.b", np.zeros(d))


class Backbone:
    """Base class: a config, a parameter dict and a role tag."""

    def __init__(self, cfg: BackboneConfig, params: dict, role: str = "standalone"):
        if role not in ROLES:
            raise ConfigurationError(f"unknown role {role!r}")
        self.config = cfg
        self.params = params
        self.role = role

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _check_input(self, image: Tensor):
        s = self.config.image_side
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (s, s):
            raise DimensionError(
                f"{self.kind} expects images of shape [N, 3, {s}, {s}], got {image.shape}")

    def forward_features(self, image: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, image):
        return self.forward_features(_as_tensor(image, self.dtype))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else Tensor(x.data.astype(dtype))
    return Tensor(np.asarray(x, dtype=dtype))


def _lin(p, name, x):
    return linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _norm(p, name, x):
    return layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


# -- CNN ----------------------------------------------------------------------
def cnn_stage_plan(cfg: BackboneConfig) -> list[tuple[int, int, int, int]]:
    """``(c_in, hidden, c_out, stride)`` for each inverted-residual block."""
    c = cfg.width // 4
    plan = []
    for i in range(cfg.depth):
        stride = 2 if i % 2 == 0 else 1
        c_out = c * 2 if stride == 2 else c
        plan.append((c, c * cfg.expand_ratio, c_out, stride))
        c = c_out
    return plan


class MiniCNN(Backbone):
    """Stem conv, MobileNetV2-style inverted residual blocks, pooled features."""

    def forward_features(self, image: Tensor) -> Tensor:
        self._check_input(image)
        p = self.params
        x = relu6(conv2d(image, p["stem.w"], p["stem.b"], stride=2, padding=1))
        for i, (c_in, hidden, c_out, stride) in enumerate(cnn_stage_plan(self.config)):
            y = relu6(conv2d(x, p[f"blocks.{i}.expand.w"], p[f"blocks.{i}.expand.b"]))
            y = relu6(conv2d(y, p[f"blocks.{i}.dw.w"], p[f"blocks.{i}.dw.b"],
                             stride=stride, padding=1, groups=hidden))
            y = conv2d(y, p[f"blocks.{i}.project.w"], p[f"blocks.{i}.project.b"])
            x = x + y if (stride == 1 and c_in == c_out) else y
        # GradCAM reads this activation and its gradient
        self.last_activation = x
        return _lin(p, "proj", global_avg_pool(x))


def build_mini_cnn(cfg: BackboneConfig, seed: int = 0, dtype=np.float32,
                   role: str = "standalone") -> MiniCNN:
    cfg.validate()
    if cfg.kind != "mini_cnn":
        raise ConfigurationError(f"build_mini_cnn got kind {cfg.kind!r}")
    P = _Params(seed, dtype)
    P.conv("stem", cfg.width // 4, 3, 3)
    plan = cnn_stage_plan(cfg)
    for i, (c_in, hidden, c_out, _) in enumerate(plan):
        P.conv(f"blocks.{i}.expand", hidden, c_in, 1)
        P.conv(f"blocks.{i}.dw", hidden, 1, 3)
        P.conv(f"blocks.{i}.project", c_out, hidden, 1)
    c_last = plan[-1][2] if plan else cfg.width // 4
    P.linear("proj", c_last, cfg.feature_dim)
    return MiniCNN(cfg, P.store, role)


# -- patch-based families -----------------------------------------------------
def patchify(image: Tensor, patch: int) -> Tensor:
    """``[N,3,S,S] -> [N, (S/patch)^2, 3*patch*patch]``, patches in raster order."""
    n, c, s, _ = image.shape
    g = s // patch
    x = reshape(image, (n, c, g, patch, g, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (n, g * g, c * patch * patch))


def _transformer_block(p, pre, x, heads):
    attn = {k: p[f"{pre}.attn.{k}"] for k in
            ("q_w", "q_b", "k_w", "v_w", "v_b", "o_w", "o_b")}
    x = x + multi_head_self_attention(_norm(p, f"{pre}.ln1", x), attn, heads)
    h = gelu(_lin(p, f"{pre}.fc1", _norm(p, f"{pre}.ln2", x)))
    return x + _lin(p, f"{pre}.fc2", h)


class MiniViT(Backbone):
    """Patch embedding, class token(s), pre-norm transformer blocks."""

    n_special = 1

    def token_states(self, image: Tensor) -> Tensor:
        self._check_input(image)
        cfg, p = self.config, self.params
        n = image.shape[0]
        x = _lin(p, "patch_embed", patchify(image, cfg.patch_size))
        special = [broadcast_rows(p["cls_token"], n)]
        if self.n_special == 2:
            special.append(broadcast_rows(p["dist_token"], n))
        x = concat(special + [x], axis=1)
        if cfg.use_pos_embed:
            x = x + p["pos_embed"]
        for i in range(cfg.depth):
            x = _transformer_block(p, f"blocks.{i}", x, cfg.heads)
        return _norm(p, "norm", x)

    def _project(self, state: Tensor) -> Tensor:
        if "proj.w" in self.params:
            return _lin(self.params, "proj", state)
        return state

    def forward_features(self, image: Tensor) -> Tensor:
        return self._project(self.token_states(image)[:, 0])


class MiniDeiT(MiniViT):
    """ViT with an extra distillation token; feature = mean of both token states."""

    n_special = 2

    def forward_tokens(self, image: Tensor) -> tuple[Tensor, Tensor]:
        states = self.token_states(image)
        return self._project(states[:, 0]), self._project(states[:, 1])

    def forward_features(self, image: Tensor) -> Tensor:
        cls_state, dist_state = self.forward_tokens(image)
        return (cls_state + dist_state) * 0.5


def _build_transformer(cfg, seed, dtype, role, cls):
    cfg.validate()
    w = cfg.width
    P = _Params(seed, dtype)
    P.linear("patch_embed", 3 * cfg.patch_size ** 2, w)
    P.add("cls_token", trunc_normal(P.rng, (1, 1, w)))
    if cls.n_special == 2:
        P.add("dist_token", trunc_normal(P.rng, (1, 1, w)))
    if cfg.use_pos_embed:
        P.add("pos_embed", trunc_normal(P.rng, (1, cfg.num_patches + cls.n_special, w)))
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        P.norm(f"{pre}.ln1", w)
        P.add(f"{pre}.attn.q_w", fan_in_uniform(P.rng, (w, w)))
        P.add(f"{pre}.attn.q_b", np.zeros(w))
        P.add(f"{pre}.attn.k_w", fan_in_uniform(P.rng, (w, w)))
        P.add(f"{pre}.attn.v_w", fan_in_uniform(P.rng, (w, w)))
        P.add(f"{pre}.attn.v_b", np.zeros(w))
        P.add(f"{pre}.attn.o_w", fan_in_uniform(P.rng, (w, w)))
        P.add(f"{pre}.attn.o_b", np.zeros(w))
        P.norm(f"{pre}.ln2", w)
        P.linear(f"{pre}.fc1", w, w * cfg.mlp_ratio)
        P.linear(f"{pre}.fc2", w * cfg.mlp_ratio, w)
    P.norm("norm", w)
    if cfg.feature_dim != w:
        P.linear("proj", w, cfg.feature_dim)
    return cls(cfg, P.store, role)


def build_mini_vit(cfg: BackboneConfig, seed: int = 0, dtype=np.float32,
                   role: str = "standalone") -> MiniViT:
    if cfg.kind != "mini_vit":
        raise ConfigurationError(f"build_mini_vit got kind {cfg.kind!r}")
    return _build_transformer(cfg, seed, dtype, role, MiniViT)


def build_mini_deit(cfg: BackboneConfig, seed: int = 0, dtype=np.float32,
                    role: str = "standalone") -> MiniDeiT:
    if cfg.kind != "mini_deit":
        raise ConfigurationError(f"build_mini_deit got kind {cfg.kind!r}")
    return _build_transformer(cfg, seed, dtype, role, MiniDeiT)


# -- MLP-Mixer -----------------------------------------------------------------
def mixer_token_hidden(cfg: BackboneConfig) -> int:
    return 2 * cfg.num_patches


class MiniMixer(Backbone):
    """Patch embedding, token-mixing + channel-mixing MLP blocks, mean pool."""

    def forward_features(self, image: Tensor) -> Tensor:
        self._check_input(image)
        cfg, p = self.config, self.params
        x = _lin(p, "patch_embed", patchify(image, cfg.patch_size))  # N,T,W
        for i in range(cfg.depth):
            pre = f"blocks.{i}"
            y = transpose(_norm(p, f"{pre}.ln1", x), (0, 2, 1))  # N,W,T
            y = _lin(p, f"{pre}.token_fc2", gelu(_lin(p, f"{pre}.token_fc1", y)))
            x = x + transpose(y, (0, 2, 1))
            y = gelu(_lin(p, f"{pre}.channel_fc1", _norm(p, f"{pre}.ln2", x)))
            x = x + _lin(p, f"{pre}.channel_fc2", y)
        if cfg.depth:
            x = _norm(p, "norm", x)
        pooled = x.mean(axis=1)
        return _lin(p, "proj", pooled) if "proj.w" in p else pooled


def build_mini_mixer(cfg: BackboneConfig, seed: int = 0, dtype=np.float32,
                     role: str = "standalone") -> MiniMixer:
    cfg.validate()
    if cfg.kind != "mini_mixer":
        raise ConfigurationError(f"build_mini_mixer got kind {cfg.kind!r}")
    w, t = cfg.width, cfg.num_patches
    th = mixer_token_hidden(cfg)
    P = _Params(seed, dtype)
    P.linear("patch_embed", 3 * cfg.patch_size ** 2, w)
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        P.norm(f"{pre}.ln1", w)
        P.linear(f"{pre}.token_fc1", t, th)
        P.linear(f"{pre}.token_fc2", th, t)
        P.norm(f"{pre}.ln2", w)
        P.linear(f"{pre}.channel_fc1", w, w * cfg.mlp_ratio)
        P.linear(f"{pre}.channel_fc2", w * cfg.mlp_ratio, w)
    if cfg.depth:
        P.norm("norm", w)
    if cfg.feature_dim != w:
        P.linear("proj", w, cfg.feature_dim)
    return MiniMixer(cfg, P.store, role)


BUILDERS = {
    "mini_cnn": build_mini_cnn,
    "mini_vit": build_mini_vit,
    "mini_deit": build_mini_deit,
    "mini_mixer": build_mini_mixer,
}


def build_backbone(cfg: BackboneConfig, seed: int = 0, dtype=np.float32,
                   role: str = "standalone") -> Backbone:
    cfg.validate()
    return BUILDERS[cfg.kind](cfg, seed=seed, dtype=dtype, role=role)


def forward_features(b: Backbone, image) -> Tensor:
    return b(image)
