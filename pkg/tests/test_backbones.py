import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvernet_lab.backbones import (BackboneConfig, MiniDeiT, build_backbone,
                                   build_mini_cnn, build_mini_deit,
                                   build_mini_mixer, build_mini_vit,
                                   forward_features, mixer_token_hidden)
from rvernet_lab.perturb import permute_patches
from rvernet_lab.tensor import ConfigurationError, DimensionError, Tensor


def _cfg(kind, **kw):
    base = dict(kind=kind, feature_dim=16, depth=2, width=16, heads=2, patch_size=16, image_side=32)
    base.update(kw)
    return BackboneConfig(**base)


# -- analytic parameter counts --------------------------------------------------
def cnn_count(width, depth, feature_dim, expand=2):
    c = width // 4
    n = c * 3 * 9 + c  # stem
    for i in range(depth):
        c_out = 2 * c if i % 2 == 0 else c
        h = c * expand
        n += (h * c + h) + (h * 9 + h) + (c_out * h + c_out)
        c = c_out
    return n + c * feature_dim + feature_dim


def vit_count(width, depth, feature_dim, patch, side, tokens=1, mlp=4, pos=True):
    w, t = width, (side // patch) ** 2
    n = (3 * patch * patch + 1) * w + tokens * w
    if pos:
        n += (t + tokens) * w
    # two norms, q/v/o with bias, k without, then the MLP
    per_block = 4 * w + (4 * w * w + 3 * w) + (w * mlp * w + mlp * w) + (mlp * w * w + w)
    n += depth * per_block + 2 * w
    if feature_dim != w:
        n += w * feature_dim + feature_dim
    return n


def mixer_count(width, depth, feature_dim, patch, side, mlp=4):
    w, t = width, (side // patch) ** 2
    th = 2 * t
    n = (3 * patch * patch + 1) * w
    n += depth * (4 * w + (t * th + th) + (th * t + t) + (w * mlp * w + mlp * w) + (mlp * w * w + w))
    if depth:
        n += 2 * w
    if feature_dim != w:
        n += w * feature_dim + feature_dim
    return n


def test_cnn_count_at_desk_scale():
    cfg = BackboneConfig(kind="mini_cnn", depth=4, width=128, feature_dim=64, image_side=64)
    assert build_mini_cnn(cfg).num_parameters() == cnn_count(128, 4, 64)


@pytest.mark.parametrize("kind,tokens", [("mini_vit", 1), ("mini_deit", 2)])
@pytest.mark.parametrize("pos", [True, False])
@pytest.mark.parametrize("fd", [16, 24])
def test_transformer_counts(kind, tokens, pos, fd):
    cfg = _cfg(kind, use_pos_embed=pos, feature_dim=fd)
    assert build_backbone(cfg).num_parameters() == vit_count(16, 2, fd, 16, 32, tokens, pos=pos)


@pytest.mark.parametrize("depth", [0, 1, 3])
def test_mixer_counts(depth):
    cfg = _cfg("mini_mixer", depth=depth, feature_dim=8)
    assert build_mini_mixer(cfg).num_parameters() == mixer_count(16, depth, 8, 16, 32)
    assert mixer_token_hidden(cfg) == 8


# -- config validation ------------------------------------------------------------
@pytest.mark.parametrize("bad", [
    dict(kind="resnet"), dict(feature_dim=0), dict(image_side=30), dict(heads=3),
    dict(depth=-1), dict(kind="mini_cnn", width=10)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigurationError):
        build_backbone(_cfg(bad.pop("kind", "mini_vit"), **bad))


def test_builder_kind_mismatch_and_unknown_keys():
    with pytest.raises(ConfigurationError):
        build_mini_vit(_cfg("mini_cnn"))
    with pytest.raises(ConfigurationError):
        BackboneConfig.from_dict({"kind": "mini_vit", "patch": 8})
    cfg = _cfg("mini_deit")
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


# -- forward behaviour ---------------------------------------------------------------
KINDS = ["mini_cnn", "mini_vit", "mini_deit", "mini_mixer"]


@pytest.mark.parametrize("kind", KINDS)
def test_shape_finiteness_and_batch_consistency(kind):
    b = build_backbone(_cfg(kind))
    zero = forward_features(b, np.zeros((2, 3, 32, 32), np.float32))
    assert zero.shape == (2, 16) and np.isfinite(zero.data).all()
    x = np.repeat(np.random.default_rng(0).random((1, 3, 32, 32), dtype=np.float32), 2, axis=0)
    out = b(x).data
    assert np.array_equal(out[0], out[1])


@pytest.mark.parametrize("kind", KINDS)
def test_same_seed_bitwise(kind):
    a = build_backbone(_cfg(kind), seed=4)
    b = build_backbone(_cfg(kind), seed=4)
    c = build_backbone(_cfg(kind), seed=5)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params
               if a.params[k].data.std() > 0)


@pytest.mark.parametrize("kind", KINDS)
def test_wrong_spatial_size(kind):
    with pytest.raises(DimensionError):
        build_backbone(_cfg(kind))(np.zeros((1, 3, 48, 48), np.float32))


@pytest.mark.parametrize("kind", KINDS)
def test_f64_matches_f32(kind):
    x = np.random.default_rng(1).random((2, 3, 32, 32))
    f32 = build_backbone(_cfg(kind), seed=2, dtype=np.float32)(x.astype(np.float32)).data
    f64 = build_backbone(_cfg(kind), seed=2, dtype=np.float64)(x).data
    assert f32.dtype == np.float32 and f64.dtype == np.float64
    assert np.allclose(f32, f64, rtol=1e-3, atol=1e-3 * np.abs(f64).max())


def test_token_counts():
    x = Tensor(np.zeros((1, 3, 64, 64), np.float32))
    vit = build_mini_vit(_cfg("mini_vit", image_side=64))
    deit = build_mini_deit(_cfg("mini_deit", image_side=64))
    assert vit.token_states(x).shape == (1, 17, 16)
    assert deit.token_states(x).shape == (1, 18, 16)
    cls_s, dist_s = deit.forward_tokens(x)
    assert cls_s.shape == dist_s.shape == (1, 16)


def test_deit_feature_is_token_mean():
    deit = build_mini_deit(_cfg("mini_deit", feature_dim=8), dtype=np.float64)
    x = np.random.default_rng(3).random((2, 3, 32, 32))
    a, b = deit.forward_tokens(Tensor(x))
    assert np.allclose(deit(x).data, (a.data + b.data) / 2, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["mini_vit", "mini_deit"]))
def test_no_pos_embed_is_patch_permutation_invariant(seed, kind):
    b = build_backbone(_cfg(kind, use_pos_embed=False, image_side=64), seed=1)
    x = np.random.default_rng(seed).random((2, 3, 64, 64), dtype=np.float32)
    xp = permute_patches(x, 16, seed=seed)
    assert np.allclose(b(xp).data, b(x).data, atol=1e-5)


def test_pos_embed_breaks_invariance():
    b = build_mini_vit(_cfg("mini_vit", image_side=64), seed=1)
    x = np.random.default_rng(0).random((2, 3, 64, 64), dtype=np.float32)
    assert not np.allclose(b(permute_patches(x, 16, seed=0)).data, b(x).data, atol=1e-5)


def test_cnn_not_shift_invariant():
    b = build_mini_cnn(_cfg("mini_cnn"), seed=0, dtype=np.float64)
    x = np.random.default_rng(0).random((1, 3, 32, 32))
    assert not np.allclose(b(x).data, b(np.roll(x, 5, axis=-1)).data)


def test_mixer_depth0_is_pooled_embedding():
    m = build_mini_mixer(_cfg("mini_mixer", depth=0, feature_dim=16), dtype=np.float64)
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    p = m.params
    patches = x.reshape(2, 3, 2, 16, 2, 16).transpose(0, 2, 4, 1, 3, 5).reshape(2, 4, -1)
    emb = patches @ p["patch_embed.w"].data.T + p["patch_embed.b"].data
    assert np.allclose(m(x).data, emb.mean(axis=1), atol=1e-12)


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def _ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def test_mixer_identity_token_mixing_oracle():
    # zeroed token MLPs make the token sublayer an identity skip; the result must
    # equal a channel-mixing-only network written out in numpy
    cfg = _cfg("mini_mixer", depth=2, feature_dim=16)
    m = build_mini_mixer(cfg, seed=3, dtype=np.float64)
    p = {k: v.data for k, v in m.params.items()}
    for i in range(2):
        for name in ("token_fc1", "token_fc2"):
            m.params[f"blocks.{i}.{name}.w"].data[:] = 0
            m.params[f"blocks.{i}.{name}.b"].data[:] = 0
    x = np.random.default_rng(5).random((2, 3, 32, 32))
    h = x.reshape(2, 3, 2, 16, 2, 16).transpose(0, 2, 4, 1, 3, 5).reshape(2, 4, -1)
    h = h @ p["patch_embed.w"].T + p["patch_embed.b"]
    for i in range(2):
        pre = f"blocks.{i}"
        y = _ln(h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        y = _gelu(y @ p[f"{pre}.channel_fc1.w"].T + p[f"{pre}.channel_fc1.b"])
        h = h + y @ p[f"{pre}.channel_fc2.w"].T + p[f"{pre}.channel_fc2.b"]
    h = _ln(h, p["norm.g"], p["norm.b"]).mean(axis=1)
    assert np.allclose(m(x).data, h, atol=1e-12)


def test_deit_is_a_vit():
    assert issubclass(MiniDeiT, type(build_mini_vit(_cfg("mini_vit"))))
