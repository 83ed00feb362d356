import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmim import checkpoint, optim, vit
from fedmim import tensor as T
from fedmim.tensor import Tensor

import oracles

SMALL = vit.ViTConfig(image_size=16, patch_size=4, enc_dim=16, enc_depth=2, enc_heads=2,
                      dec_dim=8, dec_depth=1, dec_heads=2)


def _model(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return vit.init_encoder(cfg, rng), vit.init_decoder(cfg, rng)


def _images(cfg, b=2, seed=0):
    return np.random.default_rng(seed).random((b, cfg.channels, cfg.image_size, cfg.image_size)).astype(np.float32)


def test_patchify_matches_loop_order():
    imgs = _images(SMALL, 1)
    np.testing.assert_array_equal(vit.patchify(imgs, SMALL)[0], oracles.patch_vectors(imgs[0], 4).astype(np.float32))


def test_unpatchify_inverts_patchify():
    imgs = _images(vit.ViTConfig(), 3)
    assert np.array_equal(vit.unpatchify(vit.patchify(imgs, vit.ViTConfig()), vit.ViTConfig()), imgs)


def test_patchify_rejects_wrong_size():
    with pytest.raises(T.ShapeError):
        vit.patchify(np.zeros((1, 3, 20, 20), np.float32), vit.ViTConfig())


@pytest.mark.parametrize("n,expected", [(4, 2), (16, 9), (49, 29), (196, 117), (100, 60)])
def test_default_mask_budget_is_floor_sixty_percent(n, expected):
    assert vit.mask_count(n, 0.6) == expected == math.floor(0.6 * n + 1e-9)


def test_mask_count_absorbs_binary_rounding():
    assert vit.mask_count(100, 0.57) == 57


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.floats(0.0, 0.95), st.integers(0, 2 ** 31 - 1))
def test_sample_mask_is_sorted_unique_subset(n, ratio, seed):
    m = vit.sample_mask(n, ratio, np.random.default_rng(seed))
    assert len(m) == vit.mask_count(n, ratio)
    assert np.all(np.diff(m) > 0) and (len(m) == 0 or (m.min() >= 0 and m.max() < n))


def test_mask_selection_is_uniform_over_patches():
    n, k, draws = 16, vit.mask_count(16, 0.6), 6000
    rng = np.random.default_rng(11)
    hits = np.zeros(n)
    for _ in range(draws):
        hits[vit.sample_mask(n, 0.6, rng)] += 1
    p = k / n
    sigma = math.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(hits - draws * p) < 5 * sigma)


def test_sincos_table_matches_loop_oracle():
    np.testing.assert_allclose(vit.sincos_pos_embed(16, 4), oracles.sincos_table(16, 4), atol=1e-6)


def test_positional_table_not_in_schema():
    enc, dec = _model(SMALL)
    assert not any("pos" in k for k in list(enc) + list(dec))


@pytest.mark.parametrize("cfg", [SMALL, vit.ViTConfig(image_size=16, patch_size=8, enc_dim=8, enc_depth=1, enc_heads=2,
                                                      dec_dim=8, dec_depth=2, dec_heads=4, norm_pix_loss=False)])
def test_mae_loss_matches_float64_oracle(cfg):
    enc, dec = _model(cfg, 3)
    imgs = _images(cfg, 2, 4)
    rng = np.random.default_rng(5)
    masks = [vit.sample_mask(cfg.num_patches, cfg.mask_ratio, rng) for _ in range(2)]
    _, loss = vit.mae_forward(imgs, enc, dec, cfg, masks)
    expected = oracles.mae_loss(imgs, vit.to_arrays(enc), vit.to_arrays(dec), cfg, masks)
    assert abs(loss.item() - expected) <= 1e-5


def test_unmasked_target_pixels_get_exactly_zero_gradient():
    enc, dec = _model(SMALL)
    imgs = _images(SMALL)
    rng = np.random.default_rng(0)
    masks = [vit.sample_mask(SMALL.num_patches, 0.6, rng) for _ in range(2)]
    target = Tensor(vit.patchify(imgs, SMALL), requires_grad=True)
    _, loss = vit.mae_forward(imgs, enc, dec, SMALL, masks, target=target)
    T.backward(loss)
    for b, m in enumerate(masks):
        visible = np.setdiff1d(np.arange(SMALL.num_patches), m)
        assert np.all(target.grad[b, visible] == 0.0)
        assert np.any(target.grad[b, m] != 0.0)


def test_mask_sets_must_match_batch():
    enc, dec = _model(SMALL)
    with pytest.raises(T.ShapeError):
        vit.mae_forward(_images(SMALL, 2), enc, dec, SMALL, [np.array([0, 1])])
    with pytest.raises(ValueError):
        vit.mae_forward(_images(SMALL, 1), enc, dec, SMALL, [np.array([0, 99])])


def test_encoder_sees_only_visible_tokens():
    enc, _ = _model(SMALL)
    x = vit._embed(vit.patchify(_images(SMALL, 1), SMALL), enc, SMALL, keep=np.array([[0, 5, 7]]))
    assert x.shape == (1, 3, SMALL.enc_dim)


def test_encode_taps_raw_block_outputs():
    enc, _ = _model(SMALL)
    out, taps = vit.encode(_images(SMALL, 1), enc, SMALL, taps=(1, 2))
    assert out.shape == (1, SMALL.num_patches, SMALL.enc_dim) and len(taps) == 2


def test_init_is_deterministic():
    a, _ = _model(SMALL, 9)
    b, _ = _model(SMALL, 9)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert vit.schema(a) == vit.model_schemas(SMALL)[0]


def test_schema_order_is_documented_order():
    enc, dec = _model(SMALL)
    names = list(enc)
    assert names[:2] == ["patch_embed.weight", "patch_embed.bias"] and names[-2:] == ["norm.weight", "norm.bias"]
    assert list(dec)[2] == "mask_token"


def test_training_lowers_reconstruction_loss():
    enc, dec = _model(SMALL)
    params = {**{"e." + k: v for k, v in enc.items()}, **{"d." + k: v for k, v in dec.items()}}
    opt = optim.init_optimizer("adamw", params, lr=3e-3, weight_decay=0.0)
    imgs = _images(SMALL, 4)
    rng = np.random.default_rng(1)
    masks = [vit.sample_mask(SMALL.num_patches, 0.6, rng) for _ in range(4)]
    losses = []
    for _ in range(40):
        T.zero_grad(params)
        _, loss = vit.mae_forward(imgs, enc, dec, SMALL, masks)
        T.backward(loss)
        optim.optimizer_step(opt, params)
        losses.append(loss.item())
    assert losses[-1] < 0.8 * losses[0]


@pytest.mark.parametrize("kwargs", [dict(image_size=30), dict(enc_heads=5), dict(mask_ratio=1.0), dict(dec_heads=3)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        vit.ViTConfig(**kwargs)


# checkpoints


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    enc, _ = _model(SMALL)
    digest = checkpoint.save(tmp_path / "e.ckpt", enc, {"vit": SMALL.to_dict()})
    cfg, arrays = checkpoint.load(tmp_path / "e.ckpt")
    assert cfg == {"vit": SMALL.to_dict()}
    assert list(arrays) == list(enc)
    assert all(arrays[k].tobytes() == enc[k].data.tobytes() for k in enc)
    assert checkpoint.file_hash(tmp_path / "e.ckpt") == digest


def test_checkpoint_encoding_is_deterministic():
    enc, _ = _model(SMALL)
    assert checkpoint.encode(enc, {"a": 1, "b": [2]}) == checkpoint.encode(dict(enc), {"b": [2], "a": 1})


def test_checkpoint_detects_corruption():
    enc, _ = _model(SMALL)
    blob = bytearray(checkpoint.encode(enc))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(bytes(blob))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"NOTACKPT" + bytes(blob[8:]))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(bytes(blob[:20]))
