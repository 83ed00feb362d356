"""Small Vision Transformer masked autoencoder.

Parameter schemas (insertion order is the schema order used by checkpoints
and by aggregation)::

    encoder: patch_embed.{weight,bias}
             blocks.{i}.norm1.{weight,bias}
             blocks.{i}.attn.qkv.{weight,bias}
             blocks.{i}.attn.proj.{weight,bias}
             blocks.{i}.norm2.{weight,bias}
             blocks.{i}.mlp.fc1.{weight,bias}
             blocks.{i}.mlp.fc2.{weight,bias}
             norm.{weight,bias}
    decoder: decoder_embed.{weight,bias}
             mask_token
             decoder_blocks.{i}.<same block layout>
             decoder_norm.{weight,bias}
             decoder_pred.{weight,bias}

Linear weights are stored ``[in, out]``. Positional embeddings are fixed 2-D
sin-cos tables derived from the config and are not part of either schema.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from fedmim import tensor as T
from fedmim.tensor import DTYPE, ShapeError, Tensor

MLP_RATIO = 4


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 16
    channels: int = 3
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    mask_ratio: float = 0.6
    norm_pix_loss: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.enc_dim % self.enc_heads:
            raise ValueError(f"enc_dim {self.enc_dim} not divisible by enc_heads {self.enc_heads}")
        if self.dec_dim % self.dec_heads:
            raise ValueError(f"dec_dim {self.dec_dim} not divisible by dec_heads {self.dec_heads}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if min(self.image_size, self.patch_size, self.channels, self.enc_depth, self.dec_depth) < 1:
            raise ValueError("ViTConfig sizes must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def num_masked(self) -> int:
        return mask_count(self.num_patches, self.mask_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class PatchBatch:
    patches: np.ndarray  # [B, N, patch_dim]
    mask_sets: list  # per-sample sorted masked indices
    visible_sets: list


# ---------------------------------------------------------------------------
# patches and masks


def patchify(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    """[B, C, H, W] -> [B, N, p*p*C], patch vectors ordered (row, col, channel)."""
    images = np.asarray(images, dtype=DTYPE)
    if images.ndim != 4:
        raise ShapeError(f"patchify: expected [B, C, H, W], got {images.shape}")
    b, c, h, w = images.shape
    p = config.patch_size
    if c != config.channels or h != config.image_size or w != config.image_size:
        raise ShapeError(f"patchify: images {images.shape} do not match config "
                         f"(C={config.channels}, size={config.image_size})")
    if h % p or w % p:
        raise ShapeError(f"patchify: size {h}x{w} not divisible by patch {p}")
    g = h // p
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(x.reshape(b, g * g, p * p * c))


def unpatchify(patches: np.ndarray, config: ViTConfig) -> np.ndarray:
    patches = np.asarray(patches, dtype=DTYPE)
    b, n, _ = patches.shape
    p, c, g = config.patch_size, config.channels, config.grid
    if n != g * g or patches.shape[2] != config.patch_dim:
        raise ShapeError(f"unpatchify: patches {patches.shape} do not match config")
    x = patches.reshape(b, g, g, p, p, c).transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(b, c, g * p, g * p))


def mask_count(num_patches: int, mask_ratio: float) -> int:
    # the epsilon absorbs binary rounding such as 0.57 * 100 = 56.99999999999999
    return int(math.floor(mask_ratio * num_patches + 1e-9))


def sample_mask(num_patches: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random subset of ``floor(mask_ratio * num_patches)`` indices, sorted."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    k = mask_count(num_patches, mask_ratio)
    return np.sort(rng.permutation(num_patches)[:k])


def make_patch_batch(images: np.ndarray, config: ViTConfig, rng: np.random.Generator) -> PatchBatch:
    patches = patchify(images, config)
    n = config.num_patches
    masks, visible = [], []
    for _ in range(patches.shape[0]):
        m = sample_mask(n, config.mask_ratio, rng)
        masks.append(m)
        visible.append(np.setdiff1d(np.arange(n), m))
    return PatchBatch(patches, masks, visible)


@lru_cache(maxsize=None)
def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sin-cos positional table ``[grid*grid, dim]`` (half the channels per axis)."""
    if dim % 4:
        raise ValueError(f"sin-cos positional embedding needs dim divisible by 4, got {dim}")
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def axis_embed(pos):
        omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4.0))
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    table = np.concatenate([axis_embed(xs), axis_embed(ys)], axis=1).astype(DTYPE)
    table.setflags(write=False)
    return table


# ---------------------------------------------------------------------------
# parameters


def _xavier(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)


def _linear_params(out: dict, prefix: str, rng, fan_in: int, fan_out: int) -> None:
    out[prefix + ".weight"] = _xavier(rng, fan_in, fan_out)
    out[prefix + ".bias"] = np.zeros(fan_out, DTYPE)


def _norm_params(out: dict, prefix: str, dim: int) -> None:
    out[prefix + ".weight"] = np.ones(dim, DTYPE)
    out[prefix + ".bias"] = np.zeros(dim, DTYPE)


def _block_params(out: dict, prefix: str, rng, dim: int) -> None:
    _norm_params(out, prefix + ".norm1", dim)
    _linear_params(out, prefix + ".attn.qkv", rng, dim, 3 * dim)
    _linear_params(out, prefix + ".attn.proj", rng, dim, dim)
    _norm_params(out, prefix + ".norm2", dim)
    _linear_params(out, prefix + ".mlp.fc1", rng, dim, MLP_RATIO * dim)
    _linear_params(out, prefix + ".mlp.fc2", rng, MLP_RATIO * dim, dim)


def init_encoder(config: ViTConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    raw: dict[str, np.ndarray] = {}
    _linear_params(raw, "patch_embed", rng, config.patch_dim, config.enc_dim)
    for i in range(config.enc_depth):
        _block_params(raw, f"blocks.{i}", rng, config.enc_dim)
    _norm_params(raw, "norm", config.enc_dim)
    return to_tensors(raw, requires_grad=True)


def init_decoder(config: ViTConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    raw: dict[str, np.ndarray] = {}
    _linear_params(raw, "decoder_embed", rng, config.enc_dim, config.dec_dim)
    raw["mask_token"] = (0.02 * rng.standard_normal((1, 1, config.dec_dim))).astype(DTYPE)
    for i in range(config.dec_depth):
        _block_params(raw, f"decoder_blocks.{i}", rng, config.dec_dim)
    _norm_params(raw, "decoder_norm", config.dec_dim)
    _linear_params(raw, "decoder_pred", rng, config.dec_dim, config.patch_dim)
    return to_tensors(raw, requires_grad=True)


def to_tensors(raw: dict, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in raw.items()}


def to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def schema(params: dict) -> list[tuple[str, tuple]]:
    return [(k, tuple(np.shape(v.data if isinstance(v, Tensor) else v))) for k, v in params.items()]


@lru_cache(maxsize=None)
def model_schemas(config: ViTConfig) -> tuple[list, list]:
    """(encoder schema, decoder schema) implied by a config."""
    rng = np.random.default_rng(0)
    return schema(init_encoder(config, rng)), schema(init_decoder(config, rng))


def count_params(params: dict) -> int:
    return sum(int(np.prod(shape)) for _, shape in schema(params))


# ---------------------------------------------------------------------------
# forward


def _attention(x: Tensor, p: dict, prefix: str, heads: int, qkv_delta=None) -> Tensor:
    b, n, d = x.shape
    hd = d // heads
    qkv = T.linear(x, p[prefix + ".qkv.weight"], p[prefix + ".qkv.bias"])
    if qkv_delta is not None:
        delta = qkv_delta(x)
        if delta is not None:
            qkv = T.add(qkv, delta)
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax(T.scale(T.matmul(q, T.swap_last(k)), hd ** -0.5))
    out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
    return T.linear(out, p[prefix + ".proj.weight"], p[prefix + ".proj.bias"])


def _block(x: Tensor, p: dict, prefix: str, heads: int, qkv_delta=None) -> Tensor:
    h = T.layer_norm(x, p[prefix + ".norm1.weight"], p[prefix + ".norm1.bias"])
    x = T.add(x, _attention(h, p, prefix + ".attn", heads, qkv_delta))
    h = T.layer_norm(x, p[prefix + ".norm2.weight"], p[prefix + ".norm2.bias"])
    h = T.gelu(T.linear(h, p[prefix + ".mlp.fc1.weight"], p[prefix + ".mlp.fc1.bias"]))
    return T.add(x, T.linear(h, p[prefix + ".mlp.fc2.weight"], p[prefix + ".mlp.fc2.bias"]))


def _embed(patches: np.ndarray, enc: dict, config: ViTConfig, keep=None) -> Tensor:
    pos = sincos_pos_embed(config.enc_dim, config.grid)
    x = T.linear(Tensor._wrap(patches), enc["patch_embed.weight"], enc["patch_embed.bias"])
    x = T.add(x, Tensor._wrap(pos[None]))
    if keep is not None:
        x = T.gather_rows(x, keep)
    return x


def run_encoder(x: Tensor, enc: dict, config: ViTConfig, adapters=None, taps=()) -> tuple[Tensor, list]:
    """Run the transformer blocks and final norm.

    ``adapters`` maps block index to a callable producing an additive qkv
    delta; ``taps`` lists 1-based block depths whose outputs are returned.
    """
    tapped = []
    for i in range(config.enc_depth):
        delta = adapters.get(i) if adapters else None
        x = _block(x, enc, f"blocks.{i}", config.enc_heads, delta)
        if i + 1 in taps:
            tapped.append(x)
    return T.layer_norm(x, enc["norm.weight"], enc["norm.bias"]), tapped


def encode(images: np.ndarray, enc: dict, config: ViTConfig, adapters=None, taps=()):
    """Encode every patch (no masking). Returns ``[B, N, enc_dim]`` features,
    plus the tapped block outputs when ``taps`` is given."""
    patches = patchify(images, config)
    x = _embed(patches, enc, config)
    out, tapped = run_encoder(x, enc, config, adapters, taps)
    return (out, tapped) if taps else out


def _check_masks(mask_sets, batch: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    if len(mask_sets) != batch:
        raise ShapeError(f"mae_forward: {len(mask_sets)} mask sets for batch of {batch}")
    masked = np.asarray([np.sort(np.asarray(m, dtype=np.int64)) for m in mask_sets])
    if masked.ndim != 2 or masked.shape[1] == 0:
        raise ValueError("mae_forward: mask set must be nonempty and equal-sized across the batch")
    if masked.min() < 0 or masked.max() >= n:
        raise ValueError("mae_forward: masked index out of range")
    visible = np.asarray([np.setdiff1d(np.arange(n), m) for m in masked]).reshape(batch, -1)
    if visible.shape[1] + masked.shape[1] != n:
        raise ValueError("mae_forward: mask set contains duplicates")
    return masked, visible


def mae_forward(images: np.ndarray, enc: dict, dec: dict, config: ViTConfig, mask_sets,
                target: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Masked-autoencoder forward pass.

    The encoder sees only visible patches; the decoder gets encoded visible
    tokens plus mask tokens, unshuffled back to patch order, with positional
    embeddings. Returns ``(reconstruction [B, N, patch_dim], loss)`` where the
    loss averages per-patch mean squared pixel error over masked patches only.
    ``target`` defaults to the input patches; pass a tensor to differentiate
    with respect to it.
    """
    patches = patchify(images, config)
    b, n, _ = patches.shape
    masked, visible = _check_masks(mask_sets, b, n)
    x = _embed(patches, enc, config, keep=visible)
    latent, _ = run_encoder(x, enc, config)

    y = T.linear(latent, dec["decoder_embed.weight"], dec["decoder_embed.bias"])
    fill = T.add(Tensor._wrap(np.zeros((b, masked.shape[1], config.dec_dim), DTYPE)), dec["mask_token"])
    y = T.concat([y, fill], axis=1)
    restore = np.argsort(np.concatenate([visible, masked], axis=1), axis=1, kind="stable")
    y = T.gather_rows(y, restore)
    y = T.add(y, Tensor._wrap(sincos_pos_embed(config.dec_dim, config.grid)[None]))
    for i in range(config.dec_depth):
        y = _block(y, dec, f"decoder_blocks.{i}", config.dec_heads)
    y = T.layer_norm(y, dec["decoder_norm.weight"], dec["decoder_norm.bias"])
    pred = T.linear(y, dec["decoder_pred.weight"], dec["decoder_pred.bias"])

    if target is None:
        target = Tensor._wrap(patches)
    if config.norm_pix_loss:
        target = T.layer_norm(target, eps=1e-6)
    mask = np.zeros((b, n), dtype=bool)
    mask[np.arange(b)[:, None], masked] = True
    return pred, T.mse_subset(pred, target, mask)
