"""Downstream adaptation of a pretrained encoder.

Classification: frozen encoder + LoRA on the query/value projections +
a linear head over mean-pooled tokens. Segmentation: the same adapted
encoder feeding a UNETR-lite decoder, a ladder of 2x stages from the token
grid to full resolution with skip inputs from encoder blocks at depths
1/4, 2/4 and 3/4 of ``enc_depth`` (depth 4/4 seeds the ladder).

Each stage:  h <- gelu(mix(shuffle2x(up(h)) + nearest_up(skip_proj(tap))))
where ``up`` is a linear token projection to ``4 * channels`` whose output
is rearranged into a 2x2 sub-grid (a stride-2 transposed convolution
expressed with matmul + reshape), ``nearest_up`` repeats skip features to
the current resolution and ``mix`` is a pointwise linear layer.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from fedmim import checkpoint, metrics, optim, vit
from fedmim import tensor as T
from fedmim.data import SEG_KINDS, DatasetManifest
from fedmim.tensor import DTYPE, Tensor

log = logging.getLogger(__name__)

TARGETS = ("query", "value")
_TARGET_SLOT = {"query": 0, "key": 1, "value": 2}
OUTPUTS = {"multilabel": 8, "multiclass": 10, "binary": 1, "severity": 5, "seg-disc": 1, "seg-vessel": 1}


class FinetuneError(ValueError):
    pass


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple = TARGETS
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        bad = [t for t in self.targets if t not in _TARGET_SLOT]
        if bad:
            raise ValueError(f"unknown LoRA targets {bad}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 200
    lr: float = 3e-3
    batch_size: int = 8
    weight_decay: float = 0.0
    seg_loss: str = "dice-focal"
    seg_channels: int = 16
    unfreeze_backbone: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.seg_loss not in ("dice", "dice-focal"):
            raise ValueError(f"seg_loss must be 'dice' or 'dice-focal', got {self.seg_loss!r}")


def num_outputs(task: str) -> int:
    try:
        return OUTPUTS[task]
    except KeyError:
        raise FinetuneError(f"unknown task kind {task!r}") from None


def tap_depths(enc_depth: int) -> tuple[int, ...]:
    return tuple(sorted({max(1, round(enc_depth * q / 4)) for q in (1, 2, 3, 4)}))


# ---------------------------------------------------------------------------
# parameters


def init_lora(vit_config: vit.ViTConfig, lora_config: LoRAConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, r = vit_config.enc_dim, lora_config.rank
    raw = {}
    for i in range(vit_config.enc_depth):
        for t in lora_config.targets:
            raw[f"blocks.{i}.attn.{t}.lora_A"] = (lora_config.init_std * rng.standard_normal((d, r))).astype(DTYPE)
            raw[f"blocks.{i}.attn.{t}.lora_B"] = np.zeros((r, d), DTYPE)
    return vit.to_tensors(raw, requires_grad=True)


def _num_stages(vit_config: vit.ViTConfig) -> int:
    stages = int(round(math.log2(vit_config.patch_size)))
    if 2 ** stages != vit_config.patch_size:
        raise FinetuneError(f"segmentation head needs a power-of-two patch size, got {vit_config.patch_size}")
    return stages


def init_head(vit_config: vit.ViTConfig, task: str, rng: np.random.Generator, seg_channels: int = 16) -> dict[str, Tensor]:
    d = vit_config.enc_dim
    raw = {}
    if task not in SEG_KINDS:
        raw["head.weight"] = (0.02 * rng.standard_normal((d, num_outputs(task)))).astype(DTYPE)
        raw["head.bias"] = np.zeros(num_outputs(task), DTYPE)
        return vit.to_tensors(raw, requires_grad=True)
    c = seg_channels
    _lin(raw, "seg.proj", rng, d, c)
    n_skips = len(tap_depths(vit_config.enc_depth)) - 1
    for s in range(_num_stages(vit_config)):
        _lin(raw, f"seg.up{s}", rng, c, 4 * c)
        if s < n_skips:
            _lin(raw, f"seg.skip{s}", rng, d, c)
        _lin(raw, f"seg.mix{s}", rng, c, c)
    _lin(raw, "seg.out", rng, c, 1)
    return vit.to_tensors(raw, requires_grad=True)


def _lin(raw, prefix, rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    raw[prefix + ".weight"] = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)
    raw[prefix + ".bias"] = np.zeros(fan_out, DTYPE)


def trainable_fraction(vit_config: vit.ViTConfig, lora_config: LoRAConfig, task: str, seg_channels: int = 16) -> float:
    """(|lora| + |head|) / (|encoder| + |lora| + |head|), from shapes alone."""
    d, depth = vit_config.enc_dim, vit_config.enc_depth
    block = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
    encoder = vit_config.patch_dim * d + d + depth * block + 2 * d
    lora = depth * len(lora_config.targets) * 2 * d * lora_config.rank
    if task in SEG_KINDS:
        c = seg_channels
        n_skips = len(tap_depths(depth)) - 1
        stages = _num_stages(vit_config)
        head = (d * c + c) + stages * ((c * 4 * c + 4 * c) + (c * c + c)) + min(n_skips, stages) * (d * c + c) + (c + 1)
    else:
        head = d * num_outputs(task) + num_outputs(task)
    return (lora + head) / (encoder + lora + head)


# ---------------------------------------------------------------------------
# model


def _qkv_adapters(lora: dict, vit_config: vit.ViTConfig, lora_config: LoRAConfig) -> dict:
    d = vit_config.enc_dim
    s = lora_config.scaling

    def make(i):
        def delta(x: Tensor) -> Tensor:
            b, n, _ = x.shape
            zeros = Tensor._wrap(np.zeros((b, n, d), DTYPE))
            parts = [zeros, zeros, zeros]
            for t in lora_config.targets:
                a = lora[f"blocks.{i}.attn.{t}.lora_A"]
                bb = lora[f"blocks.{i}.attn.{t}.lora_B"]
                parts[_TARGET_SLOT[t]] = T.scale(T.matmul(T.matmul(x, a), bb), s)
            return T.concat(parts, axis=-1)
        return delta

    return {i: make(i) for i in range(vit_config.enc_depth)}


@dataclass
class FinetuneModel:
    task: str
    vit_config: vit.ViTConfig
    lora_config: LoRAConfig
    encoder: dict
    lora: dict
    head: dict
    seg_channels: int = 16
    base_hash: str | None = None
    trainable: list = field(default_factory=list)

    def params(self) -> dict:
        out = {"encoder." + k: v for k, v in self.encoder.items()}
        out.update({"lora." + k: v for k, v in self.lora.items()})
        out.update({"head." + k: v for k, v in self.head.items()})
        return out

    def trainable_params(self) -> dict:
        p = self.params()
        return {k: p[k] for k in self.trainable}

    def forward(self, images: np.ndarray, use_lora: bool = True) -> Tensor:
        return adapted_forward(images, self.encoder, self.lora if use_lora else None, self.head,
                               self.task, self.vit_config, self.lora_config)


def adapted_forward(images, encoder: dict, lora: dict | None, head: dict, task: str,
                    vit_config: vit.ViTConfig, lora_config: LoRAConfig = LoRAConfig()) -> Tensor:
    """Logits ``[B, outputs]`` for classification or ``[B, H, W]`` for segmentation.

    Each targeted projection computes ``W x + (alpha / r) * B (A x)``.
    """
    seg = task in SEG_KINDS
    expected = num_outputs(task)
    if seg and "seg.out.weight" not in head:
        raise FinetuneError(f"task {task} needs a segmentation head")
    if not seg and head.get("head.weight") is None:
        raise FinetuneError(f"task {task} needs a classification head")
    if not seg and head["head.weight"].shape[1] != expected:
        raise FinetuneError(f"task {task} expects {expected} logits, head has {head['head.weight'].shape[1]}")
    adapters = _qkv_adapters(lora, vit_config, lora_config) if lora else None
    taps = tap_depths(vit_config.enc_depth) if seg else ()
    out = vit.encode(images, encoder, vit_config, adapters, taps)
    if not seg:
        pooled = T.mean_axis(out, 1)
        return T.linear(pooled, head["head.weight"], head["head.bias"])
    tokens, tapped = out
    return _seg_decoder(tokens, tapped[:-1], head, vit_config)


def _seg_decoder(tokens: Tensor, skips: list, head: dict, vit_config: vit.ViTConfig) -> Tensor:
    b = tokens.shape[0]
    g = vit_config.grid
    grid = lambda t: T.reshape(t, (b, g, g, t.shape[-1]))  # noqa: E731
    h = T.linear(grid(tokens), head["seg.proj.weight"], head["seg.proj.bias"])
    c = h.shape[-1]
    skips = list(reversed(skips))  # deepest first
    res = g
    for s in range(_num_stages(vit_config)):
        h = T.linear(h, head[f"seg.up{s}.weight"], head[f"seg.up{s}.bias"])
        h = T.reshape(T.transpose(T.reshape(h, (b, res, res, 2, 2, c)), (0, 1, 3, 2, 4, 5)), (b, 2 * res, 2 * res, c))
        res *= 2
        if s < len(skips):
            sk = T.linear(grid(T.layer_norm(skips[s])), head[f"seg.skip{s}.weight"], head[f"seg.skip{s}.bias"])
            for _ in range(s + 1):
                sk = T.upsample2x(sk)
            h = T.add(h, sk)
        h = T.gelu(T.linear(h, head[f"seg.mix{s}.weight"], head[f"seg.mix{s}.bias"]))
    logits = T.linear(h, head["seg.out.weight"], head["seg.out.bias"])
    return T.reshape(logits, (b, res, res))


def build_model(task: str, encoder_weights: dict, vit_config: vit.ViTConfig, lora_config: LoRAConfig,
                config: FinetuneConfig, base_hash: str | None = None, frozen: bool = True) -> FinetuneModel:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    exp_enc, _ = vit.model_schemas(vit_config)
    got = vit.schema(encoder_weights)
    if exp_enc != got:
        raise FinetuneError("encoder weights do not match the ViT config schema")
    train_backbone = (not frozen) or config.unfreeze_backbone
    encoder = {k: Tensor(v.data if isinstance(v, Tensor) else v, requires_grad=train_backbone, name=k)
               for k, v in encoder_weights.items()}
    lora = init_lora(vit_config, lora_config, rng)
    head = init_head(vit_config, task, rng, config.seg_channels)
    model = FinetuneModel(task, vit_config, lora_config, encoder, lora, head, config.seg_channels, base_hash)
    model.trainable = [k for k, v in model.params().items() if v.requires_grad]
    return model


# ---------------------------------------------------------------------------
# training and evaluation


def task_loss(logits: Tensor, targets: np.ndarray, task: str, seg_loss: str = "dice-focal") -> Tensor:
    if task in ("multiclass", "severity"):
        return T.softmax_cross_entropy(logits, targets)
    if task == "binary":
        return T.bce_with_logits(logits, np.asarray(targets, dtype=DTYPE).reshape(logits.shape))
    if task == "multilabel":
        return T.bce_with_logits(logits, targets)
    return soft_dice_loss(logits, targets) if seg_loss == "dice" else T.add(
        soft_dice_loss(logits, targets), T.focal_with_logits(logits, targets))


def soft_dice_loss(logits: Tensor, masks: np.ndarray, eps: float = metrics.DICE_EPS) -> Tensor:
    """Mean over images of ``1 - (2 sum(p m) + eps) / (sum p + sum m + eps)``, ``p = sigmoid(logits)``."""
    b = logits.shape[0]
    npix = int(np.prod(logits.shape[1:]))
    m = np.asarray(masks, dtype=DTYPE).reshape(b, npix)
    p = T.reshape(T.sigmoid(logits), (b, npix))
    inter = T.scale(T.mean_axis(T.mul(p, m), 1), 2.0 * npix)
    denom = T.add(T.scale(T.mean_axis(p, 1), float(npix)), m.sum(axis=1, dtype=DTYPE) + DTYPE(eps))
    ratio = T.div(T.add(inter, DTYPE(eps)), denom)
    return T.sub(1.0, T.mean_all(ratio))


def predict(model: FinetuneModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Sigmoid probabilities (binary/multilabel/segmentation) or logits (multiclass/severity)."""
    outs = []
    for start in range(0, images.shape[0], batch_size):
        logits = model.forward(images[start:start + batch_size]).data
        if model.task in ("multiclass", "severity"):
            outs.append(logits)
        else:
            outs.append(T._sigmoid_np(logits))
    out = np.concatenate(outs, axis=0)
    return out.reshape(-1) if model.task == "binary" else out


def evaluate(model: FinetuneModel, manifest: DatasetManifest) -> dict:
    test = manifest.subset("test")
    if len(test) == 0:
        raise FinetuneError("evaluate: no test samples")
    preds = predict(model, test.images())
    if model.task in SEG_KINDS:
        return metrics.segmentation_metrics(preds, test.labels())
    return metrics.classification_metrics(preds, test.labels(), model.task)


def train(model: FinetuneModel, manifest: DatasetManifest, config: FinetuneConfig) -> list[float]:
    train_set = manifest.subset("train")
    if len(train_set) == 0:
        raise FinetuneError("finetune: empty train shard")
    images, targets = train_set.images(), train_set.labels()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 8]))
    params = model.trainable_params()
    opt = optim.init_optimizer("adamw", params, lr=config.lr, weight_decay=config.weight_decay, betas=(0.9, 0.999))
    n = images.shape[0]
    size = min(config.batch_size, n)
    order, cursor = rng.permutation(n), 0
    losses = []
    for _ in range(config.steps):
        if cursor + size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + size]
        cursor += size
        T.zero_grad(params)
        loss = task_loss(model.forward(images[idx]), targets[idx], model.task, config.seg_loss)
        T.backward(loss)
        optim.optimizer_step(opt, params)
        losses.append(loss.item())
    return losses


def finetune_task(manifest: DatasetManifest, encoder_weights: dict, vit_config: vit.ViTConfig,
                  lora_config: LoRAConfig = LoRAConfig(), config: FinetuneConfig = FinetuneConfig(),
                  base_hash: str | None = None) -> tuple[FinetuneModel, dict, list]:
    """Freeze the encoder, train LoRA + head on the train shard, evaluate on the test shard."""
    task = manifest.spec.kind
    model = build_model(task, encoder_weights, vit_config, lora_config, config, base_hash, frozen=True)
    losses = train(model, manifest, config)
    return model, evaluate(model, manifest), losses


def local_supervision_baseline(manifest: DatasetManifest, vit_config: vit.ViTConfig,
                               lora_config: LoRAConfig = LoRAConfig(),
                               config: FinetuneConfig = FinetuneConfig()) -> tuple[FinetuneModel, dict, list]:
    """Same architecture from random initialisation, every parameter trainable, own shard only."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 9]))
    encoder = vit.init_encoder(vit_config, rng)
    model = build_model(manifest.spec.kind, encoder, vit_config, lora_config, config, None, frozen=False)
    losses = train(model, manifest, config)
    return model, evaluate(model, manifest), losses


# ---------------------------------------------------------------------------
# adapter checkpoints


def save_adapters(model: FinetuneModel, path, base_path=None) -> str:
    """Write ``{lora, head}`` as a delta checkpoint bound to the base encoder's hash.

    Models with a trainable backbone store the encoder too. ``base_path`` is
    recorded relative to the adapter file so a run directory can move.
    """
    params = {"lora." + k: v for k, v in model.lora.items()}
    params.update({"head." + k: v for k, v in model.head.items()})
    if any(v.requires_grad for v in model.encoder.values()):
        params.update({"encoder." + k: v for k, v in model.encoder.items()})
    cfg = {"part": "adapters", "task": model.task, "base_hash": model.base_hash,
           "vit": model.vit_config.to_dict(), "lora": model.lora_config.to_dict(),
           "seg_channels": model.seg_channels}
    if base_path is not None:
        cfg["base_path"] = os.path.relpath(os.path.abspath(base_path), os.path.dirname(os.path.abspath(path)))
    return checkpoint.save(path, params, cfg)


def load_adapters(path, base_path=None) -> FinetuneModel:
    cfg, params = checkpoint.load(path)
    if cfg.get("part") != "adapters":
        raise FinetuneError(f"{path} is not an adapter checkpoint")
    vit_config = vit.ViTConfig.from_dict(cfg["vit"])
    lcfg = cfg["lora"]
    lora_config = LoRAConfig(rank=lcfg["rank"], alpha=lcfg["alpha"], targets=tuple(lcfg["targets"]),
                             init_std=lcfg["init_std"])
    enc = {k[len("encoder."):]: v for k, v in params.items() if k.startswith("encoder.")}
    if not enc:
        if base_path is None and cfg.get("base_path"):
            base_path = os.path.join(os.path.dirname(os.path.abspath(path)), cfg["base_path"])
        if base_path is None or not os.path.exists(base_path):
            raise FinetuneError("adapter checkpoint needs its base encoder checkpoint")
        base_hash = checkpoint.file_hash(base_path)
        if base_hash != cfg["base_hash"]:
            raise FinetuneError(f"incompatible base checkpoint: hash {base_hash[:12]} != {str(cfg['base_hash'])[:12]}")
        _, enc = checkpoint.load(base_path)
    lora = vit.to_tensors({k[len("lora."):]: v for k, v in params.items() if k.startswith("lora.")})
    head = vit.to_tensors({k[len("head."):]: v for k, v in params.items() if k.startswith("head.")})
    return FinetuneModel(cfg["task"], vit_config, lora_config, vit.to_tensors(enc), lora, head,
                         cfg.get("seg_channels", 16), cfg.get("base_hash"))
