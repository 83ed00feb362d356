"""Run configuration: YAML file -> validated, frozen ``RunConfig``.

Example::

    corpus: {scale: tiny, image_size: 32, seed: 0}
    split: {mode: fed-split1, num_clients: 6, ood_in_pretraining: false}
    vit: {patch_size: 8, enc_dim: 64, enc_depth: 4}
    fed: {num_rounds: 5, local_steps: 10}
    lora: {rank: 4, alpha: 8}
    finetune: {steps: 150}
    tasks: [REFUGE2, RFMiD]
    seeds: [0, 1, 2]
    out: runs/demo

Unknown keys are errors. ``FEDMIM_SEED`` replaces the seed list with a
single seed. Relative ``out``/``corpus.path`` resolve against the config
file's directory.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import yaml

from fedmim.data import SCALES, TABLE
from fedmim.fed import FedConfig
from fedmim.finetune import FinetuneConfig, LoRAConfig
from fedmim.vit import ViTConfig

MODES = ("fed-split1", "fed-split2", "centralized", "none")
DATASETS = tuple(row[0] for row in TABLE)
SEED_ENV = "FEDMIM_SEED"


class ConfigError(ValueError):
    def __init__(self, message: str, field_path: str = ""):
        super().__init__(f"{field_path}: {message}" if field_path else message)
        self.field_path = field_path
        self.message = message

    def to_json(self) -> str:
        return json.dumps({"error": "config", "field": self.field_path, "message": self.message}, sort_keys=True)


@dataclass(frozen=True)
class CorpusConfig:
    scale: str = "tiny"
    image_size: int = 32
    seed: int = 0
    path: str | None = None  # pre-generated corpus; generated under out/ when absent


@dataclass(frozen=True)
class SplitConfig:
    mode: str = "fed-split1"
    num_clients: int = 6
    ood_in_pretraining: bool = False


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = CorpusConfig()
    split: SplitConfig = SplitConfig()
    vit: ViTConfig = ViTConfig()
    fed: FedConfig = FedConfig()
    lora: LoRAConfig = LoRAConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    tasks: tuple = DATASETS
    seeds: tuple = (0,)
    out: str = "runs/default"
    source: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        d = {
            "corpus": dataclasses.asdict(self.corpus),
            "split": dataclasses.asdict(self.split),
            "vit": self.vit.to_dict(),
            "fed": dataclasses.asdict(self.fed),
            "lora": self.lora.to_dict(),
            "finetune": dataclasses.asdict(self.finetune),
            "tasks": list(self.tasks),
            "seeds": list(self.seeds),
            "out": self.out,
        }
        return d

    def snapshot(self) -> str:
        """Canonical YAML; loading it back gives an equal config."""
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seeds=(seed,))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"expected a mapping, got {type(raw).__name__}", name)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown keys {unknown}", name)
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key) if key in fields else None
        kwargs[key] = _coerce(value, default, f"{name}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), name) from None


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", path)
    return value


def from_dict(raw: dict, base_dir: str = ".", env=None) -> RunConfig:
    env = os.environ if env is None else env
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"source"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")

    corpus = _section(CorpusConfig, raw.get("corpus"), "corpus")
    if corpus.scale not in SCALES:
        raise ConfigError(f"must be one of {sorted(SCALES)}", "corpus.scale")
    if corpus.image_size not in (32, 64):
        raise ConfigError("must be 32 or 64", "corpus.image_size")
    if corpus.path is not None:
        path = os.path.normpath(os.path.join(base_dir, corpus.path))
        if not os.path.exists(os.path.join(path, "corpus.json")):
            raise ConfigError(f"no corpus.json under {path}", "corpus.path")
        corpus = dataclasses.replace(corpus, path=path)

    split = _section(SplitConfig, raw.get("split"), "split")
    if split.mode not in MODES:
        raise ConfigError(f"must be one of {list(MODES)}", "split.mode")
    if split.num_clients < 1:
        raise ConfigError("must be >= 1", "split.num_clients")

    vit_raw = dict(raw.get("vit") or {})
    vit_raw.setdefault("image_size", corpus.image_size)
    vit_cfg = _section(ViTConfig, vit_raw, "vit")
    if vit_cfg.image_size != corpus.image_size:
        raise ConfigError(f"{vit_cfg.image_size} differs from corpus.image_size {corpus.image_size}", "vit.image_size")

    fed = _section(FedConfig, raw.get("fed"), "fed")
    lora = _section(LoRAConfig, raw.get("lora"), "lora")
    ft = _section(FinetuneConfig, raw.get("finetune"), "finetune")
    if vit_cfg.patch_size & (vit_cfg.patch_size - 1):
        raise ConfigError("segmentation head needs a power-of-two patch size", "vit.patch_size")

    tasks = raw.get("tasks", list(DATASETS))
    if not isinstance(tasks, list) or not tasks:
        raise ConfigError("must be a nonempty list of dataset names", "tasks")
    bad = [t for t in tasks if t not in DATASETS]
    if bad:
        raise ConfigError(f"unknown datasets {bad}; expected names from {list(DATASETS)}", "tasks")

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("must be a nonempty list of integers", "seeds")
    if any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds):
        raise ConfigError("must contain non-negative integers", "seeds")
    if env.get(SEED_ENV):
        try:
            seeds = [int(env[SEED_ENV])]
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer", SEED_ENV) from None

    out = raw.get("out", "runs/default")
    if not isinstance(out, str) or not out:
        raise ConfigError("must be a nonempty path", "out")

    return RunConfig(corpus, split, vit_cfg, fed, lora, ft, tuple(tasks), tuple(seeds),
                     os.path.normpath(os.path.join(base_dir, out)))


def load(path, env=None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", "config") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", "config") from None
    cfg = from_dict(raw, os.path.dirname(os.path.abspath(path)), env)
    return dataclasses.replace(cfg, source=str(path))


def default_config_path() -> str:
    return os.path.join(os.path.dirname(__file__), "configs", "tiny.yaml")
