"""End-to-end experiment steps shared by the command line and the test suite.

Run directory layout::

    <out>/config.snapshot
    <out>/checkpoints/encoder_<mode>_seed<s>.ckpt      (+ .json sidecar)
    <out>/checkpoints/adapter_<dataset>_<method>_seed<s>.ckpt
    <out>/logs/rounds_<mode>_seed<s>.csv
    <out>/logs/finetune_<dataset>_<method>_seed<s>.csv
    <out>/reports/results.jsonl
    <out>/reports/summary.csv, comparison.csv, *.svg
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time

import numpy as np

from fedmim import checkpoint, data, fed, finetune, metrics, vit
from fedmim.config import RunConfig

log = logging.getLogger(__name__)

METHOD_LABELS = {
    "local": "Local Supervision",
    "centralized": "Centralized SSL",
    "fed-split1": "SSL-FL Split 1",
    "fed-split2": "SSL-FL Split 2",
    "none": "Scratch + LoRA",
}
RESULTS = "results.jsonl"


class PipelineError(RuntimeError):
    pass


def run_layout(out: str) -> dict:
    return {k: os.path.join(out, k) for k in ("checkpoints", "logs", "reports")}


def make_run_dir(out: str, cfg: RunConfig) -> dict:
    paths = run_layout(out)
    for p in paths.values():
        os.makedirs(p, exist_ok=True)
    snap = os.path.join(out, "config.snapshot")
    text = cfg.snapshot()
    if not os.path.exists(snap) or open(snap).read() != text:
        with open(snap, "w") as fh:
            fh.write(text)
    return paths


# ---------------------------------------------------------------------------
# corpus


def corpus_specs(cfg: RunConfig) -> list[data.SynthTaskSpec]:
    return data.default_corpus(cfg.corpus.scale, cfg.corpus.seed, cfg.corpus.image_size)


def load_corpus(cfg: RunConfig) -> list[data.DatasetManifest]:
    """Read ``corpus.path`` when set, otherwise generate in memory."""
    if cfg.corpus.path:
        return data.read_corpus(cfg.corpus.path)
    return [data.generate(s) for s in corpus_specs(cfg)]


def by_name(manifests: list[data.DatasetManifest]) -> dict:
    return {m.spec.name: m for m in manifests}


def pretraining_pool(manifests, cfg: RunConfig) -> list[data.DatasetManifest]:
    """Datasets whose unlabeled train images join pretraining.

    Out-of-network datasets stay out unless ``split.ood_in_pretraining``.
    """
    return [m for m in manifests if cfg.split.ood_in_pretraining or not m.spec.out_of_network]


def client_manifests(manifests, cfg: RunConfig, mode: str, seed: int) -> list[data.DatasetManifest]:
    pool = pretraining_pool(manifests, cfg)
    if mode == "fed-split1":
        return data.partition(pool, "split1", len(pool), seed)
    if mode == "fed-split2":
        return data.partition(pool, "split2", cfg.split.num_clients, seed)
    raise PipelineError(f"{mode} is not a federated mode")


# ---------------------------------------------------------------------------
# pretraining


def pretrain(cfg: RunConfig, manifests, mode: str, seed: int, checkpoint_path=None,
             jobs: int = 1, transport=None) -> tuple[dict, fed.RoundLog, list]:
    """Returns (encoder arrays, round log, client manifests or [])."""
    fcfg = dataclasses.replace(cfg.fed, seed=seed)
    if mode in ("fed-split1", "fed-split2"):
        shards = client_manifests(manifests, cfg, mode, seed)
        clients = fed.build_clients(shards, cfg.vit, fcfg)
        server = fed.ServerState.initialize(cfg.vit, seed)
        enc, rlog = fed.run_pretraining(clients, server, fcfg, transport, jobs, checkpoint_path)
        return enc, rlog, shards
    if mode == "centralized":
        enc, rlog = fed.run_centralized(pretraining_pool(manifests, cfg), cfg.vit, fcfg, checkpoint_path)
        return enc, rlog, []
    if mode == "none":
        enc = fed.ServerState.initialize(cfg.vit, seed).encoder
        if checkpoint_path is not None:
            checkpoint.save(checkpoint_path, enc, fed.encoder_checkpoint_config(cfg.vit))
        return enc, fed.RoundLog(), []
    raise PipelineError(f"unknown pretraining mode {mode!r}")


def encoder_path(paths: dict, mode: str, seed: int) -> str:
    return os.path.join(paths["checkpoints"], f"encoder_{mode}_seed{seed}.ckpt")


def pretrain_to_dir(cfg: RunConfig, manifests, mode: str, out: str, jobs: int = 1) -> list[str]:
    paths = make_run_dir(out, cfg)
    written = []
    for seed in cfg.seeds:
        ckpt = encoder_path(paths, mode, seed)
        t0 = time.perf_counter()
        _, rlog, shards = pretrain(cfg, manifests, mode, seed, ckpt, jobs)
        digest = checkpoint.file_hash(ckpt)
        side = {"mode": mode, "seed": seed, "sha256": digest, "num_clients": len(shards)}
        _write_json(ckpt[:-len(".ckpt")] + ".json", side)
        rlog.write(os.path.join(paths["logs"], f"rounds_{mode}_seed{seed}.csv"))
        log.info("pretrain %s seed %d: %d clients, %.1fs", mode, seed, len(shards), time.perf_counter() - t0)
        written.append(ckpt)
    return written


def read_sidecar(ckpt_path: str) -> dict:
    side = ckpt_path[:-len(".ckpt")] + ".json" if ckpt_path.endswith(".ckpt") else ckpt_path + ".json"
    if os.path.exists(side):
        with open(side) as fh:
            return json.load(fh)
    return {}


# ---------------------------------------------------------------------------
# downstream


def downstream(cfg: RunConfig, manifest: data.DatasetManifest, method: str, seed: int,
               encoder_weights: dict | None = None, base_hash: str | None = None):
    """Fine-tune one dataset. ``method`` is ``lora`` (needs encoder weights) or ``local``."""
    ftcfg = dataclasses.replace(cfg.finetune, seed=seed)
    if method == "local":
        return finetune.local_supervision_baseline(manifest, cfg.vit, cfg.lora, ftcfg)
    if method == "lora":
        if encoder_weights is None:
            raise PipelineError("lora fine-tuning needs pretrained encoder weights")
        return finetune.finetune_task(manifest, encoder_weights, cfg.vit, cfg.lora, ftcfg, base_hash)
    raise PipelineError(f"unknown fine-tuning method {method!r}")


def result_row(method_label: str, split: str, dataset: str, kind: str, seed: int, values: dict, n: int) -> dict:
    return {"method": method_label, "split": split, "task": dataset, "kind": kind, "seed": seed,
            "n_test": n, "metrics": {k: round(float(v), 10) for k, v in sorted(values.items())}}


def finetune_to_dir(cfg: RunConfig, manifests, checkpoint_paths: list, tasks: list, out: str,
                    method: str = "lora", label: str | None = None) -> list[dict]:
    """Fine-tune every task on every checkpoint (lora) or from scratch (local, one run per seed)."""
    paths = make_run_dir(out, cfg)
    named = by_name(manifests)
    missing = [t for t in tasks if t not in named]
    if missing:
        raise PipelineError(f"datasets {missing} not in corpus")
    jobs = []
    if method == "local":
        jobs = [(None, seed, "local") for seed in cfg.seeds]
    else:
        for ck in checkpoint_paths:
            side = read_sidecar(ck)
            jobs.append((ck, int(side.get("seed", cfg.seeds[0])), side.get("mode", "checkpoint")))
    rows = []
    for ck, seed, mode in jobs:
        enc, base_hash = None, None
        if ck is not None:
            ccfg, enc = checkpoint.load(ck)
            if ccfg.get("part") != "encoder":
                raise PipelineError(f"{ck} is not an encoder checkpoint")
            if vit.ViTConfig.from_dict(ccfg["vit"]) != cfg.vit:
                raise PipelineError(f"{ck} was trained with a different ViT config")
            base_hash = checkpoint.file_hash(ck)
        mlabel = label or METHOD_LABELS.get(mode, mode)
        for task in tasks:
            m = named[task]
            model, values, losses = downstream(cfg, m, "local" if ck is None else "lora", seed, enc, base_hash)
            tag = f"{task}_{'local' if ck is None else mode}_seed{seed}"
            finetune.save_adapters(model, os.path.join(paths["checkpoints"], f"adapter_{tag}.ckpt"), ck)
            _write_losses(os.path.join(paths["logs"], f"finetune_{tag}.csv"), losses)
            row = result_row(mlabel, "test", task, m.spec.kind, seed, values, len(m.subset("test")))
            row["adapter"] = f"adapter_{tag}.ckpt"
            rows.append(row)
            log.info("%s %s seed %d: %s", mlabel, task, seed, values)
    _append_results(os.path.join(paths["reports"], RESULTS), rows)
    return rows


def evaluate_run_dir(run_dir: str, manifests) -> list[dict]:
    """Recompute test metrics for every adapter checkpoint; reads only."""
    ck_dir = os.path.join(run_dir, "checkpoints")
    if not os.path.isdir(ck_dir):
        raise PipelineError(f"{run_dir} has no checkpoints/ directory")
    named = by_name(manifests)
    recorded = {r.get("adapter"): r for r in read_results(run_dir)}
    out = []
    for name in sorted(os.listdir(ck_dir)):
        if not (name.startswith("adapter_") and name.endswith(".ckpt")):
            continue
        model = finetune.load_adapters(os.path.join(ck_dir, name))
        rec = recorded.get(name, {})
        task = rec.get("task") or name[len("adapter_"):].split("_")[0]
        values = finetune.evaluate(model, named[task])
        out.append({"adapter": name, "task": task, "method": rec.get("method", ""), "seed": rec.get("seed"),
                    "metrics": {k: round(float(v), 10) for k, v in sorted(values.items())},
                    "matches_recorded": rec.get("metrics") == {k: round(float(v), 10) for k, v in sorted(values.items())}})
    return out


# ---------------------------------------------------------------------------
# reports


def read_results(run_dir: str) -> list[dict]:
    path = os.path.join(run_dir, "reports", RESULTS)
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summarize_rows(rows: list[dict]) -> list[metrics.EvalReport]:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["method"], r["split"], r["task"]), {})[r["seed"]] = r
    reports = []
    for (method, split, task), by_seed in sorted(groups.items()):
        ordered = [by_seed[s] for s in sorted(by_seed)]
        rep = metrics.summarize(task, [r["metrics"] for r in ordered], method, split, ordered[0]["n_test"])
        reports.append(rep)
    return reports


def write_reports(rows: list[dict], out_dir: str, curves: dict | None = None) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    reports = summarize_rows(rows)
    written = metrics.emit_report(reports, os.path.join(out_dir, "summary.csv"), curves)
    comp = os.path.join(out_dir, "comparison.csv")
    with open(comp, "w", newline="") as fh:
        fh.write(metrics.comparison_csv(reports))
    return written + [comp]


def loss_curves(run_dirs: list[str]) -> dict:
    """Mean pretraining loss per round for every logged run, keyed by mode."""
    series: dict = {}
    for rd in run_dirs:
        logs = os.path.join(rd, "logs")
        if not os.path.isdir(logs):
            continue
        for name in sorted(os.listdir(logs)):
            if not name.startswith("rounds_"):
                continue
            with open(os.path.join(logs, name)) as fh:
                rows = [line.strip().split(",") for line in fh.readlines()[1:] if line.strip()]
            if not rows:
                continue
            per_round: dict = {}
            for r in rows:
                per_round.setdefault(int(r[0]), []).append(float(r[2]))
            series[name[len("rounds_"):-len(".csv")]] = [float(np.mean(per_round[k])) for k in sorted(per_round)]
    return {"pretraining_loss": series} if series else {}


# ---------------------------------------------------------------------------
# whole experiment


PRETRAIN_METHODS = ("fed-split1", "fed-split2", "centralized")


def run_experiment(cfg: RunConfig, out: str, methods=("local",) + PRETRAIN_METHODS, jobs: int = 1,
                   manifests=None) -> list[dict]:
    """Pretrain each requested regime per seed, fine-tune every task, write reports.

    ``methods`` may contain ``local`` (no pretraining) and any pretraining mode.
    """
    manifests = manifests if manifests is not None else load_corpus(cfg)
    paths = make_run_dir(out, cfg)
    results = os.path.join(paths["reports"], RESULTS)
    if os.path.exists(results):
        os.remove(results)
    rows = []
    for method in methods:
        if method == "local":
            rows += finetune_to_dir(cfg, manifests, [], list(cfg.tasks), out, method="local")
            continue
        ckpts = pretrain_to_dir(cfg, manifests, method, out, jobs)
        rows += finetune_to_dir(cfg, manifests, ckpts, list(cfg.tasks), out, method="lora")
    write_reports(rows, paths["reports"], loss_curves([out]))
    return rows


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_losses(path, losses) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v:.8f}\n")


def _append_results(path, rows) -> None:
    with open(path, "a") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
