"""``fedmim`` command line.

Exit codes: 0 ok, 2 configuration error, 3 runtime error. Errors are
printed to stderr as a single JSON line.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

from fedmim import __version__, data, pipeline
from fedmim.checkpoint import CheckpointError
from fedmim.config import DATASETS, MODES, ConfigError, RunConfig, default_config_path, load
from fedmim.fed import FederationError
from fedmim.finetune import FinetuneError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("fedmim")


def _config(args, out: str | None = None) -> RunConfig:
    """Load --config (or the run dir's snapshot, or the packaged default) and apply overrides."""
    path = args.config
    if path is None and out and os.path.exists(os.path.join(out, "config.snapshot")):
        path = os.path.join(out, "config.snapshot")
    cfg = load(path or default_config_path())
    corpus = getattr(args, "corpus", None)
    if corpus:
        if not os.path.exists(os.path.join(corpus, "corpus.json")):
            raise ConfigError(f"no corpus.json under {corpus}", "--corpus")
        cfg = cfg.replace(corpus=dataclasses.replace(cfg.corpus, path=os.path.abspath(corpus)))
    if out:
        cfg = cfg.replace(out=os.path.abspath(out))
    return cfg


def _need_corpus(cfg: RunConfig) -> None:
    if not cfg.corpus.path:
        raise ConfigError("no corpus; run gen-data and pass --corpus (or set corpus.path)", "corpus.path")


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ConfigError(f"{out} exists and is not empty (use --force)", "--out")
    t0 = time.perf_counter()
    specs = pipeline.corpus_specs(cfg)
    manifests = [data.generate(s) for s in specs]
    data.write_corpus(manifests, out)
    print(json.dumps({"corpus": os.path.abspath(out), "datasets": [s.name for s in specs],
                      "samples": sum(len(m) for m in manifests),
                      "seconds": round(time.perf_counter() - t0, 3)}, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args, args.out)
    _need_corpus(cfg)
    manifests = data.read_corpus(cfg.corpus.path)
    written = pipeline.pretrain_to_dir(cfg, manifests, args.mode, args.out, args.jobs)
    for ck in written:
        side = pipeline.read_sidecar(ck)
        print(json.dumps({"checkpoint": ck, **side}, sort_keys=True))
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args, args.out)
    _need_corpus(cfg)
    tasks = list(cfg.tasks) if args.task == "all" else [args.task]
    if args.method == "lora" and not args.checkpoint:
        raise ConfigError("--checkpoint is required for --method lora", "--checkpoint")
    for ck in args.checkpoint or []:
        if not os.path.exists(ck):
            raise ConfigError(f"checkpoint {ck} not found", "--checkpoint")
    manifests = data.read_corpus(cfg.corpus.path)
    rows = pipeline.finetune_to_dir(cfg, manifests, args.checkpoint or [], tasks, args.out,
                                    method=args.method, label=args.label)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    snap = os.path.join(args.run_dir, "config.snapshot")
    if not os.path.exists(snap):
        raise ConfigError(f"{args.run_dir} has no config.snapshot", "--run-dir")
    cfg = load(snap)
    _need_corpus(cfg)
    rows = pipeline.evaluate_run_dir(args.run_dir, data.read_corpus(cfg.corpus.path))
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for rd in args.runs:
        if not os.path.isdir(rd):
            raise ConfigError(f"run directory {rd} not found", "--runs")
        got = pipeline.read_results(rd)
        if not got:
            raise ConfigError(f"{rd} has no fine-tuning results", "--runs")
        rows += got
    os.makedirs(args.out, exist_ok=True)
    written = pipeline.write_reports(rows, args.out, pipeline.loss_curves(args.runs))
    for path in written:
        print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    """Whole pipeline in one run directory: generate, pretrain, fine-tune, report."""
    cfg = _config(args, args.out)
    methods = args.methods.split(",")
    bad = [m for m in methods if m not in ("local",) + pipeline.PRETRAIN_METHODS + ("none",)]
    if bad:
        raise ConfigError(f"unknown methods {bad}", "--methods")
    if not cfg.corpus.path:
        corpus_dir = os.path.join(args.out, "corpus")
        if not os.path.exists(os.path.join(corpus_dir, "corpus.json")):
            data.write_corpus([data.generate(s) for s in pipeline.corpus_specs(cfg)], corpus_dir)
        cfg = cfg.replace(corpus=dataclasses.replace(cfg.corpus, path=os.path.abspath(corpus_dir)))
    rows = pipeline.run_experiment(cfg, args.out, methods, args.jobs, data.read_corpus(cfg.corpus.path))
    print(json.dumps({"run_dir": os.path.abspath(args.out), "results": len(rows)}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmim", description="Task-agnostic federated masked-image-modeling pipeline.")
    p.add_argument("--version", action="version", version=f"fedmim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML run config (default: packaged tiny config)")
        if out_required:
            sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="generate the six-dataset synthetic corpus")
    common(g)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="masked-image-modeling pretraining")
    common(g)
    g.add_argument("--mode", required=True, choices=MODES)
    g.add_argument("--corpus", help="corpus directory from gen-data")
    g.add_argument("--jobs", type=int, default=1, help="client worker threads")
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("finetune", help="LoRA fine-tuning or local-supervision baseline")
    common(g)
    g.add_argument("--checkpoint", nargs="*", default=[], help="encoder checkpoint(s), one per seed")
    g.add_argument("--task", required=True, choices=("all",) + DATASETS)
    g.add_argument("--method", choices=("lora", "local"), default="lora")
    g.add_argument("--label", help="method label used in reports")
    g.add_argument("--corpus", help="corpus directory from gen-data")
    g.set_defaults(func=cmd_finetune)

    g = sub.add_parser("evaluate", help="recompute test metrics of a run directory (read-only)")
    g.add_argument("--run-dir", required=True)
    g.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("report", help="aggregate run directories into comparison tables")
    g.add_argument("--runs", nargs="+", required=True)
    g.add_argument("--out", required=True, help="report directory")
    g.set_defaults(func=cmd_report)

    g = sub.add_parser("run", help="full pipeline: corpus, pretraining, fine-tuning, report")
    common(g)
    g.add_argument("--methods", default="local,fed-split1,fed-split2,centralized")
    g.add_argument("--corpus", help="existing corpus directory")
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_run)
    return p


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        return _fail("config", "--jobs must be >= 1", EXIT_CONFIG, field="--jobs")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc.to_json(), file=sys.stderr)
        return EXIT_CONFIG
    except (FederationError, FinetuneError, CheckpointError, pipeline.PipelineError,
            FloatingPointError, ValueError, OSError) as exc:
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
