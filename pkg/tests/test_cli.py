import contextlib
import hashlib
import io
import json
import os
import subprocess
import sys
import time

import pytest
import yaml

from fedmim import cli

FAST = {
    "corpus": {"scale": "tiny", "image_size": 32, "seed": 0},
    "split": {"mode": "fed-split1", "num_clients": 6, "ood_in_pretraining": True},
    "vit": {"patch_size": 8, "enc_dim": 16, "enc_depth": 2, "enc_heads": 2, "dec_dim": 8, "dec_depth": 1, "dec_heads": 2},
    "fed": {"num_rounds": 1, "local_steps": 1, "batch_size": 4},
    "finetune": {"steps": 2, "batch_size": 4},
    "tasks": ["REFUGE2", "JSIEC"],
    "seeds": [0, 1, 2],
}


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def _tree_digest(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            h.update(os.path.relpath(p, root).encode())
            h.update(open(p, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "fast.yaml"
    cfg.write_text(yaml.safe_dump(FAST))
    t0 = time.perf_counter()
    code, _, err = run("gen-data", "--config", cfg, "--out", root / "corpus")
    assert code == 0, err
    gen_seconds = time.perf_counter() - t0
    code, out, err = run("pretrain", "--mode", "fed-split1", "--config", cfg, "--corpus", root / "corpus",
                         "--out", root / "lora")
    assert code == 0, err
    sidecars = [json.loads(line) for line in out.splitlines()]
    ckpts = [s["checkpoint"] for s in sidecars]
    code, _, err = run("finetune", "--checkpoint", *ckpts, "--task", "all", "--out", root / "lora")
    assert code == 0, err
    code, _, err = run("finetune", "--method", "local", "--task", "all", "--config", cfg,
                       "--corpus", root / "corpus", "--out", root / "local")
    assert code == 0, err
    return {"root": root, "cfg": cfg, "sidecars": sidecars, "gen_seconds": gen_seconds}


def test_gen_data_is_fast_and_reproducible(ws):
    assert ws["gen_seconds"] < 10
    first = _tree_digest(ws["root"] / "corpus")
    code, _, _ = run("gen-data", "--config", ws["cfg"], "--out", ws["root"] / "corpus", "--force")
    assert code == 0
    assert _tree_digest(ws["root"] / "corpus") == first


def test_gen_data_refuses_nonempty_dir(ws):
    code, _, err = run("gen-data", "--config", ws["cfg"], "--out", ws["root"] / "corpus")
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "config"


def test_split1_pretraining_spawns_six_clients(ws):
    assert [s["num_clients"] for s in ws["sidecars"]] == [6, 6, 6]
    assert [s["seed"] for s in ws["sidecars"]] == [0, 1, 2]
    assert len({s["sha256"] for s in ws["sidecars"]}) == 3
    layout = sorted(os.listdir(ws["root"] / "lora"))
    assert layout == ["checkpoints", "config.snapshot", "logs", "reports"]


def test_evaluate_is_read_only_and_matches(ws):
    before = _tree_digest(ws["root"] / "lora")
    code, out, err = run("evaluate", "--run-dir", ws["root"] / "lora")
    assert code == 0, err
    rows = [json.loads(line) for line in out.splitlines()]
    assert len(rows) == 2 * 3
    assert all(r["matches_recorded"] for r in rows)
    assert _tree_digest(ws["root"] / "lora") == before


def test_report_over_two_runs(ws):
    code, out, err = run("report", "--runs", ws["root"] / "lora", ws["root"] / "local", "--out", ws["root"] / "rep")
    assert code == 0, err
    table = (ws["root"] / "rep" / "comparison.csv").read_text().splitlines()
    assert len(table) == 1 + 2 * 2
    assert {line.split(",")[1] for line in table[1:]} == {"Local Supervision", "SSL-FL Split 1"}
    assert all(line.split(",")[2] == "3" for line in table[1:])
    assert "±" in table[1]
    assert (ws["root"] / "rep" / "summary.csv").exists()


def test_one_adapter_per_task_and_seed(ws):
    ck = ws["root"] / "lora" / "checkpoints"
    adapters = sorted(n for n in os.listdir(ck) if n.startswith("adapter_"))
    assert len(adapters) == 6


def test_finetune_lora_requires_checkpoint(ws):
    code, _, err = run("finetune", "--task", "JSIEC", "--out", ws["root"] / "lora")
    assert code == 2 and "--checkpoint" in err


def test_missing_corpus_is_config_error(tmp_path):
    code, _, err = run("pretrain", "--mode", "centralized", "--corpus", tmp_path / "none", "--out", tmp_path / "o")
    assert code == 2
    assert json.loads(err)["field"] == "--corpus"


def test_unknown_config_key_fails_before_side_effects(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**FAST, "extra": 1}))
    code, _, err = run("gen-data", "--config", bad, "--out", tmp_path / "c")
    assert code == 2 and not (tmp_path / "c").exists()
    assert json.loads(err)["error"] == "config"


def test_evaluate_missing_run_dir(tmp_path):
    code, _, _ = run("evaluate", "--run-dir", tmp_path)
    assert code == 2


def test_runtime_error_exit_code(ws, tmp_path):
    bogus = tmp_path / "x.ckpt"
    bogus.write_bytes(b"not a checkpoint")
    code, _, err = run("finetune", "--checkpoint", bogus, "--task", "JSIEC", "--config", ws["cfg"],
                       "--corpus", ws["root"] / "corpus", "--out", tmp_path / "o")
    assert code == 3
    assert json.loads(err.strip().splitlines()[-1])["error"] == "runtime"


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "fedmim.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("fedmim ")
