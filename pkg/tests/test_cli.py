import json
from pathlib import Path

import numpy as np
import pytest

from moeut.accounting import count_params
from moeut.cli import resolve, run
from moeut.config import TABLE3, ConfigError
from moeut.model import MoEUT
from moeut.training import load_checkpoint

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = ["--set", "d_model=16", "--set", "n_layers=2", "--set", "group_size=1", "--set", "n_heads=1",
        "--set", "d_head=8", "--set", "n_att_experts=2", "--set", "att_k=1", "--set", "d_expert=8",
        "--set", "n_experts=4", "--set", "expert_k=2", "--set", "context_length=16",
        "--set", "batch_size=2", "--synthetic-bytes", "20000"]


def test_count_params_table_config(tmp_path, capsys):
    assert run(["count-params", "--config", str(CONFIGS / "table3_244M.json"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    total = int(next(l for l in out.splitlines() if l.startswith("total")).split()[-1].replace(",", ""))
    assert abs(total - 243e6) / 243e6 < 0.03
    assert "attention" in out and "ffn" in out
    assert json.loads((tmp_path / "resolved_config.json").read_text())["params"]["total"] == total


def test_count_macs(tmp_path, capsys):
    assert run(["count-macs", "--preset", "moeut_243M", "--seq-len", "1024", "--out", str(tmp_path)]) == 0
    assert "attn_value_output" in capsys.readouterr().out


def test_derive_config_reproduces_table_row(tmp_path, capsys):
    code = run(["derive-config", "--dense", "d_model=1024,n_layers=18,H=16,d_head=64",
                "--target-params", "243e6", "--out", str(tmp_path)])
    assert code == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg == TABLE3["moeut_243M"][1].to_dict()
    assert json.loads((tmp_path / "config.json").read_text()) == cfg


def test_derive_config_default_head_width(tmp_path, capsys):
    assert run(["derive-config", "--dense", "d_model=1024,n_layers=18,H=16", "--out", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["d_head"] == 128


def test_missing_config_exit_1(tmp_path, capsys):
    assert run(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["count-params", "--set", "bogus=1"],
    ["count-params", "--set", "model.batch_size=2"],
    ["count-params", "--set", "d_model"],
    ["count-params", "--set", "n_layers=5"],
    ["frobnicate"],
    ["derive-config", "--dense", "d_model=64"],
])
def test_config_errors_exit_1(argv, tmp_path):
    assert run(argv + ["--out", str(tmp_path)] if argv != ["frobnicate"] else argv) == 1


def test_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"d_model": 32, "n_heads": 4}, "train": {"lr_peak": 1e-3}}))
    model, train = resolve(cfg, ["d_model=48", "train.steps=7"])
    assert (model.d_model, model.n_heads, train.lr_peak, train.steps) == (48, 4, 1e-3, 7)
    flat = tmp_path / "f.json"
    flat.write_text(json.dumps({"d_model": 24, "context_length": 64}))
    model, train = resolve(flat, [])
    assert model.d_model == 24 and model.context_length == train.context_length == 64
    model, train = resolve(flat, ["model.context_length=128"])
    assert (model.context_length, train.context_length) == (128, 64)
    with pytest.raises(ConfigError):
        resolve(None, ["nope.d_model=3"])


def test_train_zero_steps_writes_initial_checkpoint(tmp_path, capsys):
    code = run(["train", "--steps", "0", "--seed", "5", "--out", str(tmp_path)] + TINY)
    assert code == 0
    assert "seed: 5" in capsys.readouterr().out
    state = load_checkpoint(tmp_path / "checkpoint")
    assert state.step == 0
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    assert resolved["train"]["seed"] == 5 and resolved["model"]["d_model"] == 16
    fresh = MoEUT(state.model.cfg, np.random.default_rng(5))
    for (k, a), (_, b) in zip(fresh.parameters().items(), state.model.parameters().items()):
        assert a.data.tobytes() == b.data.tobytes(), k
    assert state.model.n_params() == count_params(state.model.cfg)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(["train", "--steps", "6", "--out", str(out), "--trace", "--log-every", "0"] + TINY) == 0
    return out


def test_train_outputs(trained):
    rows = [json.loads(l) for l in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(1, 7))
    assert (trained / "trace.jsonl").stat().st_size > 0


def test_resume_continues(trained, tmp_path):
    assert run(["train", "--resume", str(trained / "checkpoint"), "--steps", "8", "--out", str(tmp_path),
                "--synthetic-bytes", "20000", "--log-every", "0"]) == 0
    assert load_checkpoint(tmp_path / "checkpoint").step == 8


def test_eval_idempotent(trained, tmp_path, capsys):
    args = ["eval", "--checkpoint", str(trained / "checkpoint"), "--synthetic-bytes", "20000",
            "--out", str(tmp_path)]
    assert run(args) == 0
    first = capsys.readouterr().out
    assert run(args) == 0
    second = capsys.readouterr().out
    ppl = [l for l in first.splitlines() if l.startswith("perplexity")]
    assert ppl and ppl == [l for l in second.splitlines() if l.startswith("perplexity")]
    assert (tmp_path / "resolved_config.json").is_file()


def test_analyze_from_checkpoint(trained, tmp_path):
    assert run(["analyze", "--checkpoint", str(trained / "checkpoint"), "--synthetic-bytes", "20000",
                "--out", str(tmp_path), "--all-members"]) == 0
    for name in ("expert_layer_histogram.csv", "layer_position_score.csv", "token_expert_diversity.csv",
                 "column_iou.csv", "token_layer_specialization.csv", "residual_norms.csv",
                 "resolved_config.json", "trace.jsonl"):
        assert (tmp_path / name).is_file(), name


def test_analyze_from_trace_file(trained, tmp_path):
    assert run(["analyze", "--trace-file", str(trained / "trace.jsonl"), "--n-experts", "4",
                "--out", str(tmp_path)]) == 0
    assert (tmp_path / "column_iou.csv").is_file()


def test_corrupt_checkpoint_exit_2(trained, tmp_path):
    import shutil
    ck = tmp_path / "ck"
    shutil.copytree(trained / "checkpoint", ck)
    blob = ck / "tensors.bin"
    blob.write_bytes(blob.read_bytes()[:10])
    assert run(["eval", "--checkpoint", str(ck), "--out", str(tmp_path / "o")]) == 2


def test_numeric_error_exit_2(trained, tmp_path, capsys):
    from moeut.training import save_checkpoint
    state = load_checkpoint(trained / "checkpoint")
    next(iter(state.model.parameters().values())).data[:] = np.nan
    save_checkpoint(state, tmp_path / "ck")
    assert run(["eval", "--checkpoint", str(tmp_path / "ck"), "--synthetic-bytes", "20000",
                "--out", str(tmp_path / "o")]) == 2
    assert "layer-step 0" in capsys.readouterr().err


def test_device_threads_and_log_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MOEUT_LOG", "debug")
    assert run(["count-params", "--device-threads", "1", "--out", str(tmp_path)]) == 0
    assert run(["count-params", "--device-threads", "0", "--out", str(tmp_path)]) == 1
