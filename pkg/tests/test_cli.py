import json
import math
import os

import pytest

import igt.cli as cli
from igt.cli import main
from igt.experiment import ExperimentConfig, RunManifest

TINY = {
    "corpus": {"doc_count": 60, "doc_length": 24},
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "context_len": 32, "lora_rank": 2, "idea_window": 5},
    "pretrain": {"steps": 8, "batch_size": 4, "seq_len": 16, "eval_every": 4, "val_windows": 4},
    "train": {"steps": 8, "batch_size": 4, "seq_len": 16, "eval_every": 4, "val_windows": 4},
    "gate": {"ramp_steps": 4},
    "decode": {"max_new_tokens": 8},
    "n_prompts": 3,
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def trained(tmp_path, config, capsys):
    out = tmp_path / "run"
    for argv in (["gen-corpus"], ["pretrain"], ["train", "--arm", "baseline"], ["train", "--arm", "gated"]):
        code, _, err = run(capsys, *argv, "--config", config, "--out", out, "--seed", 7)
        assert code == 0, err
    return out


def test_manifest_written_first(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert run(capsys, "gen-corpus", "--config", config, "--out", out, "--seed", 3)[0] == 0
    man = RunManifest.load(out / "manifest.json")
    assert man.seed == 3 and man.config["corpus"]["doc_count"] == 60
    assert man.version and "corpus" in man.layout
    assert (out / "corpus" / "vocab.json").exists()


def test_refuses_overwrite_without_force(tmp_path, config, capsys):
    out = tmp_path / "run"
    run(capsys, "gen-corpus", "--config", config, "--out", out)
    code, _, err = run(capsys, "gen-corpus", "--config", config, "--out", out)
    assert code == 1 and err.count("\n") == 1 and "--force" in err
    assert run(capsys, "gen-corpus", "--config", config, "--out", out, "--force")[0] == 0


def test_usage_errors_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", tmp_path)
    assert code == 2 and err.startswith("igt: error: usage:") and err.count("\n") == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert run(capsys, "gen-corpus", "--config", bad, "--out", tmp_path / "r")[0] == 2
    assert run(capsys, "gen-corpus", "--config", tmp_path / "missing.json", "--out", tmp_path / "r")[0] == 2
    assert run(capsys, "frobnicate")[0] == 2


def test_train_requires_backbone(tmp_path, config, capsys):
    out = tmp_path / "run"
    run(capsys, "gen-corpus", "--config", config, "--out", out)
    code, _, err = run(capsys, "train", "--arm", "gated", "--out", out)
    assert code == 1 and "backbone" in err and err.count("\n") == 1


def test_train_twice_gives_identical_logs(tmp_path, config, capsys, trained):
    first = (trained / "arms" / "gated" / "log.csv").read_bytes()
    code, _, err = run(capsys, "train", "--arm", "gated", "--seed", 7, "--out", trained, "--force")
    assert code == 0, err
    assert (trained / "arms" / "gated" / "log.csv").read_bytes() == first


def test_eval_prints_loss_and_ppl(capsys, trained):
    code, out, _ = run(capsys, "eval", "--arm", "gated", "--out", trained)
    res = json.loads(out)
    assert code == 0 and math.isclose(res["ppl"], math.exp(res["val_loss"]), rel_tol=1e-12)
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "arms" / "baseline" / "model.igt", "--out", trained)
    assert code == 0 and json.loads(out)["alpha"] == 0.0


def test_bench_xray_generate(capsys, trained):
    code, out, err = run(capsys, "bench-drift", "--out", trained)
    assert code == 0, err
    assert {"baseline_drift_rate", "gated_drift_rate"} <= set(json.loads(out))
    report = json.loads((trained / "bench" / "drift.json").read_text())
    assert report["baseline"]["generation_count"] == 3
    code, out, err = run(capsys, "xray", "--out", trained, "-k", 3)
    assert code == 0, err
    assert (trained / "xray" / "report.csv").exists()
    code, out, err = run(capsys, "generate", "--out", trained, "--prompt", "the owl", "--max-new-tokens", 4)
    assert code == 0 and len(out.split()) == 4


def test_steps_flag_overrides_config(tmp_path, config, capsys, trained):
    code, _, _ = run(capsys, "train", "--arm", "baseline", "--steps", 3, "--out", trained, "--force")
    assert code == 0
    assert ExperimentConfig.from_dict(RunManifest.load(trained / "manifest.json").config).train.steps == 3


def test_threads_env_caps_blas(monkeypatch):
    monkeypatch.setenv("IGT_THREADS", "2")
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    cli._cap_threads()
    assert os.environ["OMP_NUM_THREADS"] == "2"


def test_config_overrides():
    cfg = ExperimentConfig().with_overrides(**{"train.steps": 9, "gate.alpha_max": None, "seed": 4})
    assert cfg.train.steps == 9 and cfg.seed == 4 and cfg.gate.alpha_max == 0.5
    with pytest.raises(ValueError):
        ExperimentConfig().with_overrides(**{"train.nope": 1})
    assert ExperimentConfig.from_dict(ExperimentConfig().to_dict()) == ExperimentConfig()
