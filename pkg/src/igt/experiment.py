"""Run-directory layout and the desk-scale two-arm experiment.

Every artifact of one run lives under a single directory::

    run/
      manifest.json          config snapshot, seed, version, layout
      corpus/                spec.json, vocab.json, {train,val,pretrain_train,pretrain_val}.txt
      backbone.igt           frozen pretrained backbone
      pretrain_log.csv
      arms/<arm>/model.igt   fine-tuned arm checkpoint
      arms/<arm>/log.csv
      bench/drift.json, bench/side_by_side.txt
      xray/report.json, xray/report.csv

The defaults below are sized so the whole pipeline finishes in a few minutes
on one CPU core while still showing drift in the ungated arm.
"""

from __future__ import annotations

import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from . import __version__
from .corpus import (
    CorpusSpec,
    Vocab,
    bat_corpus_spec,
    build_vocab,
    generate_corpus,
    load_corpus,
    save_corpus,
    split_documents,
)
from .decode import DecodeConfig, bench_json, run_drift_bench, side_by_side
from .gate import GateConfig
from .model import IdeaGatedLM, ModelConfig
from .train import Dataset, TrainConfig, TrainLog, make_dataset, pretrain_backbone, train_arm

log = logging.getLogger(__name__)

LAYOUT = {
    "manifest": "manifest.json",
    "corpus": "corpus",
    "backbone": "backbone.igt",
    "pretrain_log": "pretrain_log.csv",
    "arms": "arms/{arm}",
    "bench": "bench",
    "xray": "xray",
}


class RunExistsError(FileExistsError):
    """An output artifact is already present and overwriting was not requested."""


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 64
    lora_rank: int = 4
    lora_alpha: float | None = None
    idea_window: int = 20

    def build(self, V: int) -> ModelConfig:
        return ModelConfig(V=V, **asdict(self))


@dataclass
class CorpusSection:
    doc_count: int = 2000
    doc_length: int = 48
    spec_path: str | None = None
    val_fraction: float = 0.05
    n_stopwords: int | None = None

    def build(self, seed: int) -> CorpusSpec:
        if self.spec_path:
            return CorpusSpec.load(self.spec_path)
        return bat_corpus_spec(self.doc_count, self.doc_length, seed)


def _pretrain_default() -> TrainConfig:
    return TrainConfig(steps=300, batch_size=16, seq_len=64, lr=3e-3, val_windows=32)


def _train_default() -> TrainConfig:
    return TrainConfig(steps=1000, batch_size=16, seq_len=64, lr=1e-3, val_windows=32)


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: TrainConfig = field(default_factory=_pretrain_default)
    train: TrainConfig = field(default_factory=_train_default)
    gate: GateConfig = field(default_factory=lambda: GateConfig(ramp_steps=100))
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(max_new_tokens=40))
    n_prompts: int = 200
    prompt_domain: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return _merge(cls(), raw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, **flat: Any) -> "ExperimentConfig":
        """Apply dotted overrides such as ``{"train.steps": 10}``; ``None`` values are skipped."""
        nested: dict = {}
        for key, value in flat.items():
            if value is None:
                continue
            *path, leaf = key.split(".")
            node = nested
            for p in path:
                node = node.setdefault(p, {})
            node[leaf] = value
        return _merge(self, nested)


def _merge(obj, raw: dict):
    """Return a copy of dataclass ``obj`` with ``raw`` merged in, re-running validation."""
    known = {f.name: f for f in fields(obj)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys for {type(obj).__name__}: {sorted(unknown)}")
    kwargs = {}
    for name in known:
        cur = getattr(obj, name)
        if name in raw and is_dataclass(cur) and isinstance(raw[name], dict):
            kwargs[name] = _merge(cur, raw[name])
        elif name in raw:
            kwargs[name] = raw[name]
        else:
            kwargs[name] = cur
    return type(obj)(**kwargs)


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    config: dict
    seed: int
    version: str
    layout: dict = field(default_factory=lambda: dict(LAYOUT))
    commands: list = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


class Run:
    """Paths and artifact IO for one run directory."""

    def __init__(self, root: str | Path, force: bool = False):
        self.root = Path(root)
        self.force = force

    # -- paths
    @property
    def manifest_path(self) -> Path:
        return self.root / LAYOUT["manifest"]

    @property
    def corpus_dir(self) -> Path:
        return self.root / LAYOUT["corpus"]

    @property
    def backbone_path(self) -> Path:
        return self.root / LAYOUT["backbone"]

    def arm_dir(self, arm: str) -> Path:
        return self.root / LAYOUT["arms"].format(arm=arm)

    def arm_checkpoint(self, arm: str) -> Path:
        return self.arm_dir(arm) / "model.igt"

    @property
    def bench_dir(self) -> Path:
        return self.root / LAYOUT["bench"]

    @property
    def xray_dir(self) -> Path:
        return self.root / LAYOUT["xray"]

    # -- manifest
    def config(self) -> ExperimentConfig:
        if not self.manifest_path.exists():
            raise FileNotFoundError(f"no manifest in {self.root}; run gen-corpus first")
        return ExperimentConfig.from_dict(RunManifest.load(self.manifest_path).config)

    def record(self, command: str, cfg: ExperimentConfig) -> None:
        """Write or update the manifest before ``command`` does any work."""
        self.root.mkdir(parents=True, exist_ok=True)
        if self.manifest_path.exists():
            man = RunManifest.load(self.manifest_path)
            man.config, man.seed = cfg.to_dict(), cfg.seed
        else:
            man = RunManifest(cfg.to_dict(), cfg.seed, version_string())
        man.commands.append({"command": command, "time": time.strftime("%Y-%m-%dT%H:%M:%S")})
        man.save(self.manifest_path)

    def claim(self, *paths: Path) -> None:
        """Refuse to continue if any output already exists, unless forced."""
        existing = [str(p) for p in paths if p.exists()]
        if existing and not self.force:
            raise RunExistsError(f"{existing[0]} exists; pass --force to overwrite")

    # -- corpus artifacts
    def spec(self) -> CorpusSpec:
        return CorpusSpec.load(self.corpus_dir / "spec.json")

    def vocab(self) -> Vocab:
        return Vocab.load(self.corpus_dir / "vocab.json")

    def datasets(self, cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
        """(fine-tuning data, pretraining data) with stopwords taken from the fine-tuning split."""
        d = self.corpus_dir
        if not (d / "vocab.json").exists():
            raise FileNotFoundError(f"no corpus in {d}; run gen-corpus first")
        vocab = self.vocab()
        n_stop = cfg.corpus.n_stopwords
        data = make_dataset(load_corpus(d / "train.txt"), load_corpus(d / "val.txt"), vocab, n_stop)
        pdata = make_dataset(load_corpus(d / "pretrain_train.txt"), load_corpus(d / "pretrain_val.txt"),
                             vocab, n_stop)
        return data, pdata

    def load_arm(self, arm: str) -> IdeaGatedLM:
        path = self.arm_checkpoint(arm)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found; train the {arm} arm first")
        return IdeaGatedLM.load(path)[0]


# ---------------------------------------------------------------------------
# pipeline stages


def gen_corpus(run: Run, cfg: ExperimentConfig) -> dict:
    d = run.corpus_dir
    run.claim(d / "vocab.json")
    run.record("gen-corpus", cfg)
    spec = cfg.corpus.build(cfg.seed)
    spec.validate()
    texts = generate_corpus(spec)
    ptexts = generate_corpus(spec.pretraining_variant())
    vocab = build_vocab(ptexts + texts)
    tr, va = split_documents(texts, cfg.seed, cfg.corpus.val_fraction)
    ptr, pva = split_documents(ptexts, cfg.seed, cfg.corpus.val_fraction)
    d.mkdir(parents=True, exist_ok=True)
    spec.save(d / "spec.json")
    vocab.save(d / "vocab.json")
    for name, docs in (("train", tr), ("val", va), ("pretrain_train", ptr), ("pretrain_val", pva)):
        save_corpus(docs, d / f"{name}.txt")
    return {"V": vocab.size, "train_docs": len(tr), "val_docs": len(va)}


def pretrain(run: Run, cfg: ExperimentConfig) -> TrainLog:
    run.claim(run.backbone_path)
    run.record("pretrain", cfg)
    _, pdata = run.datasets(cfg)
    tc = _seeded(cfg.pretrain, cfg.seed)
    model, tl = pretrain_backbone(pdata, cfg.model.build(pdata.V), tc)
    model.save(run.backbone_path, {"stage": "pretrain"})
    tl.save(run.root / LAYOUT["pretrain_log"])
    return tl


def train(run: Run, cfg: ExperimentConfig, arm: str) -> TrainLog:
    out = run.arm_dir(arm)
    run.claim(out / "model.igt", out / "log.csv")
    run.record(f"train --arm {arm}", cfg)
    if not run.backbone_path.exists():
        raise FileNotFoundError(f"backbone checkpoint {run.backbone_path} not found; run pretrain first")
    data, _ = run.datasets(cfg)
    tc = _seeded(cfg.train, cfg.seed, arm=arm)
    out.mkdir(parents=True, exist_ok=True)
    model, tl = train_arm(arm, run.backbone_path, data, tc, cfg.gate, out)
    model.save(out / "model.igt", {"arm": arm, "gate": asdict(cfg.gate)})
    tl.save(out / "log.csv")
    return tl


def bench(run: Run, cfg: ExperimentConfig):
    run.claim(run.bench_dir / "drift.json")
    run.record("bench-drift", cfg)
    dc = _seeded(cfg.decode, cfg.seed, alpha=cfg.gate.inference_alpha)
    base, gated = run_drift_bench(run.load_arm("baseline"), run.load_arm("gated"), run.vocab(), run.spec(),
                                  cfg.n_prompts, dc, cfg.gate, cfg.prompt_domain)
    run.bench_dir.mkdir(parents=True, exist_ok=True)
    (run.bench_dir / "drift.json").write_text(bench_json(base, gated) + "\n")
    (run.bench_dir / "side_by_side.txt").write_text(side_by_side(base, gated) + "\n")
    return base, gated


def run_all(run: Run, cfg: ExperimentConfig) -> dict:
    """Corpus, backbone, both arms and the drift bench; returns a summary with timings."""
    t0 = time.perf_counter()
    timings = {}
    summary: dict = {"corpus": gen_corpus(run, cfg)}
    timings["corpus"] = time.perf_counter() - t0
    pretrain(run, cfg)
    timings["pretrain"] = time.perf_counter() - t0
    for arm in ("baseline", "gated"):
        tl = train(run, cfg, arm)
        summary[f"{arm}_final_val_loss"] = tl.evals()[-1]["val_token_loss"]
        timings[arm] = time.perf_counter() - t0
    base, gated = bench(run, cfg)
    timings["bench"] = time.perf_counter() - t0
    summary.update(baseline_drift_rate=base.drift_rate, gated_drift_rate=gated.drift_rate,
                   n_prompts=base.n, seconds=timings)
    log.info("pipeline finished in %.1fs", timings["bench"])
    return summary


def _seeded(section, seed: int, **extra):
    """Copy of a config dataclass with its seed (and any ``extra`` fields) replaced."""
    return type(section)(**{**asdict(section), "seed": seed, **extra})
