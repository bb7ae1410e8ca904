"""AdamW, backbone pretraining, the baseline/gated training arms and perplexity.

A training log is one CSV with fixed columns (``LOG_COLUMNS``). ``kind`` is
``train`` for optimizer steps and ``eval`` for validation passes; columns that
do not apply to a row are left empty.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tt
from .corpus import BOS, StopwordList, Vocab, build_stopwords, default_stopword_count, tokenize
from .gate import GateConfig, alpha_at, gated_logits
from .model import IdeaGatedLM, ModelConfig
from .objective import LossWeights, target_matrix, total_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

ARMS = ("baseline", "gated")

LOG_COLUMNS = (
    "kind", "step", "alpha", "L_total", "L_token", "L_idea", "grad_norm",
    "val_token_loss", "val_ppl", "val_token_loss_ungated",
)


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def no_decay(name: str, t: Tensor) -> bool:
    """Biases and norm gains are not decayed."""
    return t.ndim < 2


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    cfg: AdamWConfig,
) -> None:
    """One in-place AdamW update of every parameter with ``requires_grad``.

    Decay is decoupled: ``p <- p * (1 - lr * wd)`` before the Adam step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for name, p in params.items():
        if not p.requires_grad or name not in grads:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise tt.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.weight_decay and not no_decay(name, p):
            p.data *= np.float32(1 - cfg.lr * cfg.weight_decay)
        denom = np.sqrt(v / bc2) + cfg.eps
        p.data -= (cfg.lr / bc1) * m / denom


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place to global norm ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = np.float32(max_norm / (total + 1e-6))
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    vocab: Vocab
    train_docs: list[list[int]]
    val_docs: list[list[int]]
    stopwords: StopwordList
    train_domains: list[str] = field(default_factory=list)
    val_domains: list[str] = field(default_factory=list)

    @property
    def V(self) -> int:
        return self.vocab.size

    def train_stream(self) -> np.ndarray:
        return stream(self.train_docs)

    def val_stream(self) -> np.ndarray:
        return stream(self.val_docs)

    def idea_mask(self) -> np.ndarray:
        return self.stopwords.mask(self.V)


def stream(docs: Iterable[Sequence[int]]) -> np.ndarray:
    """Concatenate documents, each preceded by BOS."""
    out: list[int] = []
    for d in docs:
        out.append(BOS)
        out.extend(d)
    return np.asarray(out, dtype=np.int64)


def make_dataset(train_texts, val_texts, vocab: Vocab, n_stop: int | None = None,
                 train_domains=(), val_domains=()) -> Dataset:
    train = [tokenize(t, vocab) for t in train_texts]
    val = [tokenize(t, vocab) for t in val_texts]
    n = default_stopword_count(vocab.size) if n_stop is None else n_stop
    return Dataset(vocab, train, val, build_stopwords(train, n, vocab.size),
                   list(train_domains), list(val_domains))


def sample_batch(rng: np.random.Generator, data: np.ndarray, batch_size: int, seq_len: int) -> np.ndarray:
    """``[batch_size, seq_len + 1]`` random windows of the token stream."""
    if len(data) < seq_len + 1:
        raise ValueError(f"token stream of length {len(data)} is shorter than seq_len + 1")
    starts = rng.integers(0, len(data) - seq_len, size=batch_size)
    return np.stack([data[s: s + seq_len + 1] for s in starts])


def eval_windows(data: np.ndarray, seq_len: int, max_windows: int | None = None) -> np.ndarray:
    """Non-overlapping ``seq_len + 1`` windows (consecutive windows share one boundary token)."""
    n = (len(data) - 1) // seq_len
    if max_windows is not None:
        n = min(n, max_windows)
    if n == 0:
        raise ValueError("validation set is empty")
    return np.stack([data[i * seq_len: i * seq_len + seq_len + 1] for i in range(n)])


# ---------------------------------------------------------------------------
# evaluation


def ppl_from_loss(loss: float) -> float:
    return math.exp(loss)


def token_nll(model: IdeaGatedLM, windows: np.ndarray, alpha: float = 0.0,
              gate_cfg: GateConfig | None = None, batch_size: int = 16) -> np.ndarray:
    """Per-token negative log-likelihood of the gated logits, shape ``[n_windows, seq_len]``."""
    if len(windows) == 0:
        raise ValueError("validation set is empty")
    gate_cfg = gate_cfg or GateConfig()
    out = []
    for i in range(0, len(windows), batch_size):
        w = windows[i: i + batch_size]
        h = model.forward_hidden(w[:, :-1])
        z = model.token_logits(h)
        if alpha != 0:
            z = gated_logits(z, model.idea_logits(h), alpha, gate_cfg)
        logp = tt.log_softmax_np(z.data)
        nxt = w[:, 1:]
        out.append(-np.take_along_axis(logp, nxt[..., None], axis=-1)[..., 0])
    return np.concatenate(out)


def evaluate_ppl(model: IdeaGatedLM, windows: np.ndarray, alpha: float = 0.0,
                 gate_cfg: GateConfig | None = None) -> dict[str, float]:
    loss = float(token_nll(model, windows, alpha, gate_cfg).mean(dtype=np.float64))
    return {"val_token_loss": loss, "ppl": ppl_from_loss(loss)}


def unigram_ppl(train_docs: Sequence[Sequence[int]], windows: np.ndarray, V: int) -> float:
    """Perplexity of an add-one unigram model fit on the training documents."""
    counts = np.ones(V, dtype=np.float64)
    for d in train_docs:
        np.add.at(counts, np.asarray(d, dtype=np.int64), 1)
    counts[BOS] += len(train_docs)
    logp = np.log(counts / counts.sum())
    return math.exp(-logp[windows[:, 1:]].mean())


# ---------------------------------------------------------------------------
# training log


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add_step(self, step, alpha, l_total, l_token, l_idea, grad_norm) -> None:
        self.rows.append({"kind": "train", "step": step, "alpha": alpha, "L_total": l_total,
                          "L_token": l_token, "L_idea": l_idea, "grad_norm": grad_norm})

    def add_eval(self, step, alpha, val_loss, val_loss_ungated=None) -> None:
        self.rows.append({"kind": "eval", "step": step, "alpha": alpha, "val_token_loss": val_loss,
                          "val_ppl": ppl_from_loss(val_loss), "val_token_loss_ungated": val_loss_ungated})

    def steps(self) -> list[dict]:
        return [r for r in self.rows if r["kind"] == "train"]

    def evals(self) -> list[dict]:
        return [r for r in self.rows if r["kind"] == "eval"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k)) for k in LOG_COLUMNS})
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> "TrainLog":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({k: (_parse(v) if k != "kind" else v) for k, v in r.items() if v != ""})
        return cls(rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        return float(v)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    seq_len: int = 128
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    arm: str = "gated"
    lam: float = 1.0
    detach_idea_from_lora: bool = False
    eval_every: int = 100
    val_windows: int = 64
    ckpt_every: int = 0

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")
        for k in ("steps", "batch_size", "seq_len"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


def forward_losses(model: IdeaGatedLM, batch: np.ndarray, alpha: float, gate_cfg: GateConfig,
                   idea_mask: np.ndarray | None, weights: LossWeights, with_idea: bool,
                   detach_idea: bool = False):
    """Run the model on a ``[B, L]`` batch and return the three losses (recorded if a tape is open)."""
    x, nxt = batch[:, :-1], batch[:, 1:]
    h = model.forward_hidden(x)
    z_tok = model.token_logits(h)
    if not with_idea:
        return total_loss(z_tok, None, nxt, None, None, weights)
    z_idea = model.idea_logits(h.detach() if detach_idea else h)
    z_final = gated_logits(z_tok, z_idea, alpha, gate_cfg)
    targets = target_matrix(batch, model.cfg.idea_window, model.cfg.V)
    return total_loss(z_final, z_idea, nxt, targets, idea_mask, weights)


def _optimize(model, data, cfg: TrainConfig, gate_cfg, idea_mask, weights, with_idea,
              windows, log_: TrainLog, alpha_fn, out_dir=None, ckpt_extra=None) -> None:
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    opt = cfg.adamw()
    params = model.trainable()

    def evaluate(step):
        a = alpha_fn(step)
        if with_idea:
            val = evaluate_ppl(model, windows, a, gate_cfg)["val_token_loss"]
            raw = evaluate_ppl(model, windows, 0.0, gate_cfg)["val_token_loss"]
            log_.add_eval(step, a, val, raw)
        else:
            log_.add_eval(step, a, evaluate_ppl(model, windows, 0.0)["val_token_loss"])

    for step in range(cfg.steps):
        if cfg.eval_every and step % cfg.eval_every == 0:
            evaluate(step)
        batch = sample_batch(rng, data, cfg.batch_size, cfg.seq_len)
        alpha = alpha_fn(step)
        model.zero_grad()
        with tt.tape():
            losses = forward_losses(model, batch, alpha, gate_cfg, idea_mask, weights, with_idea,
                                    cfg.detach_idea_from_lora)
            if not math.isfinite(losses.total.item()):
                raise TrainingDivergedError(f"loss became {losses.total.item()} at step {step}")
            tt.backward(losses.total)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
        gnorm = clip_grads(grads, cfg.grad_clip)
        adamw_step(params, grads, state, opt)
        log_.add_step(step, alpha, losses.total.item(), losses.token.item(), losses.idea.item(), gnorm)
        if out_dir is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            model.save(Path(out_dir) / f"step{step + 1:06d}.igt", ckpt_extra)
    evaluate(cfg.steps)
    model.zero_grad()


def pretrain_backbone(data: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
                      init_seed: int | None = None) -> tuple[IdeaGatedLM, TrainLog]:
    """Train backbone and token head on next-token prediction, then freeze everything.

    No gate and no adapters are involved (LoRA B is zero throughout).
    """
    model = IdeaGatedLM(model_cfg, seed=cfg.seed if init_seed is None else init_seed)
    model.use_lora = False
    model.set_trainable("backbone", "head")
    windows = eval_windows(data.val_stream(), cfg.seq_len, cfg.val_windows)
    tl = TrainLog()
    _optimize(model, data.train_stream(), cfg, GateConfig(), None, LossWeights(0.0), False,
              windows, tl, lambda s: 0.0)
    model.set_trainable()
    model.use_lora = True
    return model, tl


def prepare_arm(backbone: IdeaGatedLM, arm: str, seed: int) -> IdeaGatedLM:
    """Copy of the frozen backbone with fresh adapters and Idea Head.

    Adapter and Idea Head initialisation depends only on ``seed`` so both arms
    start from identical LoRA factors.
    """
    fresh = IdeaGatedLM(backbone.cfg, seed=seed).params
    params = {}
    for k, t in backbone.params.items():
        src = fresh[k] if k.split(".", 1)[0] in ("lora", "idea") else t
        params[k] = Tensor(src.data.copy(), name=k)
    model = IdeaGatedLM(backbone.cfg, params)
    model.set_trainable(*(("lora",) if arm == "baseline" else ("lora", "idea")))
    return model


def train_arm(arm: str, backbone: IdeaGatedLM | str | Path, data: Dataset, cfg: TrainConfig,
              gate_cfg: GateConfig | None = None, out_dir: str | Path | None = None
              ) -> tuple[IdeaGatedLM, TrainLog]:
    """Fine-tune one arm on top of the frozen backbone.

    ``baseline`` trains LoRA only with alpha fixed at 0 and no idea loss;
    ``gated`` trains LoRA and the Idea Head with the alpha ramp and the idea loss.
    """
    if arm not in ARMS:
        raise ValueError(f"arm must be one of {ARMS}, got {arm!r}")
    if isinstance(backbone, (str, Path)):
        if not Path(backbone).exists():
            raise FileNotFoundError(f"backbone checkpoint {backbone} not found")
        backbone, _ = IdeaGatedLM.load(backbone)
    gate_cfg = gate_cfg or GateConfig()
    model = prepare_arm(backbone, arm, cfg.seed)
    windows = eval_windows(data.val_stream(), cfg.seq_len, cfg.val_windows)
    gated = arm == "gated"
    weights = LossWeights(cfg.lam if gated else 0.0)
    alpha_fn = (lambda s: alpha_at(s, gate_cfg)) if gated else (lambda s: 0.0)
    tl = TrainLog()
    extra = {"arm": arm, "gate": gate_cfg.__dict__}
    _optimize(model, data.train_stream(), cfg, gate_cfg, data.idea_mask(), weights, gated,
              windows, tl, alpha_fn, out_dir, extra)
    model.set_trainable()
    return model, tl
