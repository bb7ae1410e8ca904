"""Autoregressive generation with the gate, repetition penalty and the drift benchmark."""

from __future__ import annotations

import json
import random
import textwrap
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import BOS, PAD, SPECIALS, UNK, CorpusConfigError, CorpusSpec, Vocab, fill_template, sentence, tokenize
from .gate import GateConfig, gated_logits
from .model import IdeaGatedLM
from .tensor import softmax_np

MODES = ("greedy", "sample")
DRIFT_WINDOW = 20
# never emitted while decoding
SPECIAL_IDS = (UNK, BOS, PAD)


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    temperature: float = 0.8
    max_new_tokens: int = 40
    repetition_penalty: float = 1.2
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.repetition_penalty < 1:
            raise ValueError("repetition_penalty must be >= 1")
        if self.mode == "sample" and self.temperature <= 0:
            raise ValueError("temperature must be > 0 when sampling")


@dataclass
class Generation:
    tokens: list[int]
    truncated: bool = False


def apply_repetition_penalty(logits: np.ndarray, seen: Sequence[int], rho: float) -> np.ndarray:
    """Divide positive logits of seen ids by ``rho``, multiply negative ones by it."""
    out = logits.copy()
    if rho == 1 or not len(seen):
        return out
    ids = np.unique(np.asarray(seen, dtype=np.int64))
    v = out[ids]
    out[ids] = np.where(v > 0, v / rho, v * rho)
    return out


def next_logits(model: IdeaGatedLM, ids: Sequence[int], alpha: float, gate_cfg: GateConfig) -> np.ndarray:
    """Final-position logits after the gate; the ungated head output when ``alpha == 0``."""
    h = model.forward_hidden(np.asarray(ids, dtype=np.int64))
    z = model.token_logits(h)
    if alpha != 0:
        z = gated_logits(z, model.idea_logits(h), alpha, gate_cfg)
    return z.data[-1]


def generate(model: IdeaGatedLM, prompt: Sequence[int], cfg: DecodeConfig,
             gate_cfg: GateConfig | None = None) -> Generation:
    """Extend ``prompt`` by up to ``max_new_tokens`` ids; returns only the new ids.

    Generation stops early, with ``truncated`` set, when the context is full.
    """
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    gate_cfg = gate_cfg or GateConfig()
    rng = np.random.default_rng(cfg.seed)
    ids = list(prompt)
    new: list[int] = []
    limit = model.cfg.context_len
    truncated = False
    for _ in range(cfg.max_new_tokens):
        if len(ids) >= limit:
            truncated = True
            break
        z = next_logits(model, ids, cfg.alpha, gate_cfg)
        z = apply_repetition_penalty(z, new, cfg.repetition_penalty)
        z[list(SPECIAL_IDS)] = -np.inf
        if cfg.mode == "greedy":
            nxt = int(np.argmax(z))
        else:
            p = softmax_np(z.astype(np.float64) / cfg.temperature).astype(np.float64)
            nxt = int(rng.choice(len(p), p=p / p.sum()))
        ids.append(nxt)
        new.append(nxt)
    return Generation(new, truncated)


# ---------------------------------------------------------------------------
# drift classification


def domain_counts(words: Sequence[str], lexicons: dict[str, set[str]],
                  ignore: set[str] = frozenset(), window: int = DRIFT_WINDOW) -> dict[str, int]:
    """Count domain-exclusive words among the first ``window`` content words."""
    content = [w for w in words if w not in ignore][:window]
    return {name: sum(w in lex for w in content) for name, lex in lexicons.items()}


def is_drifted(words: Sequence[str], prompt_domain: str, lexicons: dict[str, set[str]],
               ignore: set[str] = frozenset(), window: int = DRIFT_WINDOW) -> bool:
    """True when some other domain has strictly more exclusive words than the prompt's."""
    counts = domain_counts(words, lexicons, ignore, window)
    own = counts.get(prompt_domain, 0)
    return any(c > own for name, c in counts.items() if name != prompt_domain)


def trajectory(words: Sequence[str], lexicons: dict[str, set[str]]) -> list[str | None]:
    """Per word, the domain it belongs to exclusively (``None`` for shared or glue words)."""
    out = []
    for w in words:
        owners = [n for n, lex in lexicons.items() if w in lex]
        out.append(owners[0] if len(owners) == 1 else None)
    return out


# ---------------------------------------------------------------------------
# adversarial prompts and the benchmark


@dataclass
class TrapPrompt:
    index: int
    domain: str
    bridge: str
    words: list[str]


def trap_prompts(spec: CorpusSpec, n: int, domain: str | None = None, seed: int = 0,
                 context_sentences: int = 2) -> list[TrapPrompt]:
    """Prompts in ``domain`` context that end on a bridge word.

    Each prompt is ``context_sentences`` ordinary sentences of the domain followed
    by the start of one of its bridge sentences, cut right after the bridge word.
    """
    if not spec.bridge_words:
        raise CorpusConfigError("corpus spec declares no bridge words")
    dom = spec.domain(domain) if domain else spec.domains[0]
    cuts = []
    for t in dom.bridge_templates:
        toks = t.split()
        for i, w in enumerate(toks):
            if w in spec.bridge_words:
                cuts.append((t, i))
                break
    if not cuts:
        raise CorpusConfigError(f"domain {dom.name!r} has no bridge template to build trap prompts from")
    rng = random.Random(seed)
    out = []
    for i in range(n):
        words: list[str] = []
        for _ in range(context_sentences):
            words.extend(sentence(dom, rng, bridge=False))
        template, cut = rng.choice(cuts)
        filled = fill_template(template, dom.content_lexicon, rng)
        words.extend(filled[: cut + 1])
        out.append(TrapPrompt(i, dom.name, filled[cut], words))
    return out


@dataclass
class PromptResult:
    index: int
    prompt: str
    generation: str
    trajectory: list[str | None]
    counts: dict[str, int]
    drifted: bool
    truncated: bool = False


@dataclass
class DriftReport:
    arm: str
    prompt_domain: str
    seed: int
    alpha: float
    results: list[PromptResult] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.results)

    @property
    def drifted_count(self) -> int:
        return sum(r.drifted for r in self.results)

    @property
    def drift_rate(self) -> float:
        return self.drifted_count / self.n if self.n else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["results"] = sorted(d["results"], key=lambda r: r["index"])
        d.update(drift_rate=self.drift_rate, drifted_count=self.drifted_count, generation_count=self.n)
        return d


def run_arm(model: IdeaGatedLM, vocab: Vocab, spec: CorpusSpec, prompts: list[TrapPrompt],
            cfg: DecodeConfig, arm: str, gate_cfg: GateConfig | None = None) -> DriftReport:
    lexicons = spec.exclusive_lexicons()
    ignore = set(spec.glue_words) | set(spec.bridge_words) | set(SPECIALS)
    report = DriftReport(arm, prompts[0].domain if prompts else "", cfg.seed, cfg.alpha)
    for p in prompts:
        gen = generate(model, [BOS] + tokenize(" ".join(p.words), vocab), cfg, gate_cfg)
        words = [vocab.id_to_token[i] for i in gen.tokens]
        report.results.append(PromptResult(
            index=p.index,
            prompt=" ".join(p.words),
            generation=" ".join(words),
            trajectory=trajectory(words, lexicons),
            counts=domain_counts(words, lexicons, ignore),
            drifted=is_drifted(words, p.domain, lexicons, ignore),
            truncated=gen.truncated,
        ))
    return report


def run_drift_bench(baseline: IdeaGatedLM, gated: IdeaGatedLM, vocab: Vocab, spec: CorpusSpec,
                    n_prompts: int, cfg: DecodeConfig, gate_cfg: GateConfig | None = None,
                    domain: str | None = None) -> tuple[DriftReport, DriftReport]:
    """Generate from both arms on the same trap prompts; the baseline always decodes at alpha 0."""
    prompts = trap_prompts(spec, n_prompts, domain, seed=cfg.seed)
    base_cfg = DecodeConfig(**{**asdict(cfg), "alpha": 0.0})
    return (run_arm(baseline, vocab, spec, prompts, base_cfg, "baseline", gate_cfg),
            run_arm(gated, vocab, spec, prompts, cfg, "gated", gate_cfg))


def bench_json(base: DriftReport, gated: DriftReport) -> str:
    return json.dumps({
        "baseline": base.to_dict(),
        "gated": gated.to_dict(),
        "baseline_drift_rate": base.drift_rate,
        "gated_drift_rate": gated.drift_rate,
    }, indent=2)


def side_by_side(base: DriftReport, gated: DriftReport, width: int = 60, limit: int | None = 10) -> str:
    """Two-column text view of both arms' continuations per prompt."""
    lines = []
    head = f"{'Baseline':<{width}} | Idea-Gated"
    lines.append(head)
    lines.append("-" * len(head) + "-" * 10)
    pairs = list(zip(base.results, gated.results))[:limit]
    for b, g in pairs:
        lines.append(f"Prompt: {b.prompt} ...")
        lw = textwrap.wrap("..." + b.generation, width) or [""]
        rw = textwrap.wrap("..." + g.generation, width) or [""]
        lw.append("(drift)" if b.drifted else "(on topic)")
        rw.append("(drift)" if g.drifted else "(on topic)")
        for i in range(max(len(lw), len(rw))):
            left = lw[i] if i < len(lw) else ""
            right = rw[i] if i < len(rw) else ""
            lines.append(f"{left:<{width}} | {right}")
        lines.append("")
    lines.append(f"drift rate: baseline {base.drift_rate:.3f}  gated {gated.drift_rate:.3f}  "
                 f"(n={base.n})")
    return "\n".join(lines)
