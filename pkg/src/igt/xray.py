"""Per-token view of what the gate does to the next-token distribution."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Vocab
from .gate import GateConfig, compute_gate
from .model import IdeaGatedLM
from .tensor import log_softmax_np

CSV_COLUMNS = ("token", "p_base", "p_gated", "delta_pct", "gate_value")


@dataclass
class XrayRow:
    token: str
    token_id: int
    p_base: float
    p_gated: float
    delta_pct: float
    gate_value: float


@dataclass
class XrayReport:
    prompt: str
    alpha: float
    rows: list[XrayRow]
    boosted: list[XrayRow] = field(default_factory=list)
    suppressed: list[XrayRow] = field(default_factory=list)

    def row(self, token: str) -> XrayRow:
        for r in self.rows:
            if r.token == token:
                return r
        raise KeyError(token)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.token, repr(r.p_base), repr(r.p_gated), repr(r.delta_pct), repr(r.gate_value)])
        return buf.getvalue()


def distributions(z_token: np.ndarray, gate: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ungated and gated next-token probabilities, computed in float64."""
    p_base = np.exp(log_softmax_np(z_token.astype(np.float64)))
    p_gated = np.exp(log_softmax_np(z_token.astype(np.float64) + gate.astype(np.float64)))
    return p_base, p_gated


def build_report(prompt: str, tokens: Sequence[str], z_token: np.ndarray, gate: np.ndarray,
                 alpha: float, k: int) -> XrayReport:
    p_base, p_gated = distributions(z_token, gate)
    delta = (p_gated - p_base) / p_base * 100.0
    rows = [XrayRow(tokens[i], i, float(p_base[i]), float(p_gated[i]), float(delta[i]), float(gate[i]))
            for i in range(len(tokens))]
    up = sorted((r for r in rows if r.delta_pct > 0), key=lambda r: (-r.delta_pct, r.token_id))
    down = sorted((r for r in rows if r.delta_pct < 0), key=lambda r: (r.delta_pct, r.token_id))
    return XrayReport(prompt, alpha, rows, up[:k], down[:k])


def xray(model: IdeaGatedLM, vocab: Vocab, prompt_ids: Sequence[int], alpha_star: float = 0.5,
         k: int = 10, gate_cfg: GateConfig | None = None) -> XrayReport:
    """Compare alpha=0 and alpha=``alpha_star`` distributions at the last prompt position.

    One forward pass supplies both the token logits and the idea logits.
    """
    gate_cfg = gate_cfg or GateConfig()
    h = model.forward_hidden(np.asarray(prompt_ids, dtype=np.int64))
    z_token = model.token_logits(h).data[-1]
    gate = compute_gate(model.idea_logits(h), alpha_star, gate_cfg).data[-1]
    prompt = " ".join(vocab.id_to_token[i] for i in prompt_ids)
    return build_report(prompt, vocab.id_to_token, z_token, gate, alpha_star, k)
