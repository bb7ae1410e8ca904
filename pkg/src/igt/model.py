"""Toy decoder-only transformer with LoRA on q/v, a frozen token head and an Idea Head.

Parameters live in one flat ``name -> Tensor`` mapping. Names are prefixed by
group (``backbone.``, ``head.``, ``lora.``, ``idea.``) so freezing and the
trainable-parameter census are simple prefix filters.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import tensor as tt
from .tensor import Tensor

MAGIC = b"IGT1"


class ContextOverflowError(ValueError):
    pass


@dataclass
class ModelConfig:
    V: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 128
    lora_rank: int = 4
    lora_alpha: float | None = None  # defaults to 2 * lora_rank
    idea_window: int = 20
    d_ff: int | None = None  # defaults to 4 * d_model

    def __post_init__(self):
        if self.lora_alpha is None:
            self.lora_alpha = 2.0 * self.lora_rank
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.context_len < self.idea_window + 1:
            raise ValueError("context_len must be at least idea_window + 1")
        if self.V < 4:
            raise ValueError("vocab too small")

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    @property
    def idea_hidden(self) -> int:
        return self.d_model


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Fresh weights for every group. LoRA B starts at zero."""
    rng = np.random.default_rng(seed)
    d, V, f = cfg.d_model, cfg.V, cfg.d_ff

    def normal(*shape, std):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    p: dict[str, np.ndarray] = {
        "backbone.tok_emb": normal(V, d, std=0.1),
        "backbone.pos_emb": normal(cfg.context_len, d, std=0.02),
    }
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    for i in range(cfg.n_layers):
        pre = f"backbone.l{i}."
        p[pre + "ln1.g"] = np.ones(d, np.float32)
        p[pre + "ln1.b"] = np.zeros(d, np.float32)
        for w in ("wq", "wk", "wv"):
            p[pre + w] = normal(d, d, std=1 / math.sqrt(d))
        p[pre + "wo"] = normal(d, d, std=resid_std)
        p[pre + "ln2.g"] = np.ones(d, np.float32)
        p[pre + "ln2.b"] = np.zeros(d, np.float32)
        p[pre + "w1"] = normal(d, f, std=1 / math.sqrt(d))
        p[pre + "b1"] = np.zeros(f, np.float32)
        p[pre + "w2"] = normal(f, d, std=resid_std)
        p[pre + "b2"] = np.zeros(d, np.float32)
    p["backbone.lnf.g"] = np.ones(d, np.float32)
    p["backbone.lnf.b"] = np.zeros(d, np.float32)
    # logit std near 0.5 keeps the untrained distribution close to uniform
    p["head.w"] = normal(d, V, std=0.5 / math.sqrt(d))

    r = cfg.lora_rank
    for i in range(cfg.n_layers):
        for proj in ("q", "v"):
            p[f"lora.l{i}.{proj}.A"] = normal(d, r, std=1 / math.sqrt(d))
            p[f"lora.l{i}.{proj}.B"] = np.zeros((r, d), np.float32)

    p["idea.w_proj"] = normal(d, d, std=math.sqrt(2.0 / d))
    p["idea.b_proj"] = np.zeros(d, np.float32)
    p["idea.w_idea"] = normal(d, V, std=1 / math.sqrt(d))
    p["idea.b_idea"] = np.full(V, math.log(cfg.idea_window / V), np.float32)
    return {k: Tensor(v, name=k) for k, v in p.items()}


class IdeaGatedLM:
    """Holds the parameters and runs the forward passes.

    ``forward_hidden`` gives the final hidden states; ``token_logits`` and
    ``idea_logits`` read them with the frozen head and the Idea Head.
    """

    GROUPS = ("backbone", "head", "lora", "idea")

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.use_lora = True

    # -- parameter bookkeeping ------------------------------------------------

    def group(self, name: str) -> dict[str, Tensor]:
        pre = name + "."
        return {k: v for k, v in self.params.items() if k.startswith(pre)}

    def set_trainable(self, *groups: str) -> None:
        """Make exactly the tensors of ``groups`` trainable; everything else is frozen."""
        for g in groups:
            if g not in self.GROUPS:
                raise ValueError(f"unknown parameter group {g!r}")
        for k, t in self.params.items():
            t.requires_grad = k.split(".", 1)[0] in groups
            t.grad = None

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def n_trainable(self) -> int:
        return sum(t.size for t in self.trainable().values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def fingerprint(self, group: str) -> str:
        """SHA-256 over the raw bytes of one parameter group, in name order."""
        h = hashlib.sha256()
        for k in sorted(self.group(group)):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    # -- forward ---------------------------------------------------------------

    def _lora(self, x: Tensor, layer: int, proj: str) -> Tensor:
        A = self.params[f"lora.l{layer}.{proj}.A"]
        B = self.params[f"lora.l{layer}.{proj}.B"]
        return tt.matmul(tt.matmul(x, A), B) * self.cfg.lora_scaling

    def _attention(self, x: Tensor, layer: int) -> Tensor:
        cfg = self.cfg
        p = self.params
        pre = f"backbone.l{layer}."
        B, T, d = x.shape
        H = cfg.n_heads
        dh = d // H
        q = tt.matmul(x, p[pre + "wq"])
        k = tt.matmul(x, p[pre + "wk"])
        v = tt.matmul(x, p[pre + "wv"])
        if self.use_lora:
            q = q + self._lora(x, layer, "q")
            v = v + self._lora(x, layer, "v")

        def heads(t):
            return tt.transpose(tt.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        att = tt.matmul(q, tt.swap_last(k)) * (1.0 / math.sqrt(dh))
        att = tt.causal_softmax(att)
        out = tt.matmul(att, v)
        out = tt.reshape(tt.transpose(out, (0, 2, 1, 3)), (B, T, d))
        return tt.matmul(out, p[pre + "wo"])

    def _mlp(self, x: Tensor, layer: int) -> Tensor:
        p = self.params
        pre = f"backbone.l{layer}."
        hdn = tt.gelu(tt.add_bias(tt.matmul(x, p[pre + "w1"]), p[pre + "b1"]))
        return tt.add_bias(tt.matmul(hdn, p[pre + "w2"]), p[pre + "b2"])

    def forward_hidden(self, tokens) -> Tensor:
        """Final hidden states: ``[T, d]`` for one sequence, ``[B, T, d]`` for a batch."""
        ids = np.asarray(tokens, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError(f"expected a non-empty id sequence or batch, got shape {ids.shape}")
        T = ids.shape[1]
        if T > self.cfg.context_len:
            raise ContextOverflowError(f"sequence length {T} exceeds context_len {self.cfg.context_len}")
        p = self.params
        x = tt.embedding(p["backbone.tok_emb"], ids)
        pos = tt.embedding(p["backbone.pos_emb"], np.broadcast_to(np.arange(T), ids.shape))
        x = x + pos
        for i in range(self.cfg.n_layers):
            pre = f"backbone.l{i}."
            x = x + self._attention(tt.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), i)
            x = x + self._mlp(tt.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]), i)
        h = tt.layer_norm(x, p["backbone.lnf.g"], p["backbone.lnf.b"])
        return tt.reshape(h, h.shape[1:]) if single else h

    def _check_width(self, h: Tensor) -> None:
        if h.shape[-1] != self.cfg.d_model:
            raise tt.ShapeError(f"hidden width {h.shape[-1]} != d_model {self.cfg.d_model}")

    def token_logits(self, h: Tensor) -> Tensor:
        self._check_width(h)
        return tt.matmul(h, self.params["head.w"])

    def idea_logits(self, h: Tensor) -> Tensor:
        self._check_width(h)
        p = self.params
        z = tt.relu(tt.add_bias(tt.matmul(h, p["idea.w_proj"]), p["idea.b_proj"]))
        return tt.add_bias(tt.matmul(z, p["idea.w_idea"]), p["idea.b_idea"])

    # -- persistence -------------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.cfg, self.params, extra)

    @classmethod
    def load(cls, path: str | Path) -> tuple["IdeaGatedLM", dict]:
        cfg, params, extra = load_checkpoint(path)
        return cls(cfg, params), extra


# ---------------------------------------------------------------------------
# IGT1 checkpoint format
#
#   "IGT1" | u32 header length | header JSON (utf-8) | u32 tensor count |
#   per tensor: u32 name length | name | u32 rank | rank x u32 extents | f32 LE payload


def _write_u32(fh: BinaryIO, n: int) -> None:
    fh.write(struct.pack("<I", n))


def _read_u32(fh: BinaryIO) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError("truncated checkpoint")
    return struct.unpack("<I", raw)[0]


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor], extra: dict | None = None) -> None:
    header = json.dumps({"model": asdict(cfg), "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, len(header))
        fh.write(header)
        _write_u32(fh, len(params))
        for name in sorted(params):
            arr = params[name].data
            nb = name.encode()
            _write_u32(fh, len(nb))
            fh.write(nb)
            _write_u32(fh, arr.ndim)
            for e in arr.shape:
                _write_u32(fh, e)
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not an IGT1 checkpoint")
        header = json.loads(fh.read(_read_u32(fh)).decode())
        cfg = ModelConfig(**header["model"])
        params = {}
        for _ in range(_read_u32(fh)):
            name = fh.read(_read_u32(fh)).decode()
            shape = tuple(_read_u32(fh) for _ in range(_read_u32(fh)))
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"{path}: truncated payload for {name}")
            params[name] = Tensor(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32), name=name)
    return cfg, params, header.get("extra", {})
