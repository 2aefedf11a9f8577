"""A small byte-level decoder-only transformer.

Each layer carries the seven projection sites used as LoRA targets
(``q_proj k_proj v_proj o_proj gate_proj up_proj down_proj``) as real
``nn.Linear`` modules, addressable by ``(layer, name)``. Everything runs in
float64 on CPU.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

DTYPE = torch.float64

SITE_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")

BYTE_VOCAB = 256
BOS, EOS, PAD, SEP = 256, 257, 258, 259
N_SPECIAL = 4

CHECKPOINT_VERSION = 1


class SequenceTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = BYTE_VOCAB + N_SPECIAL
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 512
    init_std: float = 0.02
    # The head is frozen under LoRA; its scale bounds the reachable logit margin.
    head_init_std: float = 1.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(tokens: Sequence[int]) -> str:
    """Inverse of :func:`tokenize`; special tokens are dropped."""
    return bytes(t for t in tokens if t < BYTE_VOCAB).decode("utf-8", errors="replace")


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, f = cfg.d_model, cfg.d_ff
        self.n_heads = cfg.n_heads
        self.attn_norm = RMSNorm(d)
        self.q_proj = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.k_proj = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.v_proj = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.o_proj = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.mlp_norm = RMSNorm(d)
        self.gate_proj = nn.Linear(d, f, bias=False, dtype=DTYPE)
        self.up_proj = nn.Linear(d, f, bias=False, dtype=DTYPE)
        self.down_proj = nn.Linear(f, d, bias=False, dtype=DTYPE)

    def attention(self, x):
        B, T, D = x.shape
        hd = D // self.n_heads
        q = self.q_proj(x).view(B, T, self.n_heads, hd).transpose(1, 2)
        k = self.k_proj(x).view(B, T, self.n_heads, hd).transpose(1, 2)
        v = self.v_proj(x).view(B, T, self.n_heads, hd).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        y = F.softmax(scores, dim=-1) @ v
        return self.o_proj(y.transpose(1, 2).reshape(B, T, D))

    def forward(self, x):
        x = x + self.attention(self.attn_norm(x))
        h = self.mlp_norm(x)
        return x + self.down_proj(F.silu(self.gate_proj(h)) * self.up_proj(h))


class TinyTransformer(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model, dtype=DTYPE)
        self.pos_emb = nn.Embedding(config.max_seq_len, config.d_model, dtype=DTYPE)
        self.layers = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.norm = RMSNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False, dtype=DTYPE)
        self._init_weights(seed)

    @torch.no_grad()
    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("norm.weight"):
                continue
            std = self.config.head_init_std if name == "lm_head.weight" else self.config.init_std
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * std)

    def site(self, layer: int, name: str) -> nn.Module:
        if name not in SITE_NAMES:
            raise KeyError(f"unknown site {name!r}")
        return getattr(self.layers[layer], name)

    def iter_sites(self) -> Iterator[tuple[tuple[int, str], nn.Module]]:
        for i, block in enumerate(self.layers):
            for name in SITE_NAMES:
                yield (i, name), getattr(block, name)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        T = tokens.shape[1]
        if T > self.config.max_seq_len:
            raise SequenceTooLongError(f"sequence of {T} tokens exceeds context {self.config.max_seq_len}")
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(T, device=tokens.device))
        for block in self.layers:
            x = block(x)
        logits = self.lm_head(self.norm(x))
        return logits[0] if squeeze else logits


def forward(model: TinyTransformer, tokens: Sequence[int] | torch.Tensor) -> torch.Tensor:
    """Logits of shape ``(len(tokens), vocab_size)``."""
    if not isinstance(tokens, torch.Tensor):
        tokens = torch.tensor(list(tokens), dtype=torch.long)
    return model(tokens)


@torch.no_grad()
def greedy_decode(
    model: TinyTransformer,
    prompt_tokens: Sequence[int],
    max_new: int,
    stop_sequence: Optional[str] = "</answer>",
) -> str:
    """Argmax decoding until ``stop_sequence``, EOS, context end or ``max_new`` tokens.

    The returned text ends at the last byte of the stop sequence when it is hit.
    """
    was_training = model.training
    model.eval()
    stop = stop_sequence.encode("utf-8") if stop_sequence else b""
    tokens = list(prompt_tokens)
    out = bytearray()
    try:
        for _ in range(max_new):
            if len(tokens) >= model.config.max_seq_len:
                break
            nxt = int(forward(model, tokens)[-1].argmax())
            if nxt == EOS:
                break
            tokens.append(nxt)
            if nxt < BYTE_VOCAB:
                out.append(nxt)
                if stop and out.endswith(stop):
                    break
    finally:
        model.train(was_training)
    return out.decode("utf-8", errors="replace")


def save_model(model: TinyTransformer, path: str | Path) -> None:
    """Full checkpoint: config plus every named tensor (adapters merged first if wanted)."""
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        },
        path,
    )


def load_model(path: str | Path) -> TinyTransformer:
    blob = torch.load(path, weights_only=True)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    model = TinyTransformer(ModelConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    return model
