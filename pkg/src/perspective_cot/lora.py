"""Low-rank adapters on frozen linear sites.

For a frozen weight ``W`` (d x k) an adapter holds ``A`` (r x k) and ``B``
(d x r) and computes ``h = W x + s B (A x)`` with ``s = alpha / r``.
Merging folds the update into ``W' = W + s B A``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import torch
from torch import nn

from .tinylm import DTYPE, SITE_NAMES, TinyTransformer

INIT_STD = 0.02


class LoraAdapter(nn.Module):
    def __init__(self, d: int, k: int, r: int, alpha: float):
        super().__init__()
        if r <= 0 or alpha <= 0:
            raise ValueError("rank and alpha must be positive")
        if r > min(d, k):
            raise ValueError(f"rank {r} exceeds min(d, k) = {min(d, k)}")
        self.d, self.k, self.r, self.alpha = d, k, r, alpha
        self.A = nn.Parameter(torch.zeros(r, k, dtype=DTYPE))
        self.B = nn.Parameter(torch.zeros(d, r, dtype=DTYPE))

    @property
    def s(self) -> float:
        return self.alpha / self.r

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        """``s B (A x)`` for row-vector batches, never forming ``B A``."""
        return self.s * ((x @ self.A.T) @ self.B.T)

    def delta_weight(self) -> torch.Tensor:
        return self.s * (self.B @ self.A)


def init_adapter(d: int, k: int, r: int, alpha: float, seed: int) -> LoraAdapter:
    """B = 0, A ~ N(0, 0.02^2) from ``seed``; the update starts at exactly zero."""
    adapter = LoraAdapter(d, k, r, alpha)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        adapter.A.copy_(torch.randn(r, k, generator=gen, dtype=DTYPE) * INIT_STD)
    return adapter


def _check_dims(x: torch.Tensor, W: torch.Tensor, adapter: LoraAdapter) -> None:
    d, k = W.shape
    if (adapter.d, adapter.k) != (d, k):
        raise ValueError(f"adapter shape {(adapter.d, adapter.k)} does not match weight {(d, k)}")
    if x is not None and x.shape[-1] != k:
        raise ValueError(f"input dimension {x.shape[-1]} != {k}")


def lora_forward(x: torch.Tensor, W: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """``W x + s B (A x)`` for a vector or a batch of row vectors."""
    _check_dims(x, W, adapter)
    return x @ W.T + adapter.delta(x)


def merge_adapter(W: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    _check_dims(None, W, adapter)
    return W + adapter.delta_weight()


class LoraLinear(nn.Module):
    """A frozen ``nn.Linear`` plus one adapter. Keeps the host's weight as ``base``."""

    def __init__(self, base: nn.Linear, adapter: LoraAdapter, dropout: float = 0.0):
        super().__init__()
        if dropout != 0.0:
            raise NotImplementedError("adapter dropout other than 0.0 is not supported")
        self.base = base
        self.adapter = adapter
        base.weight.requires_grad_(False)

    @property
    def weight(self) -> torch.Tensor:
        return self.base.weight

    def forward(self, x):
        return self.base(x) + self.adapter.delta(x)


@dataclass(frozen=True)
class AdapterTargets:
    site_names: frozenset[str]

    @classmethod
    def of(cls, names: Iterable[str]) -> "AdapterTargets":
        names = frozenset(names)
        unknown = names - set(SITE_NAMES)
        if unknown:
            raise KeyError(f"unknown site name(s): {sorted(unknown)}")
        return cls(names)


ALL_TARGETS = AdapterTargets(frozenset(SITE_NAMES))


def attach_adapters(
    model: TinyTransformer, targets: AdapterTargets | Iterable[str], r: int, alpha: float, seed: int
) -> TinyTransformer:
    """Freeze every base parameter and wrap each targeted site with a fresh adapter.

    Adapter seeds are derived from ``seed`` and the site position so the
    result is independent of target-set iteration order.
    """
    if not isinstance(targets, AdapterTargets):
        targets = AdapterTargets.of(targets)
    for p in model.parameters():
        p.requires_grad_(False)
    for offset, ((layer, name), module) in enumerate(model.iter_sites()):
        if name not in targets.site_names:
            continue
        if isinstance(module, LoraLinear):
            raise ValueError(f"site ({layer}, {name}) already has an adapter")
        d, k = module.weight.shape
        adapter = init_adapter(d, k, r, alpha, seed=seed * 1000 + offset)
        setattr(model.layers[layer], name, LoraLinear(module, adapter))
    return model


def adapters(model: TinyTransformer) -> dict[str, LoraAdapter]:
    """Attached adapters keyed ``"<layer>.<site>"``."""
    return {
        f"{layer}.{name}": module.adapter
        for (layer, name), module in model.iter_sites()
        if isinstance(module, LoraLinear)
    }


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def trainable_count(model: nn.Module) -> int:
    return sum(p.numel() for p in trainable_parameters(model))


def adapter_state(model: TinyTransformer) -> dict[str, dict]:
    return {
        key: {"A": ad.A.detach().clone(), "B": ad.B.detach().clone(), "r": ad.r, "alpha": ad.alpha}
        for key, ad in adapters(model).items()
    }


@torch.no_grad()
def load_adapter_state(model: TinyTransformer, state: dict[str, dict]) -> None:
    current = adapters(model)
    if set(current) != set(state):
        raise ValueError("adapter sites in checkpoint do not match the model")
    for key, entry in state.items():
        ad = current[key]
        if (ad.r, ad.alpha) != (entry["r"], entry["alpha"]):
            raise ValueError(f"adapter {key}: rank/alpha mismatch")
        ad.A.copy_(entry["A"])
        ad.B.copy_(entry["B"])


def save_adapters(model: TinyTransformer, path: str | Path, **meta) -> None:
    """Adapter-only checkpoint; base weights are not included."""
    torch.save({"adapters": adapter_state(model), "meta": meta}, path)


def load_adapters(path: str | Path) -> tuple[dict[str, dict], dict]:
    blob = torch.load(path, weights_only=True)
    return blob["adapters"], blob["meta"]


@torch.no_grad()
def merge_into_model(model: TinyTransformer) -> TinyTransformer:
    """Replace every adapted site by a plain linear layer holding ``W + s B A``."""
    for (layer, name), module in list(model.iter_sites()):
        if isinstance(module, LoraLinear):
            merged = nn.Linear(module.base.in_features, module.base.out_features, bias=False, dtype=DTYPE)
            merged.weight.copy_(merge_adapter(module.base.weight, module.adapter))
            setattr(model.layers[layer], name, merged)
    return model
