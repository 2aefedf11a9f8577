"""Supervised fine-tuning of LoRA adapters on prompt -> target pairs.

The loss sums token log-likelihoods over target positions only and divides
by the number of examples. The learning rate follows a cosine schedule with
hard restarts; the epoch snapshot with the lowest eval loss is kept.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .cot_dataset import SFTExample
from .lora import adapter_state, attach_adapters, load_adapter_state, trainable_parameters
from .tinylm import BOS, EOS, PAD, SEP, SITE_NAMES, ModelConfig, TinyTransformer, tokenize

REFERENCE_SEEDS = (42, 2025, 7412013)


class EmptyTargetError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, lr: float, batch_id: Sequence[int], loss: float):
        self.step, self.lr, self.batch_id, self.loss = step, lr, list(batch_id), loss
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr:.3e}, examples={self.batch_id})")


@dataclass
class TrainConfig:
    seeds: list[int] = field(default_factory=lambda: list(REFERENCE_SEEDS))
    epochs: int = 5
    base_lr: float = 2e-5
    batch_size: int = 1
    scheduler: str = "cosine_with_restarts"
    num_cycles: Optional[int] = None  # None: one cycle per epoch
    selection_metric: str = "eval_loss"
    r: int = 64
    alpha: float = 64
    dropout: float = 0.0
    targets: list[str] = field(default_factory=lambda: list(SITE_NAMES))
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    base_model_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.scheduler != "cosine_with_restarts":
            raise ValueError(f"unsupported scheduler {self.scheduler!r}")
        if self.selection_metric != "eval_loss":
            raise ValueError(f"unsupported selection metric {self.selection_metric!r}")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    @property
    def cycles(self) -> int:
        return self.num_cycles if self.num_cycles is not None else self.epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def config_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# loss


def completion_mask(prompt_len: int, total_len: int) -> torch.Tensor:
    if not 0 <= prompt_len <= total_len:
        raise ValueError(f"need 0 <= prompt_len ({prompt_len}) <= total_len ({total_len})")
    mask = torch.zeros(total_len, dtype=torch.bool)
    mask[prompt_len:] = True
    return mask


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``-(1/N) * sum_i sum_{t in mask_i} log softmax(logits_i,t)[y_i,t]``.

    Accepts a single example ``(T, V)`` or a batch ``(N, T, V)``. Logits at
    unmasked positions never enter the computation.
    """
    if logits.dim() == 2:
        logits, targets, mask = logits.unsqueeze(0), targets.unsqueeze(0), mask.unsqueeze(0)
    mask = mask.bool()
    per_example = mask.any(dim=-1)
    if not bool(per_example.all()):
        bad = [i for i, ok in enumerate(per_example.tolist()) if not ok]
        raise EmptyTargetError(f"examples {bad} have no target positions")
    n = logits.shape[0]
    selected = torch.log_softmax(logits[mask], dim=-1)
    ll = selected.gather(-1, targets[mask].unsqueeze(-1)).squeeze(-1)
    return -ll.sum() / n


# ---------------------------------------------------------------------------
# schedule


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Cosine with hard restarts over ``config.cycles`` equal cycles, no warm-up."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    # exact rational phase within the current cycle
    progress = ((config.cycles * step) % total_steps) / total_steps
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# data


def prompt_text(system: str, user: str) -> str:
    return f"{system}\n{user}\n"


def encode_prompt(system: str, user: str, budget: int) -> list[int]:
    """``[BOS] prompt [SEP]`` keeping at most ``budget`` tokens (left-truncated)."""
    body = tokenize(prompt_text(system, user))
    room = budget - 2
    if room < 0:
        raise ValueError("prompt budget too small")
    if len(body) > room:
        body = body[len(body) - room :]
    return [BOS] + body + [SEP]


@dataclass
class EncodedExample:
    inputs: torch.Tensor
    labels: torch.Tensor
    mask: torch.Tensor


def encode_example(ex: SFTExample, max_seq_len: int) -> EncodedExample:
    target = tokenize(ex.target) + [EOS]
    # the full sequence may be one longer than the context: its last token is only a label
    budget = max_seq_len + 1 - len(target)
    if budget < 3:
        raise ValueError(f"target of {len(target)} tokens does not fit context {max_seq_len}")
    prompt = encode_prompt(ex.system, ex.user, budget)
    full = prompt + target
    mask = completion_mask(len(prompt), len(full))
    ids = torch.tensor(full, dtype=torch.long)
    return EncodedExample(ids[:-1], ids[1:], mask[1:])


def collate(batch: Sequence[EncodedExample]) -> EncodedExample:
    T = max(len(e.inputs) for e in batch)
    inputs = torch.full((len(batch), T), PAD, dtype=torch.long)
    labels = torch.full((len(batch), T), PAD, dtype=torch.long)
    mask = torch.zeros((len(batch), T), dtype=torch.bool)
    for i, e in enumerate(batch):
        n = len(e.inputs)
        inputs[i, :n], labels[i, :n], mask[i, :n] = e.inputs, e.labels, e.mask
    return EncodedExample(inputs, labels, mask)


def batch_loss(model: TinyTransformer, batch: EncodedExample) -> torch.Tensor:
    return cross_entropy(model(batch.inputs), batch.labels, batch.mask)


@torch.no_grad()
def eval_loss(model: TinyTransformer, encoded: Sequence[EncodedExample]) -> float:
    was = model.training
    model.eval()
    try:
        total = sum(float(batch_loss(model, collate([e]))) for e in encoded)
    finally:
        model.train(was)
    return total / len(encoded)


# ---------------------------------------------------------------------------
# training


@dataclass
class Checkpoint:
    adapters: dict
    step: int
    epoch: int
    eval_loss: float
    seed: int
    config_digest: str
    eval_history: list[float] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)

    def save(self, path: str | Path, **meta) -> None:
        torch.save(
            {
                "adapters": self.adapters,
                "step": self.step,
                "epoch": self.epoch,
                "eval_loss": self.eval_loss,
                "seed": self.seed,
                "config_digest": self.config_digest,
                "eval_history": self.eval_history,
                "meta": meta,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> tuple["Checkpoint", dict]:
        blob = torch.load(path, weights_only=True)
        meta = blob.pop("meta", {})
        return cls(**blob), meta


def build_base_model(config: TrainConfig) -> TinyTransformer:
    return TinyTransformer(config.model, seed=config.base_model_seed)


def train(
    model: TinyTransformer,
    train_examples: Sequence[SFTExample],
    eval_examples: Sequence[SFTExample],
    config: TrainConfig,
    seed: int,
    digest: Optional[str] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """Attach adapters to ``model`` and fine-tune them; return the best-by-eval-loss snapshot.

    On return the model holds the selected adapter weights.
    """
    if not train_examples or not eval_examples:
        raise ValueError("train and eval datasets must be non-empty")
    digest = digest or config_digest(config.to_dict())
    torch.manual_seed(seed)
    attach_adapters(model, config.targets, config.r, config.alpha, seed)
    params = trainable_parameters(model)
    optimizer = torch.optim.AdamW(params, lr=config.base_lr, betas=config.betas, weight_decay=config.weight_decay)

    seq_len = config.model.max_seq_len
    train_enc = [encode_example(ex, seq_len) for ex in train_examples]
    eval_enc = [encode_example(ex, seq_len) for ex in eval_examples]
    steps_per_epoch = math.ceil(len(train_enc) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    best: Optional[Checkpoint] = None
    history: list[float] = []
    train_losses: list[float] = []
    step = 0
    model.train()
    for epoch in range(config.epochs):
        gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
        order = torch.randperm(len(train_enc), generator=gen).tolist()
        for b in range(steps_per_epoch):
            ids = order[b * config.batch_size : (b + 1) * config.batch_size]
            lr = lr_at(step, total_steps, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss = batch_loss(model, collate([train_enc[i] for i in ids]))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(step, lr, ids, value)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            train_losses.append(value)
            if log:
                log({"step": step, "lr": lr, "loss": value})
            step += 1
        ev = eval_loss(model, eval_enc)
        if not math.isfinite(ev):
            raise TrainingDivergence(step, lr, [], ev)
        history.append(ev)
        if log:
            log({"epoch": epoch + 1, "eval_loss": ev})
        if best is None or ev < best.eval_loss:
            best = Checkpoint(adapter_state(model), step, epoch + 1, ev, seed, digest)

    best.eval_history = history
    best.train_losses = train_losses
    load_adapter_state(model, best.adapters)
    return best


# ---------------------------------------------------------------------------
# gradient check


def grad_check(
    model: TinyTransformer, batch: EncodedExample, epsilon: float = 1e-4, floor: float = 1e-8
) -> float:
    """Max over all trainable scalars of ``|g - g_fd| / max(|g|, |g_fd|, floor)``.

    ``g`` comes from autograd, ``g_fd`` from central differences of the loss.
    With losses around 10, a step of 1e-5 leaves roundoff of order 1e-10 in
    ``g_fd``, which dominates the relative error of components near 1e-6;
    1e-4 keeps both roundoff and truncation error well below the tolerance.
    """
    if not bool(batch.mask.reshape(len(batch.mask), -1).any(dim=-1).all()):
        raise EmptyTargetError("batch contains an example with no target positions")
    params = trainable_parameters(model)
    model.zero_grad(set_to_none=True)
    batch_loss(model, batch).backward()
    analytic = [p.grad.detach().clone() for p in params]

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + epsilon
                plus = float(batch_loss(model, batch))
                flat[i] = orig - epsilon
                minus = float(batch_loss(model, batch))
                flat[i] = orig
                numeric = (plus - minus) / (2 * epsilon)
                a = float(gflat[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    model.zero_grad(set_to_none=True)
    return worst
