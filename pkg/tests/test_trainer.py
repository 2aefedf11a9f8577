from __future__ import annotations

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from perspective_cot.cot_dataset import SFTExample
from perspective_cot.lora import adapters, attach_adapters
from perspective_cot.tinylm import BOS, DTYPE, EOS, SEP, ModelConfig, TinyTransformer
from perspective_cot.trainer import (
    Checkpoint,
    EmptyTargetError,
    EncodedExample,
    TrainConfig,
    TrainingDivergence,
    collate,
    completion_mask,
    config_digest,
    batch_loss,
    cross_entropy,
    encode_example,
    encode_prompt,
    grad_check,
    lr_at,
    train,
)

TINY = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=96)
GRAD_MICRO = ModelConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=16)


def _cfg(**kw) -> TrainConfig:
    base = dict(seeds=[1], epochs=2, base_lr=1e-2, r=4, alpha=4, model=TINY)
    base.update(kw)
    return TrainConfig(**base)


def _examples(n: int, offset: int = 0) -> list[SFTExample]:
    return [SFTExample("sys", f"q{i + offset}", f"a{(i + offset) % 3}") for i in range(n)]


def test_reference_defaults():
    cfg = TrainConfig()
    assert cfg.seeds == [42, 2025, 7412013]
    assert (cfg.epochs, cfg.base_lr, cfg.batch_size, cfg.r, cfg.alpha, cfg.dropout) == (5, 2e-5, 1, 64, 64, 0.0)
    assert cfg.cycles == 5
    assert cfg.targets == ["q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"]


@pytest.mark.parametrize(
    "kw", [dict(epochs=0), dict(base_lr=0), dict(seeds=[]), dict(scheduler="linear"), dict(optimizer="sgd")]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_digest_tracks_changes():
    assert config_digest(TrainConfig().to_dict()) == config_digest(TrainConfig().to_dict())
    assert config_digest(TrainConfig().to_dict()) != config_digest(TrainConfig(epochs=4).to_dict())


def test_completion_mask_examples():
    assert completion_mask(0, 5).tolist() == [True] * 5
    assert completion_mask(5, 5).tolist() == [False] * 5
    assert completion_mask(3, 7).tolist() == [False, False, False, True, True, True, True]
    for bad in ((-1, 3), (4, 3)):
        with pytest.raises(ValueError):
            completion_mask(*bad)


def test_uniform_logits_give_log_v():
    logits = torch.zeros(5, 8, dtype=DTYPE)
    targets = torch.tensor([0, 3, 7, 1, 2])
    loss = cross_entropy(logits, targets, completion_mask(4, 5))
    assert abs(float(loss) - math.log(8)) <= 1e-9


def test_hand_computed_two_tokens():
    logits = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], dtype=DTYPE)
    loss = float(cross_entropy(logits, torch.tensor([0, 1]), torch.tensor([True, True])))
    t1 = 1.0 - math.log(math.e + 2)
    t2 = 2.0 - math.log(math.exp(2) + 2)
    assert abs(loss - (-(t1 + t2))) <= 1e-9


def test_peaked_logits_monotone_to_zero():
    targets = torch.tensor([2, 0])
    mask = torch.tensor([True, True])
    losses = []
    for margin in (0.0, 1.0, 5.0, 20.0, 60.0):
        logits = torch.zeros(2, 4, dtype=DTYPE)
        logits[0, 2] = logits[1, 0] = margin
        losses.append(float(cross_entropy(logits, targets, mask)))
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-20


def test_sum_over_tokens_mean_over_examples():
    logits = torch.zeros(2, 4, 8, dtype=DTYPE)
    targets = torch.zeros(2, 4, dtype=torch.long)
    mask = torch.tensor([[False, True, True, True], [False, False, False, True]])
    assert abs(float(cross_entropy(logits, targets, mask)) - 4 * math.log(8) / 2) <= 1e-12


def test_empty_target_rejected():
    with pytest.raises(EmptyTargetError):
        cross_entropy(torch.zeros(3, 4, dtype=DTYPE), torch.zeros(3, dtype=torch.long), completion_mask(3, 3))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_masked_logits_do_not_matter(prompt_len, seed):
    g = torch.Generator().manual_seed(seed)
    T, V = prompt_len + 3, 11
    logits = torch.randn(T, V, generator=g, dtype=DTYPE)
    targets = torch.randint(0, V, (T,), generator=g)
    mask = completion_mask(prompt_len, T)
    perturbed = logits.clone()
    perturbed[:prompt_len] += 1e3 * torch.randn(prompt_len, V, generator=g, dtype=DTYPE)
    a, b = cross_entropy(logits, targets, mask), cross_entropy(perturbed, targets, mask)
    assert abs(float(a) - float(b)) <= 1e-12
    assert float(a) >= 0


def test_schedule_examples():
    cfg = TrainConfig(num_cycles=1)
    assert lr_at(0, 100, TrainConfig()) == 2e-5
    assert abs(lr_at(50, 100, cfg) - 1e-5) < 1e-20
    assert lr_at(50, 100, TrainConfig(num_cycles=2)) == 2e-5
    assert lr_at(100, 100, cfg) == 0.0
    for bad in ((-1, 10), (11, 10), (0, 0)):
        with pytest.raises(ValueError):
            lr_at(*bad, cfg)


@pytest.mark.parametrize("cycles", [1, 2, 5])
def test_schedule_restarts_and_cycle_ends(cycles):
    cfg = TrainConfig(num_cycles=cycles)
    total = cycles * 1000
    for c in range(cycles):
        start = c * 1000
        assert lr_at(start, total, cfg) == cfg.base_lr
        assert lr_at(start + 999, total, cfg) < 0.01 * cfg.base_lr
        steps = [lr_at(start + i, total, cfg) for i in range(1000)]
        assert all(a >= b for a, b in zip(steps, steps[1:]))


def test_encode_prompt_truncates_left():
    ids = encode_prompt("S", "abcdef", budget=6)
    assert ids[0] == BOS and ids[-1] == SEP and bytes(ids[1:-1]) == b"def\n"


def test_encode_example_layout():
    enc = encode_example(SFTExample("s", "u", "ab"), max_seq_len=64)
    full = [BOS] + list(b"s\nu\n") + [SEP] + list(b"ab") + [EOS]
    assert enc.inputs.tolist() == full[:-1] and enc.labels.tolist() == full[1:]
    assert enc.labels[enc.mask].tolist() == list(b"ab") + [EOS]
    with pytest.raises(ValueError):
        encode_example(SFTExample("s", "u", "x" * 70), max_seq_len=64)


def test_collate_pads():
    batch = collate([encode_example(SFTExample("s", "u", "a"), 64), encode_example(SFTExample("s", "long", "a"), 64)])
    assert batch.inputs.shape == batch.mask.shape == (2, 10)
    assert batch.mask.sum(-1).tolist() == [2, 2]


def test_selection_contract_five_epochs():
    cfg = _cfg(epochs=5)
    model = TinyTransformer(TINY, seed=0)
    log = []
    ckpt = train(model, _examples(20), _examples(4, offset=100), cfg, seed=3, log=log.append)
    assert len(ckpt.eval_history) == 5
    assert ckpt.eval_loss == min(ckpt.eval_history)
    assert ckpt.epoch == ckpt.eval_history.index(ckpt.eval_loss) + 1
    assert math.isfinite(ckpt.eval_loss)
    step_logs = [r for r in log if "step" in r]
    assert len(step_logs) == 100 and [r["step"] for r in step_logs] == list(range(100))
    assert [r["epoch"] for r in log if "epoch" in r] == [1, 2, 3, 4, 5]
    # the model is left holding the selected adapters
    got = {k: v.B for k, v in adapters(model).items()}
    assert all(torch.equal(got[k], ckpt.adapters[k]["B"]) for k in got)


def test_same_seed_bitwise_and_frozen_base():
    cfg = _cfg()
    runs = []
    for seed in (42, 42, 2025):
        model = TinyTransformer(TINY, seed=0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        ckpt = train(model, _examples(6), _examples(2, 50), cfg, seed=seed)
        base_after = {k: v for k, v in model.state_dict().items() if not k.endswith(("adapter.A", "adapter.B"))}
        for k, v in base_after.items():
            assert torch.equal(v, before[k.replace(".base.", ".")]), k
        runs.append(ckpt)
    a, b, c = runs
    assert all(torch.equal(a.adapters[k]["A"], b.adapters[k]["A"]) for k in a.adapters)
    assert all(torch.equal(a.adapters[k]["B"], b.adapters[k]["B"]) for k in a.adapters)
    assert a.train_losses == b.train_losses
    assert any(not torch.equal(a.adapters[k]["B"], c.adapters[k]["B"]) for k in a.adapters)


def test_divergence_reports_diagnostics():
    model = TinyTransformer(TINY, seed=0)
    with torch.no_grad():
        model.lm_head.weight[0, 0] = float("nan")
    with pytest.raises(TrainingDivergence) as exc:
        train(model, _examples(3), _examples(1), _cfg(), seed=1)
    err = exc.value
    assert err.step == 0 and err.lr == 1e-2 and len(err.batch_id) == 1 and math.isnan(err.loss)


def test_empty_datasets_rejected():
    with pytest.raises(ValueError):
        train(TinyTransformer(TINY), [], _examples(1), _cfg(), seed=1)


def test_checkpoint_save_load(tmp_path):
    model = TinyTransformer(TINY, seed=0)
    ckpt = train(model, _examples(2), _examples(1), _cfg(epochs=1), seed=1, digest="abc")
    path = tmp_path / "c.pt"
    ckpt.save(path, method="proposed", stages=2)
    loaded, meta = Checkpoint.load(path)
    assert meta == {"method": "proposed", "stages": 2}
    assert loaded.config_digest == "abc" and loaded.eval_loss == ckpt.eval_loss and loaded.seed == 1


def _grad_batch() -> EncodedExample:
    g = torch.Generator().manual_seed(0)
    tokens = torch.randint(0, 16, (2, 9), generator=g)
    mask = torch.zeros(2, 8, dtype=torch.bool)
    mask[0, 4:] = True
    mask[1, 6:] = True
    return EncodedExample(tokens[:, :-1], tokens[:, 1:], mask)


def _grad_model(nonzero_b: bool) -> TinyTransformer:
    model = TinyTransformer(GRAD_MICRO, seed=0)
    attach_adapters(model, TrainConfig().targets, r=2, alpha=2, seed=0)
    if nonzero_b:
        g = torch.Generator().manual_seed(9)
        with torch.no_grad():
            for ad in adapters(model).values():
                ad.B.copy_(0.1 * torch.randn(ad.B.shape, generator=g, dtype=DTYPE))
    return model


def test_grad_check_micro_model():
    assert grad_check(_grad_model(nonzero_b=True), _grad_batch(), epsilon=1e-4) < 1e-4


def test_grad_check_fresh_micro_model_small_step():
    # freshly attached adapters (B = 0) at the smaller step still clear the tolerance
    assert grad_check(_grad_model(nonzero_b=False), _grad_batch(), epsilon=1e-5) < 1e-4


def test_grad_check_zero_b():
    model = _grad_model(nonzero_b=False)
    assert grad_check(model, _grad_batch(), epsilon=1e-4) < 1e-4
    batch_loss(model, _grad_batch()).backward()
    grads_b = [ad.B.grad.abs().max() for ad in adapters(model).values()]
    grads_a = [ad.A.grad.abs().max() for ad in adapters(model).values()]
    assert max(grads_b) > 0
    assert max(grads_a) == 0  # B = 0 blocks the path to A


def test_grad_check_rejects_empty_target():
    batch = _grad_batch()
    batch.mask[1] = False
    with pytest.raises(EmptyTargetError):
        grad_check(_grad_model(nonzero_b=True), batch)
