import copy
from collections import Counter

import pytest
import torch

from inrmark.codec import WatermarkDecoder
from inrmark.distortions import DistortionSpec
from inrmark.errors import ConfigurationError, ContractError, DomainError
from inrmark.finetune import (
    FinetuneConfig,
    SchedulePair,
    epoch_pair_schedule,
    finetune,
    finetune_step,
    freeze,
    generate_message,
)
from inrmark.sampler import sample_image
from inrmark.siren import INRConfig, init_siren

RES = [(40, 40), (48, 48), (56, 56)]
POOL = [DistortionSpec.parse(s) for s in ["identity", "gn:0.05", "mf:3", "jpeg:50", "crop:0.7", "resize:1.5"]]


def test_generate_message():
    a = generate_message(30, torch.Generator().manual_seed(1))
    b = generate_message(30, torch.Generator().manual_seed(1))
    assert a.shape == (30,) and torch.equal(a, b)
    assert set(a.tolist()) <= {0, 1}
    with pytest.raises(DomainError):
        generate_message(0)


def test_generate_message_balance():
    bits = generate_message(10_000, torch.Generator().manual_seed(2))
    assert 0.47 <= bits.double().mean().item() <= 0.53


def test_schedule_covers_cross_product():
    sched = epoch_pair_schedule(RES, POOL, torch.Generator().manual_seed(0))
    assert len(sched) == 18
    assert Counter(sched) == Counter(SchedulePair(r, d) for r in RES for d in POOL)


def test_schedule_single_and_empty():
    assert epoch_pair_schedule([(32, 32)], POOL[:1]) == [SchedulePair((32, 32), POOL[0])]
    with pytest.raises(DomainError):
        epoch_pair_schedule([], POOL)
    with pytest.raises(DomainError):
        epoch_pair_schedule(RES, [])


def test_schedule_seeds_permute():
    a = epoch_pair_schedule(RES, POOL, torch.Generator().manual_seed(0))
    b = epoch_pair_schedule(RES, POOL, torch.Generator().manual_seed(1))
    assert a != b and Counter(a) == Counter(b)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FinetuneConfig(lambda_msg=0)
    with pytest.raises(ConfigurationError):
        FinetuneConfig(lambda_img=-1)
    with pytest.raises(ConfigurationError):
        FinetuneConfig(resolutions=[])


@pytest.fixture
def parts():
    torch.manual_seed(0)
    clean = freeze(init_siren(INRConfig(hidden_layers=2, hidden_width=16, seed=1)))
    dec = freeze(WatermarkDecoder(8, 8))
    msg = generate_message(8, torch.Generator().manual_seed(0))
    return clean, dec, msg


def checksum(module):
    return [t.clone() for t in module.state_dict().values()]


def test_step_zero_image_loss_at_start(parts):
    clean, dec, msg = parts
    wm = copy.deepcopy(clean).requires_grad_(True)
    out = finetune_step(wm, clean, dec, SchedulePair((32, 32), POOL[0]), msg)
    assert out.img == 0.0
    assert out.total == pytest.approx(3e3 * out.msg, rel=1e-6)


def test_step_loss_decomposition(parts):
    clean, dec, msg = parts
    wm = copy.deepcopy(clean).requires_grad_(True)
    with torch.no_grad():
        wm.head.bias.add_(0.01)
    pair = SchedulePair((40, 40), POOL[4])
    out = finetune_step(wm, clean, dec, pair, msg, lambda_msg=7.0, lambda_img=11.0, generator=torch.Generator())
    assert out.img > 0
    assert out.total == pytest.approx(7.0 * out.msg + 11.0 * out.img, rel=1e-6)
    only_img = finetune_step(wm, clean, dec, pair, msg, lambda_msg=0.0, lambda_img=11.0, generator=torch.Generator())
    assert only_img.total == pytest.approx(11.0 * only_img.img, rel=1e-6)


def test_step_requires_frozen(parts):
    clean, dec, msg = parts
    wm = copy.deepcopy(clean).requires_grad_(True)
    dec.requires_grad_(True)
    with pytest.raises(ContractError):
        finetune_step(wm, clean, dec, SchedulePair((32, 32), POOL[0]), msg)


@pytest.mark.parametrize("spec", POOL, ids=str)
def test_step_gradients_only_into_wm(parts, spec):
    clean, dec, msg = parts
    wm = copy.deepcopy(clean).requires_grad_(True)
    before = checksum(clean) + checksum(dec)
    opt = torch.optim.Adam(wm.parameters(), lr=1e-3)
    finetune_step(wm, clean, dec, SchedulePair((48, 48), spec), msg, optimizer=opt, generator=torch.Generator())
    assert all(p.grad is not None and torch.isfinite(p.grad).all() for p in wm.parameters())
    assert all(p.grad is None for p in clean.parameters())
    assert all(p.grad is None for p in dec.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, checksum(clean) + checksum(dec)))
    assert not all(torch.equal(a, b) for a, b in zip(checksum(wm), checksum(clean)))


def test_finetune_frozen_schedule_and_message(parts):
    clean, dec, msg = parts
    msg_before = msg.clone()
    before = checksum(clean) + checksum(dec)
    cfg = FinetuneConfig(resolutions=RES, pool=[str(p) for p in POOL], epochs=3, eval_every=1, lr=1e-3, seed=4)
    seen = Counter()
    wm, report = finetune(clean, dec, msg, cfg, on_step=lambda e, pair, _: seen.update([(e, pair)]))
    for epoch in (1, 2, 3):
        assert Counter({p: c for (e, p), c in seen.items() if e == epoch}) == Counter(
            SchedulePair(r, d) for r in RES for d in POOL
        )
    assert all(torch.equal(a, b) for a, b in zip(before, checksum(clean) + checksum(dec)))
    assert torch.equal(msg, msg_before)
    assert len(report.eval_history) == 3 and report.best_epoch in (1, 2, 3)
    best = max(report.eval_history, key=lambda h: (h["bit_accuracy"], h["psnr"]))
    assert report.best_epoch == best["epoch"]
    for b in report.loss_curve:
        assert b.total == pytest.approx(cfg.lambda_msg * b.msg + cfg.lambda_img * b.img, rel=1e-6)


def test_finetune_deterministic(parts):
    clean, dec, msg = parts
    cfg = FinetuneConfig(resolutions=RES[:2], pool=["identity", "gn:0.05"], epochs=2, eval_every=1, lr=1e-3)
    a, _ = finetune(clean, dec, msg, cfg)
    b, _ = finetune(clean, dec, msg, cfg)
    assert all(torch.equal(x, y) for x, y in zip(checksum(a), checksum(b)))


def _anchor_run(parts, lambda_img, steps=10):
    clean, dec, msg = parts
    wm = copy.deepcopy(clean).requires_grad_(True)
    opt = torch.optim.Adam(wm.parameters(), lr=5e-5)
    pair = SchedulePair((32, 32), POOL[0])
    drift = []
    for _ in range(steps):
        finetune_step(wm, clean, dec, pair, msg, lambda_msg=3e3, lambda_img=lambda_img, optimizer=opt)
        with torch.no_grad():
            drift.append((sample_image(wm, 32, 32) - sample_image(clean, 32, 32)).abs().max().item())
    return drift


@pytest.mark.xfail(strict=True, reason="Adam is scale invariant: the first step follows the message gradient alone")
def test_huge_image_weight_anchors_inr(parts):
    assert _anchor_run(parts, 1e12)[-1] < 1e-3


def test_huge_image_weight_pulls_back(parts):
    # the image gradient is zero at step 0, so only later steps can show the anchor
    drift = _anchor_run(parts, 1e12)
    free = _anchor_run(parts, 0.0)
    assert drift[-1] < drift[0]
    assert drift[-1] < free[-1]


def test_message_length_mismatch(parts):
    clean, dec, _ = parts
    with pytest.raises(ContractError):
        finetune(clean, dec, torch.zeros(5, dtype=torch.int64), FinetuneConfig(epochs=1))
