import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from inrmark.codec import (
    Lamb,
    PretrainConfig,
    WatermarkDecoder,
    WatermarkEncoder,
    decode_message,
    encode_residual,
    harden_message,
    make_watermarked,
    message_loss,
    pretrain_decoder,
)
from inrmark.errors import ConfigurationError, ContractError, DomainError


@pytest.fixture(scope="module")
def nets():
    torch.manual_seed(0)
    return WatermarkEncoder(16, 8).eval(), WatermarkDecoder(16, 8).eval()


def test_residual_shape_and_determinism(nets):
    enc, _ = nets
    img = torch.rand(3, 256, 256)
    msg = torch.randint(0, 2, (16,))
    with torch.no_grad():
        r = encode_residual(enc, img, msg)
        assert r.shape == img.shape
        assert torch.equal(r, encode_residual(enc, img, msg))


def test_residual_depends_on_message(nets):
    enc, _ = nets
    img = torch.rand(3, 64, 64)
    with torch.no_grad():
        a = encode_residual(enc, img, torch.zeros(16, dtype=torch.int64))
        b = encode_residual(enc, img, torch.ones(16, dtype=torch.int64))
    assert (a - b).norm() > 0


@settings(max_examples=20, deadline=None)
@given(scale=st.floats(0.1, 100.0), alpha=st.floats(0.01, 1.0))
def test_strength_bounds_the_change(nets, scale, alpha):
    enc, _ = nets
    img = scale * torch.randn(3, 32, 32)
    with torch.no_grad():
        wm = make_watermarked(img, encode_residual(enc, img, torch.ones(16, dtype=torch.int64)), alpha)
    # float32 rounding of img + r grows with |img|
    slack = 2 * torch.finfo(torch.float32).eps * img.abs().max()
    assert (wm - img).abs().max() <= alpha + slack


def test_encoder_rejects_small_and_wrong_length(nets):
    enc, _ = nets
    with pytest.raises(DomainError):
        encode_residual(enc, torch.rand(3, 16, 64), torch.zeros(16))
    with pytest.raises(ContractError):
        encode_residual(enc, torch.rand(3, 64, 64), torch.zeros(15))


def test_make_watermarked():
    img, r = torch.rand(3, 8, 8), torch.randn(3, 8, 8)
    assert torch.equal(make_watermarked(img, r, 0.0), img)
    assert torch.equal(make_watermarked(img, torch.zeros_like(r), 1.3), img)
    d1 = make_watermarked(img.double(), r.double(), 0.7) - img.double()
    d2 = make_watermarked(img.double(), r.double(), 1.4) - img.double()
    torch.testing.assert_close(d2, 2 * d1, rtol=1e-12, atol=1e-12)
    with pytest.raises(ContractError):
        make_watermarked(img, torch.zeros(3, 8, 9), 1.0)


@pytest.mark.parametrize("shape", [(256, 256), (128, 200), (32, 32), (33, 97), (64, 48), (300, 41)])
def test_decoder_any_resolution(nets, shape):
    _, dec = nets
    with torch.no_grad():
        logits = decode_message(dec, torch.rand(3, *shape))
    assert logits.shape == (16,)


def test_decoder_deterministic(nets):
    _, dec = nets
    img = torch.rand(3, 70, 90)
    with torch.no_grad():
        assert torch.equal(decode_message(dec, img), decode_message(dec, img))


def test_decoder_rejects_undersized(nets):
    _, dec = nets
    with pytest.raises(DomainError):
        decode_message(dec, torch.rand(3, 31, 64))


def test_harden_examples():
    assert harden_message(torch.tensor([-0.3, 2.1, 0.0])).tolist() == [0, 1, 0]
    assert harden_message(torch.tensor([0.1, 5.0, 1e-9])).tolist() == [1, 1, 1]
    pm = torch.tensor([1.0, -1.0, -1.0, 1.0])
    once = harden_message(pm)
    assert torch.equal(harden_message(2.0 * once - 1.0), once)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40), st.floats(1e-3, 1e3))
def test_harden_scale_invariant(values, scale):
    logits = torch.tensor(values, dtype=torch.float64)
    assert torch.equal(harden_message(logits), harden_message(logits * scale))


def test_bce_at_zero_logits_is_ln2():
    loss = message_loss(torch.zeros(30, dtype=torch.float64), torch.randint(0, 2, (30,)))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_matches_formula():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(30, generator=g, dtype=torch.float64)
    m = torch.randint(0, 2, (30,), generator=g).double()
    s = torch.sigmoid(logits)
    expected = -(m * torch.log(s) + (1 - m) * torch.log(1 - s)).mean()
    assert message_loss(logits, m).item() == pytest.approx(expected.item(), rel=1e-12)


def test_lamb_trust_ratio_step():
    w = torch.nn.Parameter(torch.tensor([3.0, 4.0]))
    opt = Lamb([w], lr=0.1, eps=0.0)
    w.grad = torch.tensor([1.0, -2.0])
    opt.step()
    # first step: update = sign(grad) elementwise; trust = |w| / |update| = 5 / sqrt(2)
    step = 0.1 * 5 / math.sqrt(2)
    torch.testing.assert_close(w.detach(), torch.tensor([3.0 - step, 4.0 + step]))


def test_pretrain_config_validation():
    with pytest.raises(ConfigurationError):
        PretrainConfig(alpha=0)
    with pytest.raises(ConfigurationError):
        PretrainConfig(lr=-1)
    with pytest.raises(ConfigurationError):
        PretrainConfig(pool=[])
    with pytest.raises(ConfigurationError):
        PretrainConfig(optimizer="sgd")


def _tiny_cfg(**kw):
    base = dict(resolution=(48, 48), message_length=8, epochs=2, batch_size=4, channels=8,
                pool=["identity", "jpeg:50", "crop:0.5", "resize:1.5"], eval_every=1, seed=3)
    base.update(kw)
    return PretrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_images():
    return torch.rand(10, 3, 48, 48, generator=torch.Generator().manual_seed(0))


def test_pretrain_needs_two_images():
    with pytest.raises(ConfigurationError):
        pretrain_decoder(_tiny_cfg(), images=torch.rand(1, 3, 32, 32))


def test_pretrain_returns_frozen_decoder_only(tiny_images):
    dec, report = pretrain_decoder(_tiny_cfg(), images=tiny_images)
    assert isinstance(dec, WatermarkDecoder)
    assert not dec.training and not any(p.requires_grad for p in dec.parameters())
    assert len(report.loss_curve) == 2 and len(report.val_curve) == 2
    for size in (32, 48, 64):
        assert decode_message(dec, torch.rand(3, size, size)).shape == (8,)


def test_pretrain_deterministic_and_resumable(tiny_images):
    cfg = _tiny_cfg()
    dec_full, rep_full = pretrain_decoder(cfg, images=tiny_images)
    dec_again, _ = pretrain_decoder(cfg, images=tiny_images)
    for a, b in zip(dec_full.state_dict().values(), dec_again.state_dict().values()):
        assert torch.equal(a, b)

    _, _, state = pretrain_decoder(cfg, images=tiny_images, return_state=True, until_epoch=1)
    assert state["epoch"] == 1
    dec_resumed, rep_resumed = pretrain_decoder(cfg, images=tiny_images, resume=state)
    for a, b in zip(dec_full.state_dict().values(), dec_resumed.state_dict().values()):
        assert torch.equal(a, b)
    assert rep_resumed.loss_curve == rep_full.loss_curve
