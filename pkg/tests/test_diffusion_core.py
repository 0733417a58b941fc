import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddpm_forensics.denoiser import TinyUNet, frozen, make_denoiser
from ddpm_forensics.diffusion import (ImageBatch, TrainConfig, TrainingDiverged, forward_sample, generate,
                                      reverse_step, train_clean)
from ddpm_forensics.schedule import NoiseSchedule, desk_schedule, make_linear_schedule


class ZeroModel(torch.nn.Module):
    image_shape = (1, 4, 4)

    def forward(self, x, t):
        return torch.zeros_like(x)


class ExactEps(torch.nn.Module):
    def __init__(self, eps):
        super().__init__()
        self.eps = eps

    def forward(self, x, t):
        return self.eps


# -- schedule ---------------------------------------------------------------

def test_alpha_one_is_one_minus_beta(sched1000):
    assert sched1000.alpha(1) == pytest.approx(0.9999, abs=1e-15)


def test_alpha_bar_T_matches_product_oracle(sched1000):
    prod = 1.0
    for k in range(1000):
        prod *= 1.0 - (1e-4 + k * (0.02 - 1e-4) / 999)
    assert sched1000.alpha_bar(1000) == pytest.approx(prod, rel=1e-12)
    assert prod == pytest.approx(4.04e-5, rel=0.01)


def test_constant_beta_two_steps():
    s = make_linear_schedule(2, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bars, [0.5, 0.25])


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(2, 400), lo=st.floats(1e-5, 0.05), span=st.floats(0.0, 0.2))
def test_schedule_invariants(T, lo, span):
    s = make_linear_schedule(T, lo, min(lo + span, 0.5))
    ab = s.alpha_bars
    assert np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab < 1))
    np.testing.assert_allclose(s.alphas[1:] * ab[:-1], ab[1:], atol=1e-12)
    np.testing.assert_allclose(np.cumprod(s.alphas), ab, atol=1e-12)
    for t in range(2, T + 1):
        var = (1 - s.alpha(t)) * (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t))
        assert s.sigma(t) ** 2 == pytest.approx(var, abs=1e-12)


def test_schedule_roundtrip_and_hash(sched200):
    again = NoiseSchedule.from_dict(sched200.to_dict())
    assert again == sched200 and again.content_hash() == sched200.content_hash()
    assert desk_schedule(100).content_hash() != sched200.content_hash()


# -- forward / reverse ------------------------------------------------------

def _schedule_with_abar(value):
    s = make_linear_schedule(2, 1 - math.sqrt(value), 1 - math.sqrt(value))
    assert s.alpha_bar(2) == pytest.approx(value)
    return s


def test_forward_sample_examples():
    s = _schedule_with_abar(0.25)
    ones = torch.ones(1, 1, 2, 2)
    torch.testing.assert_close(forward_sample(ones, 2, torch.zeros_like(ones), s), 0.5 * ones)
    out = forward_sample(torch.zeros_like(ones), 2, ones, s)
    torch.testing.assert_close(out, torch.full_like(ones, 0.866025), atol=1e-6, rtol=0)


def test_forward_sample_matches_one_step_accumulation(sched1000):
    # content and noise-variance coefficients of iterated one-step transitions
    content, var = 1.0, 0.0
    for t in range(1, 1001):
        a = sched1000.alpha(t)
        content, var = math.sqrt(a) * content, a * var + (1 - a)
        assert content == pytest.approx(math.sqrt(sched1000.alpha_bar(t)), abs=1e-8)
        assert math.sqrt(var) == pytest.approx(math.sqrt(1 - sched1000.alpha_bar(t)), abs=1e-8)


def test_forward_sample_errors(sched200):
    x = torch.zeros(2, 1, 4, 4)
    with pytest.raises(ValueError):
        forward_sample(x, 1, torch.zeros(2, 1, 4, 5), sched200)
    with pytest.raises(ValueError):
        forward_sample(x, 0, torch.zeros_like(x), sched200)
    with pytest.raises(ValueError):
        forward_sample(x, 201, torch.zeros_like(x), sched200)


def test_reverse_step_zero_model(sched200):
    x = torch.randn(3, 1, 4, 4)
    out = reverse_step(ZeroModel(), x, 50, sched200, torch.zeros_like(x))
    torch.testing.assert_close(out, x / math.sqrt(sched200.alpha(50)))


def test_reverse_step_t1_ignores_noise(sched200):
    x = torch.randn(3, 1, 4, 4)
    a = reverse_step(ZeroModel(), x, 1, sched200, torch.randn_like(x))
    b = reverse_step(ZeroModel(), x, 1, sched200, None)
    assert torch.equal(a, b)


def test_reverse_step_inverts_forward_at_t1(sched200):
    g = torch.Generator().manual_seed(3)
    x0 = torch.rand(4, 3, 4, 4, generator=g) * 2 - 1
    eps = torch.randn(x0.shape, generator=g)
    x1 = forward_sample(x0, 1, eps, sched200)
    out = reverse_step(ExactEps(eps), x1, 1, sched200, torch.randn(x0.shape, generator=g))
    torch.testing.assert_close(out, x0, atol=1e-5, rtol=0)


# -- generation -------------------------------------------------------------

def test_generate_is_deterministic_and_zero_stamp_is_identity(small_sched):
    model = make_denoiser({"name": "TinyUNet", "base": 4, "emb_dim": 8, "image_size": 8}, 0)
    a = generate(model, small_sched, 3, seed=11)
    b = generate(model, small_sched, 3, seed=11)
    c = generate(model, small_sched, 3, seed=11, stamp=torch.zeros(3, 8, 8))
    assert isinstance(a, ImageBatch) and a.seed == 11
    assert torch.equal(a.data, b.data) and torch.equal(a.data, c.data)
    assert a.data.abs().max() <= 1.0
    assert not torch.equal(a.data, generate(model, small_sched, 3, seed=12).data)


def test_generate_rejects_empty(small_sched):
    with pytest.raises(ValueError):
        generate(ZeroModel(), small_sched, 0, 0)


def test_denoiser_shape_and_determinism():
    net = TinyUNet(base=4, emb_dim=8, image_size=8)
    x = torch.randn(2, 3, 8, 8)
    with frozen(net):
        assert net(x, 5).shape == x.shape
        assert torch.equal(net(x, torch.tensor([5, 5])), net(x, 5))
    with pytest.raises(ValueError):
        TinyUNet(image_size=10)


def test_make_denoiser_is_seeded():
    cfg = {"name": "TinyUNet", "base": 4, "emb_dim": 8, "image_size": 8}
    a, b = make_denoiser(cfg, 1), make_denoiser(cfg, 1)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


# -- training ---------------------------------------------------------------

def test_zero_output_loss_is_unit(sched200):
    class Frozen0(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.zeros(()))

        def forward(self, x, t):
            return self.w * x

    data = np.zeros((64, 1, 4, 4), np.float32)
    model = train_clean(Frozen0(), data, sched200, TrainConfig(steps=200, lr=0.0, batch_size=64))
    assert np.mean(model.loss_trace) == pytest.approx(1.0, abs=0.02)


def test_train_clean_errors(sched200):
    model = make_denoiser({"name": "TinyUNet", "base": 4, "emb_dim": 8, "image_size": 8}, 0)
    with pytest.raises(ValueError):
        train_clean(model, np.zeros((0, 3, 8, 8), np.float32), sched200, TrainConfig(steps=1))

    class Exploding(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.ones(()))

        def forward(self, x, t):
            return self.w * x * float("inf")

    with pytest.raises(TrainingDiverged):
        train_clean(Exploding(), np.zeros((4, 1, 4, 4), np.float32), sched200, TrainConfig(steps=3, batch_size=4))


@pytest.fixture(scope="module")
def single_image_model(sched200):
    img = np.zeros((1, 3, 16, 16), np.float32)
    img[:, 0, 4:12, 4:12] = 0.8
    img[:, 1] = -0.5
    model = make_denoiser({"name": "TinyUNet", "base": 8, "emb_dim": 16, "image_size": 16}, 0)
    train_clean(model, np.repeat(img, 8, 0), sched200, TrainConfig(steps=800, lr=3e-3, batch_size=16))
    return model, img


def test_single_image_dataset_is_reproduced(single_image_model, sched200):
    model, img = single_image_model
    samples = generate(model, sched200, 32, seed=0).data
    err = (samples.mean(0) - torch.from_numpy(img[0])).abs().mean()
    assert err < 0.2


def test_training_loss_decreases(single_image_model):
    trace = np.asarray(single_image_model[0].loss_trace)
    k = len(trace) // 10
    assert np.median(trace[-k:]) < np.median(trace[:k])
