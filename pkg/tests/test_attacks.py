import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddpm_forensics.attacks import (BackdoorSpec, Method, TargetImage, TriggerPattern, VillanSchedulers,
                                    backdoor_eps_target, backdoor_forward_sample, coefficients_for,
                                    ddpm_villan_schedulers, train_backdoor, trojdiff_kt)
from ddpm_forensics.data import make_target, make_trigger
from ddpm_forensics.denoiser import make_denoiser
from ddpm_forensics.diffusion import TrainConfig, forward_sample, posterior_step
from ddpm_forensics.schedule import make_linear_schedule
from ddpm_forensics.shift import lambda_whitebox


def accumulate(a, b, c):
    """Direct-sampling coefficients obtained by iterating the one-step transition."""
    A, B, V = 1.0, 0.0, 0.0
    out = []
    for at, bt, ct in zip(a, b, c):
        A, B, V = at * A, at * B + bt, at * at * V + ct
        out.append((A, B, math.sqrt(V)))
    return np.array(out)


def spec_for(method, **kw):
    return BackdoorSpec(method, make_trigger("box"), make_target("diamond"), 0.3, **kw)


def villan_custom(sched):
    # a non-DDPM correction scheduler so the h_t recursion is exercised
    content = lambda t: math.sqrt(sched.alpha_bar(t))  # noqa: E731
    return VillanSchedulers(content, lambda t: math.sqrt(1 - sched.alpha_bar(t)),
                            lambda t: 0.7 * (1 - sched.alpha_bar(t)), "custom")


@pytest.mark.parametrize("method,kw", [("BadDiffusion", {}), ("TrojDiff", {"gamma": 0.6}),
                                       ("VillanDiffusion", "default"), ("VillanDiffusion", "custom")])
def test_recursion_matches_direct_coefficients(sched1000, method, kw):
    if method == "VillanDiffusion":
        villan = ddpm_villan_schedulers(sched1000) if kw == "default" else villan_custom(sched1000)
        c = coefficients_for(Method.VILLANDIFFUSION, sched1000, villan=villan)
    else:
        c = coefficients_for(Method(method), sched1000, **kw)
    acc = accumulate(c.a, c.b, c.c)
    np.testing.assert_allclose(acc[:, 0], c.direct_content_coef, atol=1e-6)
    np.testing.assert_allclose(acc[:, 1], c.direct_trigger_coef, atol=1e-6)
    np.testing.assert_allclose(acc[:, 2], c.direct_noise_coef, atol=1e-6)


def test_baddiffusion_plugin_values():
    s = make_linear_schedule(2, 0.19, 0.19)
    c = coefficients_for(Method.BADDIFFUSION, s)
    assert (c.a[0], c.b[0], c.c[0]) == pytest.approx((0.9, 0.1, 0.19))


def test_baddiffusion_direct_trigger_coefficient(sched1000):
    c = coefficients_for(Method.BADDIFFUSION, sched1000)
    np.testing.assert_allclose(c.direct_trigger_coef, 1 - np.sqrt(sched1000.alpha_bars), atol=1e-12)


def test_trojdiff_kt_base_case(sched1000):
    assert trojdiff_kt(sched1000, 1) == pytest.approx(0.01, abs=1e-12)


def test_trojdiff_kt_consistency(sched1000):
    for t in range(1, 1001):
        lhs = math.sqrt(sched1000.alpha(t)) * math.sqrt(1 - sched1000.alpha_bar(t - 1)) + trojdiff_kt(sched1000, t)
        assert lhs == pytest.approx(math.sqrt(1 - sched1000.alpha_bar(t)), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(gamma=st.floats(0.0, 1.0))
def test_trojdiff_accumulated_trigger(gamma):
    s = make_linear_schedule(300)
    c = coefficients_for(Method.TROJDIFF, s, gamma=gamma)
    acc = accumulate(c.a, c.b, c.c)
    np.testing.assert_allclose(acc[:, 1], np.sqrt(1 - s.alpha_bars) * (1 - gamma), atol=1e-6)
    np.testing.assert_allclose(acc[:, 2], np.sqrt(1 - s.alpha_bars) * gamma, atol=1e-6)


def test_trojdiff_gamma_one_has_no_trigger(sched200):
    c = coefficients_for(Method.TROJDIFF, sched200, gamma=1.0)
    assert np.all(c.b == 0)
    g = torch.Generator().manual_seed(0)
    x0, eps = torch.randn(3, 3, 16, 16, generator=g), torch.randn(3, 3, 16, 16, generator=g)
    spec = spec_for("TrojDiff", gamma=1.0)
    t = torch.tensor([1, 77, 200])
    torch.testing.assert_close(backdoor_forward_sample(spec, x0, t, eps, sched200), forward_sample(x0, t, eps, sched200))
    # the training target reduces to the injected noise
    xt = forward_sample(x0, t, eps, sched200)
    torch.testing.assert_close(backdoor_eps_target(coefficients_for(spec, sched200), t, xt, x0, spec.trigger.pattern),
                               eps, atol=1e-4, rtol=0)


def test_villan_default_equals_baddiffusion(sched1000):
    v = coefficients_for(Method.VILLANDIFFUSION, sched1000, villan=ddpm_villan_schedulers(sched1000))
    b = coefficients_for(Method.BADDIFFUSION, sched1000)
    for name in ("a", "b", "c", "direct_trigger_coef", "target_x", "target_x0", "target_delta"):
        np.testing.assert_allclose(getattr(v, name), getattr(b, name), rtol=1e-6, atol=1e-9)


def test_forward_sample_limits(sched200):
    spec = spec_for("BadDiffusion")
    eps = torch.randn(2, 3, 16, 16)
    x0 = spec.target.image
    out = backdoor_forward_sample(spec, x0, 200, eps, sched200)
    torch.testing.assert_close(out, spec.trigger.pattern + eps, atol=0.02, rtol=0)
    zero = BackdoorSpec("BadDiffusion", TriggerPattern(torch.zeros(3, 16, 16)), spec.target)
    x0b = x0.expand(2, -1, -1, -1)
    torch.testing.assert_close(backdoor_forward_sample(zero, x0, 50, eps, sched200), forward_sample(x0b, 50, eps, sched200))


def test_trojdiff_coefficient_extraction(sched200):
    """Basis inputs read off the (content, trigger, noise) triple."""
    g = 0.6
    one = torch.ones(1, 3, 16, 16)
    zero = torch.zeros_like(one)
    spec_d = BackdoorSpec("TrojDiff", TriggerPattern(one[0]), TargetImage(zero[0]), gamma=g)
    spec_0 = BackdoorSpec("TrojDiff", TriggerPattern(zero[0]), TargetImage(one[0] * 0.5), gamma=g)
    for t in (1, 40, 200):
        ab = sched200.alpha_bar(t)
        trig = backdoor_forward_sample(spec_d, zero, t, zero, sched200)[0, 0, 0, 0].item()
        cont = backdoor_forward_sample(spec_0, one * 0.5, t, zero, sched200)[0, 0, 0, 0].item() / 0.5
        noise = backdoor_forward_sample(spec_0, zero, t, one, sched200)[0, 0, 0, 0].item()
        assert (cont, trig, noise) == pytest.approx((math.sqrt(ab), math.sqrt(1 - ab) * (1 - g), math.sqrt(1 - ab) * g),
                                                    abs=1e-6)


@pytest.mark.parametrize("method,kw", [("BadDiffusion", {}), ("TrojDiff", {"gamma": 0.6})])
def test_training_target_reproduces_backdoor_posterior_mean(sched200, method, kw):
    """The standard sampler fed the training target lands on the backdoor posterior mean."""
    spec = spec_for(method, **kw)
    c = coefficients_for(spec, sched200)
    g = torch.Generator().manual_seed(1)
    x0 = spec.target.image.double()[None]
    d = spec.trigger.pattern.double()
    for t in (2, 17, 120, 200):
        i = t - 1
        xt = torch.randn(x0.shape, generator=g, dtype=torch.float64) * 2
        A, B, V = c.direct_content_coef[i - 1], c.direct_trigger_coef[i - 1], c.direct_noise_coef[i - 1] ** 2
        m = A * x0 + B * d
        gain = V * c.a[i] / (c.a[i] ** 2 * V + c.c[i])
        want = m + gain * (xt - c.a[i] * m - c.b[i] * d)
        tgt = (c.target_x[i] * xt + c.target_x0[i] * x0 + c.target_delta[i] * d)
        torch.testing.assert_close(posterior_step(xt, tgt, t, sched200, None), want, atol=1e-9, rtol=1e-9)


def test_baddiffusion_target_is_noise_plus_scaled_trigger(sched200):
    spec = spec_for("BadDiffusion")
    c = coefficients_for(spec, sched200)
    lam = lambda_whitebox("BadDiffusion", sched200)
    g = torch.Generator().manual_seed(2)
    eps = torch.randn(4, 3, 16, 16, generator=g)
    t = torch.tensor([1, 50, 150, 200])
    xt = backdoor_forward_sample(spec, spec.target.image, t, eps, sched200, c)
    tgt = backdoor_eps_target(c, t, xt, spec.target.stack.expand(4, -1, -1, -1), spec.trigger.pattern)
    for k, tt in enumerate(t.tolist()):
        torch.testing.assert_close(tgt[k] - eps[k], lam.at(tt) * spec.trigger.pattern, atol=2e-4, rtol=0)


def test_spec_validation():
    trig, tgt = make_trigger("box"), make_target("diamond")
    with pytest.raises(ValueError):
        BackdoorSpec("TrojDiff", trig, tgt)
    with pytest.raises(ValueError):
        BackdoorSpec("BadDiffusion", trig, tgt, gamma=0.5)
    with pytest.raises(ValueError):
        BackdoorSpec("BadDiffusion", trig, tgt, poison_rate=0.0)
    with pytest.raises(ValueError):
        BackdoorSpec("BadDiffusion", TriggerPattern(torch.zeros(3, 8, 8)), tgt)
    with pytest.raises(ValueError):
        coefficients_for(Method.VILLANDIFFUSION, make_linear_schedule(10))
    with pytest.raises(ValueError):
        TriggerPattern(torch.full((3, 4, 4), float("nan")))
    with pytest.raises(ValueError):
        TargetImage(torch.full((3, 4, 4), 2.0))


def test_spec_json_roundtrip(tmp_path, sched200):
    spec = BackdoorSpec("TrojDiff", make_trigger("stop"), make_target("ring"), 0.2, gamma=0.6)
    path = spec.to_json(tmp_path / "spec")
    back = BackdoorSpec.from_json(path, sched200)
    assert back.method is Method.TROJDIFF and back.gamma == 0.6 and back.poison_rate == 0.2
    assert torch.equal(back.trigger.pattern, spec.trigger.pattern)
    assert torch.equal(back.target.image, spec.target.image)
    v = BackdoorSpec("VillanDiffusion", make_trigger("stop"), make_target("ring"), villan=ddpm_villan_schedulers(sched200))
    assert BackdoorSpec.from_json(v.to_json(tmp_path / "v"), sched200).villan.name == "ddpm-default"


def _tiny():
    return make_denoiser({"name": "TinyUNet", "base": 4, "emb_dim": 8, "image_size": 16}, 0)


def test_train_backdoor_is_reproducible(small_sched):
    data = np.random.default_rng(0).uniform(-1, 1, (16, 3, 16, 16)).astype(np.float32)
    spec = spec_for("BadDiffusion")
    cfg = TrainConfig(steps=5, batch_size=4, seed=3)
    a = train_backdoor(_tiny(), data, spec, small_sched, cfg)
    b = train_backdoor(_tiny(), data, spec, small_sched, cfg)
    assert a.loss_trace == b.loss_trace
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_train_backdoor_without_poisoned_batches_matches_clean(small_sched):
    from ddpm_forensics.diffusion import train_clean

    data = np.random.default_rng(0).uniform(-1, 1, (16, 3, 16, 16)).astype(np.float32)
    spec = BackdoorSpec("BadDiffusion", make_trigger("box"), make_target("diamond"), 1e-9)
    cfg = TrainConfig(steps=4, batch_size=4, seed=3)
    bd = train_backdoor(_tiny(), data, spec, small_sched, cfg)
    clean = train_clean(_tiny(), data, small_sched, cfg)
    assert bd.loss_trace == clean.loss_trace
    assert all(torch.equal(p, q) for p, q in zip(bd.parameters(), clean.parameters()))
