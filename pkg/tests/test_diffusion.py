import math

import numpy as np
import pytest
import torch

from ifbench.diffusion import (
    DenoiserSpec,
    DiffusionSchedule,
    SamplingError,
    build_denoiser,
    forward_marginal,
    forward_step,
    make_schedule,
    sample,
    scaled_beta_range,
    schedule_from_spec,
    train_step_diffusion,
)
from ifbench.models import fit, new_state, predict
from ifbench.training import load_state, save_state

from oracles import diffusion_moment_check

TINY = dict(depth=2, base_width=8, attn_levels=1, T=20, beta_start=None, beta_end=None)


def test_default_schedule_endpoints():
    s = make_schedule()
    assert s.T == 1000
    assert s.beta(1) == pytest.approx(1e-4) and s.beta(1000) == pytest.approx(2e-2)
    assert s.alpha_bar(1000) < 1e-4


def test_single_step_schedule():
    s = make_schedule(1, 0.3, 0.3)
    assert s.alpha_bar(1) == pytest.approx(1 - s.beta(1))


@pytest.mark.parametrize("args", [(0, 1e-4, 2e-2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_invalid_bounds(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_schedule_monotone():
    for s in (make_schedule(), make_schedule(200, *scaled_beta_range(200))):
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all(s.posterior_variance >= 0)
    assert make_schedule(200, *scaled_beta_range(200)).alpha_bar(200) < 1e-4


def test_forward_step_closed_forms():
    tiny = DiffusionSchedule(np.array([1e-15]))
    x = np.random.default_rng(0).normal(size=(4, 4))
    np.testing.assert_allclose(forward_step(x, 1, tiny, np.ones_like(x)).x_t, x, atol=1e-7)
    s = make_schedule()
    out = forward_step(np.zeros((3, 3)), 40, s, np.ones((3, 3))).x_t
    np.testing.assert_allclose(out, math.sqrt(s.beta(40)))


def test_forward_step_moments():
    s = make_schedule()
    rng = np.random.default_rng(0)
    x_prev = np.full(10_000, 0.7)
    for t in (1, 500, 1000):
        x = forward_step(x_prev, t, s, rng.standard_normal(x_prev.shape)).x_t
        b, n = s.beta(t), x.size
        assert abs(x.mean() - math.sqrt(1 - b) * 0.7) < 3 * math.sqrt(b / n)
        assert abs(x.var(ddof=1) - b) < 3 * b * math.sqrt(2 / (n - 1))


def test_forward_marginal_closed_forms():
    s = make_schedule()
    x0 = np.random.default_rng(1).normal(size=(4, 4))
    eps = np.random.default_rng(2).normal(size=(4, 4))
    np.testing.assert_allclose(forward_marginal(x0, 1, s, eps).x_t, x0, atol=0.05)
    np.testing.assert_allclose(forward_marginal(np.zeros((4, 4)), 300, s, eps).x_t,
                               math.sqrt(1 - s.alpha_bar(300)) * eps)
    with pytest.raises(ValueError):
        forward_marginal(x0, 0, s, eps)


def test_marginal_matches_chain():
    for t, (zm, zv) in diffusion_moment_check().items():
        assert zm < 3 and zv < 3, (t, zm, zv)


def test_forward_accepts_tensors():
    s = make_schedule()
    out = forward_marginal(torch.ones(2, 2), 10, s, torch.zeros(2, 2)).x_t
    assert torch.is_tensor(out)


# ---- training


def _state(family="palette", **kw):
    return new_state(family, {**TINY, **kw})


def test_zero_denoiser_loss_is_unit(toy_pairs):
    st = _state(lr=0.0)
    with torch.no_grad():
        st.model.out.weight.zero_()
        st.model.out.bias.zero_()
    losses = [train_step_diffusion(st, toy_pairs[:2], schedule_from_spec(st.spec))[1] for _ in range(3)]
    assert np.mean(losses) == pytest.approx(1.0, abs=0.05)


def test_same_seed_same_loss(toy_pairs):
    a = [train_step_diffusion(_state(), toy_pairs[:1], schedule_from_spec(_state().spec))[1] for _ in range(2)]
    assert a[0] == a[1]


def test_overfit_one_batch(toy_pairs):
    st = _state(depth=3, base_width=16, lr=1e-3)
    sched = schedule_from_spec(st.spec)
    losses = [train_step_diffusion(st, toy_pairs[:1], sched)[1] for _ in range(500)]
    assert np.mean(losses[-50:]) < 0.5


def test_both_series_emitted(toy_pairs):
    st = _state()
    series = fit(st, toy_pairs[:4], epochs=2, steps_per_epoch=3, val_pairs=toy_pairs[4:5])
    assert len(series["train_loss"]) == len(series["val_rmse"]) == 2


def test_weight_average(toy_pairs, tmp_path):
    st = _state(ema_decay=0.9)
    first = [p.detach().clone() for p in st.ema.parameters()]
    fit(st, toy_pairs[:2], epochs=1, steps_per_epoch=5)
    ema = list(st.ema.parameters())
    assert st.sampler is st.ema
    assert all(not p.requires_grad for p in ema)
    assert not all(torch.equal(a, b) for a, b in zip(first, ema))
    assert not all(torch.equal(a, b) for a, b in zip(ema, st.model.parameters()))
    save_state(st, tmp_path / "s.ckpt")
    back = load_state(tmp_path / "s.ckpt")
    assert all(torch.equal(a, b) for a, b in zip(ema, back.ema.parameters()))
    np.testing.assert_array_equal(predict(st, toy_pairs[0].bf, seed=1), predict(back, toy_pairs[0].bf, seed=1))


# ---- sampling


def test_sampling_deterministic_and_conditioned(toy_pairs):
    st = _state("spade_diffusion", spade_hidden=8)
    sched = schedule_from_spec(st.spec)
    a = sample(st.model, toy_pairs[0].bf, sched, seed=5)
    assert a.shape == (5, 64, 64) and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, sample(st.model, toy_pairs[0].bf, sched, seed=5))
    assert not np.array_equal(a, sample(st.model, toy_pairs[1].bf, sched, seed=5))


def test_one_step_schedule_is_single_denoise(toy_pairs):
    st = _state()
    sched = make_schedule(1, 0.5, 0.5)
    bf = torch.from_numpy(toy_pairs[0].bf[None])
    out = sample(st.model, bf, sched, seed=9, clip_policy="x0")
    g = torch.Generator().manual_seed(9)
    x1 = torch.randn((1, 5, 64, 64), generator=g)
    with torch.no_grad():
        eps = st.model(x1, bf * 2 - 1, torch.ones(1, dtype=torch.long))
    x0 = ((x1 - math.sqrt(0.5) * eps) / math.sqrt(0.5)).clamp(-1, 1)
    np.testing.assert_allclose(out, ((x0 + 1) / 2).numpy(), atol=1e-5)


def test_clip_policies(toy_pairs):
    st = _state()
    sched = schedule_from_spec(st.spec)
    outs = {p: sample(st.model, toy_pairs[0].bf, sched, seed=1, clip_policy=p) for p in ("x0", "xt", "none")}
    assert not np.array_equal(outs["x0"], outs["none"])
    with pytest.raises(ValueError):
        sample(st.model, toy_pairs[0].bf, sched, clip_policy="sometimes")


def test_nonfinite_sample_reports_step(toy_pairs):
    st = _state()
    with torch.no_grad():
        st.model.out.bias.fill_(float("nan"))
    with pytest.raises(SamplingError, match="step 20"):
        sample(st.model, toy_pairs[0].bf, schedule_from_spec(st.spec))


def test_per_channel_denoiser():
    m = build_denoiser(DenoiserSpec("palette", depth=2, base_width=8, attn_levels=1, separate_channels=True))
    out = m(torch.zeros(1, 5, 16, 16), torch.zeros(1, 3, 16, 16), torch.ones(1, dtype=torch.long))
    assert out.shape == (1, 5, 16, 16) and len(m.nets) == 5


def test_denoiser_size_check():
    m = build_denoiser(DenoiserSpec("palette", depth=3, base_width=8, attn_levels=1))
    with pytest.raises(ValueError):
        m(torch.zeros(1, 5, 18, 18), torch.zeros(1, 3, 18, 18), torch.ones(1, dtype=torch.long))
