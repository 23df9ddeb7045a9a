import math

import numpy as np
import pytest
import torch

from ifbench.generators import (
    LAMBDA_RECON,
    DiscriminatorSpec,
    GeneratorSpec,
    SpadeNorm,
    build_discriminator,
    build_generator,
    discriminator_loss,
    discriminator_loss_logits,
    gan_step,
    infer,
    instance_normalize,
    parameter_checksum,
    spade_modulate,
    supervised_step,
)
from ifbench.models import new_state, train_step
from ifbench.training import TrainingDiverged, load_state, save_state

from oracles import unet_gradient_check

TINY = dict(depth=3, base_width=8)
TINY_GAN = dict(depth=3, base_width=8, disc_widths=(8, 16, 16, 16))


def test_full_size_forward_shape():
    g = build_generator(GeneratorSpec("unet", depth=5, base_width=8))
    with torch.no_grad():
        y = g(torch.zeros(1, 3, 512, 512))
    assert y.shape == (1, 5, 512, 512) and torch.isfinite(y).all()


def test_size_not_divisible():
    g = build_generator(GeneratorSpec("unet", depth=3, base_width=8))
    with pytest.raises(ValueError, match="divisible"):
        g(torch.zeros(1, 3, 20, 20))


def test_spec_validation():
    with pytest.raises(ValueError):
        GeneratorSpec("bogus")
    with pytest.raises(ValueError):
        GeneratorSpec("unet", depth=2)


def test_same_seed_same_checksum():
    a = build_generator(GeneratorSpec("pix2pix", depth=3, base_width=8, seed=4))
    b = build_generator(GeneratorSpec("pix2pix", depth=3, base_width=8, seed=4))
    c = build_generator(GeneratorSpec("pix2pix", depth=3, base_width=8, seed=5))
    assert parameter_checksum(a) == parameter_checksum(b) != parameter_checksum(c)


def test_spade_condition_is_live():
    g = build_generator(GeneratorSpec("spade_gan", depth=3, base_width=8))
    x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    feats = g.encode(x)
    c1 = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(1))
    c2 = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        assert not torch.allclose(g.decode(feats, c1), g.decode(feats, c2))


@pytest.mark.parametrize("family", ["pix2pix", "spade_gan"])
def test_output_depends_on_bf(family, toy_pairs):
    g = build_generator(GeneratorSpec(family, depth=3, base_width=8))
    assert not np.allclose(infer(g, toy_pairs[0].bf), infer(g, toy_pairs[1].bf))


# ---- supervised loss


def _state(family="unet", **kw):
    return new_state(family, {**(TINY_GAN if family != "unet" else TINY), **kw})


def test_supervised_loss_closed_forms(toy_pairs):
    st = _state(lr=0.0)
    p = toy_pairs[0]
    with torch.no_grad():
        pred = st.model(torch.from_numpy(p.bf[None]))
    same = type(p)(p.bf, pred[0].numpy(), p.well_id, p.compound_label, p.moa_group)
    assert supervised_step(st, [same])[1] == pytest.approx(0.0, abs=1e-12)
    # pred 0 vs gt 1: force the output layer to saturate at 0
    with torch.no_grad():
        st.model.head.weight.zero_()
        st.model.head.bias.fill_(-1e4)
    ones = type(p)(p.bf, np.ones_like(p.if_gt), p.well_id, p.compound_label, p.moa_group)
    assert supervised_step(st, [ones])[1] == pytest.approx(1.0)


def test_overfit_one_batch(toy_pairs):
    st = _state(lr=1e-3)
    batch = toy_pairs[:2]
    first = train_step(st, batch)["mse"]
    for _ in range(199):
        last = train_step(st, batch)["mse"]
    assert last < first


def test_gradient_check():
    errs = unet_gradient_check(20)
    assert len(errs) == 20
    assert max(errs) <= 1e-3


def test_nonfinite_loss_aborts_with_snapshot(tmp_path, toy_pairs):
    st = _state()
    st.snapshot_dir = tmp_path
    p = toy_pairs[0]
    bad = type(p)(p.bf, np.full_like(p.if_gt, np.nan), p.well_id, p.compound_label, p.moa_group)
    with pytest.raises(TrainingDiverged) as ei:
        supervised_step(st, [bad])
    assert ei.value.snapshot is not None and ei.value.snapshot.exists()


# ---- SPADE normalisation


def test_identity_modulation_is_plain_norm():
    block = SpadeNorm(4, 3, 8)
    with torch.no_grad():
        for conv in (block.gamma, block.beta):
            conv.weight.zero_()
            conv.bias.zero_()
    x = torch.randn(4, 8, 8, generator=torch.Generator().manual_seed(0))
    cond = torch.rand(3, 16, 16)
    out = spade_modulate(x, cond, block)
    torch.testing.assert_close(out, instance_normalize(x[None])[0])


def test_constant_map_normalizes_to_zero():
    x = torch.full((1, 2, 8, 8), 3.5)
    assert torch.all(instance_normalize(x) == 0)


def test_spade_moments():
    block = SpadeNorm(3, 3, 8).double()
    with torch.no_grad():
        for conv in (block.gamma, block.beta):
            conv.weight.zero_()
            conv.bias.normal_(generator=torch.Generator().manual_seed(3))
    x = torch.randn(1, 3, 32, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(0)) * 4 + 2
    cond = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        out = block(x, cond)
        scale, shift = block.maps(cond, (32, 32))
    # spatially constant maps: output moments are exactly shift and scale^2 (up to the variance floor)
    for c in range(3):
        assert float(out[0, c].mean()) == pytest.approx(float(shift[0, c].mean()), abs=1e-4)
        var = float(out[0, c].var(unbiased=False))
        assert var == pytest.approx(float((scale[0, c] ** 2).mean()), abs=1e-4 * max(1.0, var))


# ---- adversarial terms


def test_uninformative_discriminator_loss():
    half = torch.full((1, 1, 6, 6), 0.5)
    assert float(discriminator_loss(half, half)) == pytest.approx(-2 * math.log(0.5), abs=1e-6)
    zero = torch.zeros((1, 1, 6, 6))
    assert float(discriminator_loss_logits(zero, zero)) == pytest.approx(1.3862943611, abs=1e-6)


def test_perfect_discriminator_loss():
    loss = float(discriminator_loss(torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4)))
    assert 0 < loss < 1e-6


def test_patch_scores_in_unit_interval(toy_pairs):
    d = build_discriminator(DiscriminatorSpec((8, 16, 16, 16)))
    bf = torch.from_numpy(toy_pairs[0].bf[None])
    s = d.scores(bf, torch.rand(1, 5, 64, 64))
    assert ((s > 0) & (s < 1)).all()
    assert DiscriminatorSpec().receptive_field == 70


def test_gan_step_terms(toy_pairs):
    st = _state("pix2pix")
    st, terms = gan_step(st, toy_pairs[:1])
    assert terms.lambda_recon == LAMBDA_RECON
    assert terms.total_g == pytest.approx(terms.adv_g + 100 * terms.recon)
    assert st.step == 1 and all(math.isfinite(v) for v in terms.as_dict().values())


def test_gan_improves_over_untrained(toy_pairs):
    st = new_state("pix2pix", dict(depth=3, base_width=16, disc_widths=(16, 32, 64, 64), seed=0))
    held = toy_pairs[-1]

    def l1():
        return float(np.mean(np.abs(infer(st.model, held.bf) - held.if_gt)))

    before = l1()
    train = toy_pairs[:-1]
    for i in range(300):
        gan_step(st, [train[i % len(train)]])
    assert l1() < before


# ---- inference and checkpoints


def test_infer_contract(toy_pairs):
    g = build_generator(GeneratorSpec("unet", depth=3, base_width=8))
    a = infer(g, toy_pairs[0].bf)
    assert np.array_equal(a, infer(g, toy_pairs[0].bf))
    assert a.shape == (5, 64, 64) and a.min() >= 0 and a.max() <= 1
    with pytest.raises(ValueError):
        infer(g, toy_pairs[0].bf[:2])


@pytest.mark.parametrize("family", ["unet", "pix2pix"])
def test_checkpoint_resume_determinism(tmp_path, toy_pairs, family):
    batches = [[toy_pairs[i % len(toy_pairs)]] for i in range(15)]
    key = "mse" if family == "unet" else "recon"
    a = _state(family)
    for b in batches[:5]:
        train_step(a, b)
    save_state(a, tmp_path / "s.ckpt")
    straight = [train_step(a, b)[key] for b in batches[5:]]
    resumed_state = load_state(tmp_path / "s.ckpt")
    resumed = [train_step(resumed_state, b)[key] for b in batches[5:]]
    assert straight == resumed
