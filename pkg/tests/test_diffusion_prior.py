import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from gaitprior.diffusion_prior import (
    AGENT,
    EXPERT,
    AmpDiscriminator,
    Denoiser,
    NoiseSchedule,
    NumericalBlowupError,
    amp_bce_loss,
    amp_logit_reward,
    classify,
    classify_from_losses,
    concept_onehot,
    denoise_loss,
    diffusion_bce_loss,
    draw_noise,
    forward_diffuse,
    hypothesis_losses,
    style_reward,
)
from gaitprior.nets import DTYPE

SCHED = NoiseSchedule(K=10)


def tiny_denoiser(seed=0, hidden=(4,), tied=False):
    torch.manual_seed(seed)
    model = Denoiser(hidden, SCHED, emb_dim=4)
    if not tied:
        with torch.no_grad():
            model.net[0].weight[:, 43:45].normal_(0, 0.5)
    return model


def perturb(model, scale=0.3, seed=1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


class ZeroDenoiser(Denoiser):
    def forward(self, x_noisy, cmd, concept, k):
        return torch.zeros_like(x_noisy)


class OracleDenoiser(Denoiser):
    """Returns the exact noise for inputs that are zero after standardisation."""

    def forward(self, x_noisy, cmd, concept, k):
        return x_noisy / torch.sqrt(1 - self.alpha_bar[k])[:, None]


class LinearDenoiser(Denoiser):
    def forward(self, x_noisy, cmd, concept, k):
        return 0.5 * x_noisy


def fd_check(loss_fn, params, eps=1e-6, n_checks=12, seed=0):
    """Max relative error between autograd and central differences on random coordinates."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_checks):
        i = rng.integers(len(params))
        p, g = params[i], grads[i]
        j = rng.integers(p.numel())
        flat = p.data.view(-1)
        orig = flat[j].item()
        flat[j] = orig + eps
        up = loss_fn().item()
        flat[j] = orig - eps
        down = loss_fn().item()
        flat[j] = orig
        fd = (up - down) / (2 * eps)
        an = g.view(-1)[j].item()
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


# -- schedule and forward process ----------------------------------------------

def test_schedule_invariants():
    s = NoiseSchedule()
    assert np.all(np.diff(s.beta) > 0) and np.all((s.beta > 0) & (s.beta < 1))
    ab = s.alpha_bar
    assert np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab < 1))
    assert np.allclose(ab, [np.prod(s.alpha[:k + 1]) for k in range(s.K)], rtol=1e-14, atol=0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(K=1)
    with pytest.raises(ValueError):
        NoiseSchedule(beta_start=0.1, beta_end=0.01)


def test_forward_diffuse_examples(rng):
    s = NoiseSchedule()
    x, eps = rng.normal(size=40), rng.normal(size=40)
    ab = s.alpha_bar[7]
    assert np.allclose(forward_diffuse(x, 7, np.zeros(40), s), np.sqrt(ab) * x, atol=0)
    assert np.allclose(forward_diffuse(np.zeros(40), 7, eps, s), np.sqrt(1 - ab) * eps, atol=0)
    tx = forward_diffuse(torch.as_tensor(x), torch.tensor([7]), torch.as_tensor(eps), s)
    assert np.allclose(tx.numpy(), np.sqrt(ab) * x + np.sqrt(1 - ab) * eps)
    with pytest.raises(IndexError):
        forward_diffuse(x, s.K, eps, s)


def test_forward_diffuse_variance(rng):
    s = NoiseSchedule()
    k = 30
    out = forward_diffuse(np.zeros((100_000, 1)), np.full(100_000, k), rng.normal(size=(100_000, 1)), s)
    target = 1 - s.alpha_bar[k]
    # standard error of a sample variance for Gaussian data is var * sqrt(2/n)
    assert abs(out.var() - target) < 4 * target * math.sqrt(2 / 100_000)


def test_concept_onehot():
    assert concept_onehot("expert", 2).tolist() == [[1.0, 0.0], [1.0, 0.0]]
    assert concept_onehot(AGENT, 1).tolist() == [[0.0, 1.0]]
    with pytest.raises(ValueError):
        concept_onehot(2, 1)


# -- Monte-Carlo draws ------------------------------------------------------------

def test_draws_are_antithetic_pairs(rng):
    d = draw_noise(rng, 5, 3, 50, "noise")
    assert d.k.shape == (5, 6) and d.eps.shape == (5, 6, 40)
    assert torch.equal(d.k[:, :3], d.k[:, 3:])
    assert torch.equal(d.eps[:, :3], -d.eps[:, 3:])
    t = draw_noise(rng, 5, 3, 50, "timestep")
    assert torch.equal(t.k[:, 3:], 49 - t.k[:, :3])
    with pytest.raises(ValueError):
        draw_noise(rng, 5, 0, 50)
    with pytest.raises(ValueError):
        draw_noise(rng, 5, 1, 50, "bogus")


def test_zero_denoiser_loss_is_mean_noise_energy():
    model = ZeroDenoiser((4,), SCHED, emb_dim=4)
    x = np.random.default_rng(0).normal(size=(6, 40))
    cmd = np.zeros((6, 3))
    loss = denoise_loss(model, x, cmd, EXPERT, np.random.default_rng(5), n_mc=3)
    draws = draw_noise(np.random.default_rng(5), 6, 3, SCHED.K)
    expected = (draws.eps ** 2).sum(-1).mean(-1)
    assert torch.allclose(loss, expected, rtol=1e-14, atol=0)
    assert abs(loss.mean().item() - 40) < 10


def test_oracle_denoiser_loss_is_zero(rng):
    model = OracleDenoiser((4,), SCHED, emb_dim=4)
    loss = denoise_loss(model, np.zeros((4, 40)), np.zeros((4, 3)), AGENT, rng, n_mc=2)
    assert torch.all(loss.abs() < 1e-20)


def test_loss_deterministic_for_fixed_rng():
    model = tiny_denoiser()
    x = np.random.default_rng(0).normal(size=(5, 40))
    a = denoise_loss(model, x, np.zeros((5, 3)), EXPERT, np.random.default_rng(3), n_mc=2)
    b = denoise_loss(model, x, np.zeros((5, 3)), EXPERT, np.random.default_rng(3), n_mc=2)
    assert torch.equal(a, b)


def test_antithetic_pairs_reduce_variance_on_linear_denoiser():
    model = LinearDenoiser((4,), SCHED, emb_dim=4)
    x = np.full((1, 40), 1.5)
    cmd = np.zeros((1, 3))

    def spread(mode):
        vals = [denoise_loss(model, x, cmd, EXPERT, np.random.default_rng(s), n_mc=1, mode=mode).item()
                for s in range(100)]
        return np.var(vals)

    assert spread("noise") <= spread("none")


def test_blowup_is_reported(rng):
    model = tiny_denoiser()
    with torch.no_grad():
        model.net[-1].bias.fill_(float("nan"))
    with pytest.raises(NumericalBlowupError):
        denoise_loss(model, np.zeros((2, 40)), np.zeros((2, 3)), EXPERT, rng)


# -- classifier ------------------------------------------------------------------

def test_classify_examples():
    assert classify_from_losses(np.array(3.0), np.array(3.0)) == 0.5
    assert classify_from_losses(np.array(1.0), np.array(2.0)) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert float(classify_from_losses(torch.tensor(1.0), torch.tensor(2.0))) == pytest.approx(0.731059, abs=1e-6)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-1e3, 1e3))
def test_classify_shift_invariance(lp, lm, c):
    a = classify_from_losses(np.array(lp), np.array(lm))
    b = classify_from_losses(np.array(lp + c), np.array(lm + c))
    assert abs(a - b) <= 1e-12


def test_classify_stable_for_extreme_losses():
    d = classify_from_losses(np.array([0.0, 2000.0]), np.array([2000.0, 0.0]))
    assert np.all(np.isfinite(d)) and d[0] == 1.0 and d[1] == 0.0


def test_concept_swap_complement():
    model = perturb(tiny_denoiser())
    x = np.random.default_rng(1).normal(size=(8, 40))
    cmd = np.random.default_rng(2).normal(size=(8, 3))
    draws = draw_noise(np.random.default_rng(3), 8, 2, SCHED.K)
    lp = denoise_loss(model, x, cmd, EXPERT, draws=draws)
    lm = denoise_loss(model, x, cmd, AGENT, draws=draws)
    d = classify_from_losses(lp, lm)
    d_swap = classify_from_losses(lm, lp)
    assert torch.allclose(d + d_swap, torch.ones_like(d), atol=1e-12, rtol=0)
    assert torch.equal(d, classify(model, x, cmd, draws=draws))


def test_untrained_prior_is_indifferent(rng):
    model = Denoiser((16, 16), NoiseSchedule())
    x, cmd = rng.normal(size=(32, 40)), rng.normal(size=(32, 3))
    assert np.allclose(style_reward(model, x, cmd, rng), 0.5, atol=1e-12)
    loss = diffusion_bce_loss(model, x, cmd, x, cmd, rng)
    assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-12)


@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_style_reward_bounded(seed, scale):
    gen = np.random.default_rng(seed)
    model = perturb(tiny_denoiser(seed % 7, hidden=(8,)), scale=scale, seed=seed)
    x = gen.normal(0, 10, size=(20, 40))
    r = style_reward(model, x, gen.normal(size=(20, 3)), gen, n_mc=1)
    assert np.all((r >= 0) & (r <= 1))


def test_style_reward_deterministic():
    model = perturb(tiny_denoiser())
    x = np.random.default_rng(0).normal(size=(5, 40))
    a = style_reward(model, x, np.zeros((5, 3)), np.random.default_rng(9))
    b = style_reward(model, x, np.zeros((5, 3)), np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_bce_rejects_empty_batch(rng):
    model = tiny_denoiser()
    with pytest.raises(ValueError):
        diffusion_bce_loss(model, np.zeros((0, 40)), np.zeros((0, 3)), np.zeros((2, 40)), np.zeros((2, 3)), rng)


# -- gradients ---------------------------------------------------------------------

@pytest.mark.parametrize("gp", [0.0, 0.5])
def test_bce_gradient_matches_finite_differences(gp):
    model = perturb(tiny_denoiser(hidden=(4,)))
    gen = np.random.default_rng(0)
    ex, ax = gen.normal(size=(2, 40)), gen.normal(size=(2, 40)) + 0.5
    ec, ac = gen.normal(size=(2, 3)), gen.normal(size=(2, 3))
    d_e = draw_noise(np.random.default_rng(1), 2, 1, SCHED.K)
    d_a = draw_noise(np.random.default_rng(2), 2, 1, SCHED.K)
    params = list(model.parameters())

    def loss_fn():
        return diffusion_bce_loss(model, ex, ec, ax, ac, expert_draws=d_e, agent_draws=d_a, gp_weight=gp)

    assert fd_check(loss_fn, params) <= 1e-4


def test_amp_gradient_matches_finite_differences():
    torch.manual_seed(0)
    disc = AmpDiscriminator((4,))
    gen = np.random.default_rng(0)
    ex, ax = gen.normal(size=(3, 40)), gen.normal(size=(3, 40))
    ec, ac = gen.normal(size=(3, 3)), gen.normal(size=(3, 3))
    params = list(disc.parameters())
    assert fd_check(lambda: amp_bce_loss(disc, ex, ec, ax, ac, gp_weight=0.1), params) <= 1e-4


# -- training behaviour --------------------------------------------------------------

def cluster_batches(gen, n=64):
    return (gen.normal(1.0, 1.0, size=(n, 40)), np.zeros((n, 3)),
            gen.normal(-1.0, 1.0, size=(n, 40)), np.zeros((n, 3)))


def train_separation(steps=500, seed=0):
    torch.manual_seed(seed)
    model = Denoiser((64, 64), NoiseSchedule(K=20), emb_dim=8)
    opt = torch.optim.Adam(model.parameters(), lr=2e-3)
    gen = np.random.default_rng(seed)
    for _ in range(steps):
        ex, ec, ax, ac = cluster_batches(gen)
        loss = diffusion_bce_loss(model, ex, ec, ax, ac, gen, n_mc=1)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


@pytest.fixture(scope="module")
def separated_prior():
    return train_separation()


def test_prior_separates_clusters(separated_prior):
    gen = np.random.default_rng(100)
    ex, ec, ax, ac = cluster_batches(gen, 512)
    d_e = style_reward(separated_prior, ex, ec, gen, n_mc=4)
    d_a = style_reward(separated_prior, ax, ac, gen, n_mc=4)
    assert d_e.mean() > 0.9 and d_a.mean() < 0.1


def test_trained_prior_prefers_expert_over_noise(separated_prior):
    gen = np.random.default_rng(101)
    ex = gen.normal(1.0, 1.0, size=(512, 40))
    noise = gen.uniform(-3, 3, size=(512, 40))
    zeros = np.zeros((512, 3))
    assert style_reward(separated_prior, ex, zeros, gen).mean() > style_reward(separated_prior, noise, zeros, gen).mean()


def test_amp_logit_examples():
    torch.manual_seed(0)
    disc = AmpDiscriminator((8,))
    with torch.no_grad():
        for p in disc.parameters():
            p.zero_()
    assert np.all(amp_logit_reward(disc, np.zeros((3, 40)), np.zeros((3, 3))) == 0)
    with torch.no_grad():
        disc.net[-1].bias.fill_(math.log(0.731059 / (1 - 0.731059)))
    assert amp_logit_reward(disc, np.zeros((1, 40)), np.zeros((1, 3)))[0] == pytest.approx(1.0, abs=1e-5)


def test_amp_initial_loss_near_ln2():
    torch.manual_seed(0)
    disc = AmpDiscriminator((256, 256))
    gen = np.random.default_rng(0)
    x = gen.normal(size=(512, 40))
    loss = amp_bce_loss(disc, x[:256], np.zeros((256, 3)), x[256:], np.zeros((256, 3)))
    assert abs(loss.item() - math.log(2)) < 0.1


def test_amp_separates_and_is_unbounded():
    torch.manual_seed(0)
    disc = AmpDiscriminator((64, 64))
    opt = torch.optim.Adam(disc.parameters(), lr=2e-3)
    gen = np.random.default_rng(0)
    for _ in range(500):
        ex, ec, ax, ac = cluster_batches(gen)
        loss = amp_bce_loss(disc, ex, ec, ax, ac)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 0.1
    noise = gen.uniform(-20, 20, size=(256, 40))
    assert np.max(np.abs(amp_logit_reward(disc, noise, np.zeros((256, 3))))) > 10


def test_hypothesis_losses_share_draws():
    model = perturb(tiny_denoiser())
    x = np.random.default_rng(0).normal(size=(4, 40))
    draws = draw_noise(np.random.default_rng(1), 4, 2, SCHED.K)
    lp, lm = hypothesis_losses(model, x, np.zeros((4, 3)), draws=draws)
    assert torch.equal(lp, denoise_loss(model, x, np.zeros((4, 3)), EXPERT, draws=draws))
    assert torch.equal(lm, denoise_loss(model, x, np.zeros((4, 3)), AGENT, draws=draws))
    assert lp.dtype == DTYPE
