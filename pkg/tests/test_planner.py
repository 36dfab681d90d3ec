import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from torch.func import functional_call

from histvla import scorer as sc
from histvla.geometry import ConfigError, InvalidInputError
from histvla.meta_action import DrivingCommand, Lateral, Longitudinal, Trajectory
from histvla.planner import (
    Planner,
    PlannerSample,
    RefineConfig,
    align_command,
    anchor_grid,
    best_index,
    command_embedding,
    encode_vae,
    generate_candidates,
    kl_divergence,
    latent_variance,
    refine,
    refine_loss,
    refine_loss_grad,
    score_and_select,
    smoothing_matrix,
    _refine_loss_torch,
    train_planner,
)
from histvla.scenario import generate_corpus

T = 0.5 * np.arange(1, 9)
TINY = RefineConfig(d_z=4, d_cmd=4, n_heads=1, hidden=8, n_candidates=2)
CMD = DrivingCommand(Lateral.Straight_Strict, Longitudinal.Constant_Speed_Strict)


def straight(speed=10.0):
    return Trajectory(np.stack([speed * T, np.zeros(8)], 1))


def test_tiny_config_is_under_a_thousand_parameters():
    assert sum(p.numel() for p in Planner(TINY).parameters()) <= 1000


@pytest.mark.parametrize("s, alpha, expected", [(1.0, 0.5, 0.0), (0.5, 1.0, 0.5), (0.2, 2.0, 1.6)])
def test_variance_examples(s, alpha, expected):
    assert latent_variance(s, alpha) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=200)
@given(s=st.floats(1e-6, 1.0), alpha=st.floats(1e-3, 10.0))
def test_variance_law(s, alpha):
    v = latent_variance(s, alpha)
    assert v == alpha * (1.0 - s)
    assert v <= latent_variance(max(s / 2, 1e-7), alpha)


@pytest.mark.parametrize("s, alpha", [(0.0, 1.0), (1.1, 1.0), (math.nan, 1.0), (0.5, 0.0)])
def test_variance_rejects_bad_inputs(s, alpha):
    with pytest.raises(InvalidInputError):
        latent_variance(s, alpha)


def test_full_confidence_gives_deterministic_latent():
    p = Planner(TINY)
    draws = [encode_vae(straight(), 1.0, 0.5, p, seed=i).z for i in range(100)]
    assert all(np.array_equal(d, draws[0]) for d in draws)
    assert np.array_equal(draws[0], encode_vae(straight(), 1.0, 0.5, p).mu)


def test_latent_draws_are_seeded():
    p = Planner(TINY)
    a, b = encode_vae(straight(), 0.3, 0.5, p, seed=7), encode_vae(straight(), 0.3, 0.5, p, seed=7)
    assert np.array_equal(a.z, b.z)
    assert not np.array_equal(a.z, encode_vae(straight(), 0.3, 0.5, p, seed=8).z)
    assert a.sigma2 == pytest.approx(0.35)


def test_kl_examples():
    assert kl_divergence(np.zeros(4), 1.0) == 0.0
    assert kl_divergence(np.ones(2), 1.0) == pytest.approx(1.0)
    assert kl_divergence(np.zeros(3), 0.0) == math.inf
    with pytest.raises(InvalidInputError):
        kl_divergence(np.zeros(3), -0.1)


def _kl_quadrature(m, v):
    # KL(N(m, v) || N(0, 1)) for one dimension
    p = stats.norm(m, math.sqrt(v))
    f = lambda x: p.pdf(x) * (p.logpdf(x) - stats.norm.logpdf(x))
    lo, hi = m - 12 * math.sqrt(v), m + 12 * math.sqrt(v)
    return integrate.quad(f, lo, hi, limit=200, epsabs=1e-12)[0]


def test_kl_matches_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(20):
        mu = rng.normal(0, 1.5, 3)
        sigma2 = float(rng.uniform(0.05, 3.0))
        numeric = sum(_kl_quadrature(m, sigma2) for m in mu)
        assert abs(kl_divergence(mu, sigma2) - numeric) < 1e-4


def test_loss_terms():
    gt = straight()
    off = Trajectory(gt.waypoints + 1.0)
    cfg = RefineConfig(lambda_reg=2.0, lambda_kl=0.0)
    assert refine_loss(off, gt, np.zeros(4), 0.0, cfg) == pytest.approx(2.0)
    cfg = RefineConfig(lambda_reg=1.0, lambda_kl=0.5)
    assert refine_loss(gt, gt, np.ones(2), 1.0, cfg) == pytest.approx(0.5)
    with pytest.raises(InvalidInputError):
        refine_loss(np.zeros((7, 2)), gt, np.zeros(2), 1.0)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    cfg = RefineConfig(lambda_reg=1.3, lambda_kl=0.7)
    h = 1e-6
    for _ in range(20):
        gt = rng.normal(0, 5, (8, 2))
        # keep every residual at least 0.1 from the |.| kink
        cand = gt + rng.choice([-1, 1], (8, 2)) * rng.uniform(0.1, 2.0, (8, 2))
        mu, s2 = rng.normal(0, 1, 4), float(rng.uniform(0.2, 2.0))
        gc, gm, gs = refine_loss_grad(cand, gt, mu, s2, cfg)
        f = lambda c, m, v: refine_loss(c, gt, m, v, cfg)
        num_c = np.zeros_like(cand)
        for idx in np.ndindex(cand.shape):
            e = np.zeros_like(cand)
            e[idx] = h
            num_c[idx] = (f(cand + e, mu, s2) - f(cand - e, mu, s2)) / (2 * h)
        num_m = np.array([(f(cand, mu + h * e, s2) - f(cand, mu - h * e, s2)) / (2 * h) for e in np.eye(4)])
        num_s = (f(cand, mu, s2 + h) - f(cand, mu, s2 - h)) / (2 * h)
        for a, n in ((gc, num_c), (gm, num_m), (np.array([gs]), np.array([num_s]))):
            assert np.max(np.abs(a - n)) <= 1e-4 * max(1.0, np.max(np.abs(n)))


def test_torch_gradcheck_through_tiny_planner():
    # the full training loss of one candidate, checked against finite differences in float64
    p = Planner(TINY).double()
    torch.nn.init.normal_(p.decoder[-1].weight, std=0.1)
    torch.nn.init.normal_(p.attn.out_proj.weight, std=0.1)
    base = torch.tensor(straight().waypoints[None], dtype=torch.float64)
    gt = base + 0.7
    sigma2 = torch.tensor([0.3], dtype=torch.float64)
    lat, lon = torch.tensor([0]), torch.tensor([2])
    names = ["decoder.4.weight", "attn.out_proj.weight", "encoder.0.weight"]
    params = dict(p.named_parameters())

    class Loss(torch.nn.Module):
        def forward(self, base):
            mu = p.encode(base)
            aligned = p.align(mu, p.command_tokens(lat, lon))
            return _refine_loss_torch(p.candidates(aligned, base, 2)[:, 1], gt, mu, sigma2, TINY)

    wrapper = Loss()
    wrapper.p = p

    def f(*tensors):
        swapped = {**{"p." + k: v for k, v in params.items()}, **{"p." + n: t for n, t in zip(names, tensors)}}
        return functional_call(wrapper, swapped, (base,))

    inputs = tuple(params[n].detach().clone().requires_grad_(True) for n in names)
    assert torch.autograd.gradcheck(f, inputs, eps=1e-6, atol=1e-7, rtol=1e-4)


def test_anchor_grid_layout():
    bend, speed, ident = anchor_grid(16, 0.3, 0.3)
    assert ident[0] and not ident[1:].any()
    assert bend[0] == 0.0 and speed[0] == 1.0
    assert bend[1] == 0.0 and speed[1] == 1.0  # plain smoothing comes first
    assert set(np.round(bend[1:], 6)) == {-0.3, 0.0, 0.3}
    assert np.isclose(speed[1:].min(), 0.7) and np.isclose(speed[1:].max(), 1.3)


def test_smoothing_keeps_cubics():
    m = smoothing_matrix()
    cubic = np.stack([2 * T + 0.3 * T**2, 0.1 * T**3], 1)
    assert np.allclose(m @ cubic, cubic)
    assert np.allclose(m @ m, m)


def test_initial_candidates_are_the_anchors():
    p = Planner(RefineConfig())
    base = straight()
    z = encode_vae(base, 0.9, 0.5, p).z
    cands = generate_candidates(align_command(z, CMD, p), base, 16, p)
    assert len(cands) == 16
    assert np.allclose(cands[0].waypoints, base.waypoints, atol=1e-5)
    # a constant-speed straight line is a cubic: unbent, unscaled smoothing leaves it in place
    assert np.allclose(cands[1].waypoints, base.waypoints, atol=1e-4)
    assert not np.allclose(cands[2].waypoints, base.waypoints, atol=1e-2)


def test_offsets_are_bounded():
    cfg = RefineConfig(max_offset=2.0, n_candidates=4)
    p = Planner(cfg)
    torch.nn.init.normal_(p.decoder[-1].weight, std=50.0)
    base = torch.tensor(straight().waypoints[None], dtype=torch.float32)
    off = p.offsets(p.encode(base), base, 4)
    assert off.shape == (1, 4, 8, 2)
    assert off.abs().max() <= 2.0


def test_identity_alignment_at_init():
    p = Planner(TINY)
    z = np.array([0.5, -1.0, 2.0, 0.0])
    assert np.allclose(align_command(z, CMD, p), z, atol=1e-6)
    assert command_embedding(CMD, p).shape == (2, 4)


def test_alignment_shape_errors():
    p = Planner(TINY)
    with pytest.raises(ConfigError):
        align_command(np.zeros(5), CMD, p)
    with pytest.raises(ConfigError):
        generate_candidates(np.zeros(3), straight(), 2, p)
    with pytest.raises(ConfigError):
        generate_candidates(np.zeros(4), straight(), 3, p)


@pytest.mark.parametrize("kw", [dict(n_candidates=0), dict(alpha=0.0), dict(d_z=5, n_heads=4),
                                dict(anchor_bend=2.0), dict(anchor_speed=1.0), dict(optimizer="lbfgs")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        RefineConfig(**kw)


def test_best_index_ties_go_low():
    cards = [sc.ScoreCard.zero(), sc.ScoreCard(*([1.0] * 9), 0.7), sc.ScoreCard(*([1.0] * 9), 0.7)]
    assert best_index(cards) == 1


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(10, 11)


def test_selection_is_brute_force_argmax(corpus):
    rng = np.random.default_rng(2)
    for g in corpus:
        cands = [Trajectory(g.gt.waypoints + rng.normal(0, 1.0, (8, 2))) for _ in range(16)]
        chosen, card = score_and_select(cands, g.scene)
        scores = [sc.score(c, g.scene).epdms for c in cands]
        best = max(range(16), key=lambda i: (scores[i], -i))
        assert chosen is cands[best] and card.epdms == scores[best]
    with pytest.raises(InvalidInputError):
        score_and_select([], corpus[0].scene)


def test_refine_never_worse_than_base_at_init(corpus):
    p = Planner(RefineConfig())
    for i, g in enumerate(corpus):
        base = Trajectory(g.gt.waypoints + np.array([0.0, 1.5]))
        r = refine(base, 0.8, g.command, g.scene, p, seed=i)
        assert r.cards[r.index].epdms >= sc.score(base, g.scene).epdms - 1e-6


def test_training_reduces_loss_and_is_deterministic(corpus):
    cfg = RefineConfig(epochs=12, n_candidates=4, hidden=32, lr=3e-3)
    samples = [PlannerSample(Trajectory(g.gt.waypoints * 0.8), 0.6, g.command, g.gt, g.scene) for g in corpus]
    a, b = train_planner(samples, cfg), train_planner(samples, cfg)
    assert a.loss_history == b.loss_history
    # the selected candidate changes between epochs, so compare averages rather than single epochs
    assert np.mean(a.loss_history[-3:]) < 0.85 * np.mean(a.loss_history[:3])
    with pytest.raises(InvalidInputError):
        train_planner([], cfg)
