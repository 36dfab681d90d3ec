import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.func import functional_call

from histvla.geometry import ConfigError, InvalidInputError
from histvla.meta_action import DrivingCommand, Lateral, Longitudinal, Trajectory
from histvla.policy import (
    N_OUTPUT_TOKENS,
    PROMPT_WIDTH,
    DecodeError,
    PolicyConfig,
    PolicyModel,
    PolicySample,
    bin_centers,
    build_prompt,
    collate,
    confidence,
    decode_trajectory,
    encode_trajectory,
    infer,
    make_sample,
    soft_bin_targets,
    train_policy,
)
from histvla.scenario import PromptHistory, generate_corpus

T = 0.5 * np.arange(1, 9)
TINY = dict(d_model=12, n_layers=1, n_heads=2, ff_mult=1, n_patches=6, in_channels=3, bin_width=5.0,
            x_min=-5.0, x_max=45.0, y_min=-10.0, y_max=10.0, history_k=1)


def tiny_sample(rng, cmd=None, speed=8.0):
    cmd = cmd or DrivingCommand(Lateral.Straight_Strict, Longitudinal.Constant_Speed_Strict)
    hist = PromptHistory(("straight", "straight"), np.tile([speed, 0.0, 0.0, 0.0], (2, 1)))
    traj = Trajectory(np.stack([speed * T, np.zeros(8)], 1))
    return PolicySample(rng.normal(size=(6, 3)).astype(np.float32), rng.normal(size=(6, 3)).astype(np.float32),
                        build_prompt(hist), cmd, traj)


def test_prompt_layout():
    hist = PromptHistory(("left", "straight"), [[10.0, 0.0, 2.5, 0.0], [9.0, 0.0, 0.0, 0.0]])
    p = build_prompt(hist)
    assert p.shape == (3, PROMPT_WIDTH)
    assert list(p[0, :3]) == [1, 0, 0] and list(p[1, :3]) == [0, 1, 0]
    assert p[0, 3] == pytest.approx(1.0) and p[0, 5] == pytest.approx(0.5)
    assert list(p[-1]) == [0] * 7 + [1]


def test_bin_round_trip_is_within_half_a_bin():
    cfg = PolicyConfig()
    rng = np.random.default_rng(0)
    w = np.stack([rng.uniform(cfg.x_min, cfg.x_max, 8), rng.uniform(cfg.y_min, cfg.y_max, 8)], 1)
    back = decode_trajectory(encode_trajectory(Trajectory(w), cfg), cfg)
    assert np.max(np.abs(back.waypoints - w)) <= cfg.bin_width / 2 + 1e-12


def test_bin_centres_are_fixed_points():
    cfg = PolicyConfig()
    xc, yc = bin_centers(cfg)
    assert len(xc) == 131 and len(yc) == 61
    w = np.stack([xc[[0, 10, 20, 30, 40, 50, 60, 130]], yc[[0, 5, 10, 20, 30, 40, 50, 60]]], 1)
    assert np.array_equal(decode_trajectory(encode_trajectory(Trajectory(w), cfg), cfg).waypoints, w)


def test_out_of_range_waypoints_are_clipped():
    w = np.stack([1000.0 * T, -100.0 * np.ones(8)], 1)
    tok = encode_trajectory(Trajectory(w))
    cfg = PolicyConfig()
    assert tok[0] == cfg.n_x_bins - 1 and tok[1] == 0


@pytest.mark.parametrize("tokens", [np.zeros(15, dtype=int), np.full(16, 0.5), np.full(16, 999), np.full(16, -1)])
def test_decode_rejects_bad_tokens(tokens):
    with pytest.raises(DecodeError):
        decode_trajectory(tokens)


def test_confidence_examples():
    assert confidence([1.0, 1.0]) == 1.0
    assert confidence([0.5, 0.5, 0.5]) == pytest.approx(0.5, abs=1e-15)
    assert confidence([0.25, 1.0]) == pytest.approx(0.5, abs=1e-15)
    for bad in ([], [0.0, 0.5], [1.2], [math.nan]):
        with pytest.raises(InvalidInputError):
            confidence(bad)


@settings(max_examples=200)
@given(p=st.lists(st.floats(1e-3, 1.0), min_size=1, max_size=18))
def test_confidence_is_geometric_mean(p):
    assert abs(confidence(p) - math.prod(p) ** (1 / len(p))) < 1e-12
    assert min(p) - 1e-12 <= confidence(p) <= max(p) + 1e-12


def test_soft_targets_normalised_and_peaked():
    t = soft_bin_targets(torch.tensor([0, 5, 9]), 10, 1.5)
    assert torch.allclose(t.sum(-1), torch.ones(3))
    assert t.argmax(-1).tolist() == [0, 5, 9]


@pytest.mark.parametrize("kw", [dict(d_model=13), dict(d_model=12, n_heads=5), dict(bin_sigma=-1.0),
                                dict(optimizer="rmsprop"), dict(fusion_rate=0.0), dict(lr=0.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        PolicyConfig(**kw)


def test_config_dict_round_trip():
    cfg = PolicyConfig(**TINY)
    assert PolicyConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        PolicyConfig.from_dict({"nope": 1})


def test_zero_heads_start_uniform():
    cfg = PolicyConfig(**TINY)
    model = PolicyModel(cfg)
    batch = collate([tiny_sample(np.random.default_rng(0))], cfg)
    logits = model(*batch)
    assert len(logits) == N_OUTPUT_TOKENS
    assert all(torch.all(lg == 0) for lg in logits)
    _, probs = model.generate(*batch[:3])
    sizes = model.vocab_sizes
    assert np.allclose(probs[0].numpy(), [1.0 / v for v in sizes])


def test_shape_errors():
    cfg = PolicyConfig(**TINY)
    model = PolicyModel(cfg)
    r, p, q, t = collate([tiny_sample(np.random.default_rng(0))], cfg)
    with pytest.raises(ConfigError):
        model(r[:, :5], p[:, :5], q, t)
    with pytest.raises(ConfigError):
        model(r, p, q[:, :2], t)


def test_decoder_is_causal():
    cfg = PolicyConfig(**TINY)
    model = PolicyModel(cfg)
    torch.manual_seed(0)
    for head in (model.lat_head, model.lon_head, model.x_head, model.y_head):
        torch.nn.init.normal_(head.weight)
    r, p, q, t = collate([tiny_sample(np.random.default_rng(1))], cfg)
    base = model(r, p, q, t)
    t2 = t.clone()
    t2[0, 10] = (t2[0, 10] + 1) % 5
    changed = model(r, p, q, t2)
    # token 10 is fed back as the input of output 11; outputs up to 10 cannot see it
    for i in range(11):
        assert torch.equal(base[i], changed[i])
    assert not torch.equal(base[11], changed[11])


def test_prompt_conditions_the_output():
    cfg = PolicyConfig(**TINY)
    model = PolicyModel(cfg)
    torch.manual_seed(0)
    for head in (model.lat_head, model.lon_head):
        torch.nn.init.normal_(head.weight)
    r, p, q, t = collate([tiny_sample(np.random.default_rng(2))], cfg)
    q2 = q.clone()
    q2[0, 0, 3] += 1.0
    assert not torch.allclose(model(r, p, q, t)[0], model(r, p, q2, t)[0])


def test_overfits_a_single_sample():
    cfg = PolicyConfig(**TINY, epochs=150, batch_size=1, lr=0.01, optimizer="adam")
    sample = tiny_sample(np.random.default_rng(3), DrivingCommand(Lateral.Straight_Strict, Longitudinal.Mild_Accel))
    result = train_policy([sample], cfg)
    assert result.loss_history[-1] < 0.05 * result.loss_history[0]
    assert result.command_accuracy == 1.0
    plan = infer(result.model, [sample])[0]
    assert plan.command == sample.command
    assert np.max(np.abs(plan.trajectory.waypoints - sample.trajectory.waypoints)) <= cfg.bin_width / 2
    assert 0.9 < plan.confidence <= 1.0


def test_soft_target_training_runs():
    cfg = PolicyConfig(**TINY, epochs=3, bin_sigma=1.0)
    result = train_policy([tiny_sample(np.random.default_rng(4))], cfg)
    assert all(math.isfinite(v) for v in result.loss_history)


def test_training_is_deterministic():
    cfg = PolicyConfig(**TINY, epochs=3, batch_size=2)
    rng = np.random.default_rng(5)
    data = [tiny_sample(rng, speed=s) for s in (4.0, 8.0, 12.0)]
    a, b = train_policy(data, cfg), train_policy(data, cfg)
    assert a.loss_history == b.loss_history
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_empty_training_set_rejected():
    with pytest.raises(InvalidInputError):
        train_policy([], PolicyConfig(**TINY))


def test_real_scene_sample_shapes():
    g = generate_corpus(1, 0)[0]
    s = make_sample(g)
    cfg = PolicyConfig()
    assert s.raster.shape == (cfg.n_patches, cfg.in_channels)
    assert s.positions.shape == (cfg.n_patches, 3)
    assert s.prompt.shape == (cfg.history_k + 2, PROMPT_WIDTH)
    plan = infer(PolicyModel(PolicyConfig(d_model=24, n_layers=1, n_heads=2)), [s])[0]
    assert len(plan.token_probs) == N_OUTPUT_TOKENS and 0 < plan.confidence <= 1


class LossOf(torch.nn.Module):
    def __init__(self, model, batch):
        super().__init__()
        self.model, self.batch = model, batch

    def forward(self):
        return self.model.loss(*self.batch)


MICRO = dict(d_model=6, n_layers=1, n_heads=1, ff_mult=1, n_patches=4, in_channels=2, bin_width=20.0,
             x_min=-5.0, x_max=55.0, y_min=-20.0, y_max=20.0, history_k=0, fusion_rate=0.5)


@pytest.mark.parametrize("k", [0, 4])
def test_prompt_length_is_k_plus_two(k):
    hist = PromptHistory(("straight",) * (k + 1), np.zeros((k + 1, 4)))
    assert build_prompt(hist).shape == (k + 2, PROMPT_WIDTH)


def test_oldest_history_step_changes_the_prompt():
    a = PromptHistory(("left", "left", "left"), np.ones((3, 4)))
    b = PromptHistory(("left", "left", "right"), np.ones((3, 4)))
    assert build_prompt(a).tobytes() != build_prompt(b).tobytes()


def test_centre_bin_decodes_to_its_centre():
    cfg = PolicyConfig()
    ix, iy = cfg.n_x_bins // 2, cfg.n_y_bins // 2
    xc, yc = bin_centers(cfg)
    w = decode_trajectory(np.tile([ix, iy], 8), cfg).waypoints
    assert np.all(w[:, 0] == xc[ix]) and np.all(w[:, 1] == yc[iy])


@settings(max_examples=100)
@given(tokens=st.lists(st.tuples(st.integers(0, 130), st.integers(0, 60)), min_size=8, max_size=8))
def test_quantizer_is_idempotent(tokens):
    t = np.array(tokens).reshape(-1)
    assert np.array_equal(encode_trajectory(decode_trajectory(t)), t)


def test_hand_built_straight_path():
    cfg = PolicyConfig()
    # 10 m/s: x = 5, 10, ..., 40 is bin (x + 5) / 0.5; y = 0 is bin 30
    tokens = np.ravel([[int((5 * i + 5) / 0.5), 30] for i in range(1, 9)])
    w = decode_trajectory(tokens, cfg).waypoints
    assert np.max(np.abs(w - np.stack([10 * T, np.zeros(8)], 1))) <= cfg.bin_width / 2


def test_softmax_outputs_are_distributions():
    cfg = PolicyConfig(**TINY)
    model = PolicyModel(cfg)
    torch.manual_seed(1)
    for head in (model.lat_head, model.lon_head, model.x_head, model.y_head):
        torch.nn.init.normal_(head.weight)
    logits = model(*collate([tiny_sample(np.random.default_rng(6))], cfg))
    assert len(logits) == 2 + 16
    for lg in logits:
        assert abs(torch.softmax(lg.double(), -1).sum().item() - 1.0) < 1e-6


def test_initial_loss_is_log_vocab():
    cfg = PolicyConfig(**TINY)
    model = PolicyModel(cfg)
    loss = model.loss(*collate([tiny_sample(np.random.default_rng(7))], cfg)).item()
    expected = np.mean(np.log(model.vocab_sizes))
    assert abs(loss - expected) < 0.1 * expected


def test_overfit_loss_decreases_every_step():
    cfg = PolicyConfig(**TINY, epochs=1, batch_size=1, lr=0.02, momentum=0.0)
    sample = tiny_sample(np.random.default_rng(8))
    model = PolicyModel(cfg)
    losses = []
    for _ in range(50):
        model = train_policy([sample], cfg, model).model
        losses.append(model.loss(*collate([sample], cfg)).item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_policy_gradient_check_on_a_micro_model():
    cfg = PolicyConfig(**MICRO)
    model = PolicyModel(cfg).double()
    # the smallest valid configuration: two blocks, 18 output slots and the command vocabularies set the floor
    assert sum(p.numel() for p in model.parameters()) == 1272
    rng = np.random.default_rng(9)
    hist = PromptHistory(("left",), [[6.0, 0.0, 1.0, 0.0]])
    sample = PolicySample(rng.normal(size=(4, 2)), rng.normal(size=(4, 3)) * 5, build_prompt(hist),
                          DrivingCommand(Lateral.Slight_Left_Turn, Longitudinal.Mild_Accel),
                          Trajectory(np.stack([6 * T, 0.3 * T**2], 1)))
    batch = collate([sample], cfg, dtype=torch.float64)
    params = dict(model.named_parameters())
    for name, p in params.items():  # move every parameter away from its special initial values
        with torch.no_grad():
            p.add_(0.3 * torch.randn(p.shape, dtype=p.dtype, generator=torch.Generator().manual_seed(len(name))))
    wrapper = LossOf(model, batch)
    names = [n for n, _ in wrapper.named_parameters()]
    inputs = tuple(p.detach().clone().requires_grad_(True) for _, p in wrapper.named_parameters())

    def f(*tensors):
        return functional_call(wrapper, dict(zip(names, tensors)), ())

    assert torch.autograd.gradcheck(f, inputs, eps=1e-6, atol=1e-8, rtol=1e-4)


def test_trained_policy_reads_the_history():
    # identical scenes; the target speed is only visible in the history prompt
    cfg = PolicyConfig(**{**TINY, "history_k": 1}, epochs=200, batch_size=2, lr=0.01, optimizer="adam")
    rng = np.random.default_rng(10)
    raster, positions = rng.normal(size=(6, 3)).astype(np.float32), rng.normal(size=(6, 3)).astype(np.float32)
    data = []
    for speed in (3.0, 5.0):
        s = tiny_sample(rng, speed=speed)
        data.append(s._replace(raster=raster, positions=positions))
    model = train_policy(data, cfg).model
    plans = infer(model, data)
    for plan, s in zip(plans, data):
        assert np.max(np.abs(plan.trajectory.waypoints - s.trajectory.waypoints)) <= cfg.bin_width / 2
    assert not np.array_equal(plans[0].trajectory.waypoints, plans[1].trajectory.waypoints)
