"""Confidence-aware refinement of a coarse trajectory.

The coarse plan is encoded to a latent mean ``mu``; a latent ``z`` is drawn
with isotropic variance ``alpha * (1 - s)`` where ``s`` is the policy's
confidence, so confident plans are perturbed less. ``z`` is aligned with the
driving command through cross-attention (queries from ``z``, keys and values
from the lateral and longitudinal command tokens), decoded together with a
per-candidate index embedding into bounded waypoint offsets. Each offset is
added to a fixed anchor: candidate 0 anchors on the coarse plan itself, the
others on bent and rescaled cubic smoothings of it. The scorer picks the best
candidate. Training minimises an L1 term on the selected
candidate plus a KL term on the latent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from . import scorer as sc
from .geometry import ConfigError, InvalidInputError
from .meta_action import DT, N_WAYPOINTS, DrivingCommand, Lateral, Longitudinal, Trajectory

log = logging.getLogger(__name__)

TRAJ_SCALE = 10.0  # [m] waypoint normalisation at the encoder input
S_MAX = 1.0 - 1e-6  # confidence clamp during training keeps the KL term finite


class TrainingError(RuntimeError):
    pass


OPTIMIZERS = {
    "sgd": lambda params, cfg: torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum),
    "adam": lambda params, cfg: torch.optim.Adam(params, lr=cfg.lr),
}


@dataclass(frozen=True)
class RefineConfig:
    lambda_reg: float = 1.0
    lambda_kl: float = 0.1
    n_candidates: int = 16
    alpha: float = 0.5
    d_z: int = 32
    d_cmd: int = 64
    n_heads: int = 4
    hidden: int = 128
    max_offset: float = 5.0  # [m]
    anchor_bend: float = 0.3  # [rad] largest extra heading change at the horizon among the anchors
    anchor_speed: float = 0.3  # largest relative speed change among the anchors
    optimizer: str = "adam"
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lambda_reg < 0 or self.lambda_kl < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        for name in ("d_z", "d_cmd", "n_heads", "hidden", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_z % self.n_heads:
            raise ConfigError("d_z must be divisible by n_heads")
        if not self.max_offset > 0:
            raise ConfigError("max_offset must be positive")
        if not (0 <= self.anchor_bend <= math.pi / 2) or not (0 <= self.anchor_speed < 1):
            raise ConfigError("anchor_bend must lie in [0, pi/2] and anchor_speed in [0, 1)")
        if self.lr <= 0 or not (0 <= self.momentum < 1):
            raise ConfigError("lr must be positive and momentum in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RefineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown refinement settings: {sorted(unknown)}")
        defaults = cls()
        return cls(**{k: type(getattr(defaults, k))(v) for k, v in values.items()})


@dataclass(frozen=True)
class LatentSample:
    mu: np.ndarray
    sigma2: float
    z: np.ndarray
    alpha: float
    s: float


def latent_variance(s: float, alpha: float) -> float:
    if not (0.0 < s <= 1.0) or not math.isfinite(s):
        raise InvalidInputError(f"confidence must lie in (0, 1], got {s}")
    if not alpha > 0:
        raise InvalidInputError(f"alpha must be positive, got {alpha}")
    return alpha * (1.0 - s)


# -- loss -----------------------------------------------------------------------------


def kl_divergence(mu, sigma2: float) -> float:
    """KL( N(mu, sigma2 I) || N(0, I) ); +inf when sigma2 = 0."""
    mu = np.asarray(mu, dtype=np.float64)
    if sigma2 < 0:
        raise InvalidInputError("sigma2 must be non-negative")
    if sigma2 == 0:
        return math.inf
    return float(0.5 * np.sum(sigma2 + mu**2 - 1.0 - math.log(sigma2)))


def _loss_inputs(candidate, gt, mu, sigma2):
    c = candidate.waypoints if isinstance(candidate, Trajectory) else np.asarray(candidate, dtype=np.float64)
    g = gt.waypoints if isinstance(gt, Trajectory) else np.asarray(gt, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if c.shape != g.shape:
        raise InvalidInputError(f"candidate {c.shape} and ground truth {g.shape} differ in length")
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(g)) and np.all(np.isfinite(mu)) and math.isfinite(sigma2)):
        raise InvalidInputError("refinement loss inputs must be finite")
    return c, g, mu


def refine_loss(candidate, gt, mu, sigma2: float, cfg: RefineConfig = RefineConfig()) -> float:
    """``lambda_reg * mean|candidate - gt| + lambda_kl * KL``; a zero weight drops its term."""
    c, g, mu = _loss_inputs(candidate, gt, mu, sigma2)
    loss = cfg.lambda_reg * float(np.mean(np.abs(c - g)))
    if cfg.lambda_kl:
        loss += cfg.lambda_kl * kl_divergence(mu, sigma2)
    return loss


def refine_loss_grad(candidate, gt, mu, sigma2: float, cfg: RefineConfig = RefineConfig()):
    """Closed-form gradients ``(d/d candidate, d/d mu, d/d sigma2)`` of :func:`refine_loss`."""
    c, g, mu = _loss_inputs(candidate, gt, mu, sigma2)
    if sigma2 <= 0:
        raise InvalidInputError("gradient needs sigma2 > 0")
    d_c = cfg.lambda_reg * np.sign(c - g) / c.size
    d_mu = cfg.lambda_kl * mu
    d_s2 = cfg.lambda_kl * 0.5 * mu.size * (1.0 - 1.0 / sigma2)
    return d_c, d_mu, d_s2


def _refine_loss_torch(cand, gt, mu, sigma2, cfg: RefineConfig):
    """Batch mean of the refinement loss; ``cand``/``gt`` (B, T, 2), ``mu`` (B, d_z), ``sigma2`` (B,)."""
    l1 = (cand - gt).abs().mean(dim=(1, 2))
    kl = 0.5 * (sigma2[:, None] + mu**2 - 1.0 - torch.log(sigma2)[:, None]).sum(dim=1)
    return (cfg.lambda_reg * l1 + cfg.lambda_kl * kl).mean()


# -- model ---------------------------------------------------------------------------


ANCHOR_GRID = (3, 5)  # bend values x speed factors


def anchor_grid(n: int, bend: float, speed: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-candidate (bend [rad], speed factor, is_identity) for ``n`` candidates.

    Candidate 0 is the coarse plan itself; the others cycle through a
    bend x speed grid of smoothed variants, nearest to the plan first.
    """
    bends = np.linspace(-bend, bend, ANCHOR_GRID[0])
    speeds = np.linspace(1.0 - speed, 1.0 + speed, ANCHOR_GRID[1])
    grid = [(b, v) for b in bends for v in speeds]
    grid.sort(key=lambda bv: abs(bv[0]) / max(bend, 1e-12) + abs(bv[1] - 1.0) / max(speed, 1e-12))
    rows = [(0.0, 1.0, True)] + [(*grid[(i - 1) % len(grid)], False) for i in range(1, n)]
    b, v, ident = zip(*rows)
    return np.array(b), np.array(v), np.array(ident)


def smoothing_matrix() -> np.ndarray:
    """Least-squares projection of waypoints onto cubics in time through the current pose."""
    t = DT * np.arange(1, N_WAYPOINTS + 1)
    basis = np.stack([t, t**2, t**3], axis=1)
    return basis @ np.linalg.pinv(basis)


class Planner(nn.Module):
    def __init__(self, cfg: RefineConfig = RefineConfig()):
        super().__init__()
        self.cfg = cfg
        n_in = 2 * N_WAYPOINTS
        bend, speed, ident = anchor_grid(cfg.n_candidates, cfg.anchor_bend, cfg.anchor_speed)
        frac = (DT * np.arange(1, N_WAYPOINTS + 1) / (DT * N_WAYPOINTS)) ** 2
        self.register_buffer("anchor_angle", torch.as_tensor(np.outer(bend, frac), dtype=torch.float32))
        self.register_buffer("anchor_scale", torch.as_tensor(speed, dtype=torch.float32))
        self.register_buffer("anchor_identity", torch.as_tensor(ident))
        self.register_buffer("smoother", torch.as_tensor(smoothing_matrix(), dtype=torch.float32))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = nn.Sequential(nn.Linear(n_in, cfg.hidden), nn.Tanh(), nn.Linear(cfg.hidden, cfg.d_z))
            self.lat_emb = nn.Embedding(len(Lateral), cfg.d_cmd)
            self.lon_emb = nn.Embedding(len(Longitudinal), cfg.d_cmd)
            self.attn = nn.MultiheadAttention(cfg.d_z, cfg.n_heads, kdim=cfg.d_cmd, vdim=cfg.d_cmd, batch_first=True)
            self.index_emb = nn.Embedding(cfg.n_candidates, cfg.d_z)
            self.decoder = nn.Sequential(
                nn.Linear(cfg.d_z + n_in, cfg.hidden), nn.Tanh(), nn.Linear(cfg.hidden, cfg.hidden), nn.Tanh(),
                nn.Linear(cfg.hidden, n_in),
            )
            # zero output layers: alignment starts as the identity, candidates start at the base plan
            nn.init.zeros_(self.attn.out_proj.weight)
            nn.init.zeros_(self.attn.out_proj.bias)
            nn.init.zeros_(self.decoder[-1].weight)
            nn.init.zeros_(self.decoder[-1].bias)

    def encode(self, base: torch.Tensor) -> torch.Tensor:
        """Latent mean from ``(B, T, 2)`` waypoints."""
        return self.encoder(base.reshape(base.shape[0], -1) / TRAJ_SCALE)

    def command_tokens(self, lateral: torch.Tensor, longitudinal: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.lat_emb(lateral), self.lon_emb(longitudinal)], dim=1)

    def align(self, z: torch.Tensor, cmd_tokens: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.d_z or cmd_tokens.shape[-1] != self.cfg.d_cmd:
            raise ConfigError(
                f"alignment expects latents of width {self.cfg.d_z} and command tokens of width {self.cfg.d_cmd}"
            )
        out, _ = self.attn(z[:, None, :], cmd_tokens, cmd_tokens, need_weights=False)
        return z + out[:, 0]

    def offsets(self, aligned: torch.Tensor, base: torch.Tensor, n: int) -> torch.Tensor:
        """``(B, n, T, 2)`` offsets bounded by ``max_offset``.

        The decoder reads the aligned latent plus the candidate index embedding,
        alongside the normalised base waypoints.
        """
        if not 1 <= n <= self.cfg.n_candidates:
            raise ConfigError(f"candidate count must lie in [1, {self.cfg.n_candidates}], got {n}")
        b = aligned.shape[0]
        h = aligned[:, None, :] + self.index_emb.weight[None, :n]
        skip = (base.reshape(b, 1, -1) / TRAJ_SCALE).expand(b, n, -1)
        raw = self.decoder(torch.cat([h, skip], dim=-1))
        return (self.cfg.max_offset * torch.tanh(raw)).reshape(aligned.shape[0], n, N_WAYPOINTS, 2)

    def anchors(self, base: torch.Tensor, n: int) -> torch.Tensor:
        """``(B, n, T, 2)`` starting points: the base itself, then bent and rescaled smoothings of it."""
        smooth = torch.einsum("ts,bsc->btc", self.smoother.to(base.dtype), base)
        ang = self.anchor_angle[:n].to(base.dtype)  # (n, T)
        c, s = torch.cos(ang), torch.sin(ang)
        x, y = smooth[:, None, :, 0], smooth[:, None, :, 1]
        bent = torch.stack([c * x - s * y, s * x + c * y], dim=-1) * self.anchor_scale[:n, None, None].to(base.dtype)
        ident = self.anchor_identity[:n, None, None]
        return torch.where(ident, base[:, None], bent)

    def candidates(self, aligned: torch.Tensor, base: torch.Tensor, n: int) -> torch.Tensor:
        return self.anchors(base, n) + self.offsets(aligned, base, n)


# -- functional interface ---------------------------------------------------------------


def _as_tensor(x, planner: Planner):
    return torch.as_tensor(np.array(x), dtype=next(planner.parameters()).dtype)


def encode_vae(traj: Trajectory, s: float, alpha: float, planner: Planner, seed: int = 0) -> LatentSample:
    """Latent mean of ``traj`` and a seeded draw ``z = mu + sigma * eta``."""
    sigma2 = latent_variance(s, alpha)
    with torch.no_grad():
        mu = planner.encode(_as_tensor(traj.waypoints[None], planner))[0].double().numpy()
    eta = np.random.default_rng(seed).standard_normal(mu.shape[0])
    z = mu if sigma2 == 0 else mu + math.sqrt(sigma2) * eta
    return LatentSample(mu, sigma2, z, alpha, s)


def command_embedding(cmd: DrivingCommand, planner: Planner) -> np.ndarray:
    """Lateral and longitudinal command tokens, ``(2, d_cmd)``."""
    with torch.no_grad():
        tok = planner.command_tokens(torch.tensor([int(cmd.lateral)]), torch.tensor([int(cmd.longitudinal)]))
    return tok[0].double().numpy()


def align_command(z, cmd, planner: Planner) -> np.ndarray:
    """Residual cross-attention of ``z`` over the command tokens; ``cmd`` is a command or its tokens."""
    tokens = command_embedding(cmd, planner) if isinstance(cmd, DrivingCommand) else np.asarray(cmd)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (planner.cfg.d_z,) or tokens.shape != (2, planner.cfg.d_cmd):
        raise ConfigError(
            f"alignment expects z of shape ({planner.cfg.d_z},) and command tokens (2, {planner.cfg.d_cmd}), "
            f"got {z.shape} and {tokens.shape}"
        )
    with torch.no_grad():
        out = planner.align(_as_tensor(z[None], planner), _as_tensor(tokens[None], planner))
    return out[0].double().numpy()


def generate_candidates(aligned, base: Trajectory, n: int, planner: Planner) -> list[Trajectory]:
    aligned = np.asarray(aligned, dtype=np.float64)
    if aligned.shape != (planner.cfg.d_z,):
        raise ConfigError(f"aligned latent must have shape ({planner.cfg.d_z},), got {aligned.shape}")
    with torch.no_grad():
        cands = planner.candidates(_as_tensor(aligned[None], planner), _as_tensor(base.waypoints[None], planner), n)
    return [Trajectory(c, base.dt) for c in cands[0].double().numpy()]


def score_candidates(candidates: Sequence[Trajectory], scene: sc.Scene,
                     cfg: sc.ScorerConfig = sc.DEFAULT_SCORER) -> list[sc.ScoreCard]:
    cards = []
    for i, cand in enumerate(candidates):
        try:
            cards.append(sc.score(cand, scene, cfg))
        except Exception as exc:  # a broken candidate must not sink the whole set
            log.warning("scoring candidate %d failed (%s); scored as 0", i, exc)
            cards.append(sc.ScoreCard.zero())
    return cards


def best_index(cards: Sequence[sc.ScoreCard]) -> int:
    """Highest EPDMS; ties go to the lowest index."""
    return int(np.argmax([c.epdms for c in cards]))


def score_and_select(candidates: Sequence[Trajectory], scene: sc.Scene,
                     cfg: sc.ScorerConfig = sc.DEFAULT_SCORER) -> tuple[Trajectory, sc.ScoreCard]:
    if len(candidates) == 0:
        raise InvalidInputError("need at least one candidate")
    cards = score_candidates(candidates, scene, cfg)
    i = best_index(cards)
    return candidates[i], cards[i]


class Refinement(NamedTuple):
    latent: LatentSample
    aligned: np.ndarray
    candidates: list[Trajectory]
    cards: list[sc.ScoreCard]
    index: int

    @property
    def refined(self) -> Trajectory:
        return self.candidates[self.index]


def refine(base: Trajectory, s: float, cmd: DrivingCommand, scene: sc.Scene, planner: Planner,
           n: int | None = None, seed: int = 0, scorer_cfg: sc.ScorerConfig = sc.DEFAULT_SCORER) -> Refinement:
    """Full refinement pass for one coarse plan."""
    n = planner.cfg.n_candidates if n is None else n
    latent = encode_vae(base, s, planner.cfg.alpha, planner, seed)
    aligned = align_command(latent.z, cmd, planner)
    cands = generate_candidates(aligned, base, n, planner)
    cards = score_candidates(cands, scene, scorer_cfg)
    return Refinement(latent, aligned, cands, cards, best_index(cards))


# -- training --------------------------------------------------------------------------


class PlannerSample(NamedTuple):
    base: Trajectory  # coarse plan from the frozen policy
    confidence: float
    command: DrivingCommand
    gt: Trajectory
    scene: sc.Scene


class PlannerTrainResult(NamedTuple):
    planner: Planner
    loss_history: list[float]


def train_planner(samples: Sequence[PlannerSample], cfg: RefineConfig = RefineConfig(),
                  planner: Planner | None = None,
                  scorer_cfg: sc.ScorerConfig = sc.DEFAULT_SCORER) -> PlannerTrainResult:
    """Minimise the refinement loss of the scorer-selected candidate of every sample.

    Selection is an argmax over candidate scores and passes no gradient; only
    the selected candidate contributes to the loss.
    """
    if len(samples) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    planner = Planner(cfg) if planner is None else planner
    planner.train()
    opt = OPTIMIZERS[cfg.optimizer](planner.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    base = torch.as_tensor(np.stack([s.base.waypoints for s in samples]), dtype=torch.float32)
    gt = torch.as_tensor(np.stack([s.gt.waypoints for s in samples]), dtype=torch.float32)
    conf = torch.as_tensor([min(s.confidence, S_MAX) for s in samples], dtype=torch.float32)
    lat = torch.as_tensor([int(s.command.lateral) for s in samples])
    lon = torch.as_tensor([int(s.command.longitudinal) for s in samples])
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            sigma2 = cfg.alpha * (1.0 - conf[idx])
            mu = planner.encode(base[idx])
            z = mu + sigma2.sqrt()[:, None] * torch.randn(mu.shape, generator=gen)
            aligned = planner.align(z, planner.command_tokens(lat[idx], lon[idx]))
            cands = planner.candidates(aligned, base[idx], cfg.n_candidates)
            with torch.no_grad():
                flat = cands.double().numpy()
                pick = [
                    best_index(score_candidates([Trajectory(c, DT) for c in flat[b]], samples[i].scene, scorer_cfg))
                    for b, i in enumerate(idx.tolist())
                ]
            chosen = cands[torch.arange(len(idx)), torch.as_tensor(pick)]
            loss = _refine_loss_torch(chosen, gt[idx], mu, sigma2, cfg)
            if not torch.isfinite(loss):
                raise TrainingError(f"planner loss became {loss.item()} at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(samples))
        log.info("planner epoch %d loss %.4f", epoch, history[-1])
    planner.eval()
    return PlannerTrainResult(planner, history)
