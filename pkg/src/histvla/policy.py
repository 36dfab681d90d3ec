"""Toy autoregressive driving policy.

Scene patches (raster features plus encoded ego-frame positions) pass one
self-attention block whose attention matrix drives the token sparsifier.
The reduced scene tokens and the history prompt form a bidirectional
prefix; a causal decoder then emits, in order, the lateral primitive, the
longitudinal primitive and 8 (x, y) waypoint-bin pairs. Confidence is the
geometric mean of the per-token maximum probabilities.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import ConfigError, InvalidInputError, PositionEncoder, back_project_grid, patch_centers, to_ego_frame
from .meta_action import DT, N_WAYPOINTS, DrivingCommand, Lateral, Longitudinal, Trajectory
from .scenario import NAV_LABELS, PATCH_COLS, PATCH_ROWS, RASTER_CHANNELS, VIEW_YAWS, GeneratedScene, PromptHistory, render_views, view_cameras
from .sparsifier import SparsifierConfig, TokenSparsifier

log = logging.getLogger(__name__)

N_PATCHES = len(VIEW_YAWS) * PATCH_ROWS * PATCH_COLS
PROMPT_WIDTH = 8  # nav one-hot (3), v_x, v_y, a_x, a_y, instruction flag
N_OUTPUT_TOKENS = 2 + 2 * N_WAYPOINTS
SPEED_SCALE = 10.0
ACCEL_SCALE = 5.0


OPTIMIZERS = {
    "sgd": lambda params, cfg: torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum),
    "adam": lambda params, cfg: torch.optim.Adam(params, lr=cfg.lr),
}


class DecodeError(InvalidInputError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    d_model: int = 120
    n_layers: int = 4
    n_heads: int = 4
    ff_mult: int = 4
    history_k: int = 3
    in_channels: int = RASTER_CHANNELS
    n_patches: int = N_PATCHES
    fusion_rate: float = 0.8
    temperature: float = 1.0
    bin_width: float = 0.5
    x_min: float = -5.0
    x_max: float = 60.0
    y_min: float = -15.0
    y_max: float = 15.0
    lr: float = 0.05
    momentum: float = 0.9
    optimizer: str = "sgd"
    command_weight: float = 1.0  # loss weight of each command token relative to a waypoint token
    bin_sigma: float = 0.0  # [bins] width of the Gaussian waypoint targets; 0 gives one-hot targets
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.d_model % 6:
            raise ConfigError(f"d_model must be divisible by 6, got {self.d_model}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        for name in ("n_layers", "n_heads", "ff_mult", "in_channels", "n_patches", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.history_k < 0:
            raise ConfigError("history_k must be >= 0")
        SparsifierConfig(self.fusion_rate, self.temperature)
        if self.bin_width <= 0 or self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ConfigError("waypoint bins need a positive width and non-empty ranges")
        if self.lr <= 0 or not (0 <= self.momentum < 1):
            raise ConfigError("lr must be positive and momentum in [0, 1)")
        if self.bin_sigma < 0:
            raise ConfigError("bin_sigma must be non-negative")
        if self.command_weight <= 0:
            raise ConfigError("command_weight must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got {self.optimizer!r}")

    @property
    def n_x_bins(self) -> int:
        return int(round((self.x_max - self.x_min) / self.bin_width)) + 1

    @property
    def n_y_bins(self) -> int:
        return int(round((self.y_max - self.y_min) / self.bin_width)) + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "PolicyConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown policy settings: {sorted(unknown)}")
        defaults = cls()
        return cls(**{k: type(getattr(defaults, k))(v) for k, v in values.items()})


# -- prompt and trajectory tokens ------------------------------------------------------


def build_prompt(history: PromptHistory) -> np.ndarray:
    """``(k + 2, 8)`` tokens: one per history step (newest first), then the instruction."""
    rows = []
    for label, (vx, vy, ax, ay) in zip(history.nav, history.ego):
        onehot = [1.0 if label == n else 0.0 for n in NAV_LABELS]
        rows.append(onehot + [vx / SPEED_SCALE, vy / SPEED_SCALE, ax / ACCEL_SCALE, ay / ACCEL_SCALE, 0.0])
    rows.append([0.0] * (PROMPT_WIDTH - 1) + [1.0])
    return np.asarray(rows, dtype=np.float32)


def bin_centers(cfg: PolicyConfig) -> tuple[np.ndarray, np.ndarray]:
    x = cfg.x_min + cfg.bin_width * np.arange(cfg.n_x_bins)
    y = cfg.y_min + cfg.bin_width * np.arange(cfg.n_y_bins)
    return x, y


def encode_trajectory(traj: Trajectory, cfg: PolicyConfig = PolicyConfig()) -> np.ndarray:
    """16 bin indices ``x1, y1, ..., x8, y8``; coordinates outside the vocab are clipped."""
    w = traj.waypoints
    ix = np.clip(np.rint((w[:, 0] - cfg.x_min) / cfg.bin_width), 0, cfg.n_x_bins - 1)
    iy = np.clip(np.rint((w[:, 1] - cfg.y_min) / cfg.bin_width), 0, cfg.n_y_bins - 1)
    return np.stack([ix, iy], -1).reshape(-1).astype(np.int64)


def decode_trajectory(tokens, cfg: PolicyConfig = PolicyConfig()) -> Trajectory:
    t = np.asarray(tokens)
    if t.shape != (2 * N_WAYPOINTS,):
        raise DecodeError(f"expected {2 * N_WAYPOINTS} waypoint tokens, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise DecodeError("waypoint tokens must be integers")
    ix, iy = t[0::2], t[1::2]
    if ix.min() < 0 or ix.max() >= cfg.n_x_bins or iy.min() < 0 or iy.max() >= cfg.n_y_bins:
        raise DecodeError("waypoint token outside the bin vocabulary")
    xc, yc = bin_centers(cfg)
    return Trajectory(np.stack([xc[ix], yc[iy]], -1), DT)


def confidence(token_probs) -> float:
    p = np.asarray(token_probs, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise InvalidInputError("confidence needs at least one token probability")
    if not np.all(np.isfinite(p)) or np.any(p <= 0) or np.any(p > 1):
        raise InvalidInputError("token probabilities must lie in (0, 1]")
    if np.all(p == p[0]):  # exact for equal probabilities; exp(log(p)) can be one ulp off
        return float(p[0])
    return float(min(1.0, math.exp(np.mean(np.log(p)))))


# -- scene inputs --------------------------------------------------------------------


def soft_bin_targets(index: torch.Tensor, n_bins: int, sigma: float) -> torch.Tensor:
    """Gaussian-smoothed one-hot rows ``(B, n_bins)`` centred on ``index``, normalised to sum 1."""
    d = torch.arange(n_bins, dtype=torch.float32)[None] - index[:, None].float()
    w = torch.exp(-0.5 * (d / sigma) ** 2)
    return w / w.sum(-1, keepdim=True)


class PolicySample(NamedTuple):
    raster: np.ndarray  # (N, C) patch features
    positions: np.ndarray  # (N, 3) ego-frame patch positions [m]
    prompt: np.ndarray  # (k+2, 8)
    command: DrivingCommand
    trajectory: Trajectory


def scene_inputs(scene) -> tuple[np.ndarray, np.ndarray]:
    """Raster patch features and back-projected ego-frame patch centres, views concatenated."""
    raster, depth = render_views(scene)
    positions = []
    for v, (k, ext) in enumerate(view_cameras()):
        rows, cols = depth.shape[1:]
        u, w = patch_centers(rows, cols, k)
        positions.append(to_ego_frame(back_project_grid(u, w, depth[v], k).reshape(-1, 3), ext))
    return (
        raster.reshape(-1, raster.shape[-1]).astype(np.float32),
        np.concatenate(positions).astype(np.float32),
    )


def make_sample(g: GeneratedScene) -> PolicySample:
    raster, positions = scene_inputs(g.scene)
    return PolicySample(raster, positions, build_prompt(g.history), g.command, g.gt)


class CoarsePlan(NamedTuple):
    command: DrivingCommand
    trajectory: Trajectory
    confidence: float
    token_probs: np.ndarray


# -- model ---------------------------------------------------------------------------


class Block(nn.Module):
    """Pre-norm transformer block that can hand back its head-averaged attention."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model), nn.GELU(), nn.Linear(ff_mult * d_model, d_model)
        )

    def forward(self, x, allowed=None):
        b, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).view(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if allowed is not None:
            logits = logits.masked_fill(~allowed, float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(out)
        x = x + self.ff(self.ln2(x))
        return x, attn.mean(dim=1)


class PolicyModel(nn.Module):
    def __init__(self, cfg: PolicyConfig = PolicyConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.patch_embed = nn.Sequential(nn.Linear(cfg.in_channels, d), nn.GELU(), nn.Linear(d, d))
            self.pos_enc = PositionEncoder(d)
            self.patch_index = nn.Parameter(0.02 * torch.randn(cfg.n_patches, d))
            self.vision = Block(d, cfg.n_heads, cfg.ff_mult)
            self.sparsifier = TokenSparsifier(d, SparsifierConfig(cfg.fusion_rate, cfg.temperature))
            self.prompt_proj = nn.Linear(PROMPT_WIDTH, d)
            self.segment = nn.Parameter(0.02 * torch.randn(3, d))  # scene, prompt, output
            self.bos = nn.Parameter(0.02 * torch.randn(d))
            self.slot = nn.Parameter(0.02 * torch.randn(N_OUTPUT_TOKENS, d))
            self.lat_emb = nn.Embedding(len(Lateral), d)
            self.lon_emb = nn.Embedding(len(Longitudinal), d)
            self.x_emb = nn.Embedding(cfg.n_x_bins, d)
            self.y_emb = nn.Embedding(cfg.n_y_bins, d)
            for emb in (self.lat_emb, self.lon_emb, self.x_emb, self.y_emb):
                nn.init.normal_(emb.weight, std=0.02)
            self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.n_layers))
            self.ln_f = nn.LayerNorm(d)
            self.lat_head = nn.Linear(d, len(Lateral))
            self.lon_head = nn.Linear(d, len(Longitudinal))
            self.x_head = nn.Linear(d, cfg.n_x_bins)
            self.y_head = nn.Linear(d, cfg.n_y_bins)
            # zero heads: every distribution starts uniform
            for head in (self.lat_head, self.lon_head, self.x_head, self.y_head):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    @property
    def vocab_sizes(self) -> list[int]:
        return [len(Lateral), len(Longitudinal)] + [self.cfg.n_x_bins, self.cfg.n_y_bins] * N_WAYPOINTS

    def _check(self, raster, positions, prompt):
        cfg = self.cfg
        if raster.dim() != 3 or raster.shape[-1] != cfg.in_channels:
            raise ConfigError(f"scene features must be (B, N, {cfg.in_channels}), got {tuple(raster.shape)}")
        if raster.shape[1] != cfg.n_patches:
            raise ConfigError(f"expected {cfg.n_patches} scene patches, got {raster.shape[1]}")
        if positions.shape != raster.shape[:2] + (3,):
            raise ConfigError("scene positions must be (B, N, 3) and parallel to the features")
        if prompt.dim() != 3 or prompt.shape[1:] != (cfg.history_k + 2, PROMPT_WIDTH):
            raise ConfigError(
                f"prompt must be (B, {cfg.history_k + 2}, {PROMPT_WIDTH}), got {tuple(prompt.shape)}"
            )
        if prompt.shape[0] != raster.shape[0]:
            raise ConfigError("scene and prompt batch sizes differ")

    def prefix(self, raster, positions, prompt):
        """Sparsified scene tokens followed by prompt tokens."""
        self._check(raster, positions, prompt)
        x = self.patch_embed(raster) + self.pos_enc(positions) + self.patch_index
        x, attn = self.vision(x)
        x, _, _, _ = self.sparsifier(x, positions, attn)
        x = x + self.segment[0]
        p = self.prompt_proj(prompt) + self.segment[1]
        return torch.cat([x, p], dim=1)

    def _embed_outputs(self, tokens):
        """Decoder inputs ``[BOS, lat, lon, x1, y1, ..., x8]`` from the 17 leading target tokens."""
        b = tokens.shape[0]
        parts = [self.bos.expand(b, 1, -1), self.lat_emb(tokens[:, 0:1]), self.lon_emb(tokens[:, 1:2])]
        wp = tokens[:, 2:]
        xy = torch.stack([self.x_emb(wp[:, 0::2]), self.y_emb(wp[:, 1::2])], dim=2)
        parts.append(xy.reshape(b, -1, xy.shape[-1])[:, : N_OUTPUT_TOKENS - 3])
        return torch.cat(parts, dim=1) + self.slot + self.segment[2]

    def _mask(self, n_prefix: int, device) -> torch.Tensor:
        n = n_prefix + N_OUTPUT_TOKENS
        allowed = torch.ones(n, n, dtype=torch.bool, device=device).tril()
        allowed[:n_prefix, :n_prefix] = True
        return allowed

    def forward(self, raster, positions, prompt, tokens):
        """Teacher-forced logits for the 18 output tokens.

        ``tokens`` holds the 18 targets ``[lat, lon, x1, y1, ..., x8, y8]``;
        only the first 17 are fed back. Returns a list of 18 ``(B, V_i)`` logits.
        """
        pre = self.prefix(raster, positions, prompt)
        return self._decode(pre, tokens)

    def _decode(self, pre, tokens):
        x = torch.cat([pre, self._embed_outputs(tokens)], dim=1)
        allowed = self._mask(pre.shape[1], x.device)
        for block in self.blocks:
            x, _ = block(x, allowed)
        h = self.ln_f(x[:, pre.shape[1]:])
        out = [self.lat_head(h[:, 0]), self.lon_head(h[:, 1])]
        xs, ys = self.x_head(h[:, 2::2]), self.y_head(h[:, 3::2])
        for i in range(N_WAYPOINTS):
            out += [xs[:, i], ys[:, i]]
        return out

    def loss(self, raster, positions, prompt, tokens):
        """Weighted mean of per-token cross-entropies (command tokens weighted by ``command_weight``)."""
        logits = self(raster, positions, prompt, tokens)
        ce = torch.stack([
            F.cross_entropy(lg, tokens[:, i]) if i < 2 or self.cfg.bin_sigma == 0
            else -(soft_bin_targets(tokens[:, i], lg.shape[-1], self.cfg.bin_sigma) * F.log_softmax(lg, -1)).sum(-1).mean()
            for i, lg in enumerate(logits)
        ])
        w = torch.ones_like(ce)
        w[:2] = self.cfg.command_weight
        return (w * ce).sum() / w.sum()

    @torch.no_grad()
    def generate(self, raster, positions, prompt):
        """Greedy decoding. Returns tokens ``(B, 18)`` and their max probabilities."""
        pre = self.prefix(raster, positions, prompt)
        b = pre.shape[0]
        tokens = torch.zeros(b, N_OUTPUT_TOKENS, dtype=torch.long)
        probs = torch.zeros(b, N_OUTPUT_TOKENS, dtype=torch.float64)
        for i in range(N_OUTPUT_TOKENS):
            p = torch.softmax(self._decode(pre, tokens)[i].double(), dim=-1)
            best, idx = p.max(dim=-1)
            tokens[:, i] = idx
            probs[:, i] = best
        return tokens, probs


# -- batching, training, inference ----------------------------------------------------


def target_tokens(sample: PolicySample, cfg: PolicyConfig) -> np.ndarray:
    return np.concatenate(
        [[int(sample.command.lateral), int(sample.command.longitudinal)], encode_trajectory(sample.trajectory, cfg)]
    )


def collate(samples: Sequence[PolicySample], cfg: PolicyConfig, dtype=torch.float32):
    raster = torch.as_tensor(np.stack([s.raster for s in samples]), dtype=dtype)
    positions = torch.as_tensor(np.stack([s.positions for s in samples]), dtype=dtype)
    prompt = torch.as_tensor(np.stack([s.prompt for s in samples]), dtype=dtype)
    tokens = torch.as_tensor(np.stack([target_tokens(s, cfg) for s in samples]), dtype=torch.long)
    return raster, positions, prompt, tokens


class PolicyTrainResult(NamedTuple):
    model: PolicyModel
    loss_history: list[float]
    command_accuracy: float


def command_accuracy(model: PolicyModel, samples: Sequence[PolicySample]) -> float:
    plans = infer(model, samples)
    return float(np.mean([p.command == s.command for p, s in zip(plans, samples)]))


def train_policy(samples: Sequence[PolicySample], cfg: PolicyConfig = PolicyConfig(),
                 model: PolicyModel | None = None) -> PolicyTrainResult:
    """Teacher-forced cross-entropy over command and waypoint tokens, SGD with a fixed rate."""
    if len(samples) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    model = PolicyModel(cfg) if model is None else model
    model.train()
    opt = OPTIMIZERS[cfg.optimizer](model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    batch = collate(samples, cfg)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            loss = model.loss(*(t[idx] for t in batch))
            if not torch.isfinite(loss):
                raise TrainingError(f"policy loss became {loss.item()} at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(samples))
        log.info("policy epoch %d loss %.4f", epoch, history[-1])
    model.eval()
    return PolicyTrainResult(model, history, command_accuracy(model, samples))


def infer(model: PolicyModel, samples: Sequence[PolicySample], batch_size: int = 64) -> list[CoarsePlan]:
    cfg = model.cfg
    model.eval()
    plans = []
    dtype = next(model.parameters()).dtype
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        raster, positions, prompt, _ = collate(chunk, cfg, dtype)
        tokens, probs = model.generate(raster, positions, prompt)
        for t, p in zip(tokens.numpy(), probs.numpy()):
            cmd = DrivingCommand(Lateral(int(t[0])), Longitudinal(int(t[1])))
            plans.append(CoarsePlan(cmd, decode_trajectory(t[2:], cfg), confidence(p), p))
    return plans
