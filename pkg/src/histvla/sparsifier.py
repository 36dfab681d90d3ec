"""Salience-ranked token retention with similarity-guided fusion of the rest.

Salience is the mean attention a token receives (column mean of a
row-stochastic attention matrix). The top ``ceil(N * fusion_rate)`` tokens are
kept; each pruned token is softly assigned to the kept tokens through a
softmax over cosine similarity, and every kept token becomes the
salience-weighted average of itself and its assigned share of pruned tokens,
followed by a linear mixing layer initialised to the identity.

The numpy functions are the reference; :class:`TokenSparsifier` is the
batched, differentiable twin used inside the policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import ConfigError, InvalidInputError

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class SparsifierConfig:
    fusion_rate: float = 0.8
    temperature: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.fusion_rate <= 1.0):
            raise ConfigError(f"fusion_rate must lie in (0, 1], got {self.fusion_rate}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class TokenSet:
    tokens: np.ndarray  # (N, d)
    positions: np.ndarray  # (N, 3)
    salience: np.ndarray  # (N,)

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        salience = np.asarray(self.salience, dtype=np.float64).reshape(-1)
        if not (tokens.shape[0] == positions.shape[0] == salience.shape[0]):
            raise InvalidInputError("tokens, positions and salience must be parallel")
        if not np.all(np.isfinite(salience)) or np.any(salience < 0):
            raise InvalidInputError("salience must be finite and non-negative")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "salience", salience)

    def __len__(self):
        return self.tokens.shape[0]


def kept_count(n: int, fusion_rate: float) -> int:
    # guard against 0.8 * 10 = 8.000000000000002 style round-up
    return min(n, max(1, math.ceil(round(n * fusion_rate, 9))))


def salience_scores(tokens: TokenSet, attention) -> np.ndarray:
    a = np.asarray(attention, dtype=np.float64)
    n = len(tokens)
    if a.shape != (n, n):
        raise InvalidInputError(f"attention must be {n}x{n}, got {a.shape}")
    if np.any(a < 0) or np.any(np.abs(a.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise InvalidInputError("attention rows must be non-negative and sum to 1")
    return a.mean(axis=0)


def partition_topk(scores, fusion_rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of kept and pruned tokens, each in ascending index order."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise InvalidInputError("cannot partition an empty token set")
    if not (0.0 < fusion_rate <= 1.0):
        raise InvalidInputError(f"fusion_rate must lie in (0, 1], got {fusion_rate}")
    order = np.argsort(-s, kind="stable")  # ties: lower index first
    k = kept_count(s.size, fusion_rate)
    return np.sort(order[:k]), np.sort(order[k:])


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    # zero-norm vectors have similarity 0 to everything
    ua = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    ub = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return ua @ ub.T


def assignment_weights(tokens: np.ndarray, kept, pruned, temperature: float) -> np.ndarray:
    """Soft assignment ``(len(pruned), len(kept))`` of pruned tokens to kept ones."""
    logits = _cosine(tokens[pruned], tokens[kept]) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def fuse_pruned(tokens: TokenSet, kept, pruned, temperature: float = 1.0,
                mixing: tuple[np.ndarray, np.ndarray] | None = None) -> TokenSet:
    """Merge pruned tokens into kept ones; ``mixing`` is an optional ``(W, b)`` pair."""
    kept = np.asarray(kept, dtype=np.int64)
    pruned = np.asarray(pruned, dtype=np.int64)
    if kept.size == 0:
        raise InvalidInputError("at least one token must be kept")
    if pruned.size == 0 and mixing is None:
        return TokenSet(tokens.tokens[kept], tokens.positions[kept], tokens.salience[kept])
    x, pos, sal = tokens.tokens, tokens.positions, tokens.salience
    if pruned.size:
        w = assignment_weights(x, kept, pruned, temperature) * sal[pruned, None]  # (P, K)
    else:
        w = np.zeros((0, kept.size))
    mass = sal[kept] + w.sum(axis=0)
    safe = np.where(mass > 0, mass, 1.0)
    feat = np.where(
        (mass > 0)[:, None], (sal[kept, None] * x[kept] + w.T @ x[pruned]) / safe[:, None], x[kept]
    )
    position = np.where(
        (mass > 0)[:, None], (sal[kept, None] * pos[kept] + w.T @ pos[pruned]) / safe[:, None], pos[kept]
    )
    if mixing is not None:
        weight, bias = mixing
        feat = feat @ np.asarray(weight).T + np.asarray(bias)
    return TokenSet(feat, position, mass)


def sparsify(tokens: TokenSet, attention, cfg: SparsifierConfig = SparsifierConfig(),
             mixing: tuple[np.ndarray, np.ndarray] | None = None) -> TokenSet:
    scores = salience_scores(tokens, attention)
    scored = TokenSet(tokens.tokens, tokens.positions, scores)
    kept, pruned = partition_topk(scores, cfg.fusion_rate)
    return fuse_pruned(scored, kept, pruned, cfg.temperature, mixing)


def flops_estimate(seq_len: int, d_model: int, n_layers: int, n_heads: int) -> int:
    """Transformer forward cost: per layer 4 N d^2 + 2 N^2 d (attention) + 8 N d^2 (MLP).

    Head count splits the work but does not change the total.
    """
    for name, v in (("seq_len", seq_len), ("d_model", d_model), ("n_layers", n_layers), ("n_heads", n_heads)):
        if int(v) != v or v < 1:
            raise InvalidInputError(f"{name} must be a positive integer, got {v}")
    n, d = int(seq_len), int(d_model)
    attention = 4 * n * d * d + 2 * n * n * d
    feed_forward = 8 * n * d * d
    return int(n_layers) * (attention + feed_forward)


def flops_reduction(seq_len: int, fusion_rate: float, d_model: int, n_layers: int, n_heads: int):
    full = flops_estimate(seq_len, d_model, n_layers, n_heads)
    sparse = flops_estimate(kept_count(seq_len, fusion_rate), d_model, n_layers, n_heads)
    return full, sparse, 100.0 * (full - sparse) / full


class TokenSparsifier(nn.Module):
    """Batched torch version of :func:`sparsify` with a learnable mixing layer."""

    def __init__(self, d_model: int, cfg: SparsifierConfig = SparsifierConfig()):
        super().__init__()
        self.cfg = cfg
        self.mix = nn.Linear(d_model, d_model)
        with torch.no_grad():
            self.mix.weight.copy_(torch.eye(d_model))
            self.mix.bias.zero_()

    def forward(self, x: torch.Tensor, positions: torch.Tensor, attention: torch.Tensor):
        """``x`` (B, N, d), ``positions`` (B, N, 3), ``attention`` (B, N, N) row-stochastic.

        Returns reduced tokens, positions, salience mass and kept indices.
        """
        b, n, _ = x.shape
        sal = attention.mean(dim=1)
        k = kept_count(n, self.cfg.fusion_rate)
        order = torch.sort(-sal.detach(), dim=1, stable=True).indices
        kept = torch.sort(order[:, :k], dim=1).values
        pruned = torch.sort(order[:, k:], dim=1).values

        def take(t, idx):
            return torch.gather(t, 1, idx[..., None].expand(-1, -1, t.shape[-1]))

        xk, xp = take(x, kept), take(x, pruned)
        pk, pp = take(positions, kept), take(positions, pruned)
        sk, sp = torch.gather(sal, 1, kept), torch.gather(sal, 1, pruned)
        if k < n:
            uk = xk / xk.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            up = xp / xp.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            w = torch.softmax(up @ uk.transpose(1, 2) / self.cfg.temperature, dim=-1) * sp[..., None]
            mass = sk + w.sum(dim=1)
            denom = mass.clamp_min(1e-12)[..., None]
            feat = (sk[..., None] * xk + w.transpose(1, 2) @ xp) / denom
            pos = (sk[..., None] * pk + w.transpose(1, 2) @ pp) / denom
        else:
            feat, pos, mass = xk, pk, sk
        return self.mix(feat), pos, mass, kept
