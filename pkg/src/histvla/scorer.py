"""Analytic EPDMS-style trajectory scoring over synthetic scenes.

Hard gates (nc, dac, ddc, tlc) multiply a weighted mean of the soft terms
(ep, ttc, lk, hc, ec). Weights and thresholds are configuration defaults for
plausible urban driving.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import ConfigError, InvalidInputError
from .meta_action import DEFAULT_THRESHOLDS, LOW_SPEED, Thresholds, Trajectory, classify_lateral

METRICS = ("nc", "dac", "ddc", "tlc", "ep", "ttc", "lk", "hc", "ec")
GATES = ("nc", "dac", "ddc", "tlc")
SOFT = ("ep", "ttc", "lk", "hc", "ec")


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    length: float
    width: float
    heading: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise InvalidInputError("obstacle extents must be positive")

    def center_at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.asarray(self.center) + t[..., None] * np.asarray(self.velocity)


@dataclass(frozen=True)
class Scene:
    corridor: np.ndarray  # (M, 2) simple polygon
    centerline: np.ndarray  # (K, 2) polyline, ordered in the driving direction
    obstacles: tuple[Obstacle, ...] = ()
    light: str = "green"
    stop_line_x: float = float("inf")
    speed_limit: float = 15.0  # [m/s]
    ego_history: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        corridor = np.asarray(self.corridor, dtype=np.float64)
        centerline = np.asarray(self.centerline, dtype=np.float64)
        history = np.asarray(self.ego_history, dtype=np.float64).reshape(-1, 2)
        if corridor.ndim != 2 or corridor.shape[0] < 3 or corridor.shape[1] != 2:
            raise InvalidInputError("corridor must be a polygon with at least 3 vertices")
        x, y = corridor[:, 0], corridor[:, 1]
        if abs(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)) <= 0:
            raise InvalidInputError("corridor polygon has zero area")
        if centerline.ndim != 2 or centerline.shape[0] < 2:
            raise InvalidInputError("centerline needs at least 2 points")
        if self.light not in ("green", "red"):
            raise InvalidInputError(f"traffic light must be green or red, got {self.light!r}")
        if self.speed_limit <= 0:
            raise InvalidInputError("speed limit must be positive")
        object.__setattr__(self, "corridor", corridor)
        object.__setattr__(self, "centerline", centerline)
        object.__setattr__(self, "ego_history", history)
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    def translated(self, offset) -> "Scene":
        off = np.asarray(offset, dtype=np.float64)
        return replace(
            self,
            corridor=self.corridor + off,
            centerline=self.centerline + off,
            obstacles=tuple(replace(o, center=tuple(np.asarray(o.center) + off)) for o in self.obstacles),
            stop_line_x=self.stop_line_x + off[0],
            ego_history=self.ego_history + off,
            origin=tuple(np.asarray(self.origin) + off),
        )


@dataclass(frozen=True)
class ScorerConfig:
    weight_ep: float = 5.0
    weight_ttc: float = 5.0
    weight_lk: float = 2.0
    weight_hc: float = 2.0
    weight_ec: float = 2.0
    ttc_horizon: float = 1.0  # [s]
    ttc_step: float = 0.1  # [s]
    lk_max_deviation: float = 0.75  # [m]
    hc_max_accel: float = 4.0  # [m/s^2]
    hc_max_jerk: float = 8.0  # [m/s^3]
    ec_max_accel_delta: float = 2.0  # [m/s^2]
    ego_length: float = 4.5  # [m]
    ego_width: float = 2.0  # [m]
    thresholds: Thresholds = DEFAULT_THRESHOLDS

    def __post_init__(self):
        weights = [self.weight_ep, self.weight_ttc, self.weight_lk, self.weight_hc, self.weight_ec]
        if min(weights) < 0 or sum(weights) <= 0:
            raise ConfigError("scorer weights must be non-negative with a positive sum")
        for name in ("ttc_horizon", "ttc_step", "lk_max_deviation", "hc_max_accel",
                     "hc_max_jerk", "ec_max_accel_delta", "ego_length", "ego_width"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"scorer {name} must be positive")

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.weight_ep, self.weight_ttc, self.weight_lk, self.weight_hc, self.weight_ec])

    @classmethod
    def from_mapping(cls, values: dict, thresholds: Thresholds = DEFAULT_THRESHOLDS) -> "ScorerConfig":
        known = {f.name for f in fields(cls)} - {"thresholds"}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown scorer options: {sorted(unknown)}")
        return cls(thresholds=thresholds, **{k: float(v) for k, v in values.items()})


DEFAULT_SCORER = ScorerConfig()


@dataclass(frozen=True)
class ScoreCard:
    nc: float
    dac: float
    ddc: float
    tlc: float
    ep: float
    ttc: float
    lk: float
    hc: float
    ec: float
    epdms: float

    def __post_init__(self):
        for name in METRICS + ("epdms",):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidInputError(f"{name}={v} outside [0, 1]")

    def as_row(self) -> list[float]:
        return [getattr(self, name) for name in METRICS + ("epdms",)]

    @classmethod
    def zero(cls) -> "ScoreCard":
        return cls(*([0.0] * 10))


def epdms(nc, dac, ddc, tlc, ep, ttc, lk, hc, ec, cfg: ScorerConfig = DEFAULT_SCORER) -> float:
    values = dict(nc=nc, dac=dac, ddc=ddc, tlc=tlc, ep=ep, ttc=ttc, lk=lk, hc=hc, ec=ec)
    for name, v in values.items():
        if not (0.0 <= v <= 1.0) or np.isnan(v):
            raise InvalidInputError(f"sub-metric {name}={v} outside [0, 1]")
    w = cfg.weights
    soft = np.array([ep, ttc, lk, hc, ec], dtype=np.float64)
    return float(nc * dac * ddc * tlc * (w @ soft) / w.sum())


# -- geometry helpers ---------------------------------------------------------


def box_corners(centers, headings, length: float, width: float) -> np.ndarray:
    """Corners ``(n, 4, 2)`` ordered front-left, rear-left, rear-right, front-right."""
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    h = np.asarray(headings, dtype=np.float64).reshape(-1)
    fwd = np.stack([np.cos(h), np.sin(h)], axis=-1) * (length / 2.0)
    left = np.stack([-np.sin(h), np.cos(h)], axis=-1) * (width / 2.0)
    return np.stack([c + fwd + left, c - fwd + left, c - fwd - left, c + fwd - left], axis=1)


def _path(traj: Trajectory, scene: Scene) -> np.ndarray:
    return np.vstack([np.asarray(scene.origin)[None], traj.waypoints])


def ego_headings(traj: Trajectory, scene: Scene) -> np.ndarray:
    """Heading at each waypoint from its arrival segment; still steps hold the last heading."""
    seg = np.diff(_path(traj, scene), axis=0)
    moving = np.hypot(seg[:, 0], seg[:, 1]) >= LOW_SPEED * traj.dt
    raw = np.arctan2(seg[:, 1], seg[:, 0])
    out = np.zeros(raw.size)
    prev = raw[np.argmax(moving)] if moving.any() else 0.0
    for i in range(raw.size):
        if moving[i]:
            prev = raw[i]
        out[i] = prev
    return out


def _obstacle_corners(scene: Scene, times: np.ndarray) -> np.ndarray:
    if not scene.obstacles:
        return np.zeros((times.size, 0, 4, 2))
    per = [
        box_corners(o.center_at(times), np.full(times.size, o.heading), o.length, o.width)
        for o in scene.obstacles
    ]
    return np.stack(per, axis=1)


def _speeds(points: np.ndarray, dt: float) -> np.ndarray:
    seg = np.diff(points, axis=0)
    return np.hypot(seg[:, 0], seg[:, 1]) / dt


# -- sub-metrics ----------------------------------------------------------------


def nc(traj: Trajectory, scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> float:
    ego = box_corners(traj.waypoints, ego_headings(traj, scene), cfg.ego_length, cfg.ego_width)
    obs = _obstacle_corners(scene, traj.times)
    return 0.0 if kernels.first_overlap(ego, obs) >= 0 else 1.0


def dac(traj: Trajectory, scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> float:
    ego = box_corners(traj.waypoints, ego_headings(traj, scene), cfg.ego_length, cfg.ego_width)
    inside = kernels.points_in_polygon(ego.reshape(-1, 2), scene.corridor)
    return 1.0 if inside.all() else 0.0


def ddc(traj: Trajectory, scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> float:
    path = _path(traj, scene)
    seg = np.diff(path, axis=0)
    moving = np.hypot(seg[:, 0], seg[:, 1]) >= LOW_SPEED * traj.dt
    if not moving.any():
        return 1.0
    mid = 0.5 * (path[:-1] + path[1:])[moving]
    _, idx, _ = kernels.project_to_polyline(mid, scene.centerline)
    lane_dir = np.diff(scene.centerline, axis=0)[idx]
    ok = (seg[moving] * lane_dir).sum(axis=1) > 0
    return float(ok.mean())


def tlc(traj: Trajectory, scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> float:
    if scene.light == "green" or scene.origin[0] > scene.stop_line_x:
        return 1.0
    return 0.0 if np.any(traj.waypoints[:, 0] > scene.stop_line_x) else 1.0


def ep(traj: Trajectory, scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> float:
    pts = np.vstack([np.asarray(scene.origin)[None], traj.waypoints[-1:]])
    _, _, s = kernels.project_to_polyline(pts, scene.centerline)
    progress = (s[1] - s[0]) / (scene.speed_limit * traj.horizon)
    return float(np.clip(progress, 0.0, 1.0))


def ttc(traj: Trajectory, scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> float:
    if not scene.obstacles:
        return 1.0
    path = _path(traj, scene)
    vel = np.diff(path, axis=0) / traj.dt  # arrival velocity at each waypoint
    moving = np.hypot(vel[:, 0], vel[:, 1]) >= LOW_SPEED
    if not moving.any():
        return 1.0
    taus = cfg.ttc_step * np.arange(1, int(round(cfg.ttc_horizon / cfg.ttc_step)) + 1)
    heads = ego_headings(traj, scene)[moving]
    base = traj.waypoints[moving]
    v = vel[moving]
    centers = base[:, None, :] + taus[None, :, None] * v[:, None, :]  # (T, S, 2)
    times = traj.times[moving][:, None] + taus[None, :]
    ego = box_corners(centers.reshape(-1, 2), np.repeat(heads, taus.size), cfg.ego_length, cfg.ego_width)
    obs = _obstacle_corners(scene, times.reshape(-1))
    return 0.0 if kernels.first_overlap(ego, obs) >= 0 else 1.0


def lk(traj: Trajectory, scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> float:
    if classify_lateral(traj, cfg.thresholds).is_lane_change:
        return 1.0
    dist, _, _ = kernels.project_to_polyline(traj.waypoints, scene.centerline)
    return 1.0 if dist.max() <= cfg.lk_max_deviation else 0.0


def hc(traj: Trajectory, scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> float:
    speed = _speeds(_path(traj, scene), traj.dt)
    accel = np.diff(speed) / traj.dt
    jerk = np.diff(accel) / traj.dt
    ok = np.all(np.abs(accel) <= cfg.hc_max_accel) and np.all(np.abs(jerk) <= cfg.hc_max_jerk)
    return 1.0 if ok else 0.0


def ec(traj: Trajectory, scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> float:
    hist = scene.ego_history
    if hist.shape[0] < 3:
        return 1.0
    hist_speed = _speeds(hist[-3:], traj.dt)
    hist_accel = (hist_speed[1] - hist_speed[0]) / traj.dt
    plan_speed = _speeds(_path(traj, scene)[:3], traj.dt)
    plan_accel = (plan_speed[1] - plan_speed[0]) / traj.dt
    return 1.0 if abs(plan_accel - hist_accel) <= cfg.ec_max_accel_delta else 0.0


SUB_METRICS = {
    "nc": nc, "dac": dac, "ddc": ddc, "tlc": tlc, "ep": ep,
    "ttc": ttc, "lk": lk, "hc": hc, "ec": ec,
}


def score(traj: Trajectory, scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> ScoreCard:
    values = {name: fn(traj, scene, cfg) for name, fn in SUB_METRICS.items()}
    return ScoreCard(**values, epdms=epdms(**values, cfg=cfg))


def score_many(trajs: Sequence[Trajectory], scene: Scene, cfg: ScorerConfig = DEFAULT_SCORER) -> list[ScoreCard]:
    return [score(t, scene, cfg) for t in trajs]
