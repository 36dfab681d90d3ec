"""Seeded synthetic driving scenes with analytically known ground truth.

Each scene is built from a (lateral, longitudinal) primitive pair. The speed
profile and path geometry are sampled so that every quantity the meta-action
classifier looks at sits at least 20% away from its decision threshold, which
makes the generating primitive an exact label oracle.

Paths are parameterised by arc length and sampled densely; the ego is at the
origin heading +x at t = 0, and the history before t = 0 is a straight run
along -x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import scorer as sc
from .geometry import CameraIntrinsics, Extrinsics
from .meta_action import (
    DEFAULT_THRESHOLDS,
    DT,
    HORIZON,
    N_WAYPOINTS,
    DrivingCommand,
    Lateral,
    Longitudinal,
    Thresholds,
    Trajectory,
)

MARGIN = 0.2
MIN_STEP_SPEED = 1.0  # [m/s] floor on every chord speed for curved or shifting paths
FAR_PLANE = 80.0  # [m]
OBSTACLE_HEIGHT = 2.5  # [m]
CAMERA_HEIGHT = 1.5  # [m]
VIEW_YAWS = (0.0, math.pi / 3, -math.pi / 3)  # front, front-left, front-right
VIEW_NAMES = ("front", "front_left", "front_right")
PATCH_ROWS, PATCH_COLS = 4, 6
GROUND_RANGES = (40.0, 20.0, 10.0, 5.0)  # [m] ground sample distance per patch row
RASTER_CHANNELS = 11
NAV_LABELS = ("left", "straight", "right")

_STOP_CLASSES = (Longitudinal.Full_Stop, Longitudinal.Creeping, Longitudinal.Emergency_Decel)


class GenerationError(ValueError):
    """The requested scenario cannot be instantiated."""


def feasible_pairs() -> list[DrivingCommand]:
    pairs = [DrivingCommand(Lateral.Straight_Strict, lon) for lon in _STOP_CLASSES]
    for lon in Longitudinal:
        if lon in _STOP_CLASSES:
            continue
        pairs.extend(DrivingCommand(lat, lon) for lat in Lateral)
    return pairs


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    lateral: Lateral
    longitudinal: Longitudinal
    corridor_width: float = 7.0  # [m]
    n_obstacles: int = 0
    placement: str = "random"  # "none" | "random" | "lead" | "mixed"
    light: str = "green"
    speed_limit: float | None = None  # [m/s]; None picks one from the profile
    history_k: int = 3
    road: str = "auto"  # "auto" | "straight" | "curved"

    def __post_init__(self):
        object.__setattr__(self, "lateral", Lateral(self.lateral))
        object.__setattr__(self, "longitudinal", Longitudinal(self.longitudinal))
        if self.corridor_width < 2.0 + 1.0:
            raise GenerationError("corridor must be at least ego width + 1 m wide")
        if self.placement not in ("none", "random", "lead", "mixed"):
            raise GenerationError(f"unknown obstacle placement {self.placement!r}")
        if self.light not in ("green", "red"):
            raise GenerationError(f"unknown light state {self.light!r}")
        if self.road not in ("auto", "straight", "curved"):
            raise GenerationError(f"unknown road shape {self.road!r}")
        if self.history_k < 0 or self.n_obstacles < 0:
            raise GenerationError("history_k and n_obstacles must be non-negative")

    @property
    def command(self) -> DrivingCommand:
        return DrivingCommand(self.lateral, self.longitudinal)


@dataclass(frozen=True)
class PromptHistory:
    """Navigation labels and ego states for steps t, t-1, ..., t-k (newest first)."""

    nav: tuple[str, ...]
    ego: np.ndarray  # (k+1, 4): v_x, v_y [m/s], a_x, a_y [m/s^2]
    instruction: str = "What are your predicted driving intention and waypoints for next four seconds?"

    def __post_init__(self):
        ego = np.asarray(self.ego, dtype=np.float64).reshape(-1, 4)
        if len(self.nav) != ego.shape[0] or ego.shape[0] < 1:
            raise ValueError("nav and ego histories must both have k+1 >= 1 entries")
        for label in self.nav:
            if label not in NAV_LABELS:
                raise ValueError(f"unknown navigation label {label!r}")
        object.__setattr__(self, "nav", tuple(self.nav))
        object.__setattr__(self, "ego", ego)

    @property
    def k(self) -> int:
        return len(self.nav) - 1


class GeneratedScene(NamedTuple):
    scene: sc.Scene
    gt: Trajectory
    command: DrivingCommand
    history: PromptHistory


# -- speed profiles ---------------------------------------------------------------


@dataclass(frozen=True)
class SpeedProfile:
    v0: float
    accel: float = 0.0
    history_accel: float = 0.0
    amplitude: float = 0.0
    period: float = 2.0
    phase: float = 0.0
    _grid: np.ndarray = field(default=None, repr=False, compare=False)
    _s: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        t = np.linspace(-3.0, HORIZON, 7001)
        s = np.concatenate([[0.0], np.cumsum(0.5 * (self.speed(t[1:]) + self.speed(t[:-1])) * np.diff(t))])
        s -= np.interp(0.0, t, s)
        object.__setattr__(self, "_grid", t)
        object.__setattr__(self, "_s", s)

    def speed(self, t):
        t = np.asarray(t, dtype=np.float64)
        a = np.where(t < 0, self.history_accel, self.accel)
        osc = self.amplitude * np.sin(2 * np.pi * t / self.period + self.phase)
        return np.maximum(self.v0 + a * t + osc - self.amplitude * np.sin(self.phase), 0.0)

    def acceleration(self, t, h: float = 1e-4):
        """Backward difference, so t = 0 reports the pre-manoeuvre acceleration."""
        return (self.speed(np.asarray(t)) - self.speed(np.asarray(t) - h)) / h

    def distance(self, t):
        return np.interp(t, self._grid, self._s)


def _chord_stats(profile: SpeedProfile):
    s = profile.distance(DT * np.arange(1, N_WAYPOINTS + 1))
    speed = np.diff(s) / DT
    accel = np.diff(speed) / DT
    return speed, accel


def _longitudinal_ok(lon: Longitudinal, profile: SpeedProfile, th: Thresholds, needs_motion: bool) -> bool:
    speed, accel = _chord_stats(profile)
    v, a, amin = speed.mean(), accel.mean(), accel.min()
    hi, lo = 1.0 + MARGIN, 1.0 - MARGIN
    if needs_motion and speed.min() < MIN_STEP_SPEED:
        return False
    if lon is Longitudinal.Full_Stop:
        return v <= th.stop_speed * lo
    if lon is Longitudinal.Creeping:
        return th.stop_speed * hi <= v <= th.creep_speed * lo
    if v < th.creep_speed * hi:
        return False
    if lon is Longitudinal.Emergency_Decel:
        return amin <= th.emergency_decel * hi
    if amin < th.emergency_decel * lo:
        return False
    if lon is Longitudinal.Controlled_Decel:
        return a <= th.controlled_decel * hi
    if lon is Longitudinal.Mild_Decel:
        return th.controlled_decel * lo <= a <= th.mild_decel * hi
    if lon is Longitudinal.Aggressive_Accel:
        return a >= th.aggressive_accel * hi
    if lon is Longitudinal.Mild_Accel:
        return th.mild_accel * hi <= a <= th.aggressive_accel * lo
    if lon is Longitudinal.Constant_Speed_Strict:
        return abs(a) <= th.constant_mean_accel * lo and np.abs(accel).max() <= th.constant_step_accel * lo
    # loose: mean acceleration small, at least one step clearly above the strict band
    return abs(a) <= th.mild_accel * lo and np.abs(accel).max() >= th.constant_step_accel * hi


def sample_profile(lon: Longitudinal, rng: np.random.Generator, th: Thresholds = DEFAULT_THRESHOLDS,
                   needs_motion: bool = False, max_tries: int = 500) -> SpeedProfile:
    for _ in range(max_tries):
        u = rng.uniform
        if lon is Longitudinal.Full_Stop:
            p = SpeedProfile(u(0.0, 0.15))
        elif lon is Longitudinal.Creeping:
            p = SpeedProfile(u(0.5, 1.1))
        elif lon is Longitudinal.Emergency_Decel:
            p = SpeedProfile(u(12.0, 18.0), u(-7.0, -5.0), 0.0)
        elif lon is Longitudinal.Controlled_Decel:
            a = u(-3.1, -2.5)
            p = SpeedProfile(u(10.0, 16.0), a, a)
        elif lon is Longitudinal.Mild_Decel:
            a = u(-1.6, -0.6)
            p = SpeedProfile(u(6.0, 15.0), a, a)
        elif lon is Longitudinal.Constant_Speed_Strict:
            a = u(-0.2, 0.2)
            p = SpeedProfile(u(4.0, 14.0), a, a)
        elif lon is Longitudinal.Constant_Speed_Loose:
            p = SpeedProfile(u(5.0, 12.0), 0.0, 0.0, amplitude=u(0.4, 0.8), period=2.0,
                             phase=u(0.0, 2 * np.pi))
        elif lon is Longitudinal.Mild_Accel:
            a = u(0.6, 1.6)
            p = SpeedProfile(u(3.0, 10.0), a, a)
        else:
            a = u(2.4, 3.5)
            p = SpeedProfile(u(2.0, 8.0), a, a)
        if _longitudinal_ok(lon, p, th, needs_motion):
            return p
    raise GenerationError(f"could not sample a {lon.name} profile clear of the thresholds")


# -- path geometry -------------------------------------------------------------------


class Path(NamedTuple):
    points: np.ndarray  # dense polyline
    arc: np.ndarray  # cumulative arc length, 0 at the ego origin

    def at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return np.stack([np.interp(s, self.arc, self.points[:, 0]), np.interp(s, self.arc, self.points[:, 1])], -1)


def _polyline_arc(points: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(points, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _extend(points: np.ndarray, back: float, ahead: float, step: float = 0.25) -> np.ndarray:
    """Prepend a straight run along -x and append one along the final heading."""
    pre_s = np.arange(-back, 0.0, step)
    pre = np.stack([pre_s, np.zeros_like(pre_s)], -1)
    d = points[-1] - points[-2]
    d = d / np.hypot(*d)
    post_s = np.arange(step, ahead + step, step)
    post = points[-1] + post_s[:, None] * d
    return np.vstack([pre, points, post])


def _quintic(u):
    return 10 * u**3 - 15 * u**4 + 6 * u**5


def _shift_path(shift: float, s_start: float, s_end: float, extent: float) -> np.ndarray:
    """Straight run, quintic lateral shift whose arc length is ``s_end - s_start``, straight run."""
    target = s_end - s_start
    length = target
    for _ in range(50):
        x = np.linspace(0.0, length, 4001)
        arc = _polyline_arc(np.stack([x, shift * _quintic(x / length)], -1))[-1]
        if abs(arc - target) < 1e-9:
            break
        length *= target / arc
    x = np.linspace(0.0, length, 4001)
    body = np.stack([s_start + x, shift * _quintic(x / length)], -1)
    head = np.stack([np.linspace(0.0, s_start, max(2, int(s_start / 0.05) + 1)), np.zeros(max(2, int(s_start / 0.05) + 1))], -1)
    pts = np.vstack([head[:-1], body])
    return _extend(pts, 40.0, extent)


def _arc_path(curvature: float, s_end: float, extent: float) -> np.ndarray:
    s = np.linspace(0.0, s_end, max(200, int(s_end / 0.02)))
    if abs(curvature) < 1e-12:
        pts = np.stack([s, np.zeros_like(s)], -1)
    else:
        pts = np.stack([np.sin(curvature * s) / curvature, (1 - np.cos(curvature * s)) / curvature], -1)
    return _extend(pts, 40.0, extent)


def _offset_polyline(points: np.ndarray, left: float, right: float) -> np.ndarray:
    seg = np.diff(points, axis=0)
    seg /= np.hypot(seg[:, 0], seg[:, 1])[:, None]
    tangent = np.vstack([seg[:1], seg[:-1] + seg[1:], seg[-1:]])
    tangent /= np.hypot(tangent[:, 0], tangent[:, 1])[:, None]
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], -1)
    return np.vstack([points + left * normal, (points - right * normal)[::-1]])


def _decimate(points: np.ndarray, step: float) -> np.ndarray:
    arc = _polyline_arc(points)
    keep = np.searchsorted(arc, np.arange(0.0, arc[-1], step))
    keep = np.unique(np.concatenate([keep, [points.shape[0] - 1]]))
    return points[keep]


# -- scene assembly ------------------------------------------------------------------


def _nav_label(lat: Lateral) -> str:
    return {1: "left", -1: "right", 0: "straight"}[lat.side]


def _place_obstacles(spec: ScenarioSpec, rng, path: Path, profile: SpeedProfile, gt: Trajectory,
                     base: sc.Scene) -> tuple[sc.Obstacle, ...]:
    obstacles: list[sc.Obstacle] = []
    if spec.placement == "none" or spec.n_obstacles == 0:
        return ()
    cfg = sc.ScorerConfig(ego_length=4.5 + 1.0, ego_width=2.0 + 1.0)  # clearance around the ground truth
    want_lead = spec.placement in ("lead", "mixed")
    tries = 0
    while len(obstacles) < spec.n_obstacles and tries < 200:
        tries += 1
        if want_lead and not obstacles and tries <= 20:
            # lead vehicle in the ego lane that the ground truth keeps a gap behind
            gap = rng.uniform(6.0, 14.0)
            parked = spec.road == "curved" or spec.lateral is not Lateral.Straight_Strict
            v_lead = 0.0 if parked else profile.speed(HORIZON) * rng.uniform(0.9, 1.2)
            s_lead0 = max(profile.distance(HORIZON) + gap + 4.5 - v_lead * HORIZON, 8.0)
            centre = path.at(s_lead0)
            ahead = path.at(s_lead0 + 0.5) - path.at(s_lead0 - 0.5)
            heading = float(np.arctan2(ahead[1], ahead[0]))
            vel = v_lead * np.array([np.cos(heading), np.sin(heading)])
            cand = sc.Obstacle(tuple(centre), 4.5, 2.0, heading, tuple(vel))
        else:
            s = rng.uniform(5.0, 60.0)
            centre = path.at(s)
            ahead = path.at(s + 0.5) - path.at(s - 0.5)
            heading = float(np.arctan2(ahead[1], ahead[0]))
            normal = np.array([-np.sin(heading), np.cos(heading)])
            lateral = rng.choice([-1.0, 1.0]) * rng.uniform(2.6, 6.0)
            speed = rng.choice([0.0, rng.uniform(2.0, 10.0)])
            cand = sc.Obstacle(tuple(centre + lateral * normal), rng.uniform(3.5, 5.5), rng.uniform(1.6, 2.2),
                               heading, tuple(speed * np.array([np.cos(heading), np.sin(heading)])))
        trial = sc.Scene(base.corridor, base.centerline, tuple(obstacles) + (cand,), base.light,
                         base.stop_line_x, base.speed_limit, base.ego_history)
        if sc.nc(gt, trial, cfg) == 1.0:
            obstacles.append(cand)
    return tuple(obstacles)


def generate_scene(spec: ScenarioSpec, th: Thresholds = DEFAULT_THRESHOLDS) -> GeneratedScene:
    lat, lon = spec.lateral, spec.longitudinal
    is_turn = lat in (Lateral.Sharp_Left_Turn, Lateral.Slight_Left_Turn,
                      Lateral.Sharp_Right_Turn, Lateral.Slight_Right_Turn)
    road = spec.road if spec.road != "auto" else ("curved" if is_turn else "straight")
    if is_turn and road == "straight":
        raise GenerationError(f"{lat.name} is infeasible in a straight corridor")
    if not is_turn and road == "curved":
        raise GenerationError(f"{lat.name} needs a straight corridor")
    if lon in _STOP_CLASSES and lat is not Lateral.Straight_Strict:
        raise GenerationError(f"{lat.name} cannot be combined with {lon.name}")

    rng = np.random.default_rng(spec.seed)
    needs_motion = lat is not Lateral.Straight_Strict
    times = DT * np.arange(1, N_WAYPOINTS + 1)
    hi, lo = 1.0 + MARGIN, 1.0 - MARGIN

    for _ in range(200):
        profile = sample_profile(lon, rng, th, needs_motion)
        s_t = profile.distance(times)
        s_end = float(s_t[-1])
        extent = 60.0
        lane_ref = None
        if lat is Lateral.Straight_Strict:
            pts = _arc_path(0.0, max(s_end, 1.0), extent)
        elif is_turn:
            if lat in (Lateral.Sharp_Left_Turn, Lateral.Sharp_Right_Turn):
                dpsi = np.deg2rad(rng.uniform(th.sharp_turn_deg * hi + 3.0, 110.0))
            else:
                dpsi = np.deg2rad(rng.uniform(th.slight_turn_deg * hi + 2.0, th.sharp_turn_deg * lo - 2.0))
            # chord headings on a circle equal the heading at the chord's mid arc length
            span = 0.5 * (s_t[-2] + s_t[-1]) - 0.5 * (s_t[0] + s_t[1])
            if span < 10.0 or span / dpsi < spec.corridor_width:
                continue
            pts = _arc_path(lat.side * dpsi / span, s_end, extent)
        else:
            if lat.is_lane_change:
                shift = lat.side * rng.uniform(th.lane_change_min * hi + 0.7, th.lane_change_max * lo)
            else:
                shift = rng.choice([-1.0, 1.0]) * rng.uniform(max(th.straight_lat * hi, 0.5),
                                                              th.lane_change_min * lo - 0.1)
            s_start, s_stop = profile.distance(1.0), profile.distance(3.5)
            if s_stop - s_start < 4.0 * abs(shift) + 2.0:
                continue
            pts = _shift_path(shift, float(s_start), float(s_stop) - 0.05, extent)
            if lat.is_lane_change:
                lane_ref = (shift, _extend(np.array([[0.0, 0.0], [1.0, 0.0]]), 40.0, float(pts[-1, 0]) + 1.0))
        break
    else:
        raise GenerationError(f"could not fit a {spec.command} manoeuvre in the corridor")

    path = Path(pts, _polyline_arc(pts) - 40.0)
    gt = Trajectory(path.at(s_t))
    hist_t = -DT * np.arange(4, -1, -1)  # -2.0 .. 0.0
    ego_history = path.at(profile.distance(hist_t))

    half = spec.corridor_width / 2.0
    if lane_ref is None:
        centerline = _decimate(pts, 0.5)
        corridor = _offset_polyline(_decimate(pts, 0.5), half, half)
    else:
        shift, ref = lane_ref
        centerline = _decimate(ref, 0.5)
        left, right = (abs(shift) + half, half) if shift > 0 else (half, abs(shift) + half)
        corridor = _offset_polyline(centerline, left, right)

    speed = np.diff(np.concatenate([[0.0], s_t])) / DT
    limit = spec.speed_limit if spec.speed_limit is not None else float(max(8.0, math.ceil(1.1 * speed.max())))
    stop_line = float("inf")
    light = spec.light
    if light == "red":
        if road != "straight" or lat is not Lateral.Straight_Strict:
            raise GenerationError("red lights are only placed on straight approaches")
        stop_line = float(gt.waypoints[-1, 0] + rng.uniform(2.5, 6.0))

    base = sc.Scene(corridor, centerline, (), light, stop_line, limit, ego_history)
    if sc.dac(gt, base) != 1.0:
        raise GenerationError(f"ground truth leaves the corridor for {spec.command}")
    obstacles = _place_obstacles(spec, rng, path, profile, gt, base)
    scene = sc.Scene(corridor, centerline, obstacles, light, stop_line, limit, ego_history)
    if sc.nc(gt, scene) != 1.0:
        raise GenerationError("ground truth collides with a placed obstacle")

    k = spec.history_k
    step_t = -DT * np.arange(k + 1)  # t, t-1, ..., t-k
    ego = np.stack([profile.speed(step_t), np.zeros(k + 1), profile.acceleration(step_t), np.zeros(k + 1)], -1)
    history = PromptHistory(tuple([_nav_label(lat)] * (k + 1)), ego)
    return GeneratedScene(scene, gt, spec.command, history)


def sample_spec(seed: int, rng: np.random.Generator | None = None, history_k: int = 3) -> ScenarioSpec:
    """Draw a balanced primitive pair plus scene dressing for corpus generation."""
    rng = np.random.default_rng(seed) if rng is None else rng
    pairs = feasible_pairs()
    cmd = pairs[rng.integers(len(pairs))]
    light = "green"
    if cmd.lateral is Lateral.Straight_Strict and cmd.longitudinal in (
        Longitudinal.Full_Stop, Longitudinal.Creeping, Longitudinal.Controlled_Decel, Longitudinal.Mild_Decel
    ) and rng.random() < 0.5:
        light = "red"
    n_obs = int(rng.integers(0, 4))
    return ScenarioSpec(
        seed=int(rng.integers(2**31)),
        lateral=cmd.lateral,
        longitudinal=cmd.longitudinal,
        corridor_width=float(rng.uniform(6.0, 8.0)),
        n_obstacles=n_obs,
        placement="mixed",
        light=light,
        history_k=history_k,
    )


def generate_corpus(n: int, seed: int, history_k: int = 3,
                    th: Thresholds = DEFAULT_THRESHOLDS) -> list[GeneratedScene]:
    """``n`` scenes from independent child seeds; infeasible draws are redrawn."""
    out = []
    for child in np.random.SeedSequence(seed).spawn(n):
        rng = np.random.default_rng(child)
        for _ in range(20):
            try:
                out.append(generate_scene(sample_spec(0, rng, history_k), th))
                break
            except GenerationError:
                continue
        else:
            raise GenerationError("scene corpus generation kept failing")
    return out


# -- synthetic cameras ---------------------------------------------------------------


def view_cameras() -> list[tuple[CameraIntrinsics, Extrinsics]]:
    k = CameraIntrinsics.from_fov(90.0, 96, 32)
    return [(k, Extrinsics.camera_looking_along(yaw, CAMERA_HEIGHT)) for yaw in VIEW_YAWS]


def _ray_box_depth(origin, direction, obstacle: sc.Obstacle) -> float:
    """Entry parameter of a ray into an obstacle prism (z in [0, OBSTACLE_HEIGHT]); inf on a miss."""
    c, s = math.cos(obstacle.heading), math.sin(obstacle.heading)
    rel = origin[:2] - np.asarray(obstacle.center)
    o = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], origin[2]])
    d = np.array([c * direction[0] + s * direction[1], -s * direction[0] + c * direction[1], direction[2]])
    lo = np.array([-obstacle.length / 2, -obstacle.width / 2, 0.0])
    hi = np.array([obstacle.length / 2, obstacle.width / 2, OBSTACLE_HEIGHT])
    t0, t1 = 0.0, np.inf
    for ax in range(3):
        if abs(d[ax]) < 1e-12:
            if o[ax] < lo[ax] or o[ax] > hi[ax]:
                return np.inf
            continue
        ta, tb = (lo[ax] - o[ax]) / d[ax], (hi[ax] - o[ax]) / d[ax]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
        if t0 > t1:
            return np.inf
    return t0


def render_views(scene: sc.Scene) -> tuple[np.ndarray, np.ndarray]:
    """Raster channels ``(views, rows, cols, RASTER_CHANNELS)`` and depth ``(views, rows, cols)``.

    Depth is the camera-z distance to the first obstacle along each patch-centre
    ray, or the far plane. Channels:

    0 obstacle hit, 1 inverse depth, 2-3 hit obstacle velocity / 10,
    4 ground sample inside the corridor, 5 signed ground sample offset from
    the centerline / 5 (positive on its left), 6-7 centerline direction (cos, sin) near the sample,
    8 ground sample beyond a red stop line, 9 speed limit / 20, 10 lateral
    coordinate of the nearest centerline point / 0.2 m, clipped to +-10.
    """
    from .geometry import patch_centers

    cams = view_cameras()
    n_views = len(cams)
    raster = np.zeros((n_views, PATCH_ROWS, PATCH_COLS, RASTER_CHANNELS))
    depth = np.full((n_views, PATCH_ROWS, PATCH_COLS), FAR_PLANE)
    lane_dir = np.diff(scene.centerline, axis=0)
    lane_dir /= np.maximum(np.hypot(lane_dir[:, 0], lane_dir[:, 1]), 1e-12)[:, None]
    for v, (k, ext) in enumerate(cams):
        u, w = patch_centers(PATCH_ROWS, PATCH_COLS, k)
        rays = np.stack([(u - k.cx) / k.fx, (w - k.cy) / k.fy, np.ones_like(u)], -1)
        ego_rays = rays @ ext.rotation.T
        origin = ext.translation
        for r in range(PATCH_ROWS):
            for c in range(PATCH_COLS):
                d = ego_rays[r, c]
                best, hit = np.inf, None
                for obs in scene.obstacles:
                    t = _ray_box_depth(origin, d, obs)
                    if t < best:
                        best, hit = t, obs
                if hit is not None and best < FAR_PLANE:
                    depth[v, r, c] = best
                    raster[v, r, c, 0] = 1.0
                    raster[v, r, c, 1] = 1.0 / best
                    raster[v, r, c, 2:4] = np.asarray(hit.velocity) / 10.0
                az = math.atan2(d[1], d[0])
                g = GROUND_RANGES[r] * np.array([math.cos(az), math.sin(az)])
                raster[v, r, c, 4] = float(sc.kernels.points_in_polygon(g[None], scene.corridor)[0])
                dist, idx, _ = sc.kernels.project_to_polyline(g[None], scene.centerline)
                rel = g - scene.centerline[idx[0]]
                side = 1.0 if lane_dir[idx[0], 0] * rel[1] - lane_dir[idx[0], 1] * rel[0] >= 0 else -1.0
                raster[v, r, c, 5] = side * min(dist[0], 20.0) / 5.0
                near = scene.centerline[idx[0]] + np.dot(rel, lane_dir[idx[0]]) * lane_dir[idx[0]]
                raster[v, r, c, 10] = float(np.clip(near[1] / 0.2, -10.0, 10.0))
                raster[v, r, c, 6:8] = lane_dir[idx[0]]
                raster[v, r, c, 8] = float(scene.light == "red" and g[0] > scene.stop_line_x)
                raster[v, r, c, 9] = scene.speed_limit / 20.0
    return raster, depth
