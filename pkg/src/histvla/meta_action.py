"""Granular meta-action taxonomy derived from trajectory kinematics.

Labels come purely from the geometry and speed profile of a trajectory, so
ground-truth futures can be labelled without annotation. All thresholds live
in :class:`Thresholds`; they are configuration, chosen to separate urban
manoeuvres cleanly, and the scenario generator keeps its samples well away
from them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import ConfigError, InvalidInputError

HORIZON = 4.0  # [s]
DT = 0.5  # [s]
N_WAYPOINTS = 8
LOW_SPEED = 0.1  # [m/s] below this, heading is held and curvature is 0


class Lateral(enum.IntEnum):
    Sharp_Left_Turn = 0
    Slight_Left_Turn = 1
    Left_LaneChange = 2
    Sharp_Right_Turn = 3
    Slight_Right_Turn = 4
    Right_LaneChange = 5
    Straight_Strict = 6
    Lane_Micro_Adjust = 7

    def mirrored(self) -> "Lateral":
        return _MIRROR.get(self, self)

    @property
    def side(self) -> int:
        """+1 for left manoeuvres, -1 for right, 0 otherwise."""
        if self in (Lateral.Sharp_Left_Turn, Lateral.Slight_Left_Turn, Lateral.Left_LaneChange):
            return 1
        if self in (Lateral.Sharp_Right_Turn, Lateral.Slight_Right_Turn, Lateral.Right_LaneChange):
            return -1
        return 0

    @property
    def is_lane_change(self) -> bool:
        return self in (Lateral.Left_LaneChange, Lateral.Right_LaneChange)


_MIRROR = {
    Lateral.Sharp_Left_Turn: Lateral.Sharp_Right_Turn,
    Lateral.Sharp_Right_Turn: Lateral.Sharp_Left_Turn,
    Lateral.Slight_Left_Turn: Lateral.Slight_Right_Turn,
    Lateral.Slight_Right_Turn: Lateral.Slight_Left_Turn,
    Lateral.Left_LaneChange: Lateral.Right_LaneChange,
    Lateral.Right_LaneChange: Lateral.Left_LaneChange,
}


class Longitudinal(enum.IntEnum):
    Full_Stop = 0
    Creeping = 1
    Emergency_Decel = 2
    Mild_Decel = 3
    Controlled_Decel = 4
    Constant_Speed_Loose = 5
    Constant_Speed_Strict = 6
    Mild_Accel = 7
    Aggressive_Accel = 8


class DrivingCommand(NamedTuple):
    lateral: Lateral
    longitudinal: Longitudinal

    def __str__(self):
        return f"{self.lateral.name}/{self.longitudinal.name}"


@dataclass(frozen=True)
class Trajectory:
    """Future ego positions in the ego frame at ``t = dt, 2 dt, ..., horizon``.

    The current pose (t = 0) is not part of the waypoint list.
    """

    waypoints: np.ndarray
    dt: float = DT

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != 2:
            raise InvalidInputError(f"waypoints must have shape (n, 2), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidInputError("waypoints must be finite")
        if self.dt <= 0 or abs(w.shape[0] * self.dt - HORIZON) > 1e-9:
            raise InvalidInputError(
                f"{w.shape[0]} waypoints at dt={self.dt} do not span the {HORIZON} s horizon"
            )
        w.setflags(write=False)
        object.__setattr__(self, "waypoints", w)

    @property
    def horizon(self) -> float:
        return self.waypoints.shape[0] * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.waypoints.shape[0] + 1)

    def mirrored(self) -> "Trajectory":
        return Trajectory(self.waypoints * np.array([1.0, -1.0]), self.dt)

    def translated(self, offset) -> "Trajectory":
        return Trajectory(self.waypoints + np.asarray(offset, dtype=np.float64), self.dt)

    def __eq__(self, other):
        return (
            isinstance(other, Trajectory)
            and self.dt == other.dt
            and np.array_equal(self.waypoints, other.waypoints)
        )

    __hash__ = None


@dataclass(frozen=True)
class Thresholds:
    sharp_turn_deg: float = 60.0
    slight_turn_deg: float = 20.0
    lane_change_min: float = 1.5  # [m]
    lane_change_max: float = 5.0  # [m]
    straight_lat: float = 0.3  # [m]
    straight_heading_deg: float = 5.0
    stop_speed: float = 0.2  # [m/s]
    creep_speed: float = 1.5  # [m/s]
    emergency_decel: float = -4.0  # [m/s^2]
    controlled_decel: float = -2.0
    mild_decel: float = -0.5
    aggressive_accel: float = 2.0
    mild_accel: float = 0.5
    constant_mean_accel: float = 0.5
    constant_step_accel: float = 0.3

    def __post_init__(self):
        if not (0 < self.slight_turn_deg < self.sharp_turn_deg):
            raise ConfigError("turn thresholds must satisfy 0 < slight < sharp")
        if not (0 < self.lane_change_min < self.lane_change_max):
            raise ConfigError("lane change bounds must satisfy 0 < min < max")
        if not (0 <= self.straight_lat < self.lane_change_min):
            raise ConfigError("straight lateral band must sit below the lane change band")
        if not (0 < self.stop_speed < self.creep_speed):
            raise ConfigError("speed thresholds must satisfy 0 < stop < creep")
        if not (self.emergency_decel < self.controlled_decel < self.mild_decel < 0):
            raise ConfigError("deceleration thresholds must be negative and increasing")
        if not (0 < self.mild_accel < self.aggressive_accel):
            raise ConfigError("acceleration thresholds must satisfy 0 < mild < aggressive")

    @classmethod
    def from_mapping(cls, values: dict) -> "Thresholds":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown meta-action thresholds: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})


DEFAULT_THRESHOLDS = Thresholds()


class KinematicProfile(NamedTuple):
    speed: np.ndarray  # per segment, (n-1,)
    accel: np.ndarray  # (n-2,)
    heading: np.ndarray  # per segment, unwrapped, (n-1,)
    curvature: np.ndarray  # (n-2,)
    lateral_displacement: float

    @property
    def heading_change(self) -> float:
        return float(self.heading[-1] - self.heading[0])


def _wrap(angle):
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def kinematic_profile(traj: Trajectory) -> KinematicProfile:
    w = traj.waypoints
    if w.shape[0] < 3:
        raise InvalidInputError("kinematic profile needs at least 3 waypoints")
    seg = np.diff(w, axis=0)
    length = np.hypot(seg[:, 0], seg[:, 1])
    speed = length / traj.dt
    accel = np.diff(speed) / traj.dt

    moving = speed >= LOW_SPEED
    raw = np.arctan2(seg[:, 1], seg[:, 0])
    heading = np.zeros_like(raw)
    if moving.any():
        prev = raw[np.argmax(moving)]  # leading stationary steps take the first moving heading
        for i in range(raw.size):
            if moving[i]:
                prev = prev + _wrap(raw[i] - prev)
            heading[i] = prev

    arc = 0.5 * (length[:-1] + length[1:])
    still = ~(moving[:-1] & moving[1:])
    with np.errstate(divide="ignore", invalid="ignore"):
        curvature = np.where(still, 0.0, np.diff(heading) / np.where(still, 1.0, arc))

    h0 = heading[0]
    rel = w[-1] - w[0]
    lateral = float(np.cos(h0) * rel[1] - np.sin(h0) * rel[0])
    return KinematicProfile(speed, accel, heading, curvature, lateral)


def classify_lateral(traj: Trajectory, th: Thresholds = DEFAULT_THRESHOLDS) -> Lateral:
    prof = kinematic_profile(traj)
    dpsi = np.rad2deg(prof.heading_change)
    d_lat = prof.lateral_displacement
    if abs(dpsi) > th.sharp_turn_deg:
        return Lateral.Sharp_Left_Turn if dpsi > 0 else Lateral.Sharp_Right_Turn
    if abs(dpsi) > th.slight_turn_deg:
        return Lateral.Slight_Left_Turn if dpsi > 0 else Lateral.Slight_Right_Turn
    if th.lane_change_min < abs(d_lat) <= th.lane_change_max:
        return Lateral.Left_LaneChange if d_lat > 0 else Lateral.Right_LaneChange
    if abs(d_lat) <= th.straight_lat and abs(dpsi) <= th.straight_heading_deg:
        return Lateral.Straight_Strict
    return Lateral.Lane_Micro_Adjust


def classify_longitudinal(traj: Trajectory, th: Thresholds = DEFAULT_THRESHOLDS) -> Longitudinal:
    prof = kinematic_profile(traj)
    v_mean = prof.speed.mean()
    a_mean = prof.accel.mean()
    # stop-class rules come first: the final state dominates intent
    if v_mean < th.stop_speed:
        return Longitudinal.Full_Stop
    if v_mean < th.creep_speed:
        return Longitudinal.Creeping
    if prof.accel.min() < th.emergency_decel:
        return Longitudinal.Emergency_Decel
    if a_mean < th.controlled_decel:
        return Longitudinal.Controlled_Decel
    if a_mean < th.mild_decel:
        return Longitudinal.Mild_Decel
    if a_mean > th.aggressive_accel:
        return Longitudinal.Aggressive_Accel
    if a_mean > th.mild_accel:
        return Longitudinal.Mild_Accel
    if abs(a_mean) <= th.constant_mean_accel and np.all(np.abs(prof.accel) <= th.constant_step_accel):
        return Longitudinal.Constant_Speed_Strict
    return Longitudinal.Constant_Speed_Loose


def classify(traj: Trajectory, th: Thresholds = DEFAULT_THRESHOLDS) -> DrivingCommand:
    return DrivingCommand(classify_lateral(traj, th), classify_longitudinal(traj, th))


def label_dataset(trajs: Sequence[Trajectory], th: Thresholds = DEFAULT_THRESHOLDS) -> list[DrivingCommand]:
    if len(trajs) == 0:
        raise InvalidInputError("cannot label an empty trajectory list")
    labels = []
    for i, traj in enumerate(trajs):
        try:
            labels.append(classify(traj, th))
        except InvalidInputError as exc:
            raise InvalidInputError(f"trajectory {i}: {exc}") from exc
    return labels
