"""On-disk formats for scenes, trajectories and metric tables.

A scene directory holds:

``scene.json``
    Scene geometry and prompt history as plain JSON (sorted keys, two-space
    indent). Infinite stop lines are written as ``null``.
``gt.csv``
    Ground-truth waypoints, columns ``traj_id,t,x,y``.
``labels.csv``
    Meta-action labels of the ground truth, columns ``traj_id,lateral,longitudinal``.
``raster.npy`` / ``depth.npy``
    Camera-view rasters in numpy's ``.npy`` format, whose header records shape
    and dtype.

CSV files are comma separated with a header row, ``.`` decimals and LF line
endings. Floats are written with ``repr`` so values round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import scorer as sc
from .geometry import InvalidInputError
from .meta_action import DT, N_WAYPOINTS, DrivingCommand, Lateral, Longitudinal, Trajectory
from .scenario import GeneratedScene, PromptHistory, render_views

FORMAT_VERSION = 1
SCENE_FILE = "scene.json"
GT_FILE = "gt.csv"
LABEL_FILE = "labels.csv"


class MissingInputError(FileNotFoundError):
    pass


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path, required: Sequence[str]) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing input: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(required) - set(reader.fieldnames or ())
        if missing:
            raise InvalidInputError(f"{path.name} lacks columns {sorted(missing)}")
        return list(reader)


# -- trajectories --------------------------------------------------------------------


def trajectory_rows(traj_id: str, traj: Trajectory) -> list[list]:
    return [[traj_id, float(t), float(x), float(y)] for t, (x, y) in zip(traj.times, traj.waypoints)]


def write_trajectories(path, trajs: dict[str, Trajectory]) -> Path:
    rows = [r for tid, tr in trajs.items() for r in trajectory_rows(tid, tr)]
    return write_csv(path, ("traj_id", "t", "x", "y"), rows)


def read_trajectories(path) -> dict[str, Trajectory]:
    """Trajectories keyed by id, in first-appearance order; rows are sorted by ``t``."""
    grouped: dict[str, list[tuple[float, float, float]]] = {}
    for row in read_csv(path, ("traj_id", "t", "x", "y")):
        try:
            grouped.setdefault(row["traj_id"], []).append((float(row["t"]), float(row["x"]), float(row["y"])))
        except ValueError as e:
            raise InvalidInputError(f"bad number in {path}: {e}") from None
    out = {}
    expected = DT * np.arange(1, N_WAYPOINTS + 1)
    for tid, pts in grouped.items():
        pts.sort()
        t = np.array([p[0] for p in pts])
        if t.shape != expected.shape or np.max(np.abs(t - expected)) > 1e-6:
            raise InvalidInputError(f"trajectory {tid!r} must have waypoints at t = 0.5, 1.0, ..., 4.0")
        out[tid] = Trajectory(np.array([p[1:] for p in pts]))
    return out


def write_labels(path, labels: dict[str, DrivingCommand]) -> Path:
    rows = [[tid, c.lateral.name, c.longitudinal.name] for tid, c in labels.items()]
    return write_csv(path, ("traj_id", "lateral", "longitudinal"), rows)


def read_labels(path) -> dict[str, DrivingCommand]:
    out = {}
    for row in read_csv(path, ("traj_id", "lateral", "longitudinal")):
        try:
            out[row["traj_id"]] = DrivingCommand(Lateral[row["lateral"]], Longitudinal[row["longitudinal"]])
        except KeyError as e:
            raise InvalidInputError(f"unknown meta-action {e} in {path}") from None
    return out


# -- scenes --------------------------------------------------------------------------


def _finite_or_none(v: float):
    return None if math.isinf(v) else float(v)


def scene_to_dict(scene: sc.Scene) -> dict:
    return {
        "corridor": scene.corridor.tolist(),
        "centerline": scene.centerline.tolist(),
        "obstacles": [
            {"center": list(map(float, o.center)), "length": float(o.length), "width": float(o.width),
             "heading": float(o.heading), "velocity": list(map(float, o.velocity))}
            for o in scene.obstacles
        ],
        "light": scene.light,
        "stop_line_x": _finite_or_none(scene.stop_line_x),
        "speed_limit": float(scene.speed_limit),
        "ego_history": scene.ego_history.tolist(),
        "origin": list(scene.origin),
    }


def scene_from_dict(d: dict) -> sc.Scene:
    try:
        obstacles = tuple(
            sc.Obstacle(tuple(o["center"]), o["length"], o["width"], o.get("heading", 0.0),
                        tuple(o.get("velocity", (0.0, 0.0))))
            for o in d.get("obstacles", ())
        )
        stop = d.get("stop_line_x")
        return sc.Scene(
            np.array(d["corridor"], dtype=np.float64),
            np.array(d["centerline"], dtype=np.float64),
            obstacles,
            d.get("light", "green"),
            float("inf") if stop is None else float(stop),
            float(d.get("speed_limit", 15.0)),
            np.array(d.get("ego_history", []), dtype=np.float64).reshape(-1, 2),
            tuple(d.get("origin", (0.0, 0.0))),
        )
    except (KeyError, TypeError) as e:
        raise InvalidInputError(f"malformed scene description: {e}") from None


class SceneRecord(NamedTuple):
    scene_id: str
    scene: sc.Scene
    gt: Trajectory
    command: DrivingCommand
    history: PromptHistory

    def generated(self) -> GeneratedScene:
        return GeneratedScene(self.scene, self.gt, self.command, self.history)


def write_scene_dir(path, scene_id: str, g: GeneratedScene) -> list[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": FORMAT_VERSION,
        "scene_id": scene_id,
        "scene": scene_to_dict(g.scene),
        "command": {"lateral": g.command.lateral.name, "longitudinal": g.command.longitudinal.name},
        "history": {"nav": list(g.history.nav), "ego": g.history.ego.tolist(),
                    "instruction": g.history.instruction},
    }
    scene_file = path / SCENE_FILE
    scene_file.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    written = [scene_file]
    written.append(write_trajectories(path / GT_FILE, {"gt": g.gt}))
    written.append(write_labels(path / LABEL_FILE, {"gt": g.command}))
    raster, depth = render_views(g.scene)
    for name, arr in (("raster.npy", raster), ("depth.npy", depth)):
        np.save(path / name, np.ascontiguousarray(arr, dtype=np.float32))
        written.append(path / name)
    return written


def read_scene_dir(path) -> SceneRecord:
    path = Path(path)
    scene_file = path / SCENE_FILE
    if not scene_file.is_file():
        raise MissingInputError(f"missing input: no {SCENE_FILE} in {path}")
    try:
        doc = json.loads(scene_file.read_text())
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"{scene_file} is not valid JSON: {e}") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported scene format version {doc.get('format_version')!r}")
    scene = scene_from_dict(doc["scene"])
    gt = read_trajectories(path / GT_FILE)["gt"]
    cmd = DrivingCommand(Lateral[doc["command"]["lateral"]], Longitudinal[doc["command"]["longitudinal"]])
    h = doc["history"]
    history = PromptHistory(tuple(h["nav"]), np.array(h["ego"]), h["instruction"])
    return SceneRecord(doc.get("scene_id", path.name), scene, gt, cmd, history)


def scene_dirs(root) -> list[Path]:
    """Scene directories under ``root`` (or ``root`` itself if it is one), sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise MissingInputError(f"missing input: scene directory {root} does not exist")
    if (root / SCENE_FILE).is_file():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / SCENE_FILE).is_file())
    if not dirs:
        raise MissingInputError(f"missing input: no scenes under {root}")
    return dirs


def read_corpus(root) -> list[SceneRecord]:
    return [read_scene_dir(p) for p in scene_dirs(root)]
