"""Stacked-panel SVG overlays of coarse, candidate and refined trajectories.

Each panel shows the ego-frame window x in [-10, 70] m, y in [-25, 25] m at
8 SVG units per metre, so a panel is 640 x 400 units. Ego forward points
right and ego left points up. Panels stack top to bottom.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from typing import Sequence

import numpy as np

from . import scorer as sc
from .meta_action import Trajectory

SCALE = 8.0  # SVG units per metre
X_RANGE = (-10.0, 70.0)
Y_RANGE = (-25.0, 25.0)
PANEL_W = SCALE * (X_RANGE[1] - X_RANGE[0])
PANEL_H = SCALE * (Y_RANGE[1] - Y_RANGE[0])
SVG_NS = "http://www.w3.org/2000/svg"

STYLE = {
    "coarse": "#d62728",
    "candidate": "#9467bd",
    "refined": "#2ca02c",
    "gt": "#555555",
}


def world_to_svg(points, panel: int = 0) -> np.ndarray:
    """Ego-frame metres to SVG coordinates inside panel ``panel``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    u = SCALE * (p[:, 0] - X_RANGE[0])
    v = SCALE * (Y_RANGE[1] - p[:, 1]) + panel * PANEL_H
    return np.stack([u, v], axis=1)


def _pts(points, panel: int) -> str:
    return " ".join(f"{u:.2f},{v:.2f}" for u, v in world_to_svg(points, panel))


def _with_origin(traj: Trajectory) -> np.ndarray:
    return np.vstack([[0.0, 0.0], traj.waypoints])


def _draw_trajectory(g, traj: Trajectory, panel: int, color: str, width: float, opacity: float = 1.0):
    ET.SubElement(g, "polyline", points=_pts(_with_origin(traj), panel), fill="none", stroke=color,
                  **{"stroke-width": f"{width:g}", "stroke-opacity": f"{opacity:g}"})
    for u, v in world_to_svg(traj.waypoints, panel):
        ET.SubElement(g, "circle", cx=f"{u:.2f}", cy=f"{v:.2f}", r=f"{width:g}", fill=color,
                      **{"fill-opacity": f"{opacity:g}"})


def _draw_scene(g, scene: sc.Scene, panel: int):
    ET.SubElement(g, "rect", x="0", y=f"{panel * PANEL_H:g}", width=f"{PANEL_W:g}", height=f"{PANEL_H:g}",
                  fill="#ffffff", stroke="#000000")
    ET.SubElement(g, "polygon", points=_pts(scene.corridor, panel), fill="#e6e6e6", stroke="#999999")
    ET.SubElement(g, "polyline", points=_pts(scene.centerline, panel), fill="none", stroke="#bbbbbb",
                  **{"stroke-dasharray": "6,4"})
    for o in scene.obstacles:
        box = sc.box_corners(o.center, o.heading, o.length, o.width)[0]
        ET.SubElement(g, "polygon", points=_pts(box, panel), fill="#1f77b4", **{"fill-opacity": "0.6"})
    if scene.light == "red" and np.isfinite(scene.stop_line_x):
        line = [[scene.stop_line_x, Y_RANGE[0]], [scene.stop_line_x, Y_RANGE[1]]]
        ET.SubElement(g, "polyline", points=_pts(line, panel), stroke="#ff0000", **{"stroke-width": "2"})
    ego = sc.box_corners(scene.origin, 0.0, sc.DEFAULT_SCORER.ego_length, sc.DEFAULT_SCORER.ego_width)[0]
    ET.SubElement(g, "polygon", points=_pts(ego, panel), fill="#000000", **{"fill-opacity": "0.7"})


def render_svg(scene: sc.Scene, coarse: Trajectory, candidates: Sequence[Trajectory], refined: Trajectory,
               gt: Trajectory | None = None) -> str:
    """Standalone SVG with coarse / candidate / refined panels (two panels without candidates)."""
    panels = [("coarse", [coarse])]
    if candidates:
        panels.append(("aligned", list(candidates)))
    panels.append(("refined", [refined]))
    height = PANEL_H * len(panels)
    root = ET.Element("svg", xmlns=SVG_NS, width=f"{PANEL_W:g}", height=f"{height:g}",
                      viewBox=f"0 0 {PANEL_W:g} {height:g}")
    defs = ET.SubElement(root, "defs")
    for i, (name, trajs) in enumerate(panels):
        clip = ET.SubElement(defs, "clipPath", id=f"clip-{name}")
        ET.SubElement(clip, "rect", x="0", y=f"{i * PANEL_H:g}", width=f"{PANEL_W:g}", height=f"{PANEL_H:g}")
        g = ET.SubElement(root, "g", id=f"panel-{name}", **{"clip-path": f"url(#clip-{name})"})
        _draw_scene(g, scene, i)
        if gt is not None:
            _draw_trajectory(g, gt, i, STYLE["gt"], 1.0, 0.5)
        color = STYLE["candidate"] if name == "aligned" else STYLE[name]
        for tr in trajs:
            _draw_trajectory(g, tr, i, color, 1.5 if name == "aligned" else 2.5, 0.6 if name == "aligned" else 1.0)
        label = ET.SubElement(g, "text", x="8", y=f"{i * PANEL_H + 20:g}", fill="#000000",
                              **{"font-family": "sans-serif", "font-size": "16"})
        label.text = name
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"
