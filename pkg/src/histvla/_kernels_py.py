"""Pure-numpy reference versions of the compiled scoring kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and semantics; ``histvla.kernels`` picks one at import time.
"""

import numpy as np


def first_overlap(ego, obstacles):
    """Index of the first step where the ego box overlaps any obstacle box.

    ``ego`` is ``(T, 4, 2)`` box corners and ``obstacles`` is ``(T, M, 4, 2)``.
    Boxes that only touch do not overlap. Returns -1 when no step overlaps.
    """
    ego = np.asarray(ego, dtype=np.float64)
    obs = np.asarray(obstacles, dtype=np.float64)
    T, M = obs.shape[0], obs.shape[1]
    if T == 0 or M == 0:
        return -1
    a = np.broadcast_to(ego[:, None], obs.shape)
    # two edge normals per rectangle are enough
    axes = np.concatenate(
        [a[:, :, 1:3] - a[:, :, 0:2], obs[:, :, 1:3] - obs[:, :, 0:2]], axis=2
    )  # (T, M, 4, 2)
    axes = np.stack([-axes[..., 1], axes[..., 0]], axis=-1)
    pa = np.einsum("tmkd,tmad->tmak", a, axes)  # (T, M, 4 corners, 4 axes)
    pb = np.einsum("tmkd,tmad->tmak", obs, axes)
    separated = (pa.max(axis=3) <= pb.min(axis=3)) | (pb.max(axis=3) <= pa.min(axis=3))
    hit = ~separated.any(axis=2)  # (T, M)
    steps = np.flatnonzero(hit.any(axis=1))
    return int(steps[0]) if steps.size else -1


def points_in_polygon(points, polygon):
    """Even-odd ray-casting test; returns a uint8 mask over ``points``."""
    p = np.asarray(points, dtype=np.float64)
    poly = np.asarray(polygon, dtype=np.float64)
    x, y = p[:, 0:1], p[:, 1:2]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    straddle = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    crossings = (straddle & (x < xc)).sum(axis=1)
    return (crossings % 2).astype(np.uint8)


def project_to_polyline(points, line):
    """Nearest-segment projection of points onto a polyline.

    Returns ``(distance, segment_index, arc_length)`` arrays; ties go to the
    lower segment index.
    """
    p = np.asarray(points, dtype=np.float64)
    ln = np.asarray(line, dtype=np.float64)
    a, b = ln[:-1], ln[1:]
    ab = b - a
    seg_len2 = (ab**2).sum(axis=1)
    seg_len = np.sqrt(seg_len2)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])[:-1]
    ap = p[:, None, :] - a[None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(seg_len2 > 0, (ap * ab).sum(axis=2) / seg_len2, 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d2 = ((p[:, None, :] - closest) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)
    rows = np.arange(p.shape[0])
    dist = np.sqrt(d2[rows, idx])
    s = cum[idx] + t[rows, idx] * seg_len[idx]
    return dist, idx.astype(np.int64), s
