"""Collision world: KD-tree over the scene point cloud, cylinder collision
test, nearest-obstacle distance for the proximity penalty, and start/goal
sampling with a BFS reachability check on a 2D occupancy grid."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .scene import SceneModel, extract_point_cloud


@dataclass(frozen=True)
class CollisionSpec:
    r_col: float = 0.3     # m  drone cylinder radius
    h_tol: float = 0.2     # m  drone cylinder half-height
    delta_safe: float = 0.2  # m extra query margin
    r_safe: float = 2.0    # m  obstacle-penalty falloff distance
    r_goal: float = 2.0    # m  success radius

    def __post_init__(self):
        if min(self.r_col, self.h_tol, self.delta_safe, self.r_safe, self.r_goal) <= 0:
            raise ValueError("collision distances must be positive")

    @property
    def r_query(self) -> float:
        return self.r_col + self.delta_safe


class SpatialIndex:
    """Exact radius queries over a fixed point cloud."""

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self.count = len(self.points)
        self._tree = cKDTree(self.points) if self.count else None

    @classmethod
    def from_scene(cls, scene: SceneModel, alpha_min: float = 0.3) -> "SpatialIndex":
        return cls(extract_point_cloud(scene, alpha_min=alpha_min))

    def query_radius(self, center, r: float) -> np.ndarray:
        """Indices of points with ||p - center|| <= r, ascending."""
        if self._tree is None or r < 0:
            return np.empty(0, dtype=np.int64)
        idx = self._tree.query_ball_point(np.asarray(center, dtype=np.float64), r)
        return np.array(sorted(idx), dtype=np.int64)


def check_collision(index: SpatialIndex, position, spec: CollisionSpec):
    """Cylinder collision plus nearest-obstacle distance.

    Collision: any point within horizontal distance r_col AND height
    difference h_tol of the drone center. d_obs is the smallest horizontal
    center distance among height-gated points out to
    cap = max(r_safe, r_col + delta_safe), +inf when none qualify.
    Returns (collided, d_obs).
    """
    p = np.asarray(position, dtype=np.float64)
    cap = max(spec.r_safe, spec.r_query)
    # euclidean ball that contains every point passing the gates
    ball = index.query_radius(p, float(np.hypot(cap, spec.h_tol)) + 1e-9)
    if len(ball) == 0:
        return False, np.inf
    pts = index.points[ball]
    dz = np.abs(pts[:, 2] - p[2])
    gate = dz <= spec.h_tol
    if not np.any(gate):
        return False, np.inf
    horiz = np.hypot(pts[gate, 0] - p[0], pts[gate, 1] - p[1])
    in_cap = horiz <= cap
    d_obs = float(horiz[in_cap].min()) if np.any(in_cap) else np.inf
    collided = bool(np.any(horiz <= spec.r_col))
    return collided, d_obs


def occupancy_grid(index: SpatialIndex, bounds, altitude: float,
                   spec: CollisionSpec, cell: float = 0.5):
    """2D occupancy at flight altitude: cells within r_col (inflation) of any
    height-gated obstacle point are blocked. Returns (blocked, origin, cell)."""
    lo = np.asarray(bounds[0], dtype=np.float64)[:2]
    hi = np.asarray(bounds[1], dtype=np.float64)[:2]
    nx = max(2, int(np.ceil((hi[0] - lo[0]) / cell)) + 1)
    ny = max(2, int(np.ceil((hi[1] - lo[1]) / cell)) + 1)
    blocked = np.zeros((nx, ny), dtype=bool)
    if index.count:
        pts = index.points
        gate = np.abs(pts[:, 2] - altitude) <= spec.h_tol
        inflate = spec.r_col
        for x, y in pts[gate][:, :2]:
            i0 = max(0, int(np.floor((x - inflate - lo[0]) / cell)))
            i1 = min(nx - 1, int(np.ceil((x + inflate - lo[0]) / cell)))
            j0 = max(0, int(np.floor((y - inflate - lo[1]) / cell)))
            j1 = min(ny - 1, int(np.ceil((y + inflate - lo[1]) / cell)))
            for i in range(i0, i1 + 1):
                cx = lo[0] + i * cell
                for j in range(j0, j1 + 1):
                    cy = lo[1] + j * cell
                    if (cx - x) ** 2 + (cy - y) ** 2 <= inflate ** 2:
                        blocked[i, j] = True
    return blocked, lo, cell


def _bfs_reachable(blocked: np.ndarray, start: tuple, goal: tuple) -> bool:
    if blocked[start] or blocked[goal]:
        return False
    nx, ny = blocked.shape
    seen = np.zeros_like(blocked)
    seen[start] = True
    queue = deque([start])
    while queue:
        i, j = queue.popleft()
        if (i, j) == goal:
            return True
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < nx and 0 <= nj < ny and not seen[ni, nj] and not blocked[ni, nj]:
                seen[ni, nj] = True
                queue.append((ni, nj))
    return False


class SceneTooDenseError(RuntimeError):
    """No valid start-goal pair found within the attempt budget."""


def sample_start_goal(scene: SceneModel, index: SpatialIndex,
                      rng: np.random.Generator, spec: CollisionSpec,
                      altitude: float, min_dist: float = 30.0,
                      max_attempts: int = 1000, grid_cell: float = 0.5):
    """Rejection-sample a (start, goal, initial yaw) triple: both endpoints
    collision-free with margin r_col + delta_safe, at least min_dist apart,
    and connected on the inflated 2D occupancy grid at flight altitude."""
    margin_spec = CollisionSpec(r_col=spec.r_query, h_tol=spec.h_tol,
                                delta_safe=spec.delta_safe, r_safe=spec.r_safe,
                                r_goal=spec.r_goal)
    blocked, origin, cell = occupancy_grid(index, scene.bounds, altitude, spec, grid_cell)
    lo = scene.bounds[0].astype(np.float64)[:2] + spec.r_query
    hi = scene.bounds[1].astype(np.float64)[:2] - spec.r_query

    def to_cell(p):
        i = int(round((p[0] - origin[0]) / cell))
        j = int(round((p[1] - origin[1]) / cell))
        return (min(max(i, 0), blocked.shape[0] - 1),
                min(max(j, 0), blocked.shape[1] - 1))

    for _ in range(max_attempts):
        start = np.array([*rng.uniform(lo, hi), altitude])
        goal = np.array([*rng.uniform(lo, hi), altitude])
        if np.linalg.norm(goal - start) < min_dist:
            continue
        if check_collision(index, start, margin_spec)[0]:
            continue
        if check_collision(index, goal, margin_spec)[0]:
            continue
        if not _bfs_reachable(blocked, to_cell(start), to_cell(goal)):
            continue
        yaw = float(np.arctan2(goal[1] - start[1], goal[0] - start[0]))
        return start, goal, yaw
    raise SceneTooDenseError(
        f"no valid start-goal pair after {max_attempts} attempts "
        f"(min_dist={min_dist} m); scene too dense")
