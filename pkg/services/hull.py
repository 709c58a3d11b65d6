"""3D convex hull (quickhull) and its volume, the label oracle of the hull task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from services.errors import DegenerateHullError

RELATIVE_EPS = 1e-10

Face = tuple[int, int, int]


@dataclass(frozen=True)
class ConvexHull:
    points: np.ndarray
    faces: tuple[Face, ...]  # outward oriented, counter-clockwise seen from outside

    @property
    def vertices(self) -> tuple[int, ...]:
        return tuple(sorted({i for face in self.faces for i in face}))

    @property
    def volume(self) -> float:
        apex = self.points[list(self.vertices)].mean(axis=0)
        total = 0.0
        for a, b, c in self.faces:
            total += _det(self.points[a] - apex, self.points[b] - apex, self.points[c] - apex)
        return total / 6.0


def _det(u: np.ndarray, v: np.ndarray, w: np.ndarray) -> float:
    return float(np.dot(u, np.cross(v, w)))


def _plane(points: np.ndarray, face: Face) -> tuple[np.ndarray, float]:
    a, b, c = (points[i] for i in face)
    normal = np.cross(b - a, c - a)
    norm = np.linalg.norm(normal)
    normal = normal / norm if norm > 0 else normal
    return normal, float(np.dot(normal, a))


def _initial_simplex(points: np.ndarray, eps: float) -> list[int]:
    a = int(np.argmin(points[:, 0]))
    b = int(np.argmax(np.linalg.norm(points - points[a], axis=1)))
    ab = points[b] - points[a]
    if np.linalg.norm(ab) <= eps:
        raise DegenerateHullError("all points coincide")
    line_dist = np.linalg.norm(np.cross(points - points[a], ab), axis=1) / np.linalg.norm(ab)
    c = int(np.argmax(line_dist))
    if line_dist[c] <= eps:
        raise DegenerateHullError("points are collinear")
    normal = np.cross(ab, points[c] - points[a])
    normal /= np.linalg.norm(normal)
    plane_dist = np.abs((points - points[a]) @ normal)
    d = int(np.argmax(plane_dist))
    if plane_dist[d] <= eps:
        raise DegenerateHullError("points are coplanar")
    return [a, b, c, d]


def convex_hull(points) -> ConvexHull:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DegenerateHullError(f"expected (M, 3) points, got {pts.shape}")
    if pts.shape[0] < 4:
        raise DegenerateHullError(f"a 3D hull needs at least 4 points, got {pts.shape[0]}")
    scale = max(float(np.max(np.abs(pts))), 1.0)
    eps = RELATIVE_EPS * scale

    simplex = _initial_simplex(pts, eps)
    inner = pts[simplex].mean(axis=0)
    faces: list[Face] = []
    for face in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        i, j, k = (simplex[f] for f in face)
        normal, offset = _plane(pts, (i, j, k))
        faces.append((i, j, k) if np.dot(normal, inner) < offset else (i, k, j))

    # outside[f]: points strictly above face f, each assigned to one face only
    outside: dict[Face, list[int]] = {f: [] for f in faces}
    _assign(pts, [i for i in range(pts.shape[0]) if i not in simplex], list(faces), outside, eps)

    while True:
        pending = next((f for f in faces if outside[f]), None)
        if pending is None:
            break
        normal, offset = _plane(pts, pending)
        far = max(outside[pending], key=lambda i: float(np.dot(normal, pts[i])) - offset)
        visible = [f for f in faces if _height(pts, f, far) > eps]
        edges = {(f[e], f[(e + 1) % 3]) for f in visible for e in range(3)}
        horizon = [(u, v) for u, v in edges if (v, u) not in edges]
        orphans = sorted({i for f in visible for i in outside.pop(f) if i != far})
        removed = set(visible)
        kept = [f for f in faces if f not in removed]
        new_faces = [(u, v, far) for u, v in sorted(horizon)]
        for f in new_faces:
            outside[f] = []
        faces = kept + new_faces
        _assign(pts, orphans, new_faces + kept, outside, eps)
    return ConvexHull(points=pts, faces=tuple(faces))


def _height(points: np.ndarray, face: Face, index: int) -> float:
    normal, offset = _plane(points, face)
    return float(np.dot(normal, points[index])) - offset


def _assign(points: np.ndarray, candidates: list[int], faces: list[Face], outside: dict[Face, list[int]],
            eps: float) -> None:
    for i in candidates:
        for f in faces:
            if _height(points, f, i) > eps:
                outside[f].append(i)
                break


def hull_volume_3d(points) -> float:
    return convex_hull(points).volume
