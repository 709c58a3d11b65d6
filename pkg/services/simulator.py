"""Charged-particle dynamics.

Unit masses, softened Coulomb interaction, velocity Verlet integration.
Like charges repel: F_i = sum_j q_i q_j (x_i - x_j) / (|x_i - x_j|^2 + eps^2)^(3/2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from services.errors import ShapeError


@dataclass(frozen=True)
class Trajectory:
    positions: np.ndarray  # final (P, n)
    velocities: np.ndarray  # final (P, n)
    min_distance: float  # closest approach of any pair over the run


def _pair_geometry(positions: np.ndarray, softening: float) -> tuple[np.ndarray, np.ndarray]:
    diff = positions[:, None, :] - positions[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    return diff, r2 + softening * softening


def coulomb_forces(positions: np.ndarray, charges: np.ndarray, softening: float) -> np.ndarray:
    diff, soft2 = _pair_geometry(positions, softening)
    qq = charges[:, None] * charges[None, :]
    np.fill_diagonal(qq, 0.0)
    return np.einsum("ij,ijk->ik", qq / soft2 ** 1.5, diff)


def potential_energy(positions: np.ndarray, charges: np.ndarray, softening: float) -> float:
    _, soft2 = _pair_geometry(positions, softening)
    qq = charges[:, None] * charges[None, :]
    upper = np.triu_indices(positions.shape[0], k=1)
    return float(np.sum(qq[upper] / np.sqrt(soft2[upper])))


def kinetic_energy(velocities: np.ndarray) -> float:
    return 0.5 * float(np.sum(velocities * velocities))


def total_energy(positions: np.ndarray, velocities: np.ndarray, charges: np.ndarray, softening: float) -> float:
    return kinetic_energy(velocities) + potential_energy(positions, charges, softening)


def total_momentum(velocities: np.ndarray) -> np.ndarray:
    return velocities.sum(axis=0)


def min_pair_distance(positions: np.ndarray) -> float:
    if positions.shape[0] < 2:
        return float("inf")
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return float(dist[np.triu_indices(positions.shape[0], k=1)].min())


def velocity_verlet(positions, velocities, charges, *, dt: float, steps: int, softening: float) -> Trajectory:
    x = np.array(positions, dtype=np.float64)
    v = np.array(velocities, dtype=np.float64)
    q = np.asarray(charges, dtype=np.float64)
    if x.shape != v.shape or x.ndim != 2 or q.shape != (x.shape[0],):
        raise ShapeError(f"state shapes disagree: positions {x.shape}, velocities {v.shape}, charges {q.shape}")
    if dt <= 0 or steps < 1:
        raise ShapeError(f"need dt > 0 and steps >= 1, got dt={dt}, steps={steps}")
    closest = min_pair_distance(x)
    force = coulomb_forces(x, q, softening)
    for _ in range(steps):
        v_half = v + 0.5 * dt * force
        x = x + dt * v_half
        force = coulomb_forces(x, q, softening)
        v = v_half + 0.5 * dt * force
        closest = min(closest, min_pair_distance(x))
    return Trajectory(positions=x, velocities=v, min_distance=closest)
