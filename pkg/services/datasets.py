"""Synthetic tasks: charged n-body trajectories and 3D convex-hull volumes.

A generated dataset directory holds one JSON-lines file per split plus
``manifest.json``:

    train.jsonl / val.jsonl / test.jsonl   one record per line
        {"id", "positions", "target"[, "velocities", "charges"]}
    manifest.json
        {"task", "seed", "config", "config_hash", "count", "splits", "files"}

Every sample draws from its own generator seeded with (seed, index), so the
files do not depend on the number of worker threads.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from services.errors import ConfigError, DatasetIOError, DegenerateHullError
from services.geograph import GeometricGraph
from services.hull import hull_volume_3d
from services.simulator import velocity_verlet

logger = logging.getLogger(__name__)

TASKS = ("nbody", "hull3d")
SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"

DEFAULT_SPLITS = {
    "nbody": (3000, 2000, 2000),
    "hull3d": (4000, 4000, 4000),
}


@dataclass(frozen=True)
class NBodyConfig:
    particles: int = 5
    dim: int = 3
    steps: int = 1000
    dt: float = 1e-3
    softening: float = 1e-2
    position_scale: float = 1.0
    velocity_scale: float = 0.5
    # closest approach allowed during a run; closer samples are redrawn
    collision_distance: float = 0.1
    max_attempts: int = 100

    def __post_init__(self):
        if self.particles < 1 or self.dim < 1:
            raise ConfigError("particles and dim must be >= 1")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be > 0, got {self.dt}")
        if self.softening < 0 or self.collision_distance < 0 or self.max_attempts < 1:
            raise ConfigError("softening, collision_distance must be >= 0 and max_attempts >= 1")


@dataclass(frozen=True)
class HullConfig:
    nodes: int = 6
    min_separation: float = 0.0
    max_attempts: int = 1000

    def __post_init__(self):
        if self.nodes < 4:
            raise ConfigError(f"a 3D hull needs at least 4 nodes, got {self.nodes}")
        if self.min_separation < 0:
            raise ConfigError(f"min_separation must be >= 0, got {self.min_separation}")


@dataclass(frozen=True)
class SampleRecord:
    id: int
    positions: np.ndarray  # (M, n)
    target: np.ndarray | float  # final positions (n-body) or hull volume
    velocities: np.ndarray | None = None
    charges: np.ndarray | None = None

    def to_json(self) -> str:
        out = {"id": self.id, "positions": _flat(self.positions)}
        if self.velocities is not None:
            out["velocities"] = _flat(self.velocities)
        if self.charges is not None:
            out["charges"] = _flat(self.charges)
        out["target"] = _flat(self.target) if isinstance(self.target, np.ndarray) else float(self.target)
        return json.dumps(out, separators=(",", ":"))

    @classmethod
    def from_dict(cls, raw: dict, dim: int) -> SampleRecord:
        positions = np.asarray(raw["positions"], dtype=np.float64).reshape(-1, dim)
        target = raw["target"]
        if isinstance(target, list):
            target = np.asarray(target, dtype=np.float64).reshape(-1, dim)
        else:
            target = float(target)
        velocities = raw.get("velocities")
        charges = raw.get("charges")
        return cls(
            id=int(raw["id"]),
            positions=positions,
            target=target,
            velocities=None if velocities is None else np.asarray(velocities, dtype=np.float64).reshape(-1, dim),
            charges=None if charges is None else np.asarray(charges, dtype=np.float64),
        )


def _flat(arr) -> list[float]:
    return [float(v) for v in np.asarray(arr, dtype=np.float64).reshape(-1)]


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


# ---------------------------------------------------------------------------
# samplers


def simulate_nbody(cfg: NBodyConfig, rng: np.random.Generator, index: int = 0) -> SampleRecord:
    """Draw an initial state and integrate it; collisions are redrawn."""
    for attempt in range(cfg.max_attempts):
        positions = cfg.position_scale * rng.standard_normal((cfg.particles, cfg.dim))
        velocities = cfg.velocity_scale * rng.standard_normal((cfg.particles, cfg.dim))
        charges = rng.choice(np.array([-1.0, 1.0]), size=cfg.particles)
        run = velocity_verlet(positions, velocities, charges, dt=cfg.dt, steps=cfg.steps, softening=cfg.softening)
        if run.min_distance >= cfg.collision_distance:
            return SampleRecord(id=index, positions=positions, target=run.positions,
                                velocities=velocities, charges=charges)
        logger.info("sample %d: rejected attempt %d, closest approach %.4g", index, attempt, run.min_distance)
    raise ConfigError(f"sample {index}: no collision-free draw in {cfg.max_attempts} attempts")


def min_linf_separation(points: np.ndarray) -> float:
    if points.shape[0] < 2:
        return float("inf")
    dist = np.max(np.abs(points[:, None, :] - points[None, :, :]), axis=-1)
    return float(dist[np.triu_indices(points.shape[0], k=1)].min())


def sample_hull(cfg: HullConfig, rng: np.random.Generator, index: int = 0) -> SampleRecord:
    """Standard-normal vertices labelled with their hull volume."""
    for attempt in range(cfg.max_attempts):
        points = rng.standard_normal((cfg.nodes, 3))
        if min_linf_separation(points) < cfg.min_separation:
            continue
        try:
            volume = hull_volume_3d(points)
        except DegenerateHullError:
            logger.info("sample %d: degenerate draw %d", index, attempt)
            continue
        return SampleRecord(id=index, positions=points, target=volume)
    raise ConfigError(f"sample {index}: no draw with separation >= {cfg.min_separation} in {cfg.max_attempts} attempts")


def draw_sample(task: str, cfg, seed: int, index: int) -> SampleRecord:
    rng = sample_rng(seed, index)
    if task == "nbody":
        return simulate_nbody(cfg, rng, index)
    if task == "hull3d":
        return sample_hull(cfg, rng, index)
    raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")


# ---------------------------------------------------------------------------
# files


def resolve_splits(task: str, samples: int | None, splits: Sequence[int] | None) -> tuple[int, int, int]:
    if splits is not None:
        splits = tuple(int(s) for s in splits)
        if len(splits) != 3 or min(splits) < 0:
            raise ConfigError(f"splits must be three non-negative counts, got {splits}")
        if samples is not None and sum(splits) != samples:
            raise ConfigError(f"splits {splits} do not add up to {samples} samples")
        return splits
    if samples is None:
        return DEFAULT_SPLITS[task]
    if samples < 3:
        raise ConfigError(f"need at least 3 samples, got {samples}")
    third = samples // 3
    return samples - 2 * third, third, third


def config_hash(task: str, cfg) -> str:
    text = json.dumps({"task": task, **dataclasses.asdict(cfg)}, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def generate_dataset(task: str, cfg, out_dir: str, *, seed: int, splits: Sequence[int],
                     threads: int = 1) -> dict:
    """Write the split files and manifest; returns the manifest."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")
    splits = resolve_splits(task, None, splits)
    count = sum(splits)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        records = list(pool.map(lambda i: draw_sample(task, cfg, seed, i), range(count)))

    bounds = np.cumsum((0,) + splits)
    manifest = {
        "task": task,
        "seed": seed,
        "config": dataclasses.asdict(cfg),
        "config_hash": config_hash(task, cfg),
        "count": count,
        "splits": {name: [int(lo), int(hi)] for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:])},
        "files": {name: f"{name}.jsonl" for name in SPLITS},
    }
    try:
        os.makedirs(out_dir, exist_ok=True)
        for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
            path = os.path.join(out_dir, manifest["files"][name])
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for rec in records[lo:hi]:
                    fh.write(rec.to_json() + "\n")
            logger.info("wrote %d %s records to %s", hi - lo, name, path)
        with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DatasetIOError(f"{out_dir}: {exc}") from exc
    return manifest


def read_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, MANIFEST)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"{path}: not a manifest ({exc})") from exc
    if manifest.get("task") not in TASKS:
        raise DatasetIOError(f"{path}: unknown task {manifest.get('task')!r}")
    return manifest


def task_dim(manifest: dict) -> int:
    return int(manifest["config"].get("dim", 3))


def load_split(data_dir: str, split: str, manifest: dict | None = None) -> list[SampleRecord]:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}, expected one of {SPLITS}")
    manifest = manifest or read_manifest(data_dir)
    path = os.path.join(data_dir, manifest["files"][split])
    dim = task_dim(manifest)
    records = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(SampleRecord.from_dict(json.loads(line), dim))
                except (KeyError, ValueError) as exc:
                    raise DatasetIOError(f"{path}:{lineno}: malformed record ({exc})") from exc
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# graphs


def record_to_graph(record: SampleRecord, task: str) -> GeometricGraph:
    """Fully connected graph; n-body nodes carry velocity and charge, edges the charge product."""
    if task == "nbody":
        charges = record.charges
        m = charges.shape[0]
        pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
        return GeometricGraph(
            positions=record.positions,
            vector_features=record.velocities[:, None, :],
            scalar_features=charges[:, None],
            edges=tuple(pairs),
            edge_attrs=np.array([[charges[i] * charges[j]] for i, j in pairs]).reshape(len(pairs), 1),
        )
    if task == "hull3d":
        return GeometricGraph.complete(record.positions)
    raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")


def record_target(record: SampleRecord) -> np.ndarray:
    return np.asarray(record.target, dtype=np.float64)


def task_model_fields(task: str, dim: int = 3) -> dict:
    """ModelConfig fields fixed by the task's graph layout."""
    if task == "nbody":
        return {"n": dim, "vector_features": 1, "scalar_features": 1, "edge_dim": 1, "head": "vector"}
    if task == "hull3d":
        return {"n": 3, "vector_features": 0, "scalar_features": 0, "edge_dim": 0, "head": "scalar", "pool": "sum"}
    raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")
