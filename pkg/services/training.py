"""Loss, Adam, the training loop and checkpoints.

Checkpoint layout (all integers little-endian):

    4 bytes   magic b"CGEG"
    u32       format version
    u32 + N   run-config text (utf-8, key = value lines)
    u64       parameter count P
    P * f64   parameters, in ``iter_params`` order of the model's parameter tree
    u64       Adam step
    P * f64   Adam first moments
    P * f64   Adam second moments
    u64       training iteration
    u32 + N   generator state (JSON of ``bit_generator.state``)
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from services.autodiff import Tape, Variable, backward, mean_all, square, sub
from services.baselines import EgnnModel, GnnModel
from services.cgegnn import CgegnnModel, ModelConfig
from services.datasets import load_split, read_manifest, record_target, record_to_graph, task_dim, task_model_fields
from services.equivariant_layers import iter_params, map_params
from services.errors import CheckpointError, ConfigError, NonFiniteError, ShapeError
from services.geograph import GeometricGraph
from services.runconfig import TrainConfig, config_text, from_config_text

logger = logging.getLogger(__name__)

MAGIC = b"CGEG"
VERSION = 1
BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
METRICS_HEADER = ("iter", "train_loss", "val_mse", "wall_ms")


def build_model(cfg: ModelConfig):
    if cfg.model == "cgegnn":
        return CgegnnModel(cfg)
    if cfg.model == "gnn":
        return GnnModel(cfg)
    if cfg.model == "egnn":
        return EgnnModel(cfg)
    raise ConfigError(f"unknown model {cfg.model!r}")


# ---------------------------------------------------------------------------
# loss + optimizer


def mse_loss(pred: Variable, target) -> Variable:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return mean_all(square(sub(pred, target)))


def flatten_params(tree) -> dict[str, np.ndarray]:
    return {name: np.asarray(leaf.data if isinstance(leaf, Variable) else leaf, dtype=np.float64)
            for name, leaf in iter_params(tree)}


def unflatten_params(template, values: dict[str, np.ndarray]):
    return map_params(template, lambda name, leaf: values[name])


def pack(values: dict[str, np.ndarray]) -> np.ndarray:
    if not values:
        return np.zeros(0)
    return np.concatenate([v.reshape(-1) for v in values.values()])


def unpack(template: dict[str, np.ndarray], blob: np.ndarray) -> dict[str, np.ndarray]:
    total = sum(v.size for v in template.values())
    if blob.shape != (total,):
        raise CheckpointError(f"expected {total} values, found {blob.shape[0]}")
    out, offset = {}, 0
    for name, ref in template.items():
        out[name] = blob[offset:offset + ref.size].reshape(ref.shape).copy()
        offset += ref.size
    return out


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              weight_decay: float = 0.0) -> tuple[dict[str, np.ndarray], AdamState]:
    """Adam with decoupled weight decay: p *= 1 - lr*wd, then the bias-corrected Adam delta."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        if state.m[name].shape != p.shape:
            raise ShapeError(f"optimizer state for {name} has shape {state.m[name].shape}, parameter {p.shape}")
        g = grads[name]
        m = BETA1 * state.m[name] + (1.0 - BETA1) * g
        v = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        m_hat = m / (1.0 - BETA1 ** step)
        v_hat = v / (1.0 - BETA2 ** step)
        new_params[name] = p * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step, new_m, new_v)


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Constant, or cosine-annealed from lr to 0 over max_iters."""
    if not cfg.cosine:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (iteration - 1) / cfg.max_iters))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass(eq=False)
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    iteration: int
    rng_state: dict

    def identical(self, other: Checkpoint) -> bool:
        return to_bytes(self) == to_bytes(other)


def _put_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_bytes(ckpt: Checkpoint) -> bytes:
    count = sum(v.size for v in ckpt.params.values())
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        _put_text(config_text(ckpt.config)),
        struct.pack("<Q", count),
        pack(ckpt.params).astype("<f8").tobytes(),
        struct.pack("<Q", ckpt.adam.step),
        pack(ckpt.adam.m).astype("<f8").tobytes(),
        pack(ckpt.adam.v).astype("<f8").tobytes(),
        struct.pack("<Q", ckpt.iteration),
        _put_text(json.dumps(ckpt.rng_state, sort_keys=True)),
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + size]
        self.pos += size
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def from_bytes(raw: bytes, path: str = "<memory>") -> Checkpoint:
    reader = _Reader(raw, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = from_config_text(reader.text())
    except ConfigError as exc:
        raise CheckpointError(f"{path}: bad config section ({exc})") from exc
    template = flatten_params(build_model(cfg.network).init(np.random.default_rng(0)))
    count = reader.u64()
    params = unpack(template, reader.floats(count))
    step = reader.u64()
    m = unpack(template, reader.floats(count))
    v = unpack(template, reader.floats(count))
    iteration = reader.u64()
    rng_state = json.loads(reader.text())
    if reader.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    return Checkpoint(cfg, params, AdamState(step, m, v), iteration, rng_state)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(to_bytes(ckpt))
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return from_bytes(raw, path)


def restore_model(ckpt: Checkpoint):
    """(model, parameter tree) of a checkpoint."""
    model = build_model(ckpt.config.network)
    template = model.init(np.random.default_rng(0))
    return model, unflatten_params(template, ckpt.params)


# ---------------------------------------------------------------------------
# data


@dataclass
class TaskData:
    task: str
    dim: int
    splits: dict[str, tuple[list[GeometricGraph], list[np.ndarray]]]

    def split(self, name: str) -> tuple[list[GeometricGraph], list[np.ndarray]]:
        if name not in self.splits:
            raise ConfigError(f"unknown split {name!r}")
        return self.splits[name]


def load_task(data_dir: str) -> TaskData:
    manifest = read_manifest(data_dir)
    task = manifest["task"]
    splits = {}
    for name in ("train", "val", "test"):
        records = load_split(data_dir, name, manifest)
        splits[name] = ([record_to_graph(r, task) for r in records], [record_target(r) for r in records])
    return TaskData(task=task, dim=task_dim(manifest), splits=splits)


def task_defaults(data: TaskData) -> dict:
    return {"task": data.task, **task_model_fields(data.task, data.dim)}


def _stack_targets(targets: Sequence[np.ndarray]) -> np.ndarray:
    if targets[0].ndim == 0:
        return np.array([float(t) for t in targets])
    return np.concatenate(targets, axis=0)


def evaluate(model, params, plans: Sequence, targets: Sequence[np.ndarray], batch_size: int) -> float:
    """MSE over every scalar entry of a split, evaluated in chunks."""
    if not plans:
        raise ConfigError("cannot evaluate an empty split")
    sq_err, count = 0.0, 0
    for lo in range(0, len(plans), batch_size):
        pred = model.forward(model.collate(plans[lo:lo + batch_size]), params).data
        target = _stack_targets(targets[lo:lo + batch_size])
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
        sq_err += float(np.sum((pred - target) ** 2))
        count += target.size
    return sq_err / count


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_iter: int
    best_val_mse: float
    test_mse: float
    sec_per_iter: float
    iterations: int
    metrics: list[tuple[int, float, float, float]] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "model": self.checkpoint.config.network.label,
            "task": self.checkpoint.config.task,
            "seed": self.checkpoint.config.seed,
            "best_iter": self.best_iter,
            "best_val_mse": self.best_val_mse,
            "test_mse": self.test_mse,
            "sec_per_iter": self.sec_per_iter,
        }


def _snapshot(cfg, params, adam, iteration, rng) -> Checkpoint:
    return Checkpoint(
        config=cfg,
        params={k: v.copy() for k, v in params.items()},
        adam=AdamState(adam.step, {k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()}),
        iteration=iteration,
        rng_state=rng.bit_generator.state,
    )


def train(cfg: TrainConfig, data: TaskData, out_path: str | None = None) -> TrainResult:
    """Mini-batch Adam; the best-on-validation snapshot is kept, saved and tested."""
    train_graphs, train_targets = data.split("train")
    val_graphs, val_targets = data.split("val")
    test_graphs, test_targets = data.split("test")
    if not train_graphs or not val_graphs:
        raise ConfigError("training needs nonempty train and val splits")

    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg.network)
    template = model.init(rng)
    params = flatten_params(template)
    adam = AdamState.zeros_like(params)
    train_plans = [model.plan(g) for g in train_graphs]
    val_plans = [model.plan(g) for g in val_graphs]

    best = _snapshot(cfg, params, adam, 0, rng)
    best_val = evaluate(model, template, val_plans, val_targets, cfg.batch_size)
    best_iter, stale = 0, 0
    metrics: list[tuple[int, float, float, float]] = []
    start = time.perf_counter()
    iteration = 0
    logger.info("training %s on %s: %d train / %d val graphs", cfg.network.label, data.task,
                len(train_plans), len(val_plans))

    for iteration in range(1, cfg.max_iters + 1):
        picked = rng.choice(len(train_plans), size=min(cfg.batch_size, len(train_plans)), replace=False)
        batch = model.collate([train_plans[i] for i in picked])
        tape = Tape()
        bound = model.bind(unflatten_params(template, params), tape)
        loss = mse_loss(model.forward(batch, bound), _stack_targets([train_targets[i] for i in picked]))
        try:
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"loss became {loss.item()} at iteration {iteration}")
            params, adam = adam_step(params, backward(loss), adam, learning_rate(cfg, iteration), cfg.weight_decay)
        except NonFiniteError:
            logger.error("non-finite values at iteration %d; keeping checkpoint from iteration %d",
                         iteration, best_iter)
            if out_path:
                save_checkpoint(out_path, best)
            raise

        if iteration % cfg.eval_every == 0 or iteration == cfg.max_iters:
            val = evaluate(model, unflatten_params(template, params), val_plans, val_targets, cfg.batch_size)
            wall_ms = 1000.0 * (time.perf_counter() - start)
            metrics.append((iteration, loss.item(), val, wall_ms))
            if val < best_val:
                best_val, best_iter, stale = val, iteration, 0
                best = _snapshot(cfg, params, adam, iteration, rng)
                logger.info("iter %d: val_mse %.6g (best)", iteration, val)
            else:
                stale += 1
                logger.debug("iter %d: val_mse %.6g", iteration, val)
            if stale >= cfg.patience:
                logger.info("early stop at iteration %d, no improvement in %d evaluations", iteration, stale)
                break

    elapsed = time.perf_counter() - start
    best_tree = unflatten_params(template, best.params)
    test_mse = float("nan")
    if test_graphs:
        test_mse = evaluate(model, best_tree, [model.plan(g) for g in test_graphs], test_targets, cfg.batch_size)
    result = TrainResult(
        checkpoint=best,
        best_iter=best_iter,
        best_val_mse=best_val,
        test_mse=test_mse,
        sec_per_iter=elapsed / max(iteration, 1),
        iterations=iteration,
        metrics=metrics,
    )
    if out_path:
        write_outputs(out_path, result)
    return result


def write_outputs(out_path: str, result: TrainResult) -> None:
    save_checkpoint(out_path, result.checkpoint)
    try:
        with open(out_path + ".metrics.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for it, loss, val, wall_ms in result.metrics:
                writer.writerow((it, repr(loss), repr(val), f"{wall_ms:.3f}"))
        with open(out_path + ".summary.json", "w", encoding="utf-8") as fh:
            json.dump(result.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise CheckpointError(f"{out_path}: {exc}") from exc
    logger.info("wrote checkpoint, metrics and summary to %s", out_path)
