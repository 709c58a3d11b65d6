"""Result tables: test MSE of a checkpoint, and mean/std over seeds per model.

CSV only, one row per configuration:

    model,mean_mse,std_mse,seeds,sec_per_iter,task
"""

from __future__ import annotations

import csv
import glob
import io
import json
import logging
import os
from typing import Any

import numpy as np

from services.errors import DatasetIOError
from services.training import evaluate, load_checkpoint, load_task, restore_model

logger = logging.getLogger(__name__)

REPORT_HEADER = ("model", "mean_mse", "std_mse", "seeds", "sec_per_iter", "task")


def evaluate_checkpoint(ckpt_path: str, data_dir: str, split: str = "test") -> dict[str, Any]:
    ckpt = load_checkpoint(ckpt_path)
    model, params = restore_model(ckpt)
    data = load_task(data_dir)
    graphs, targets = data.split(split)
    plans = [model.plan(g) for g in graphs]
    mse = evaluate(model, params, plans, targets, ckpt.config.batch_size)
    return {
        "model": ckpt.config.network.label,
        "task": data.task,
        "split": split,
        "samples": len(graphs),
        "mse": mse,
        "iteration": ckpt.iteration,
    }


def load_summaries(runs_dir: str) -> list[dict[str, Any]]:
    paths = sorted(glob.glob(os.path.join(runs_dir, "**", "*.summary.json"), recursive=True))
    if not paths:
        raise DatasetIOError(f"{runs_dir}: no *.summary.json files")
    out = []
    for path in paths:
        try:
            with open(path, encoding="utf-8") as fh:
                out.append(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetIOError(f"{path}: {exc}") from exc
    return out


def aggregate(summaries: list[dict[str, Any]]) -> list[dict[str, Any]]:
    """Mean and population std of test MSE per (model, task), seeds counted once each."""
    groups: dict[tuple[str, str], list[dict[str, Any]]] = {}
    for s in summaries:
        groups.setdefault((s["model"], s.get("task", "")), []).append(s)
    rows = []
    for (model, task), runs in sorted(groups.items()):
        mse = np.array([float(r["test_mse"]) for r in runs])
        rows.append({
            "model": model,
            "task": task,
            "mean_mse": float(mse.mean()),
            "std_mse": float(mse.std()),
            "seeds": len({r.get("seed") for r in runs}),
            "sec_per_iter": float(np.mean([float(r.get("sec_per_iter", 0.0)) for r in runs])),
        })
    return rows


def report_csv(rows: list[dict[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({
            **row,
            "mean_mse": f"{row['mean_mse']:.6g}",
            "std_mse": f"{row['std_mse']:.6g}",
            "sec_per_iter": f"{row['sec_per_iter']:.4g}",
        })
    return buf.getvalue()


def write_report(runs_dir: str, out_path: str | None = None) -> str:
    text = report_csv(aggregate(load_summaries(runs_dir)))
    if out_path:
        try:
            with open(out_path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise DatasetIOError(f"{out_path}: {exc}") from exc
        logger.info("wrote report to %s", out_path)
    return text
