"""Weighted F1, the Acc/Fgt aggregates, and run-report serialization."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Sequence

import numpy as np

from .data import atomic_write_text
from .errors import ContractError


def weighted_f1(preds, labels, classes: Sequence[int] | None = None) -> float:
    """Per-class F1 averaged with weights proportional to true-class support.

    1-D inputs are class ids; 2-D inputs are multi-hot indicator matrices
    scored column by column. Classes with zero support get zero weight.
    """
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"predictions {preds.shape} and labels {labels.shape} differ")
    if labels.shape[0] == 0:
        raise ContractError("weighted F1 of an empty set")
    if labels.ndim == 1:
        if classes is None:
            classes = np.union1d(labels, preds)
        t = labels[:, None] == np.asarray(classes)[None, :]
        p = preds[:, None] == np.asarray(classes)[None, :]
    elif labels.ndim == 2:
        cols = np.arange(labels.shape[1]) if classes is None else np.asarray(classes)
        t, p = labels[:, cols].astype(bool), preds[:, cols].astype(bool)
    else:
        raise ContractError("labels must be 1-D class ids or a 2-D indicator matrix")
    tp = (t & p).sum(axis=0)
    support = t.sum(axis=0)
    denom = support + p.sum(axis=0)
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(len(tp)), where=denom > 0)
    total = support.sum()
    if total == 0:
        return 0.0
    return float(np.dot(f1, support) / total)


@dataclass
class ScoreMatrix:
    """``per_task[t-1][i-1]`` = score on task i after step t; ``joint[t-1]`` = score on tasks 1..t."""

    per_task: list[list[float]] = field(default_factory=list)
    joint: list[float] = field(default_factory=list)

    @property
    def num_steps(self) -> int:
        return len(self.per_task)

    def add_step(self, task_scores: Sequence[float], joint_score: float) -> None:
        t = self.num_steps + 1
        if len(task_scores) != t:
            raise ContractError(f"step {t} needs {t} task scores, got {len(task_scores)}")
        values = [float(s) for s in task_scores] + [float(joint_score)]
        if not all(0.0 <= v <= 1.0 for v in values):
            raise ContractError("scores must lie in [0, 1]")
        self.per_task.append(values[:-1])
        self.joint.append(values[-1])

    def score(self, i: int, t: int) -> float:
        """F_i^t with 1-based indices."""
        if not 1 <= i <= t <= self.num_steps:
            raise ContractError(f"no score for task {i} at step {t}")
        row = self.per_task[t - 1]
        if len(row) < i:
            raise ContractError(f"no score for task {i} at step {t}")
        return row[i - 1]


def _dec(x: float) -> Decimal:
    # scores are treated as the decimals they print as
    return Decimal(repr(float(x)))


def acc_metric(matrix: ScoreMatrix) -> float:
    """Mean over steps of the score on all tasks seen so far."""
    if matrix.num_steps == 0 or len(matrix.joint) != matrix.num_steps:
        raise ContractError("Acc needs a joint score for every step")
    return float(sum(_dec(v) for v in matrix.joint) / matrix.num_steps)


def fgt_metric(matrix: ScoreMatrix) -> float:
    """Mean over steps of the average drop from each old task's best earlier score.

    The step-1 term is zero and still counts in the average. Drops can be
    negative when later models improve; they are not clamped. The best
    earlier score of task i is taken over steps i..t-1, where it exists.
    """
    T = matrix.num_steps
    if T == 0:
        raise ContractError("Fgt of an empty matrix")
    total = Decimal(0)
    for t in range(2, T + 1):
        inner = Decimal(0)
        for i in range(1, t):
            current = _dec(matrix.score(i, t))
            inner += max(_dec(matrix.score(i, k)) - current for k in range(i, t))
        total += inner / (t - 1)
    return float(total / T)


@dataclass
class RunReport:
    scores: ScoreMatrix
    acc: float
    fgt: float
    frozen_experts: list[list[list[int]]]
    config: dict
    seed: int
    label: str = ""

    @classmethod
    def build(cls, scores: ScoreMatrix, frozen_experts, config: dict, seed: int,
              label: str = "") -> RunReport:
        return cls(scores, acc_metric(scores), fgt_metric(scores), frozen_experts, config, seed, label)

    @property
    def final_joint(self) -> float:
        return self.scores.joint[-1]

    def to_dict(self) -> dict:
        return {
            "format": "mmcl-report",
            "version": 1,
            "label": self.label,
            "seed": self.seed,
            "acc": self.acc,
            "fgt": self.fgt,
            "scores": {"per_task": self.scores.per_task, "joint": self.scores.joint},
            "frozen_experts": self.frozen_experts,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunReport:
        scores = ScoreMatrix([list(r) for r in data["scores"]["per_task"]], list(data["scores"]["joint"]))
        return cls(scores, data["acc"], data["fgt"], data["frozen_experts"], data["config"],
                   data["seed"], data.get("label", ""))


def report_to_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def report_to_csv(report: RunReport) -> str:
    """One row per (task, step) score, one per joint score, then summary rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "task", "step", "value"])
    for t, row in enumerate(report.scores.per_task, start=1):
        for i, v in enumerate(row, start=1):
            w.writerow(["score", i, t, repr(v)])
    for t, v in enumerate(report.scores.joint, start=1):
        w.writerow(["joint", "", t, repr(v)])
    w.writerow(["acc", "", "", repr(report.acc)])
    w.writerow(["fgt", "", "", repr(report.fgt)])
    return buf.getvalue()


def scores_from_csv(text: str) -> tuple[ScoreMatrix, dict[str, float]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    steps = max(int(r["step"]) for r in rows if r["kind"] in ("score", "joint"))
    per_task = [[0.0] * t for t in range(1, steps + 1)]
    joint = [0.0] * steps
    summary = {}
    for r in rows:
        if r["kind"] == "score":
            per_task[int(r["step"]) - 1][int(r["task"]) - 1] = float(r["value"])
        elif r["kind"] == "joint":
            joint[int(r["step"]) - 1] = float(r["value"])
        else:
            summary[r["kind"]] = float(r["value"])
    return ScoreMatrix(per_task, joint), summary


def emit_report(report: RunReport, path: str | os.PathLike, fmt: str = "structured") -> None:
    """Write ``report`` as JSON ("structured") or CSV ("tabular"), atomically."""
    if fmt == "structured":
        atomic_write_text(path, report_to_json(report))
    elif fmt == "tabular":
        atomic_write_text(path, report_to_csv(report))
    else:
        raise ContractError(f"unknown report format {fmt!r}")


def load_report(path: str | os.PathLike) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))
