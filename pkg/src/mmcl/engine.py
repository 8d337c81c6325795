"""Task-by-task training loop: replay memory, snapshots, freezing, evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import SampleSet, TaskStream
from .errors import ContractError, NumericError
from .losses import BatchContext, total_loss
from .metrics import RunReport, ScoreMatrix, weighted_f1
from .model import MMModel, freeze_pass

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------- memory


class MemoryBuffer:
    """Class-balanced reservoir.

    Each class gets ``capacity // classes_seen`` slots, the remainder going
    one apiece to the earliest classes. Within a class, samples are kept by
    reservoir sampling, so the stored ones are a uniform draw over every
    sample of that class ever offered.
    """

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity <= 0:
            raise ContractError("memory capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self.class_order: list = []
        self._slots: dict = {}
        self._seen: dict = {}
        self._template: SampleSet | None = None

    def __len__(self) -> int:
        return sum(len(v) for v in self._slots.values())

    def quotas(self) -> dict:
        n = len(self.class_order)
        if n == 0:
            return {}
        base, extra = divmod(self.capacity, n)
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(self.class_order)}

    def class_counts(self) -> dict:
        return {c: len(self._slots[c]) for c in self.class_order}

    def update(self, data: SampleSet) -> None:
        if self._template is None:
            self._template = SampleSet.empty_like(data)
        keys = data.class_keys()
        for key in keys:
            if key not in self._slots:
                self.class_order.append(key)
                self._slots[key] = []
                self._seen[key] = 0
        quotas = self.quotas()
        for key, rows in self._slots.items():
            if len(rows) > quotas[key]:
                keep = np.sort(self.rng.choice(len(rows), size=quotas[key], replace=False))
                self._slots[key] = [rows[i] for i in keep]
        for i, key in enumerate(keys):
            rows, quota = self._slots[key], quotas[key]
            self._seen[key] += 1
            row = data.subset([i])
            if len(rows) < quota:
                rows.append(row)
            else:
                j = int(self.rng.integers(self._seen[key]))
                if j < quota:
                    rows[j] = row

    def samples(self) -> SampleSet | None:
        rows = [r for key in self.class_order for r in self._slots[key]]
        if not rows:
            return None
        return SampleSet.concat(rows)


def update_memory(memory: MemoryBuffer, data: SampleSet) -> MemoryBuffer:
    memory.update(data)
    return memory


# --------------------------------------------------------------------- batching


def make_batches(n_data: int, n_memory: int, batch_size: int, rng: np.random.Generator,
                 min_memory: int = 2) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split shuffled current-task and memory indices into joint mini-batches.

    Both pools are spread evenly over ``ceil((n_data + n_memory) / batch_size)``
    batches. When memory holds at least ``min_memory`` rows, batches short of
    that many memory rows are topped up with further memory rows.
    """
    num_batches = max(1, math.ceil((n_data + n_memory) / batch_size))
    data_chunks = np.array_split(rng.permutation(n_data), num_batches)
    if n_memory == 0:
        return [(c, np.zeros(0, dtype=np.intp)) for c in data_chunks]
    mem_chunks = np.array_split(rng.permutation(n_memory), num_batches)
    if n_memory >= min_memory:
        refill = rng.permutation(n_memory)
        pos = 0
        for b, chunk in enumerate(mem_chunks):
            extra = []
            while len(chunk) + len(extra) < min_memory:
                candidate = refill[pos % n_memory]
                pos += 1
                if candidate not in chunk and candidate not in extra:
                    extra.append(candidate)
            if extra:
                mem_chunks[b] = np.concatenate([chunk, np.asarray(extra, dtype=chunk.dtype)])
    return list(zip(data_chunks, mem_chunks))


# --------------------------------------------------------------------- training


@dataclass
class ClassIndex:
    """Maps global class ids to classifier columns in order of arrival."""

    classes: list[int] = field(default_factory=list)
    label_mode: str = "single"

    def add(self, new) -> int:
        added = 0
        for c in new:
            if c not in self.classes:
                self.classes.append(int(c))
                added += 1
        return added

    def columns(self, labels: np.ndarray) -> np.ndarray:
        if self.label_mode == "multi":
            return labels[:, self.classes]
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"label {exc.args[0]} has no classifier column") from None


def batch_context(model: MMModel, snapshot: MMModel | None, batch: SampleSet,
                  memory_flags: np.ndarray, cfg: RunConfig, task: int,
                  index: ClassIndex) -> BatchContext:
    out = model(batch.features)
    snap_joint = snap_logits = None
    mem_rows = np.flatnonzero(memory_flags)
    if snapshot is not None and mem_rows.size:
        with ad.no_grad():
            prev = snapshot([x[mem_rows] for x in batch.features])
        snap_joint, snap_logits = prev.joint.data, prev.logits.data
    return BatchContext(
        labels=index.columns(batch.labels), memory=memory_flags,
        modality_reps=out.modality_reps, joint=out.joint, logits=out.logits,
        snapshot_joint=snap_joint, snapshot_logits=snap_logits, tau=cfg.tau, task=task,
        lambdas=cfg.lambdas, label_mode=cfg.label_mode, align_variant=cfg.align_variant,
    )


def train_task(model: MMModel, snapshot: MMModel | None, data: SampleSet,
               memory: SampleSet | None, cfg: RunConfig, task: int, index: ClassIndex,
               rng: np.random.Generator) -> list[float]:
    """Mini-batch Adam over current data plus replay memory; returns mean loss per epoch."""
    if len(data) == 0:
        raise ContractError(f"task {task} has no training data")
    if (snapshot is None) != (task < 2):
        raise ContractError("a previous-model snapshot is required exactly when t >= 2")
    if memory is not None and (task < 2 or len(memory) == 0):
        memory = None
    n_mem = 0 if memory is None else len(memory)
    per_epoch = max(1, math.ceil((len(data) + n_mem) / cfg.batch_size))
    total_steps = cfg.epochs * per_epoch
    state = ad.AdamState(base_lr=cfg.lr)
    step = 0
    history = []
    for _ in range(cfg.epochs):
        losses = []
        for d_idx, m_idx in make_batches(len(data), n_mem, cfg.batch_size, rng):
            parts = [data.subset(d_idx)]
            if m_idx.size:
                parts.append(memory.subset(m_idx))
            batch = SampleSet.concat(parts)
            flags = np.concatenate([np.zeros(len(d_idx), bool), np.ones(len(m_idx), bool)])
            ctx = batch_context(model, snapshot, batch, flags, cfg, task, index)
            loss = total_loss(ctx)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at task {task}, step {step}: {ctx.components}")
            model.registry.zero_grad()
            ad.backward(loss)
            ad.adam_step(model.registry, state, ad.cosine_lr(step, total_steps, cfg.lr))
            step += 1
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history


# ------------------------------------------------------------------- evaluation


def predict(model: MMModel, features, index: ClassIndex) -> np.ndarray:
    logits = model.predict_logits(features)
    if index.label_mode == "multi":
        return (logits > 0.0).astype(np.int64)
    return np.asarray(index.classes, dtype=np.int64)[logits.argmax(axis=1)]


def _truth(labels: np.ndarray, index: ClassIndex) -> np.ndarray:
    return labels[:, index.classes] if index.label_mode == "multi" else labels


def evaluate(model: MMModel, stream: TaskStream, upto: int,
             index: ClassIndex) -> tuple[list[float], float]:
    """Weighted F1 on each of tasks 1..upto and on their union."""
    preds, truths, per_task = [], [], []
    for task in stream.tasks[:upto]:
        p = predict(model, task.test.features, index)
        y = _truth(task.test.labels, index)
        per_task.append(weighted_f1(p, y))
        preds.append(p)
        truths.append(y)
    joint = weighted_f1(np.concatenate(preds), np.concatenate(truths))
    return per_task, joint


# --------------------------------------------------------------------- sequence


def build_model(stream: TaskStream, cfg: RunConfig) -> MMModel:
    mcfg = cfg.model_config(list(stream.raw_dims), list(stream.seq_lens))
    return MMModel(mcfg, num_classes=stream.num_classes if stream.scenario == "domain" else 0)


TaskHook = Callable[[int, MMModel], None]


def run_sequence(stream: TaskStream, cfg: RunConfig, on_task_end: TaskHook | None = None,
                 label: str = "") -> RunReport:
    """Train on every task in order and score all seen tasks after each one."""
    if len(stream.tasks) == 0:
        raise ContractError("empty task stream")
    if stream.label_mode != cfg.label_mode:
        raise ContractError(f"stream is {stream.label_mode}-label, config says {cfg.label_mode}")
    model = build_model(stream, cfg)
    index = ClassIndex(label_mode=cfg.label_mode)
    if stream.scenario == "domain":
        index.add(stream.tasks[0].classes)
    batch_rng = np.random.default_rng([cfg.seed, 1])
    memory = MemoryBuffer(cfg.capacity, np.random.default_rng([cfg.seed, 2]))
    snapshot = None
    scores = ScoreMatrix()
    frozen_history = []
    for t, task in enumerate(stream.tasks, start=1):
        if stream.scenario == "class":
            added = index.add(task.classes)
            if added:
                model.classifier.expand(added)
        history = train_task(model, snapshot, task.train, memory.samples(), cfg, t, index, batch_rng)
        freeze_pass(model, task.train.features, cfg.freeze_threshold)
        memory.update(task.train)
        snapshot = model.snapshot()
        per_task, joint = evaluate(model, stream, t, index)
        scores.add_step(per_task, joint)
        frozen_history.append(model.frozen_sets())
        log.info("task %d: loss %.4f -> %.4f, joint F1 %.4f, frozen %s", t,
                 history[0] if history else float("nan"), history[-1] if history else float("nan"),
                 joint, [len(f) for f in frozen_history[-1]])
        if on_task_end is not None:
            on_task_end(t, model)
    return RunReport.build(scores, frozen_history, cfg.to_dict(), cfg.seed, label)
