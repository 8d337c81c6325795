"""Training objectives: classification, logit distillation, representation
alignment, relation preservation, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

LABEL_MODES = ("single", "multi")
ALIGN_VARIANTS = ("align", "supcon")

# additive logit for excluded (self) entries; finite so 0 * mask stays 0
_EXCLUDED = -1e30


@dataclass
class BatchContext:
    """Everything the losses need for one mini-batch.

    ``labels`` are classifier column indices (N,) for single-label mode or a
    multi-hot matrix (N, C) for multi-label mode. ``memory`` flags the rows
    drawn from the replay buffer; the rest are current-task rows.
    ``snapshot_joint`` / ``snapshot_logits`` hold the previous model's outputs
    for the memory rows, in batch order.
    """

    labels: np.ndarray
    memory: np.ndarray
    modality_reps: list[Tensor]
    joint: Tensor
    logits: Tensor
    snapshot_joint: np.ndarray | None = None
    snapshot_logits: np.ndarray | None = None
    tau: float = 0.1
    task: int = 1
    lambdas: tuple[float, float, float] = (1.0, 1.0, 10.0)
    label_mode: str = "single"
    align_variant: str = "align"
    components: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels)
        self.memory = np.asarray(self.memory, dtype=bool)
        n = self.joint.shape[0]
        if self.memory.shape != (n,) or self.labels.shape[0] != n:
            raise ContractError("labels, memory flags and representations disagree on N")
        if self.tau <= 0:
            raise ContractError("temperature must be positive")
        if self.label_mode not in LABEL_MODES:
            raise ContractError(f"unknown label mode {self.label_mode!r}")
        if self.align_variant not in ALIGN_VARIANTS:
            raise ContractError(f"unknown alignment variant {self.align_variant!r}")
        if self.task < 1:
            raise ContractError("task index starts at 1")

    @property
    def current_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.memory)

    @property
    def memory_idx(self) -> np.ndarray:
        return np.flatnonzero(self.memory)

    def class_keys(self) -> np.ndarray:
        """Integer key per row; rows share a key iff they share a class (label set)."""
        if self.labels.ndim == 1:
            return self.labels.astype(np.int64)
        _, keys = np.unique(self.labels.astype(np.int8), axis=0, return_inverse=True)
        return keys.reshape(-1)


def _zero() -> Tensor:
    return Tensor(0.0)


def _contrastive_terms(anchors: Tensor, candidates: Tensor, allowed: np.ndarray,
                       positive: np.ndarray, tau: float) -> Tensor:
    """Per-anchor -mean_{v in V} log softmax_{u in U}(sim/tau); anchors with empty V give 0."""
    logits = (anchors @ candidates.T) * (1.0 / tau) + np.where(allowed, 0.0, _EXCLUDED)
    logp = ad.log_softmax(logits, axis=-1)
    n_pos = positive.sum(axis=1)
    weight = np.divide(positive, n_pos[:, None], out=np.zeros(positive.shape), where=n_pos[:, None] > 0)
    return -(logp * weight).sum()


def align_loss(ctx: BatchContext) -> Tensor:
    """Align each modality representation of current-task anchors with
    same-class modality and joint representations in the batch."""
    anchors = ctx.current_idx
    if anchors.size == 0:
        raise ContractError("alignment needs at least one current-task anchor")
    n = ctx.joint.shape[0]
    if n < 2:
        raise ContractError("alignment needs N >= 2")
    keys = ctx.class_keys()
    same = keys[:, None] == keys[None, :]
    eye = np.eye(n, dtype=bool)
    num_mod = len(ctx.modality_reps)
    normed = [ad.l2_normalize(z, axis=-1) for z in ctx.modality_reps]

    if ctx.align_variant == "supcon":
        # every modality of every sample is a candidate; self excluded
        pool = ad.concat(normed, axis=0)
        tiled_same = np.tile(same, (num_mod, num_mod))
        self_mask = np.eye(n * num_mod, dtype=bool)
        total = _zero()
        for k in range(num_mod):
            rows = anchors + k * n
            allowed = ~self_mask[rows]
            total = total + _contrastive_terms(
                pool[rows], pool, allowed, tiled_same[rows] & allowed, ctx.tau)
        return total * (1.0 / (num_mod * anchors.size))

    joint = ad.l2_normalize(ctx.joint, axis=-1)
    allowed = np.concatenate([~eye, np.ones((n, n), dtype=bool)], axis=1)[anchors]
    positive = np.concatenate([same & ~eye, same], axis=1)[anchors]
    total = _zero()
    for zk in normed:
        candidates = ad.concat([zk, joint], axis=0)
        total = total + _contrastive_terms(zk[anchors], candidates, allowed, positive, ctx.tau)
    return total * (1.0 / (num_mod * anchors.size))


def preserve_loss(ctx: BatchContext) -> Tensor:
    """sqrt(t-1)/|M| * sum_i KL(previous similarity row || current row) over memory rows."""
    mem = ctx.memory_idx
    if ctx.task < 2 or mem.size < 2:
        return _zero()
    if ctx.snapshot_joint is None or len(ctx.snapshot_joint) != mem.size:
        raise ContractError("previous-model joint representations missing for memory rows")
    m = mem.size
    off = ~np.eye(m, dtype=bool)
    mask = np.where(off, 0.0, _EXCLUDED)

    prev = np.asarray(ctx.snapshot_joint, dtype=np.float64)
    norms = np.linalg.norm(prev, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ContractError("previous-model joint representation is a zero vector")
    prev = prev / norms
    prev_logits = prev @ prev.T / ctx.tau + mask
    prev_logits -= prev_logits.max(axis=1, keepdims=True)
    prev_logp = prev_logits - np.log(np.exp(prev_logits).sum(axis=1, keepdims=True))
    prev_s = np.where(off, np.exp(prev_logp), 0.0)
    entropy_term = float(np.sum(prev_s * np.where(off, prev_logp, 0.0)))

    cur = ad.l2_normalize(ctx.joint[mem], axis=-1)
    cur_logp = ad.log_softmax((cur @ cur.T) * (1.0 / ctx.tau) + mask, axis=-1)
    kl = entropy_term - (cur_logp * prev_s).sum()
    return kl * (math.sqrt(ctx.task - 1) / m)


def distill_loss(ctx: BatchContext) -> Tensor:
    """sqrt(t-1)/|M| * sum_i ||p_i - p~_i||^2 over the previous model's logit columns."""
    mem = ctx.memory_idx
    if ctx.task < 2 or mem.size == 0:
        return _zero()
    if ctx.snapshot_logits is None or len(ctx.snapshot_logits) != mem.size:
        raise ContractError("previous-model logits missing for memory rows")
    prev = np.asarray(ctx.snapshot_logits, dtype=np.float64)
    width = prev.shape[1]
    if width > ctx.logits.shape[1]:
        raise ContractError("previous model has more classes than the current one")
    diff = ctx.logits[mem][:, :width] - prev
    return (diff * diff).sum() * (math.sqrt(ctx.task - 1) / mem.size)


def class_loss(ctx: BatchContext, mode: str | None = None) -> Tensor:
    """Softmax cross-entropy (single-label) or mean sigmoid BCE (multi-label)."""
    mode = mode or ctx.label_mode
    logits = ctx.logits
    n, c = logits.shape
    labels = ctx.labels
    if mode == "single":
        if labels.ndim == 2:
            if labels.shape[1] != c:
                raise ContractError(f"label width {labels.shape[1]} != classifier width {c}")
            labels = labels.argmax(axis=1)
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise ContractError(f"label index outside classifier width {c}")
        picked = ad.log_softmax(logits, axis=-1)[np.arange(n), labels]
        return -picked.sum() * (1.0 / n)
    if mode == "multi":
        if labels.ndim != 2 or labels.shape[1] != c:
            raise ContractError(f"multi-hot labels must be (N, {c}), got {labels.shape}")
        y = labels.astype(np.float64)
        return (ad.softplus(logits) - logits * y).sum() * (1.0 / (n * c))
    raise ContractError(f"unknown label mode {mode!r}")


def total_loss(ctx: BatchContext) -> Tensor:
    """class + l1 * distil + l2 * align + l3 * preserve.

    A term whose weight is zero is skipped. Alignment is skipped when the
    batch holds no current-task rows. Component values are left in
    ``ctx.components``.
    """
    l_distil, l_align, l_preserve = ctx.lambdas
    loss = class_loss(ctx)
    ctx.components = {"class": loss.item()}
    if l_distil:
        term = distill_loss(ctx)
        ctx.components["distil"] = term.item()
        loss = loss + term * l_distil
    if l_align and ctx.current_idx.size and ctx.joint.shape[0] >= 2:
        term = align_loss(ctx)
        ctx.components["align"] = term.item()
        loss = loss + term * l_align
    if l_preserve:
        term = preserve_loss(ctx)
        ctx.components["preserve"] = term.item()
        loss = loss + term * l_preserve
    return loss
