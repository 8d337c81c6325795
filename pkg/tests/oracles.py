"""Independent reference implementations used as test oracles.

Nothing here touches the autodiff graph: plain loops over Python floats
or numpy arrays only.
"""

from __future__ import annotations

import math

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f(x)`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f(x)
        flat[i] = orig - h
        minus = f(x)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def cos(u, v) -> float:
    dot = sum(a * b for a, b in zip(u, v))
    return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))


def align_loss_loops(reps, joint, labels, memory, tau) -> float:
    """Alignment loss straight from its set definition, one anchor at a time."""
    n = len(labels)
    total, count = 0.0, 0
    for zk in reps:
        for i in range(n):
            if memory[i]:
                continue
            count += 1
            U = [(zk[j], labels[j]) for j in range(n) if j != i] + [(joint[j], labels[j]) for j in range(n)]
            denom = sum(math.exp(cos(zk[i], u) / tau) for u, _ in U)
            V = [u for u, c in U if c == labels[i]]
            if not V:
                continue
            total += -sum(math.log(math.exp(cos(zk[i], v) / tau) / denom) for v in V) / len(V)
    return total / count


def preserve_loss_loops(joint, prev_joint, memory, tau, task) -> float:
    if task < 2:
        return 0.0
    mem = [i for i in range(len(memory)) if memory[i]]
    if len(mem) < 2:
        return 0.0

    def rows(z):
        s = {}
        for a, i in enumerate(mem):
            denom = sum(math.exp(cos(z[a], z[b]) / tau) for b in range(len(mem)) if b != a)
            for b in range(len(mem)):
                if b != a:
                    s[a, b] = math.exp(cos(z[a], z[b]) / tau) / denom
        return s

    cur = rows([joint[i] for i in mem])
    prev = rows(prev_joint)
    kl = sum(prev[key] * math.log(prev[key] / cur[key]) for key in prev)
    return math.sqrt(task - 1) / len(mem) * kl


def distill_loss_loops(logits, prev_logits, memory, task) -> float:
    if task < 2:
        return 0.0
    mem = [i for i in range(len(memory)) if memory[i]]
    if not mem:
        return 0.0
    total = 0.0
    for a, i in enumerate(mem):
        for c in range(len(prev_logits[a])):
            total += (logits[i][c] - prev_logits[a][c]) ** 2
    return math.sqrt(task - 1) / len(mem) * total


def weighted_f1_confusion(preds, labels) -> float:
    """Weighted F1 from an explicit confusion matrix."""
    classes = sorted(set(labels) | set(preds))
    idx = {c: i for i, c in enumerate(classes)}
    cm = [[0] * len(classes) for _ in classes]
    for p, y in zip(preds, labels):
        cm[idx[y]][idx[p]] += 1
    n = len(labels)
    score = 0.0
    for c in classes:
        i = idx[c]
        tp = cm[i][i]
        support = sum(cm[i])
        predicted = sum(cm[r][i] for r in range(len(classes)))
        if support == 0:
            continue
        precision = tp / predicted if predicted else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        score += f1 * support / n
    return score
