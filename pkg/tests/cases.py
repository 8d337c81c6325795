"""Random inputs shared by the loss tests and the acceptance suite."""

import numpy as np

from mmcl.autodiff import Tensor
from mmcl.losses import BatchContext


def random_case(seed, n=None, k=None, p=3, c=4, task=2):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(3, 7))
    k = k or int(rng.integers(1, 4))
    memory = np.zeros(n, bool)
    memory[rng.choice(n, size=int(rng.integers(1, n - 1)), replace=False)] = True
    labels = rng.integers(0, c, n)
    reps = [rng.normal(size=(n, p)) for _ in range(k)]
    joint = rng.normal(size=(n, p))
    logits = rng.normal(size=(n, c))
    m = int(memory.sum())
    prev_joint = rng.normal(size=(m, p))
    prev_logits = rng.normal(size=(m, c - 1))
    return dict(labels=labels, memory=memory, reps=reps, joint=joint, logits=logits,
                prev_joint=prev_joint, prev_logits=prev_logits, task=task, tau=0.1 + rng.random())


def ctx_of(case, lambdas=(1.0, 1.0, 10.0), **kw):
    return BatchContext(
        labels=case["labels"], memory=case["memory"],
        modality_reps=[Tensor(r) for r in case["reps"]], joint=Tensor(case["joint"]),
        logits=Tensor(case["logits"]), snapshot_joint=case["prev_joint"],
        snapshot_logits=case["prev_logits"], tau=case["tau"], task=case["task"],
        lambdas=lambdas, **kw)
