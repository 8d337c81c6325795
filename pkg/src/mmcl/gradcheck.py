"""Central finite-difference check of analytic gradients, per parameter entry."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, Tensor
from .backbone import ModalityConfig
from .losses import BatchContext, total_loss
from .model import MMModel, ModelConfig


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| scaled by the largest magnitude of either gradient in the group."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / scale)


@dataclass
class GradCheckResult:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    def lines(self) -> list[str]:
        out = [f"{'PASS' if e < self.tol else 'FAIL'} {name} max_rel_err={e:.3e}"
               for name, e in self.errors.items()]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict} overall: {len(self.errors)} groups, max_rel_err={self.max_error:.3e}, tol={self.tol:g}")
        return out


def check_gradients(loss_fn: Callable[[], Tensor], registry: ParameterRegistry,
                    h: float = 1e-5, tol: float = 1e-4,
                    names: list[str] | None = None) -> GradCheckResult:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    Every trainable entry (or those in ``names``) is one group; a registry
    without trainable entries passes vacuously.
    """
    names = [n for n, _ in registry.trainable()] if names is None else names
    registry.zero_grad()
    ad.backward(loss_fn())
    result = GradCheckResult(tol=tol)
    for name in names:
        t = registry[name]
        analytic = t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat, nflat = t.data.reshape(-1), numeric.reshape(-1)
        with ad.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                plus = loss_fn().item()
                flat[i] = orig - h
                minus = loss_fn().item()
                flat[i] = orig
                nflat[i] = (plus - minus) / (2.0 * h)
        result.errors[name] = relative_error(analytic, numeric)
    return result


def tiny_model_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(
        modalities=(ModalityConfig(6, 4, 8, 2), ModalityConfig(5, 4, 8, 3)),
        num_experts=3, top_k=2, bottleneck=4, proj_dim=8, hidden_dim=16, seed=seed,
    )


def tiny_problem(seed: int = 0, cfg: ModelConfig | None = None,
                 lambdas=(1.0, 1.0, 10.0), tau: float = 0.1):
    """A t=2 class-incremental batch of 4 rows (2 of them from memory).

    Every trainable weight, including up-projections and classifier rows,
    is drawn at random so that no gradient vanishes by construction; the
    previous-model snapshot differs from the live model.
    Returns ``(model, loss_fn)``.
    """
    cfg = cfg or tiny_model_config(seed)
    rng = np.random.default_rng([seed, 99])
    model = MMModel(cfg, num_classes=2)
    for name, t in model.registry.trainable():
        t.data[...] = rng.normal(0.0, 0.5, t.shape)
    snapshot = model.snapshot()
    for _, t in model.registry.trainable():
        t.data += rng.normal(0.0, 0.1, t.shape)
    model.classifier.expand(2)
    model.classifier.weight.data[2:] = rng.normal(0.0, 0.5, (2, cfg.proj_dim))

    n = 4
    features = [rng.uniform(-1.0, 1.0, (n, m.seq_len, m.raw_dim)) for m in cfg.modalities]
    labels = np.array([2, 2, 0, 1])
    memory = np.array([False, False, True, True])
    with ad.no_grad():
        prev = snapshot.forward([x[memory] for x in features])

    def loss_fn() -> Tensor:
        out = model.forward(features)
        ctx = BatchContext(labels=labels, memory=memory, modality_reps=out.modality_reps,
                           joint=out.joint, logits=out.logits, snapshot_joint=prev.joint.data,
                           snapshot_logits=prev.logits.data, tau=tau, task=2, lambdas=lambdas)
        return total_loss(ctx)

    return model, loss_fn
