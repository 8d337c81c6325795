"""Cross-modality mixture-of-experts adapter.

Each expert down-projects every modality, builds a tanh attention map from
its own tokens plus the sequence-averaged bottleneck features of the other
modalities, and multiplies that map into an up-projection. A softmax gate
over the sequence-averaged block inputs picks the top-k experts per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, Tensor
from .errors import ContractError, InputError

ADAPTER_MODES = ("cross", "modality")


@dataclass
class Expert:
    """Weight handles of one expert: ``down[k]``, ``att[k]``, ``up[k]`` per modality."""

    down: list[Tensor]
    att: list[Tensor]
    up: list[Tensor]
    names: list[str]

    @property
    def bottleneck(self) -> int:
        return self.down[0].shape[1]


def top_k_mask(weights: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row; ties go to the lowest index."""
    order = np.argsort(-weights, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(weights.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def expert_forward(expert: Expert, inputs: list[Tensor], cross_modal: bool = True) -> list[Tensor]:
    """Outputs ``g^k`` of a single expert for every modality.

    ``inputs[k]`` has shape (..., seq_len_k, token_dim_k).
    """
    if len(inputs) < 2:
        raise ContractError("cross-modality requires K >= 2")
    if len(inputs) != len(expert.down):
        raise InputError(f"expert has {len(expert.down)} modalities, got {len(inputs)} inputs")
    hidden = [ad.relu(a @ w) for a, w in zip(inputs, expert.down)]
    pooled = [h.mean(axis=-2, keepdims=True) for h in hidden]
    outputs = []
    for k, h in enumerate(hidden):
        mixed = h
        if cross_modal:
            for j, hb in enumerate(pooled):
                if j != k:
                    mixed = mixed + hb
        attention = ad.tanh(mixed @ expert.att[k])
        outputs.append((h @ expert.up[k]) * attention)
    return outputs


class CrossModalityAdapter:
    """E experts and one gate; per-expert frozen flags and activation counters."""

    def __init__(self, registry: ParameterRegistry, prefix: str, token_dims: list[int],
                 num_experts: int, top_k: int, bottleneck: int, rng: np.random.Generator,
                 mode: str = "cross"):
        if len(token_dims) < 2:
            raise ContractError("cross-modality requires K >= 2")
        if not 1 <= top_k <= num_experts:
            raise ContractError(f"need 1 <= top_k <= E, got top_k={top_k}, E={num_experts}")
        if bottleneck < 1:
            raise ContractError("bottleneck width must be >= 1")
        if mode not in ADAPTER_MODES:
            raise ContractError(f"unknown adapter mode {mode!r}")
        self.registry = registry
        self.prefix = prefix
        self.token_dims = list(token_dims)
        self.num_experts = num_experts
        self.top_k = top_k
        self.mode = mode
        self.frozen = [False] * num_experts
        self.activation_count = np.zeros(num_experts, dtype=np.int64)
        self.accounting = False

        self.gate_weight = registry.add(
            f"{prefix}.gate.weight", rng.normal(0.0, 0.02, (sum(token_dims), num_experts)))
        self.gate_bias = registry.add(f"{prefix}.gate.bias", np.zeros(num_experts))
        self.experts: list[Expert] = []
        for e in range(num_experts):
            down, att, up, names = [], [], [], []
            for k, d in enumerate(token_dims):
                base = f"{prefix}.expert{e}.m{k}"
                down.append(registry.add(f"{base}.down", rng.normal(0.0, 1.0 / np.sqrt(d), (d, bottleneck))))
                att.append(registry.add(f"{base}.att", rng.normal(0.0, 1.0 / np.sqrt(bottleneck), (bottleneck, d))))
                up.append(registry.add(f"{base}.up", np.zeros((bottleneck, d))))
                names += [f"{base}.down", f"{base}.att", f"{base}.up"]
            self.experts.append(Expert(down, att, up, names))

    @property
    def cross_modal(self) -> bool:
        return self.mode == "cross"

    def expert_param_names(self, e: int) -> list[str]:
        return list(self.experts[e].names)

    def gate_weights(self, inputs: list[Tensor]) -> tuple[Tensor, np.ndarray]:
        """Softmax expert weights (N, E) and the boolean top-k active mask."""
        if len(inputs) != len(self.token_dims):
            raise InputError(f"expected {len(self.token_dims)} modalities, got {len(inputs)}")
        for k, a in enumerate(inputs):
            if a.shape[-1] != self.token_dims[k]:
                raise InputError(f"modality {k}: token dim {a.shape[-1]} != {self.token_dims[k]}")
        pooled = ad.concat([a.mean(axis=-2) for a in inputs], axis=-1)
        weights = ad.softmax(pooled @ self.gate_weight + self.gate_bias, axis=-1)
        return weights, top_k_mask(weights.data, self.top_k)

    def _stacked(self, attr: str, k: int) -> Tensor:
        return ad.stack([getattr(ex, attr)[k] for ex in self.experts], axis=0)

    def forward(self, inputs: list[Tensor], outputs: list[Tensor]) -> list[Tensor]:
        """Adapt block outputs: ``f^k + sum_{e active} w_e g_e^k``.

        ``inputs``/``outputs`` are batched: (N, seq_len_k, token_dim_k).
        Every expert is evaluated densely and inactive weights are masked to
        zero, so inactive experts receive exactly zero gradient.
        """
        if len(outputs) != len(inputs):
            raise InputError("inputs and outputs must cover the same modalities")
        weights, mask = self.gate_weights(inputs)
        if self.accounting:
            self.activation_count += mask.sum(axis=0)
        gated = (weights * mask.astype(np.float64)).reshape(
            weights.shape[0], self.num_experts, 1, 1)

        hidden = []
        for k, a in enumerate(inputs):
            if a.ndim != 3 or a.shape != outputs[k].shape:
                raise InputError(f"modality {k}: input {a.shape} and output {outputs[k].shape} differ")
            a4 = a.reshape(a.shape[0], 1, a.shape[1], a.shape[2])
            hidden.append(ad.relu(a4 @ self._stacked("down", k)))
        pooled = [h.mean(axis=-2, keepdims=True) for h in hidden]

        adapted = []
        for k, h in enumerate(hidden):
            mixed = h
            if self.cross_modal:
                for j, hb in enumerate(pooled):
                    if j != k:
                        mixed = mixed + hb
            attention = ad.tanh(mixed @ self._stacked("att", k))
            g = (h @ self._stacked("up", k)) * attention
            adapted.append(outputs[k] + (g * gated).sum(axis=1))
        return adapted

    __call__ = forward

    def reset_counts(self) -> None:
        self.activation_count[:] = 0

    def freeze(self, e: int) -> None:
        self.frozen[e] = True
        for name in self.experts[e].names:
            self.registry.set_trainable(name, False)

    def apply_freeze(self, num_samples: int, threshold_frac: float) -> list[int]:
        """Freeze experts whose count exceeds ``threshold_frac * num_samples``.

        Returns the indices newly frozen. Already-frozen experts stay frozen.
        """
        limit = threshold_frac * num_samples
        newly = []
        for e, count in enumerate(self.activation_count):
            if count > limit and not self.frozen[e]:
                self.freeze(e)
                newly.append(e)
        return newly
