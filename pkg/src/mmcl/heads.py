"""Projection, fusion and classifier heads."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, Tensor
from .errors import ContractError, InputError


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim == 1:
        return (x.reshape(1, -1) @ w + b).reshape(w.shape[1])
    return x @ w + b


class ProjectionHead:
    """Per-modality affine maps token_dim_k -> proj_dim."""

    def __init__(self, registry: ParameterRegistry, token_dims: list[int], proj_dim: int,
                 rng: np.random.Generator):
        self.token_dims = list(token_dims)
        self.proj_dim = proj_dim
        self.weights, self.biases = [], []
        for k, d in enumerate(token_dims):
            self.weights.append(registry.add(
                f"heads.proj.m{k}.weight", rng.normal(0.0, 1.0 / np.sqrt(d), (d, proj_dim))))
            self.biases.append(registry.add(f"heads.proj.m{k}.bias", np.zeros(proj_dim)))

    def project(self, k: int, rep) -> Tensor:
        rep = ad.as_tensor(rep)
        if rep.shape[-1] != self.token_dims[k]:
            raise InputError(f"modality {k}: expected width {self.token_dims[k]}, got {rep.shape[-1]}")
        return _affine(rep, self.weights[k], self.biases[k])


class FusionHead:
    """Two-layer perceptron over the concatenated modality representations."""

    def __init__(self, registry: ParameterRegistry, num_modalities: int, proj_dim: int,
                 hidden_dim: int, rng: np.random.Generator):
        self.num_modalities = num_modalities
        self.proj_dim = proj_dim
        fan_in = num_modalities * proj_dim
        self.w1 = registry.add("heads.fusion.w1",
                               rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, hidden_dim)))
        self.b1 = registry.add("heads.fusion.b1", np.zeros(hidden_dim))
        self.w2 = registry.add("heads.fusion.w2",
                               rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (hidden_dim, proj_dim)))
        self.b2 = registry.add("heads.fusion.b2", np.zeros(proj_dim))

    def fuse(self, reps: list) -> Tensor:
        if len(reps) != self.num_modalities:
            raise ContractError(f"fusion expects {self.num_modalities} modalities, got {len(reps)}")
        x = ad.concat([ad.as_tensor(r) for r in reps], axis=-1)
        if x.shape[-1] != self.num_modalities * self.proj_dim:
            raise InputError(f"fusion input width {x.shape[-1]} != {self.num_modalities * self.proj_dim}")
        return _affine(ad.relu(_affine(x, self.w1, self.b1)), self.w2, self.b2)


class Classifier:
    """Affine map proj_dim -> |classes seen|; weight rows are classes."""

    def __init__(self, registry: ParameterRegistry, proj_dim: int, num_classes: int = 0):
        self.registry = registry
        self.proj_dim = proj_dim
        self.weight = registry.add("heads.classifier.weight", np.zeros((num_classes, proj_dim)))
        self.bias = registry.add("heads.classifier.bias", np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def classify(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.shape[-1] != self.proj_dim:
            raise ContractError(f"classifier expects width {self.proj_dim}, got {z.shape[-1]}")
        return _affine(z, self.weight.T, self.bias)

    def expand(self, new_classes: int) -> None:
        """Append ``new_classes`` zero rows; existing rows are copied bit-exactly."""
        if new_classes < 1:
            raise ContractError("expand_classifier needs new_classes >= 1")
        w = np.vstack([self.weight.data, np.zeros((new_classes, self.proj_dim))])
        b = np.concatenate([self.bias.data, np.zeros(new_classes)])
        self.weight = self.registry.replace("heads.classifier.weight", w)
        self.bias = self.registry.replace("heads.classifier.bias", b)
