"""Frozen stand-in encoders, one per modality, and the block partition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, Tensor
from .errors import ContractError, InputError


@dataclass(frozen=True)
class ModalityConfig:
    raw_dim: int
    seq_len: int
    token_dim: int
    num_layers: int

    def __post_init__(self) -> None:
        for field_name in ("raw_dim", "seq_len", "token_dim", "num_layers"):
            if getattr(self, field_name) < 1:
                raise ContractError(f"{field_name} must be >= 1")


def partition_layers(num_layers: int, num_blocks: int) -> list[int]:
    """Spread ``num_layers`` over ``num_blocks`` as evenly as possible.

    The first ``num_layers mod num_blocks`` blocks receive one extra layer.
    """
    if num_blocks < 1 or num_layers < num_blocks:
        raise ContractError(f"need L >= B >= 1, got L={num_layers}, B={num_blocks}")
    base, extra = divmod(num_layers, num_blocks)
    return [base + 1 if b < extra else base for b in range(num_blocks)]


def block_plan(modalities: list[ModalityConfig]) -> list[list[int]]:
    """Per-modality layer counts for each of B = min_k L^k blocks."""
    num_blocks = min(m.num_layers for m in modalities)
    return [partition_layers(m.num_layers, num_blocks) for m in modalities]


class Tokenizer:
    """Frozen per-position affine map from raw features to token embeddings."""

    def __init__(self, registry: ParameterRegistry, prefix: str, cfg: ModalityConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        w = rng.normal(0.0, 1.0 / np.sqrt(cfg.raw_dim), (cfg.raw_dim, cfg.token_dim))
        self.weight = registry.add(f"{prefix}.weight", w, trainable=False)
        self.bias = registry.add(f"{prefix}.bias", np.zeros(cfg.token_dim), trainable=False)

    def __call__(self, raw) -> Tensor:
        raw = ad.as_tensor(raw)
        if raw.ndim < 2 or raw.shape[-2:] != (self.cfg.seq_len, self.cfg.raw_dim):
            raise InputError(
                f"expected raw features (..., {self.cfg.seq_len}, {self.cfg.raw_dim}), "
                f"got {raw.shape}"
            )
        return raw @ self.weight + self.bias


class FrozenEncoderLayer:
    """Single-head self-attention and a two-layer MLP, both residual."""

    def __init__(self, registry: ParameterRegistry, prefix: str, dim: int,
                 rng: np.random.Generator):
        self.dim = dim
        hidden = 2 * dim
        s = 1.0 / np.sqrt(dim)

        def add(name, shape, scale):
            data = rng.normal(0.0, scale, shape) if scale else np.zeros(shape)
            return registry.add(f"{prefix}.{name}", data, trainable=False)

        self.wq = add("wq", (dim, dim), s)
        self.wk = add("wk", (dim, dim), s)
        self.wv = add("wv", (dim, dim), s)
        self.wo = add("wo", (dim, dim), 0.5 * s)
        self.w1 = add("w1", (dim, hidden), s)
        self.b1 = add("b1", (hidden,), 0.0)
        self.w2 = add("w2", (hidden, dim), 0.5 / np.sqrt(hidden))
        self.b2 = add("b2", (dim,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = x @ self.wq, x @ self.wk, x @ self.wv
        att = ad.softmax((q @ k.T) * (1.0 / np.sqrt(self.dim)), axis=-1)
        x = x + (att @ v) @ self.wo
        return x + ad.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class Backbone:
    """All frozen encoders plus the block plan that groups their layers."""

    def __init__(self, registry: ParameterRegistry, modalities: list[ModalityConfig],
                 rng: np.random.Generator):
        if not modalities:
            raise ContractError("at least one modality is required")
        self.modalities = list(modalities)
        self.plan = block_plan(self.modalities)
        self.num_blocks = len(self.plan[0])
        self.tokenizers = []
        self.layers: list[list[FrozenEncoderLayer]] = []
        for k, cfg in enumerate(self.modalities):
            self.tokenizers.append(Tokenizer(registry, f"backbone.m{k}.tokenizer", cfg, rng))
            self.layers.append([
                FrozenEncoderLayer(registry, f"backbone.m{k}.layer{i}", cfg.token_dim, rng)
                for i in range(cfg.num_layers)
            ])
        self.param_names = [n for n in registry.names() if n.startswith("backbone.")]

    def tokenize(self, k: int, raw) -> Tensor:
        return self.tokenizers[k](raw)

    def block_layers(self, k: int, b: int) -> list[FrozenEncoderLayer]:
        if not 0 <= b < self.num_blocks:
            raise ContractError(f"block {b} outside plan of {self.num_blocks} blocks")
        start = sum(self.plan[k][:b])
        return self.layers[k][start:start + self.plan[k][b]]

    def run_block(self, k: int, b: int, a: Tensor) -> Tensor:
        """Apply the layers of modality ``k`` assigned to block ``b``."""
        cfg = self.modalities[k]
        if a.ndim < 2 or a.shape[-2:] != (cfg.seq_len, cfg.token_dim):
            raise InputError(
                f"block input for modality {k} must end in ({cfg.seq_len}, {cfg.token_dim}), "
                f"got {a.shape}"
            )
        for layer in self.block_layers(k, b):
            a = layer(a)
        return a
