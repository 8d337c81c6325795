"""The full network: frozen backbones with per-block adapters, then heads."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .adapter import CrossModalityAdapter
from .autodiff import ParameterRegistry, Tensor
from .backbone import Backbone, ModalityConfig
from .errors import ContractError, InputError
from .heads import Classifier, FusionHead, ProjectionHead

ADAPTER_CHOICES = ("cross", "modality", "none")


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[ModalityConfig, ...]
    num_experts: int = 10
    top_k: int = 2
    bottleneck: int = 8
    proj_dim: int = 32
    hidden_dim: int = 64
    adapter_mode: str = "cross"
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.modalities) < 2:
            raise ContractError("cross-modality requires K >= 2")
        if self.adapter_mode not in ADAPTER_CHOICES:
            raise ContractError(f"adapter_mode must be one of {ADAPTER_CHOICES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        data = dict(data)
        data["modalities"] = tuple(ModalityConfig(**m) for m in data["modalities"])
        return cls(**data)


@dataclass
class ModelOutput:
    modality_reps: list[Tensor]
    joint: Tensor
    logits: Tensor
    encoded: list[Tensor] = field(default_factory=list)


class MMModel:
    """Frozen backbone + cross-modality adapters + projection/fusion/classifier."""

    def __init__(self, cfg: ModelConfig, num_classes: int = 0):
        self.cfg = cfg
        self.registry = ParameterRegistry()
        backbone_ss, adapter_ss, head_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        self.backbone = Backbone(self.registry, list(cfg.modalities),
                                 np.random.default_rng(backbone_ss))
        token_dims = [m.token_dim for m in cfg.modalities]
        self.adapters: list[CrossModalityAdapter] = []
        if cfg.adapter_mode != "none":
            rng = np.random.default_rng(adapter_ss)
            self.adapters = [
                CrossModalityAdapter(self.registry, f"adapter.block{b}", token_dims,
                                     cfg.num_experts, cfg.top_k, cfg.bottleneck, rng,
                                     mode=cfg.adapter_mode)
                for b in range(self.backbone.num_blocks)
            ]
        rng = np.random.default_rng(head_ss)
        self.projection = ProjectionHead(self.registry, token_dims, cfg.proj_dim, rng)
        self.fusion = FusionHead(self.registry, len(token_dims), cfg.proj_dim, cfg.hidden_dim, rng)
        self.classifier = Classifier(self.registry, cfg.proj_dim, num_classes)
        self.read_only = False

    @property
    def num_modalities(self) -> int:
        return len(self.cfg.modalities)

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    def _check_features(self, features) -> list[Tensor]:
        if len(features) != self.num_modalities:
            raise InputError(f"expected {self.num_modalities} modalities, got {len(features)}")
        out = [ad.as_tensor(x) for x in features]
        n = out[0].shape[0]
        for k, (x, m) in enumerate(zip(out, self.cfg.modalities)):
            if x.shape != (n, m.seq_len, m.raw_dim):
                raise InputError(f"modality {k}: expected ({n}, {m.seq_len}, {m.raw_dim}), got {x.shape}")
        return out

    def backbone_outputs(self, features) -> list[Tensor]:
        """Frozen path only: tokenize and run every block without adaptation."""
        xs = self._check_features(features)
        a = [self.backbone.tokenize(k, x) for k, x in enumerate(xs)]
        for b in range(self.backbone.num_blocks):
            a = [self.backbone.run_block(k, b, ak) for k, ak in enumerate(a)]
        return a

    def encode(self, features) -> list[Tensor]:
        """MMEncoder: per-block frozen layers followed by the block's adapter."""
        xs = self._check_features(features)
        a = [self.backbone.tokenize(k, x) for k, x in enumerate(xs)]
        for b in range(self.backbone.num_blocks):
            f = [self.backbone.run_block(k, b, ak) for k, ak in enumerate(a)]
            a = self.adapters[b](a, f) if self.adapters else f
        return a

    def forward(self, features) -> ModelOutput:
        encoded = self.encode(features)
        reps = [self.projection.project(k, e.mean(axis=-2)) for k, e in enumerate(encoded)]
        joint = self.fusion.fuse(reps)
        return ModelOutput(reps, joint, self.classifier.classify(joint), encoded)

    __call__ = forward

    def predict_logits(self, features, batch_size: int = 256) -> np.ndarray:
        n = len(features[0])
        chunks = []
        with ad.no_grad():
            for start in range(0, n, batch_size):
                part = [x[start:start + batch_size] for x in features]
                chunks.append(self.forward(part).logits.data)
        return np.concatenate(chunks) if chunks else np.zeros((0, self.num_classes))

    def frozen_sets(self) -> list[list[int]]:
        return [[e for e, f in enumerate(ad_.frozen) if f] for ad_ in self.adapters]

    def trainable_names(self) -> list[str]:
        return [name for name, _ in self.registry.trainable()]

    def snapshot(self) -> MMModel:
        """Deep, read-only copy; its arrays refuse in-place writes."""
        snap = copy.deepcopy(self)
        for _, entry in snap.registry.items():
            entry.tensor.requires_grad = False
            entry.tensor.grad = None
            entry.tensor.data.flags.writeable = False
        for adapter in snap.adapters:
            adapter.activation_count.flags.writeable = False
        snap.read_only = True
        return snap

    def fingerprint(self) -> str:
        return self.registry.fingerprint()

    # ------------------------------------------------------------- persistence

    def state_dict(self) -> dict:
        return {
            "model_config": self.cfg.to_dict(),
            "num_classes": self.num_classes,
            "adapters": [
                {"frozen": list(a.frozen), "activation_count": [int(c) for c in a.activation_count]}
                for a in self.adapters
            ],
            "params": {
                name: {
                    "shape": list(entry.tensor.shape),
                    "trainable": entry.trainable,
                    "data": entry.tensor.data.ravel().tolist(),
                }
                for name, entry in self.registry.items()
            },
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> MMModel:
        model = cls(ModelConfig.from_dict(state["model_config"]), num_classes=state["num_classes"])
        for name, p in state["params"].items():
            if name not in model.registry:
                raise ContractError(f"checkpoint parameter {name!r} unknown to this model")
            data = np.array(p["data"], dtype=np.float64).reshape(p["shape"])
            if data.shape != model.registry[name].shape:
                raise ContractError(f"checkpoint shape mismatch for {name!r}")
            model.registry[name].data[...] = data
            model.registry.set_trainable(name, bool(p["trainable"]))
        for adapter, a_state in zip(model.adapters, state["adapters"]):
            adapter.frozen = [bool(f) for f in a_state["frozen"]]
            adapter.activation_count[:] = a_state["activation_count"]
        model._rebind()
        return model

    def _rebind(self) -> None:
        # handles in submodules must point at the registry's tensors
        reg = self.registry
        self.classifier.weight = reg["heads.classifier.weight"]
        self.classifier.bias = reg["heads.classifier.bias"]


def freeze_pass(model: MMModel, features, threshold_frac: float,
                batch_size: int = 64) -> list[list[int]]:
    """Count top-k activations over one inference pass and freeze busy experts.

    Counters are reset first; an expert used by more than
    ``threshold_frac * n`` samples is frozen for good. Returns the experts
    newly frozen in each adapter.
    """
    if not 0 < threshold_frac <= 1:
        raise ContractError("threshold_frac must lie in (0, 1]")
    n = len(features[0]) if len(features) else 0
    if n == 0:
        raise ContractError("freeze pass over an empty dataset")
    for adapter in model.adapters:
        adapter.reset_counts()
        adapter.accounting = True
    try:
        with ad.no_grad():
            for start in range(0, n, batch_size):
                model.forward([x[start:start + batch_size] for x in features])
    finally:
        for adapter in model.adapters:
            adapter.accounting = False
    return [adapter.apply_freeze(n, threshold_frac) for adapter in model.adapters]
