"""Run configuration: one flat JSON object, every key optional, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ModalityConfig
from .data import SCENARIOS, SynthSpec
from .errors import ConfigError, ContractError
from .losses import ALIGN_VARIANTS, LABEL_MODES
from .model import ADAPTER_CHOICES, ModelConfig


@dataclass
class RunConfig:
    # stream
    scenario: str = "class"
    num_modalities: int = 2
    raw_dims: list[int] = field(default_factory=lambda: [12, 10])
    seq_lens: list[int] = field(default_factory=lambda: [4, 6])
    num_tasks: int = 4
    classes_per_task: int = 2
    train_per_class: int = 100
    test_per_class: int = 50
    signal: float = 1.0
    noise: float = 1.0
    cross_modal: float = 1.0
    interaction: float = 1.0
    latent_dim: int = 4
    domain_shift: float = 1.0
    label_mode: str = "single"
    # backbone
    token_dims: list[int] = field(default_factory=lambda: [16, 16])
    num_layers: list[int] = field(default_factory=lambda: [2, 3])
    # adapters
    adapter_mode: str = "cross"
    num_experts: int = 10
    top_k: int = 2
    freeze_threshold: float = 0.10
    bottleneck: int = 8
    # heads
    proj_dim: int = 32
    hidden_dim: int = 64
    # optimisation
    batch_size: int = 12
    epochs: int = 20
    lr: float = 1e-4
    capacity: int = 200
    lambda_distil: float = 1.0
    lambda_align: float = 1.0
    lambda_preserve: float = 10.0
    tau: float = 0.1
    align_variant: str = "align"
    seed: int = 0
    # paths
    dataset: str | None = None
    out_dir: str = "runs/default"

    def __post_init__(self) -> None:
        self.validate()

    # ------------------------------------------------------------- validation

    def validate(self) -> None:
        k = self.num_modalities
        if k < 2:
            raise ConfigError("cross-modality requires K ≥ 2")
        for name in ("raw_dims", "seq_lens", "token_dims", "num_layers"):
            value = getattr(self, name)
            if not isinstance(value, list) or len(value) != k:
                raise ConfigError(f"{name} needs exactly {k} entries")
            if any(not isinstance(v, int) or v < 1 for v in value):
                raise ConfigError(f"{name} entries must be positive integers")
        checks = [
            (self.scenario in SCENARIOS, f"scenario must be one of {SCENARIOS}"),
            (self.label_mode in LABEL_MODES, f"label_mode must be one of {LABEL_MODES}"),
            (self.adapter_mode in ADAPTER_CHOICES, f"adapter_mode must be one of {ADAPTER_CHOICES}"),
            (self.align_variant in ALIGN_VARIANTS, f"align_variant must be one of {ALIGN_VARIANTS}"),
            (self.num_experts >= 1, "num_experts must be >= 1"),
            (1 <= self.top_k <= self.num_experts, "need 1 <= top_k <= num_experts"),
            (0 < self.freeze_threshold <= 1, "freeze_threshold must lie in (0, 1]"),
            (self.bottleneck >= 1, "bottleneck must be >= 1"),
            (self.proj_dim >= 1 and self.hidden_dim >= 1, "head dims must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.lr > 0, "lr must be positive"),
            (self.capacity >= 1, "capacity must be >= 1"),
            (self.tau > 0, "tau must be positive"),
            (min(self.lambda_distil, self.lambda_align, self.lambda_preserve) >= 0,
             "loss weights must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        try:
            self.synth_spec()
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    # ------------------------------------------------------------ conversions

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            num_modalities=self.num_modalities, raw_dims=tuple(self.raw_dims),
            seq_lens=tuple(self.seq_lens), num_tasks=self.num_tasks,
            classes_per_task=self.classes_per_task, train_per_class=self.train_per_class,
            test_per_class=self.test_per_class, signal=self.signal, noise=self.noise,
            cross_modal=self.cross_modal, interaction=self.interaction,
            latent_dim=self.latent_dim, domain_shift=self.domain_shift, seed=self.seed,
        )

    def modalities(self, raw_dims=None, seq_lens=None) -> tuple[ModalityConfig, ...]:
        raw_dims = raw_dims or self.raw_dims
        seq_lens = seq_lens or self.seq_lens
        return tuple(ModalityConfig(r, s, d, n) for r, s, d, n in
                     zip(raw_dims, seq_lens, self.token_dims, self.num_layers))

    def model_config(self, raw_dims=None, seq_lens=None) -> ModelConfig:
        return ModelConfig(
            modalities=self.modalities(raw_dims, seq_lens), num_experts=self.num_experts,
            top_k=self.top_k, bottleneck=self.bottleneck, proj_dim=self.proj_dim,
            hidden_dim=self.hidden_dim, adapter_mode=self.adapter_mode, seed=self.seed,
        )

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda_distil, self.lambda_align, self.lambda_preserve)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(data)

    def replace(self, **changes) -> RunConfig:
        return self.from_dict({**self.to_dict(), **changes})


def parse_override(item: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
