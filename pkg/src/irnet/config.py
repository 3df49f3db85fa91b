"""Training configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .exceptions import ContractError
from .graph import AGGREGATION_MODES, EDGE_MODES
from .losses import TARGET_MODES, VOTE_MODES

# learning rate used with a pre-trained encoder; the desk-scale default is larger
FIDELITY_LR = 5e-5

INIT_SCHEMES = ("fan-uniform", "near-identity")


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 1.0
    n_layers: int = 2
    hidden_size: int = 64
    attention_size: int = 64
    attention_rows: int = 1
    embedding_std: float = 0.3
    freeze_embeddings: bool = False
    rotate_embeddings: bool = True
    init_scheme: str = "near-identity"
    lr: float = 1e-3
    warmup_proportion: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    tasks_per_epoch: int = 100
    eval_episodes: int = 100
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 16
    seed: int = 0
    aggregation: str = "masked-softmax"
    target_mode: str = "exact"
    vote_mode: str = "all-labels"
    edge_mode: str = "pairwise-logits"
    use_class_descriptions: bool = True
    force_top1: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be nonnegative")
        if self.lr <= 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ContractError("learning rate and eps must be positive, weight decay nonnegative")
        if not 0.0 <= self.warmup_proportion < 1.0:
            raise ContractError(f"warmup proportion {self.warmup_proportion} outside [0, 1)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("Adam betas must lie in [0, 1)")
        if self.embedding_std <= 0:
            raise ContractError("embedding_std must be positive")
        if self.init_scheme not in INIT_SCHEMES:
            raise ContractError(f"init_scheme={self.init_scheme!r} not in {INIT_SCHEMES}")
        if min(self.n_layers, self.hidden_size, self.attention_size, self.attention_rows) < 1:
            raise ContractError("layer count and sizes must be positive")
        if self.epochs < 1 or self.tasks_per_epoch < 1 or self.eval_episodes < 1:
            raise ContractError("epochs, tasks per epoch and evaluation episodes must be positive")
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1:
            raise ContractError("need N >= 2, K >= 1, T >= 1")
        for name, allowed in (("aggregation", AGGREGATION_MODES), ("target_mode", TARGET_MODES),
                              ("vote_mode", VOTE_MODES), ("edge_mode", EDGE_MODES)):
            if getattr(self, name) not in allowed:
                raise ContractError(f"{name}={getattr(self, name)!r} not in {allowed}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.tasks_per_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **changes})
