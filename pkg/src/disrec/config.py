from __future__ import annotations

from dataclasses import asdict, dataclass, fields

VARIANTS = ("full", "no-social", "no-pref", "no-ssl")


@dataclass
class TrainConfig:
    """Model and optimisation hyperparameters (paper defaults where it gives them)."""

    embedding_size: int = 64
    layers: int = 3
    ssl_weight: float = 0.5
    lr: float = 1e-3
    batch_size: int = 512
    negatives: int = 10
    epochs: int = 100
    dropout: float = 0.2
    seed: int = 0
    variant: str = "full"
    gate: str = "vector"  # or "scalar"
    ssl_sigmoid: str = "double"  # or "single"
    cooccurrence_nodes: str = "full"  # or "members"
    eval_every: int = 0  # 0 disables per-epoch validation HR@5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.ssl_weight < 0:
            raise ValueError("ssl_weight must be non-negative")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.embedding_size < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("embedding_size and batch_size must be positive, epochs non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.gate not in ("vector", "scalar"):
            raise ValueError("gate must be 'vector' or 'scalar'")
        if self.ssl_sigmoid not in ("double", "single"):
            raise ValueError("ssl_sigmoid must be 'double' or 'single'")
        if self.cooccurrence_nodes not in ("full", "members"):
            raise ValueError("cooccurrence_nodes must be 'full' or 'members'")

    @property
    def effective_ssl_weight(self) -> float:
        return 0.0 if self.variant == "no-ssl" else self.ssl_weight

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}
