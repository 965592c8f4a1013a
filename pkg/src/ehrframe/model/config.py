from __future__ import annotations

from dataclasses import asdict, dataclass, fields


class ModelConfigError(ValueError):
    pass


EMBEDDERS = ("linear", "gct")


@dataclass
class ModelConfig:
    """Network sizes; ``k``/``m`` come from the feature schema."""

    k: int = 0
    m: int = 0
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    dropout: float = 0.1
    p_max: int = 30
    embedder: str = "gct"
    gct_layers: int = 2
    gct_dim: int = 32
    gct_heads: int = 2
    gct_ff: int = 64
    gct_kl_weight: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def l(self) -> int:  # noqa: E743
        return self.k + self.m

    def validate(self) -> None:
        if self.l < 1:
            raise ModelConfigError("schema must contribute at least one feature (k + m >= 1)")
        if self.d_model % 2:
            raise ModelConfigError(f"d_model must be even for positional encoding, got {self.d_model}")
        if self.d_model % self.n_heads:
            raise ModelConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ModelConfigError("n_layers (K) must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.embedder not in EMBEDDERS:
            raise ModelConfigError(f"embedder must be one of {EMBEDDERS}, got {self.embedder!r}")
        if self.gct_layers < 0:
            raise ModelConfigError("gct_layers must be >= 0")
        if self.gct_dim % self.gct_heads:
            raise ModelConfigError(f"gct_dim={self.gct_dim} not divisible by gct_heads={self.gct_heads}")
        if self.p_max < 1:
            raise ModelConfigError("p_max must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ModelConfigError(f"unknown model keys {sorted(unknown)}; valid: {sorted(known)}")
        return cls(**d)
