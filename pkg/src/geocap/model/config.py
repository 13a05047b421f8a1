"""Model hyperparameters and the ablation variant vocabulary."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..errors import ConfigError
from ..geodata import NUM_SCALAR_FEATURES

VARIANTS = ("full", "no_p_ind", "no_g_ind", "no_knowledge", "geo_only")


@dataclass
class ModelConfig:
    """Architecture and training hyperparameters.

    Defaults are the reference configuration: width 300 (matching 300-d
    pretrained word vectors), 3-layer/10-head transformers with
    feedforward width 512 and dropout 0.5, Adam at 4e-4 with gradient
    values clipped at 5.0 and early stopping after 20 stale epochs; context
    limits n=300 entities within r=1 km and m=50 facts.
    """

    d: int = 300
    enc_layers: int = 3
    dec_layers: int = 3
    heads: int = 10
    ff_dim: int = 512
    dropout: float = 0.5
    lr: float = 4e-4
    grad_clip: float = 5.0
    early_stop_patience: int = 20
    max_epochs: int = 1000
    n: int = 300
    r: float = 1.0
    m: int = 50
    max_caption_len: int = 100
    image_positions: int = 196
    image_channels: int = 2048
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d % self.heads != 0:
            raise ConfigError(f"width d={self.d} must be divisible by heads={self.heads}")
        if self.d <= NUM_SCALAR_FEATURES:
            raise ConfigError(
                f"width d={self.d} must exceed the {NUM_SCALAR_FEATURES} scalar geo features"
            )
        positive = (
            "d", "enc_layers", "dec_layers", "heads", "ff_dim", "lr", "max_epochs",
            "n", "r", "m", "max_caption_len", "image_positions", "image_channels",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("dropout", "grad_clip", "early_stop_patience", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def d_type(self) -> int:
        """Width of the type-embedding block inside a geo embedding."""
        return self.d - NUM_SCALAR_FEATURES

    # variant structure -----------------------------------------------------
    @property
    def has_knowledge(self) -> bool:
        """Whether the knowledge context reaches encoder and decoder."""
        return self.variant in ("full", "no_p_ind", "no_g_ind")

    @property
    def has_geo_context(self) -> bool:
        """Whether geographic entities are supplied to the model."""
        return self.variant != "no_knowledge"

    @property
    def gates_vocab(self) -> bool:
        """Whether vocabulary scores are modulated by the predicate indicator."""
        return self.variant in ("full", "no_g_ind")

    @property
    def gates_facts(self) -> bool:
        """Whether fact scores are masked by the geo-entity indicator."""
        return self.variant in ("full", "no_p_ind")

    @classmethod
    def tiny(cls, seed: int = 0, variant: str = "full") -> "ModelConfig":
        """Desk-scale configuration for tests, demos and synthetic corpora."""
        return cls(
            d=64,
            enc_layers=1,
            dec_layers=1,
            heads=2,
            ff_dim=128,
            dropout=0.0,
            lr=2e-3,
            max_epochs=500,
            image_positions=4,
            image_channels=16,
            variant=variant,
            seed=seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        typed = {}
        for f in fields(cls):
            if f.name in data:
                value = data[f.name]
                typed[f.name] = value if isinstance(value, str) else type(f.default)(value)
        return cls(**typed)
