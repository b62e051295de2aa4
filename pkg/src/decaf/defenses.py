"""Perturbations a user may apply to its update before the server sees it."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import Model, with_dropout

KINDS = ("none", "dropout", "dp")


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    rate: float = 0.0
    noise_multiplier: float = 0.0
    clip_norm: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.noise_multiplier < 0:
            raise ValueError("noise multiplier must be nonnegative")
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def label(self) -> str:
        if self.kind == "dropout":
            return f"dropout({self.rate:g})"
        if self.kind == "dp":
            return f"dp(sigma={self.noise_multiplier:g},C={self.clip_norm:g})"
        return "none"


def clip(update: np.ndarray, clip_norm: float) -> np.ndarray:
    norm = np.linalg.norm(update)
    if norm <= clip_norm:
        return update.copy()
    return update * (clip_norm / norm)


def apply_dp(
    update: np.ndarray,
    noise_multiplier: float,
    clip_norm: float,
    seed: int | np.random.Generator = 0,
) -> np.ndarray:
    """Clip the whole update to L2 norm ``clip_norm`` and add N(0, (sigma*C)^2) per entry."""
    if noise_multiplier < 0 or clip_norm <= 0:
        raise ValueError("need noise_multiplier >= 0 and clip_norm > 0")
    clipped = clip(np.asarray(update, dtype=float), clip_norm)
    if noise_multiplier == 0:
        return clipped
    rng = np.random.default_rng(seed)
    return clipped + rng.normal(0.0, noise_multiplier * clip_norm, size=clipped.shape)


def dropout_model(model: Model, rate: float) -> Model:
    """Model that masks hidden activations with inverted scaling while training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    return with_dropout(model, rate)
