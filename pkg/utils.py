import logging
import os
from typing import Optional, Sequence, Union

import numpy as np
from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL_ENV = "VRQOE_LOG_LEVEL"

RngLike = Union[int, np.random.Generator, None]


class DomainError(ValueError):
    """A numeric input lies outside the domain of the model function."""


class BvhParseError(ValueError):
    """Malformed BVH text. Carries the 1-based line number of the offending line."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class IngestionError(ValueError):
    """Motion data cannot be turned into scene poses."""


class UsageError(RuntimeError):
    """An object was used out of order (step after done, untrained policy, ...)."""


class NonFiniteGradientError(FloatingPointError):
    """Backpropagation produced NaN/inf. Carries the index of the offending layer."""

    def __init__(self, layer: int):
        super().__init__(f"non-finite gradient in layer {layer}")
        self.layer = layer


class ConfigError(ValueError):
    """Configuration failed validation. Carries the dotted key path."""

    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path
        self.message = message


def setup_logging(level: Optional[str] = None):
    """
    Configure root logging once, in the bracketed-tag style used across the repo.

    Args:
        level: Explicit level name; falls back to $VRQOE_LOG_LEVEL, then INFO.
    """
    level_name = (level or os.getenv(LOG_LEVEL_ENV, "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="[%(levelname)s] %(name)s: %(message)s",
        force=True,
    )


# dB helpers. All internal math runs in linear units.
def db_to_linear(value_db):
    return np.power(10.0, np.asarray(value_db, dtype=float) / 10.0)


def dbm_to_watt(value_dbm):
    """
    Convert dBm to watts.

    20 dBm is 0.1 W; -110 dBm is 1e-14 W.
    """
    return db_to_linear(np.asarray(value_dbm, dtype=float) - 30.0)


def make_rng(seed: RngLike) -> np.random.Generator:
    """Return a Generator; an existing Generator is passed through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rngs(seed: Union[int, Sequence[int]], count: int) -> list:
    """Independent child streams of one master seed, stable across runs."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]
