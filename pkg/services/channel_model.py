"""
This module provides the sub-6 GHz link model between each user and the access point.

    PL(d) [dB]  = PL(d0) + 10 n log10(d / d0) + X_sigma,      d > d0
    beta        = 10^(-PL / 10)
    h           ~ CN(0, 1)                                    (Rayleigh, E|h|^2 = 1)
    |g|^2       = beta |h|^2
    R           = b log2(1 + P |g|^2 / sigma^2)

Shadowing X_sigma and the small-scale coefficient h are redrawn per user per slot.
Powers are configured in dBm and converted to watts once, in utils.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from config import ChannelParams
from utils import DomainError, dbm_to_watt, db_to_linear, make_rng

logger = logging.getLogger(__name__)


@dataclass
class ChannelRealization:
    beta: np.ndarray
    h: np.ndarray
    g_sq: np.ndarray


def path_loss_db(d, params: ChannelParams, shadow_sample=0.0):
    """
    Reference-distance path loss in dB.

    With the default constants and no shadowing, d = 10 m gives 49.12 + 12.4 = 61.52 dB.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d <= params.d0):
        raise DomainError(f"distance must exceed d0={params.d0} m, got {d}")
    loss = params.pl_d0 + 10.0 * params.exponent * np.log10(d / params.d0) + shadow_sample
    return float(loss) if loss.ndim == 0 else loss


def sample_channel(
    params: ChannelParams,
    rng: Union[int, np.random.Generator, None],
    slot: Optional[int] = None,
    distances: Optional[Sequence[float]] = None,
    fading: bool = True,
) -> ChannelRealization:
    """
    Draw one slot's channel for every user.

    Args:
        params: Link parameters
        rng: Generator to draw from; an integer seed is combined with `slot` so the
            same (seed, slot) always gives the same realization
        slot: Slot index used to derive the stream from an integer seed
        distances: Per-user distances (m); defaults to params.user_distances
        fading: False pins h = 1 (shadowing still applies)

    Returns:
        ChannelRealization with beta, h and g_sq per user
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng([int(rng), 0 if slot is None else int(slot)])
    else:
        rng = make_rng(rng)
    d = np.asarray(params.user_distances if distances is None else distances, dtype=float)
    shadow = rng.normal(0.0, params.shadow_sigma, size=d.shape) if params.shadow_sigma > 0 else np.zeros(d.shape)
    if fading:
        parts = rng.normal(0.0, np.sqrt(0.5), size=(2,) + d.shape)
        h = parts[0] + 1j * parts[1]
    else:
        h = np.ones(d.shape, dtype=complex)
    beta = db_to_linear(-path_loss_db(d, params, shadow))
    g_sq = beta * np.abs(h) ** 2
    return ChannelRealization(beta=beta, h=h, g_sq=g_sq)


def snr(params: ChannelParams, g_sq):
    return dbm_to_watt(params.tx_power_dbm) * np.asarray(g_sq, dtype=float) / dbm_to_watt(params.noise_power_dbm)


def transmission_rate(b, params: ChannelParams, g_sq):
    """
    Shannon rate in bit/s for bandwidth b (Hz) and linear channel power gain g_sq.

    Broadcasts over b and g_sq, so a batch of candidate bandwidth splits can be
    scored against one channel realization.
    """
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise DomainError(f"bandwidth must be non-negative, got {b}")
    return b * np.log2(1.0 + snr(params, g_sq))


class ChannelService:
    """Slot-by-slot channel draws for a fixed set of users."""

    def __init__(self, params: ChannelParams, users: int, fading: bool = True):
        """Initialize the channel service for the first `users` configured positions"""
        self.params = params
        self.distances = np.asarray(params.distances_for(users))
        self.fading = fading
        logger.debug(f"channel distances (m): {np.round(self.distances, 2).tolist()}")

    def sample(self, rng: np.random.Generator, slot: Optional[int] = None) -> ChannelRealization:
        return sample_channel(self.params, rng, slot=slot, distances=self.distances, fading=self.fading)

    def rate(self, b, g_sq):
        return transmission_rate(b, self.params, g_sq)
