"""Training-time augmentation: red-channel replication and horizontal flips.

All functions take an explicit uniform ``draw`` so that randomness is owned
by the caller (one seeded ``numpy.random.Generator`` per training run).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    red_replicate_prob: float = 0.5
    hflip_prob: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("red_replicate_prob", "hflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


def red_channel_augment(image: np.ndarray, draw: float, config: AugmentConfig) -> np.ndarray:
    """Replace (R, G, B) by (R, R, R) when ``draw < red_replicate_prob``.

    ``image`` is channel-first, shape (3, H, W) or (B, 3, H, W) with a shared draw.
    """
    if draw < config.red_replicate_prob:
        red = image[..., 0:1, :, :]
        return np.repeat(red, 3, axis=-3)
    return image


def horizontal_flip(image: np.ndarray, draw: float, config: AugmentConfig) -> np.ndarray:
    if draw < config.hflip_prob:
        return image[..., ::-1].copy()
    return image


def augment_batch(batch: np.ndarray, rng: np.random.Generator, config: AugmentConfig,
                  red: bool = True) -> np.ndarray:
    """Per-sample augmentation of an (B, 3, H, W) batch.

    Two draws are consumed per sample (red, flip) regardless of which
    transforms are active, so the stream stays aligned across configs.
    """
    draws = rng.random((len(batch), 2))
    out = batch.copy()
    if red:
        mask = draws[:, 0] < config.red_replicate_prob
        out[mask] = out[mask, 0:1]
    flip = draws[:, 1] < config.hflip_prob
    out[flip] = out[flip, :, :, ::-1]
    return out
