"""Exponential moving average of a parameter vector.

``shadow <- decay * shadow + (1 - decay) * params``. The shadow starts as a
copy of the first snapshot; there is no bias correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EmaState:
    decay: float
    shadow: np.ndarray
    count: int = 0


def ema_init(params, decay: float) -> EmaState:
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    shadow = np.array(params, dtype=np.float64, copy=True)
    shadow.setflags(write=False)
    return EmaState(decay=float(decay), shadow=shadow, count=0)


def ema_update(state: EmaState, params) -> EmaState:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != state.shadow.shape:
        raise ValueError(f"parameter shape {params.shape} != shadow shape {state.shadow.shape}")
    lam = state.decay
    shadow = lam * state.shadow + (1.0 - lam) * params
    shadow.setflags(write=False)
    return EmaState(decay=lam, shadow=shadow, count=state.count + 1)
