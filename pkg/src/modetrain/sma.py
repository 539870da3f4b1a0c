"""Sampled moving-average optimizer wrapper.

Every ``interval`` optimizer steps the current weights are folded into a
shadow average, ``shadow = (1 - alpha) * shadow + alpha * weights``, and the
shadow is synchronized back into the live weights as the next starting point.
Off-cycle steps are untouched, and the sample-plus-sync is bookkept as part of
the same optimizer step, so the step count per epoch does not change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .paramstore import FlatParams


@dataclass
class SmaState:
    w_sma: np.ndarray
    alpha: float
    interval: int
    step_counter: int = 0
    sync: bool = True  # False gives the passive test-time average (shadow only)

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")


def sma_init(params: FlatParams, alpha: float = 0.8, interval: int = 5,
             sync: bool = True) -> SmaState:
    """Shadow initialized to a copy of the current weights; counter at zero."""
    return SmaState(w_sma=params.values.copy(), alpha=float(alpha),
                    interval=int(interval), sync=sync)


def sma_maybe_update(state: SmaState, params: FlatParams) -> bool:
    """Call once after every optimizer step; samples and syncs on cycle.

    Returns True when this step was a sample point. Between sample points the
    live weights are not touched, so off-cycle training is plain SGD.
    """
    state.step_counter += 1
    if state.step_counter % state.interval != 0:
        return False
    state.w_sma *= 1.0 - state.alpha
    state.w_sma += state.alpha * params.values
    if state.sync:
        params.values[:] = state.w_sma
    return True
