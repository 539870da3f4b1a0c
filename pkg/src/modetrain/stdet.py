"""The embedding scheduler: freeze stable coefficients and derive their parameters.

After the head stage, every parameter carries affine coefficients against its
mode reference. Coefficients whose values stop moving get frozen ("true
embedding"): the parameter leaves the trainable set and is thereafter derived
from the reference through the frozen affine map. A further slice of
slow-moving parameters is periodically rewritten to its affine reconstruction
while staying trainable ("dummy embedding"), a cheap random-weight-perturbation
style regularizer.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .cmd import ModeDecomposition
from .paramstore import FlatParams

log = logging.getLogger(__name__)

STATUS_FREE = 0
STATUS_REFERENCE = 1
STATUS_NON_EMBEDDABLE = 2
STATUS_TRUE_EMBEDDED = 3

SCHEDULE_CONSTANT = "constant"
SCHEDULE_INCREASING = "increasing"
SCHEDULE_DECREASING = "decreasing"


@dataclass
class EmbedConfig:
    head_epochs: int = 20            # epochs of plain training before any embedding
    period: int = 1                  # epochs between embedding events
    percent: float = 0.01            # fraction of N truly embedded per event
    dummy_cap: float = 0.25          # ceiling on the dummy-embedding fraction
    p_schedule: str = SCHEDULE_CONSTANT
    total_epochs: int = 70           # needed by the ramped schedules

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("embedding period must be >= 1")
        if not 0 <= self.percent <= 1:
            raise ValueError("embedding percent must be in [0, 1]")
        if self.p_schedule not in (SCHEDULE_CONSTANT, SCHEDULE_INCREASING, SCHEDULE_DECREASING):
            raise ValueError(f"unknown embedding schedule {self.p_schedule!r}")


@dataclass
class EmbeddingState:
    status: np.ndarray               # (N,) status codes
    frozen_k: np.ndarray             # (N,) coefficients captured at embedding time
    frozen_d: np.ndarray
    change_prev: np.ndarray          # (N, 2) coefficient snapshot one period ago
    config: EmbedConfig
    events: int = 0
    shortfalls: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.status.size

    def trainable_mask(self) -> np.ndarray:
        return self.status != STATUS_TRUE_EMBEDDED

    def embedded_count(self) -> int:
        return int((self.status == STATUS_TRUE_EMBEDDED).sum())

    def embedded_fraction(self) -> float:
        return self.embedded_count() / self.n


def init_state(decomp: ModeDecomposition, embeddable_mask: np.ndarray,
               config: EmbedConfig) -> EmbeddingState:
    """Initial statuses from the decomposition and the sensitivity mask.

    References are never embedded; parameters outside the mask are pinned
    non-embeddable, except constant (zero-variance) trajectories, which are
    always safe to embed.
    """
    n = decomp.n
    status = np.full(n, STATUS_FREE, dtype=np.int8)
    embeddable = np.asarray(embeddable_mask, dtype=bool) | decomp.zero_variance
    status[~embeddable] = STATUS_NON_EMBEDDABLE
    status[decomp.ref_index] = STATUS_REFERENCE
    return EmbeddingState(
        status=status,
        frozen_k=np.zeros(n),
        frozen_d=np.zeros(n),
        change_prev=np.column_stack([decomp.coef_k, decomp.coef_d]),
        config=config,
    )


def long_term_change(coef_k: np.ndarray, coef_d: np.ndarray,
                     state: EmbeddingState) -> np.ndarray:
    """Euclidean distance of each (k, d) pair from its value one period ago.

    Also advances the stored snapshot to the current coefficients.
    """
    current = np.column_stack([coef_k, coef_d])
    delta = current - state.change_prev
    state.change_prev = current
    return np.sqrt((delta**2).sum(axis=1))


def _event_percent(config: EmbedConfig, event_index: int) -> float:
    """Per-event true-embedding fraction under the configured schedule."""
    if config.p_schedule == SCHEDULE_CONSTANT:
        return config.percent
    total_events = max(1, (config.total_epochs - config.head_epochs) // config.period)
    ramp = event_index / ((total_events + 1) / 2.0)
    if config.p_schedule == SCHEDULE_INCREASING:
        return config.percent * ramp
    return config.percent * (total_events + 1 - event_index) / ((total_events + 1) / 2.0)


def _least_change(candidates: np.ndarray, change: np.ndarray, count: int) -> np.ndarray:
    """The ``count`` candidates with smallest change; ties go to the lowest index."""
    if count >= candidates.size:
        return candidates
    order = np.lexsort((candidates, change[candidates]))
    return candidates[order[:count]]


def true_embed_step(state: EmbeddingState, change: np.ndarray, epoch: int,
                    decomp: ModeDecomposition) -> np.ndarray:
    """Freeze the coefficients of the least-changing free parameters.

    Selects ``floor(percent * N)`` among free embeddable parameters, marks them
    embedded, and captures their current (k, d). Returns the selected indices.
    If fewer are eligible, embeds all of them and logs the shortfall.
    """
    state.events += 1
    percent = _event_percent(state.config, state.events)
    want = int(percent * state.n)
    eligible = np.flatnonzero(state.status == STATUS_FREE)
    if want > eligible.size:
        log.warning("true embedding shortfall at epoch %d: wanted %d, eligible %d",
                    epoch, want, eligible.size)
        state.shortfalls.append((epoch, want - eligible.size))
    chosen = _least_change(eligible, change, want)
    state.status[chosen] = STATUS_TRUE_EMBEDDED
    state.frozen_k[chosen] = decomp.coef_k[chosen]
    state.frozen_d[chosen] = decomp.coef_d[chosen]
    return chosen


def dummy_embed_step(state: EmbeddingState, change: np.ndarray, epoch: int,
                     decomp: ModeDecomposition, params: FlatParams) -> np.ndarray:
    """Rewrite additional slow parameters to their affine reconstruction.

    The count is ``floor(min(epoch * percent / 2, dummy_cap) * N)`` over the
    remaining free parameters; they stay trainable afterward. Returns the
    rewritten indices.
    """
    frac = min(epoch * state.config.percent / 2.0, state.config.dummy_cap)
    want = int(frac * state.n)
    eligible = np.flatnonzero(state.status == STATUS_FREE)
    if want > eligible.size:
        log.warning("dummy embedding shortfall at epoch %d: wanted %d, eligible %d",
                    epoch, want, eligible.size)
    chosen = _least_change(eligible, change, want)
    ref_values = params.values[decomp.ref_param_of()[chosen]]
    params.values[chosen] = decomp.coef_k[chosen] * ref_values + decomp.coef_d[chosen]
    return chosen


def apply_embedded(params: FlatParams, state: EmbeddingState,
                   decomp: ModeDecomposition) -> FlatParams:
    """Re-derive every embedded parameter from its reference's current value."""
    idx = np.flatnonzero(state.status == STATUS_TRUE_EMBEDDED)
    if idx.size:
        ref_values = params.values[decomp.ref_param_of()[idx]]
        params.values[idx] = state.frozen_k[idx] * ref_values + state.frozen_d[idx]
    return params


class EmbedLog:
    """Per-event schedule log: epoch, newly embedded counts, trainable count."""

    HEADER = ["epoch", "newly_true_embedded", "newly_dummy_embedded", "trainable_count"]

    def __init__(self):
        self.rows: list[tuple[int, int, int, int]] = []

    def append(self, epoch: int, n_true: int, n_dummy: int, trainable: int) -> None:
        self.rows.append((epoch, n_true, n_dummy, trainable))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            w.writerows(self.rows)
