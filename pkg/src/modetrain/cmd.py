"""Correlation mode decomposition over parameter trajectories.

Each trajectory (one parameter's value per recorded epoch) is assigned to a
mode and modeled as an affine function of that mode's reference trajectory:
``w_i(t) ~ k_i * w_ref(t) + d_i``. Modes come from complete-linkage
agglomerative clustering of absolute Pearson correlations on a uniform sample
of trajectories; the reference is the member with the highest mean in-mode
correlation. Coefficients are least-squares fits that can be continued one
epoch at a time through a closed-form recursive update on the per-mode 2x2
Gram matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import toymodel
from .paramstore import FlatParams, sample_indices
from .seeds import child_seed
from .toymodel import QUANT_ROUND, Batch, ToyCodecConfig

# Relative ridge added to the 2x2 Gram so constant reference trajectories
# (dead units) cannot make the fit singular.
GRAM_RIDGE = 1e-8

HIST_BUCKETS = [(0.0, 1.0), (1.0, 2.0), (2.0, 5.0), (5.0, 10.0),
                (10.0, 20.0), (20.0, 50.0), (50.0, 100.0)]


@dataclass
class ModeDecomposition:
    """Mode labels, references, affine coefficients, and running Gram matrices."""

    mode_of: np.ndarray          # (N,) mode label per parameter
    ref_index: np.ndarray        # (M,) parameter index of each mode's reference
    coef_k: np.ndarray           # (N,) multiplicative coefficient
    coef_d: np.ndarray           # (N,) additive coefficient
    gram: np.ndarray             # (M, 2, 2) running Gram of [w_ref; 1]
    ref_history: np.ndarray      # (M, E) reference trajectory columns so far
    zero_variance: np.ndarray    # (N,) constant-trajectory flags
    sampled: np.ndarray          # (S,) indices of the sampled trajectories
    sampled_corr: np.ndarray     # (S, S) |corr| matrix of the sample
    sampled_labels: np.ndarray   # (S,) cluster labels of the sample

    @property
    def n_modes(self) -> int:
        return self.ref_index.size

    @property
    def n(self) -> int:
        return self.mode_of.size

    def ref_param_of(self) -> np.ndarray:
        """(N,) parameter index of each parameter's mode reference."""
        return self.ref_index[self.mode_of]

    def reconstruct(self, values: np.ndarray) -> np.ndarray:
        """Affine reconstruction of every parameter from current reference values."""
        return self.coef_k * values[self.ref_param_of()] + self.coef_d

    def append_ref_column(self, values: np.ndarray) -> None:
        col = values[self.ref_index].reshape(-1, 1)
        self.ref_history = np.concatenate([self.ref_history, col], axis=1)


@dataclass
class CmdSearchResult:
    chosen_m: int
    chosen_s: int
    candidate_m: list[int] = field(default_factory=list)
    candidate_losses: list[float] = field(default_factory=list)
    stop_reason: str = "exhausted"
    decomposition: ModeDecomposition | None = None


# ---------------------------------------------------------------------------
# correlations
# ---------------------------------------------------------------------------


def _normalize_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center and scale each row to unit norm; constant rows become zero rows.

    A row whose deviation norm is at rounding level relative to its magnitude
    counts as constant; the mean of identical floats is not always bit exact.
    """
    rows = np.asarray(rows, dtype=np.float64)
    centered = rows - rows.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    scale = np.maximum(1.0, np.max(np.abs(rows), axis=1))
    zero = norms <= 1e-12 * scale
    safe = np.where(zero, 1.0, norms)
    unit = centered / safe[:, None]
    unit[zero] = 0.0
    return unit, zero


def correlation_matrix(rows: np.ndarray) -> np.ndarray:
    """Absolute Pearson correlations between all row pairs.

    Zero-variance rows correlate 0 with everything; the diagonal is exactly 1.
    The result is symmetric with entries in [0, 1].
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] < 2:
        raise ValueError("need at least 2 epochs per trajectory")
    unit, _ = _normalize_rows(rows)
    c = unit @ unit.T
    c = np.abs((c + c.T) / 2.0)
    np.clip(c, 0.0, 1.0, out=c)
    np.fill_diagonal(c, 1.0)
    return c


def cross_correlation(rows: np.ndarray, ref_rows: np.ndarray) -> np.ndarray:
    """|corr| of every row against every reference row; zero-variance rows give 0."""
    unit, _ = _normalize_rows(rows)
    ref_unit, _ = _normalize_rows(ref_rows)
    c = np.abs(unit @ ref_unit.T)
    np.clip(c, 0.0, 1.0, out=c)
    return c


# ---------------------------------------------------------------------------
# clustering and reference selection
# ---------------------------------------------------------------------------


def cluster_modes(corr: np.ndarray, n_modes: int) -> np.ndarray:
    """Complete-linkage agglomerative clustering on distance 1 - |corr|.

    Ties on the merge distance are broken toward the lexicographically
    smallest (i, j) pair, which makes the labeling deterministic. Labels are
    renumbered by first occurrence, so label 0 is trajectory 0's cluster.

    Cached per-row minima keep the merge loop at O(S^2) amortized; complete
    linkage only ever increases distances, so a cached minimum goes stale only
    when it points at one of the two merged clusters.
    """
    corr = np.asarray(corr, dtype=np.float64)
    s = corr.shape[0]
    if corr.shape != (s, s):
        raise ValueError("correlation matrix must be square")
    if n_modes > s:
        raise ValueError(f"cannot cut {s} trajectories into {n_modes} modes")
    if n_modes < 1:
        raise ValueError("number of modes must be >= 1")

    dist = 1.0 - corr
    np.fill_diagonal(dist, np.inf)
    owner = np.arange(s)  # cluster id of each trajectory; ids are min member index
    active = np.ones(s, dtype=bool)
    row_min = dist.min(axis=1)
    row_arg = dist.argmin(axis=1)

    def rescan(r: int) -> None:
        row_min[r] = dist[r].min()
        row_arg[r] = dist[r].argmin()

    for _ in range(s - n_modes):
        i = int(np.argmin(row_min))  # smallest row index attaining the global min
        j = int(row_arg[i])
        if i > j:
            i, j = j, i
        merged = np.maximum(dist[i], dist[j])
        dist[i, :] = merged
        dist[:, i] = merged
        dist[i, i] = np.inf
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        active[j] = False
        owner[owner == j] = i
        row_min[j] = np.inf
        row_arg[j] = j
        rescan(i)
        # rows whose cached minimum pointed at a merged cluster must rescan;
        # everything else only saw distances increase elsewhere
        stale = np.flatnonzero(active & ((row_arg == i) | (row_arg == j)))
        for r in stale:
            if r != i:
                rescan(int(r))
    labels = np.empty(s, dtype=np.int64)
    seen: dict[int, int] = {}
    for idx in range(s):
        cid = owner[idx]
        if cid not in seen:
            seen[cid] = len(seen)
        labels[idx] = seen[cid]
    return labels


def select_references(corr: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per mode, the member with the highest mean |corr| to its other members.

    Singleton modes return their only member; ties go to the lowest index.
    """
    labels = np.asarray(labels)
    n_modes = int(labels.max()) + 1 if labels.size else 0
    refs = np.empty(n_modes, dtype=np.int64)
    for m in range(n_modes):
        members = np.flatnonzero(labels == m)
        if members.size == 0:
            raise ValueError(f"mode {m} is empty")
        if members.size == 1:
            refs[m] = members[0]
            continue
        sub = corr[np.ix_(members, members)]
        mean_to_others = (sub.sum(axis=1) - 1.0) / (members.size - 1)
        refs[m] = members[int(np.argmax(mean_to_others))]
    return refs


def assign_modes(trajectories: np.ndarray, ref_rows: np.ndarray,
                 sampled: np.ndarray | None = None,
                 sampled_labels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mode label for every trajectory: argmax |corr| against the references.

    Sampled trajectories keep their cluster labels. Returns (labels,
    zero_variance); constant trajectories correlate 0 with everything and fall
    to mode 0 by the lowest-index tie rule, flagged in the second output.
    """
    c2 = cross_correlation(trajectories, ref_rows)
    _, zero_var = _normalize_rows(trajectories)
    labels = np.argmax(c2, axis=1).astype(np.int64)
    if sampled is not None:
        labels[sampled] = sampled_labels
    return labels, zero_var


# ---------------------------------------------------------------------------
# affine fits
# ---------------------------------------------------------------------------


def _design(ref_row: np.ndarray) -> np.ndarray:
    """Stack the reference trajectory over a row of ones: shape (2, E)."""
    return np.vstack([ref_row, np.ones_like(ref_row)])


def fit_affine(member_rows: np.ndarray, ref_row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares affine fit of each member row against the reference.

    Returns the (N_m, 2) coefficient matrix (columns k, d) together with the
    2x2 Gram matrix that seeds later recursive updates. A ridge proportional
    to the trace is added only when the Gram is effectively singular (constant
    reference trajectories), so well-posed fits stay exact.
    """
    ref_row = np.asarray(ref_row, dtype=np.float64)
    if ref_row.size < 2:
        raise ValueError("need at least 2 epochs to fit")
    w = _design(ref_row)
    gram = w @ w.T
    scale = np.trace(gram) / 2.0
    if np.linalg.det(gram) <= (GRAM_RIDGE * scale) ** 2:
        gram = gram + GRAM_RIDGE * scale * np.eye(2)
    rhs = np.asarray(member_rows, dtype=np.float64) @ w.T  # (N_m, 2)
    coef = np.linalg.solve(gram.T, rhs.T).T
    return coef, gram


def recursive_update(coef: np.ndarray, gram: np.ndarray, new_members: np.ndarray,
                     new_ref: float) -> tuple[np.ndarray, np.ndarray]:
    """Continue the affine fit with one more epoch column in closed form.

    With G the running Gram of the stacked reference and w the new reference
    value, the updated coefficients are
    ``(coef @ G + outer(new_members, [w, 1])) @ inv(G + outer([w, 1]))`` and the
    Gram accumulates the new outer product. Starting from a batch fit this
    reproduces the batch fit over the extended window at every step.
    """
    if not (np.all(np.isfinite(new_members)) and np.isfinite(new_ref)):
        raise FloatingPointError("non-finite inputs to recursive coefficient update")
    wt = np.array([new_ref, 1.0])
    gram_new = gram + np.outer(wt, wt)
    numer = coef @ gram + np.outer(np.asarray(new_members, dtype=np.float64), wt)
    coef_new = np.linalg.solve(gram_new.T, numer.T).T
    return coef_new, gram_new


def fit_decomposition(trajectories: np.ndarray, mode_of: np.ndarray,
                      ref_index: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch affine fit for all parameters. Returns (coef_k, coef_d, gram stack)."""
    n = trajectories.shape[0]
    coef_k = np.empty(n)
    coef_d = np.empty(n)
    gram = np.empty((ref_index.size, 2, 2))
    for m, ref in enumerate(ref_index):
        members = np.flatnonzero(mode_of == m)
        coefs, g = fit_affine(trajectories[members], trajectories[ref])
        coef_k[members] = coefs[:, 0]
        coef_d[members] = coefs[:, 1]
        gram[m] = g
    coef_k[ref_index] = 1.0
    coef_d[ref_index] = 0.0
    return coef_k, coef_d, gram


def decompose(trajectories: np.ndarray, n_modes: int, n_sampled: int,
              seed: int) -> ModeDecomposition:
    """Full pipeline: sample, correlate, cluster, pick references, assign, fit."""
    n = trajectories.shape[0]
    sampled = sample_indices(n, n_sampled, seed)
    corr = correlation_matrix(trajectories[sampled])
    labels_s = cluster_modes(corr, n_modes)
    ref_pos = select_references(corr, labels_s)
    ref_index = sampled[ref_pos]
    mode_of, zero_var = assign_modes(trajectories, trajectories[ref_index],
                                     sampled, labels_s)
    coef_k, coef_d, gram = fit_decomposition(trajectories, mode_of, ref_index)
    return ModeDecomposition(
        mode_of=mode_of,
        ref_index=ref_index,
        coef_k=coef_k,
        coef_d=coef_d,
        gram=gram,
        ref_history=trajectories[ref_index].copy(),
        zero_variance=zero_var,
        sampled=sampled,
        sampled_corr=corr,
        sampled_labels=labels_s,
    )


def update_coefficients(decomp: ModeDecomposition, values: np.ndarray,
                        frozen: np.ndarray | None = None) -> None:
    """One recursive epoch update of every mode's coefficients, in place.

    Rows listed in ``frozen`` keep their coefficients (their trajectory is, by
    construction, exactly affine in the reference, so skipping them leaves the
    shared Gram consistent). Reference rows stay pinned at (1, 0).
    """
    for m, ref in enumerate(decomp.ref_index):
        members = np.flatnonzero(decomp.mode_of == m)
        coef = np.column_stack([decomp.coef_k[members], decomp.coef_d[members]])
        coef_new, gram_new = recursive_update(coef, decomp.gram[m], values[members],
                                              float(values[ref]))
        decomp.gram[m] = gram_new
        if frozen is not None:
            keep = frozen[members]
            coef_new[keep] = coef[keep]
        decomp.coef_k[members] = coef_new[:, 0]
        decomp.coef_d[members] = coef_new[:, 1]
    decomp.coef_k[decomp.ref_index] = 1.0
    decomp.coef_d[decomp.ref_index] = 0.0
    decomp.append_ref_column(values)


# ---------------------------------------------------------------------------
# instant performance and the mode-count search
# ---------------------------------------------------------------------------


def instant_rd_loss(decomp: ModeDecomposition, params: FlatParams,
                    config: ToyCodecConfig, samples: Batch) -> float:
    """Loss of the model reconstructed from the decomposition, original params untouched."""
    recon = FlatParams(decomp.reconstruct(params.values), list(params.layers))
    return toymodel.forward_loss(recon, config, samples, quant=QUANT_ROUND).total


def run_saturation_search(candidates: list[int], eval_candidate,
                          threshold: float = 1e-3) -> tuple[int, list, str]:
    """Walk candidates in order until the relative loss change drops to the threshold.

    ``eval_candidate(m)`` returns (loss, payload). The previous loss starts at
    the sentinel 10000 so the first candidate never triggers the stop; a change
    exactly at the threshold counts as saturated (the comparison carries a tiny
    absolute slack so the boundary case is not at the mercy of rounding).
    Returns (index of chosen candidate, per-candidate (loss, payload) list,
    stop reason).
    """
    if not candidates:
        raise ValueError("empty candidate list")
    if any(b <= a for a, b in zip(candidates, candidates[1:])):
        raise ValueError("candidate list must be strictly ascending")
    prev = 10000.0
    evaluated = []
    for i, m in enumerate(candidates):
        loss, payload = eval_candidate(m)
        evaluated.append((loss, payload))
        if abs(loss - prev) / prev < threshold + 1e-12:
            return i, evaluated, "saturated"
        prev = loss
    return len(evaluated) - 1, evaluated, "exhausted"


def select_hyperparams(candidates: list[int], trajectories: np.ndarray,
                       params: FlatParams, config: ToyCodecConfig, samples: Batch,
                       seed: int, sample_factor: int = 200,
                       threshold: float = 1e-3) -> CmdSearchResult:
    """Pick the mode count by instant-performance saturation.

    Each candidate M is decomposed with S = sample_factor * M sampled
    trajectories and scored by the reconstructed model's loss on ``samples``;
    the search stops at the first relative improvement below ``threshold`` and
    keeps that candidate's decomposition.
    """
    n = trajectories.shape[0]
    for m in candidates:
        if sample_factor * m > n:
            raise ValueError(
                f"candidate M={m} needs S={sample_factor * m} sampled trajectories, only {n} exist")

    def eval_candidate(m: int):
        decomp = decompose(trajectories, m, sample_factor * m, child_seed(seed, "cmd-sample", m))
        return instant_rd_loss(decomp, params, config, samples), decomp

    chosen_i, evaluated, reason = run_saturation_search(candidates, eval_candidate, threshold)
    chosen_m = candidates[chosen_i]
    return CmdSearchResult(
        chosen_m=chosen_m,
        chosen_s=sample_factor * chosen_m,
        candidate_m=list(candidates[: len(evaluated)]),
        candidate_losses=[loss for loss, _ in evaluated],
        stop_reason=reason,
        decomposition=evaluated[chosen_i][1],
    )


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


# Emitted correlation matrices are capped at this many rows; bigger samples are
# thinned evenly along the label-ordered axis so the block structure survives.
CORR_CSV_LIMIT = 1024


def write_clustered_correlation_csv(path, decomp: ModeDecomposition,
                                    limit: int = CORR_CSV_LIMIT) -> None:
    """Sampled |corr| matrix reordered by mode label; block structure is visible by eye."""
    order = np.lexsort((decomp.sampled, decomp.sampled_labels))
    if order.size > limit:
        keep = np.unique(np.linspace(0, order.size - 1, limit).round().astype(int))
        order = order[keep]
    reordered = decomp.sampled_corr[np.ix_(order, order)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param_index", "mode"] + [str(int(decomp.sampled[j])) for j in order])
        for pos, j in enumerate(order):
            w.writerow([int(decomp.sampled[j]), int(decomp.sampled_labels[j])]
                       + [f"{v:.6g}" for v in reordered[pos]])


def block_structure_summary(decomp: ModeDecomposition) -> tuple[float, float]:
    """(mean within-mode |corr|, mean cross-mode |corr|) over the sampled matrix."""
    labels = decomp.sampled_labels
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(labels.size, dtype=bool)
    within = decomp.sampled_corr[same & off_diag]
    cross = decomp.sampled_corr[~same]
    within_mean = float(within.mean()) if within.size else 1.0
    cross_mean = float(cross.mean()) if cross.size else 0.0
    return within_mean, cross_mean


def coefficient_change_fractions(coef_snapshots: dict[int, np.ndarray],
                                 final_coef: np.ndarray) -> dict[int, list[float]]:
    """Per epoch: fraction of coefficients in each relative-change bucket vs final values.

    Relative change is |k(t) - k(final)| / |k(final)|; coefficients whose final
    value is zero are skipped. Buckets are percent ranges.
    """
    out = {}
    denom_ok = np.abs(final_coef) > 0
    for epoch, coef in sorted(coef_snapshots.items()):
        rel = np.abs(coef[denom_ok] - final_coef[denom_ok]) / np.abs(final_coef[denom_ok]) * 100.0
        total = rel.size if rel.size else 1
        out[epoch] = [float(((lo <= rel) & (rel < hi)).sum() / total) for lo, hi in HIST_BUCKETS]
    return out


def write_coefficient_change_histogram(path, coef_snapshots: dict[int, np.ndarray],
                                       final_coef: np.ndarray) -> None:
    fractions = coefficient_change_fractions(coef_snapshots, final_coef)
    epochs = sorted(fractions)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bucket_low_pct", "bucket_high_pct"] + [f"epoch_{e}" for e in epochs])
        for b, (lo, hi) in enumerate(HIST_BUCKETS):
            w.writerow([lo, hi] + [repr(fractions[e][b]) for e in epochs])
