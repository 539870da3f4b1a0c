"""Perturbation sensitivity: layer ranking, per-parameter scores, embeddable mask.

Layers on the transform side (analysis, synthesis) are scored by the increase
in the full rate-distortion loss when the whole layer is perturbed with
Gaussian noise. Entropy-side layers (hyper paths, entropy parameters) only
influence the rate terms, so they are scored with a rate-only re-evaluation on
latents cached from one clean forward pass, which is much cheaper.

The embeddable mask combines a parameter-count budget on the most sensitive
layers of each side with the top half of a magnitude-times-gradient score
inside the selected layers; everything else is embeddable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import toymodel
from .paramstore import ENTROPY_ROLES, TRANSFORM_ROLES, FlatParams
from .seeds import child_seed, spawn
from .toymodel import QUANT_ROUND, Batch, ToyCodecConfig

MODE_HALF_HALF = "half_half"
MODE_FIRST_ORDER = "first_order"
MODE_ACCURATE = "accurate"
MODE_NONE = "none"


@dataclass
class SensitivityReport:
    layer_deltas: np.ndarray          # per layer, aligned with params.layers
    selected_layers: list[str]        # names of the layers in the sensitive union
    param_scores: np.ndarray          # (N,) first-order scores
    embeddable_mask: np.ndarray       # (N,) True where embedding is allowed


def layer_sensitivity(config: ToyCodecConfig, params: FlatParams, samples: Batch,
                      sigma_frac: float = 0.05, seed: int = 0) -> np.ndarray:
    """Loss increase per layer under whole-layer Gaussian perturbation.

    Noise scale is ``sigma_frac`` times the layer's max absolute value, with a
    per-layer stream derived from (seed, layer index). The recorded delta is
    the average over the +noise and -noise perturbations, which cancels the
    first-order term and probes the layer's curvature response; a single draw
    is dominated by where the gradient happens to point mid-training.
    Parameters are restored bit exactly afterward. A perturbation that drives
    the model non-finite records an infinite delta instead of aborting.
    """
    baseline, cache = toymodel.forward_loss(params, config, samples,
                                            quant=QUANT_ROUND, return_latents=True)
    baseline_rate = baseline.rate_y + baseline.rate_z
    deltas = np.empty(len(params.layers))
    for li, span in enumerate(params.layers):
        rng = spawn(seed, "layer-noise", li)
        saved = params.values[span.slice].copy()
        sigma = sigma_frac * float(np.max(np.abs(saved)))
        noise = rng.standard_normal(span.len) * sigma
        acc = 0.0
        try:
            for sign in (1.0, -1.0):
                params.values[span.slice] = saved + sign * noise
                if span.role in TRANSFORM_ROLES:
                    acc += toymodel.forward_loss(params, config, samples,
                                                 quant=QUANT_ROUND).total - baseline.total
                else:
                    acc += toymodel.eval_rate_only(params, config, cache) - baseline_rate
            deltas[li] = acc / 2.0
        except FloatingPointError:
            deltas[li] = np.inf
        finally:
            params.values[span.slice] = saved
    return deltas


def first_order_scores(config: ToyCodecConfig, params: FlatParams, samples: Batch,
                       seed: int = 0) -> np.ndarray:
    """Magnitude-times-gradient score per parameter: |w| * |d loss / d w|.

    The gradient is taken on the batch-mean training loss, so the expectation
    over the sample set is folded into one backward pass.
    """
    grad = toymodel.backward(params, config, samples,
                             noise_seed=child_seed(seed, "score-noise"))
    return np.abs(params.values) * np.abs(grad)


def per_parameter_sensitivity(config: ToyCodecConfig, params: FlatParams, samples: Batch,
                              sigma_frac: float = 0.05, seed: int = 0) -> np.ndarray:
    """Exhaustive per-parameter perturbation deltas. Tiny models only; this is
    the slow oracle the cheaper estimators are judged against."""
    baseline = toymodel.forward_loss(params, config, samples, quant=QUANT_ROUND).total
    deltas = np.empty(params.n)
    rng = spawn(seed, "per-param-noise")
    noise = rng.standard_normal(params.n)
    for span in params.layers:
        sigma = sigma_frac * float(np.max(np.abs(params.values[span.slice])))
        for i in range(span.start, span.stop):
            saved = params.values[i]
            params.values[i] = saved + noise[i] * sigma
            try:
                deltas[i] = toymodel.forward_loss(params, config, samples,
                                                  quant=QUANT_ROUND).total - baseline
            except FloatingPointError:
                deltas[i] = np.inf
            finally:
                params.values[i] = saved
    return deltas


def _closest_prefix(sorted_spans, budget: int) -> list:
    """Prefix of the delta-sorted layer list whose parameter count is closest to budget."""
    best_k, best_gap, cum = 0, budget, 0
    cums = []
    for span in sorted_spans:
        cum += span.len
        cums.append(cum)
    for k, c in enumerate(cums, start=1):
        gap = abs(c - budget)
        if gap < best_gap:
            best_gap, best_k = gap, k
    return list(sorted_spans[:best_k])


def build_embeddable_mask(layer_deltas: np.ndarray, param_scores: np.ndarray,
                          params: FlatParams,
                          nonembeddable_fraction: float = 0.25) -> tuple[np.ndarray, SensitivityReport]:
    """Combine layer ranking and parameter scores into the embeddable mask.

    Each side (transform roles, entropy roles) contributes its most sensitive
    layers up to a parameter budget of ``nonembeddable_fraction * N``; inside
    the union the top half by score is non-embeddable. Ties break toward the
    lower index, so the mask is a pure function of its inputs.
    """
    n = params.n
    budget = int(round(nonembeddable_fraction * n))
    selected: list = []
    for roles in (TRANSFORM_ROLES, ENTROPY_ROLES):
        side = [(li, span) for li, span in enumerate(params.layers) if span.role in roles]
        side.sort(key=lambda t: (-layer_deltas[t[0]], t[0]))
        selected.extend(_closest_prefix([span for _, span in side], budget))

    union_idx = np.concatenate([np.arange(s.start, s.stop) for s in selected]) if selected else np.array([], dtype=int)
    mask = np.ones(n, dtype=bool)
    if union_idx.size:
        take = union_idx.size // 2
        order = np.lexsort((union_idx, -param_scores[union_idx]))
        mask[union_idx[order[:take]]] = False
    report = SensitivityReport(
        layer_deltas=np.asarray(layer_deltas, dtype=np.float64),
        selected_layers=[s.name for s in selected],
        param_scores=np.asarray(param_scores, dtype=np.float64),
        embeddable_mask=mask,
    )
    return mask, report


def compute_embeddable_mask(config: ToyCodecConfig, params: FlatParams, samples: Batch,
                            mode: str = MODE_HALF_HALF, sigma_frac: float = 0.05,
                            nonembeddable_fraction: float = 0.25,
                            seed: int = 0) -> tuple[np.ndarray, SensitivityReport]:
    """Mask under the chosen estimation mode.

    ``half_half`` is the default combined strategy; ``first_order`` ranks all
    parameters by score alone; ``accurate`` uses exhaustive per-parameter
    perturbation (tiny models only); ``none`` marks everything embeddable.
    """
    n = params.n
    if mode == MODE_NONE:
        scores = np.zeros(n)
        deltas = np.zeros(len(params.layers))
        mask = np.ones(n, dtype=bool)
        return mask, SensitivityReport(deltas, [], scores, mask)
    scores = first_order_scores(config, params, samples, seed=seed)
    if mode == MODE_HALF_HALF:
        deltas = layer_sensitivity(config, params, samples, sigma_frac, seed)
        return build_embeddable_mask(deltas, scores, params, nonembeddable_fraction)
    if mode == MODE_FIRST_ORDER:
        ranking = scores
    elif mode == MODE_ACCURATE:
        ranking = per_parameter_sensitivity(config, params, samples, sigma_frac, seed)
    else:
        raise ValueError(f"unknown sensitivity mode {mode!r}")
    take = int(round(nonembeddable_fraction * n))
    order = np.lexsort((np.arange(n), -ranking))
    mask = np.ones(n, dtype=bool)
    mask[order[:take]] = False
    report = SensitivityReport(np.zeros(len(params.layers)), [], scores, mask)
    return mask, report


def write_layer_deltas_csv(path, params: FlatParams, deltas: np.ndarray,
                           selected: list[str]) -> None:
    chosen = set(selected)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "role", "param_count", "delta", "selected"])
        for span, delta in zip(params.layers, deltas):
            w.writerow([span.name, span.role, span.len, repr(float(delta)),
                        int(span.name in chosen)])
