"""Noisy quadratic laboratory: simulated optimizer dynamics vs closed-form variance.

The problem is a diagonal quadratic whose optimum is re-drawn each step from
N(0, Sigma), so one SGD step per coordinate is
``theta <- theta - gamma * a * (theta - c)``. Steady-state iterate variances
have closed forms, for plain SGD and for the averaged/embedded scheme, and the
simulator estimates them empirically (time and seed averaged second moments,
after a burn-in of half the steps; the iterate means contract to zero).

The averaged scheme samples the SGD state every ``interval`` steps,
interpolates a shadow average with weight ``alpha`` and synchronizes it back.
Embedded coordinates are reconstructed as ``k`` times a dedicated reference
coordinate with identical (a, sigma^2) running the same averaged dynamics;
reported per-coordinate variance mixes the embedded and free replicas with
weights (p, 1 - p), which is exactly the decomposition the closed form makes.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .seeds import spawn

METHOD_SGD = "sgd"
METHOD_SMA = "sma"
METHOD_PROPOSED = "proposed"
METHODS = (METHOD_SGD, METHOD_SMA, METHOD_PROPOSED)

_CHUNK = 4096
_SEED_BLOCK = 16


@dataclass
class NQMConfig:
    a: np.ndarray                    # positive diagonal of the curvature matrix
    sigma2: np.ndarray               # diagonal of the optimum-noise covariance
    gamma: float = 0.1               # learning rate, gamma * max(a) < 1
    alpha: float = 0.8               # moving-average weight on the sampled state
    interval: int = 5                # optimizer steps between samples
    embed_fraction: float = 0.0      # p, fraction of embedded coordinates
    k_values: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    steps: int = 200_000
    num_seeds: int = 64

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64).reshape(-1)
        self.k_values = np.asarray(self.k_values, dtype=np.float64).reshape(-1)
        if self.a.size != self.sigma2.size:
            raise ValueError("a and sigma2 must have the same length")
        if np.any(self.a <= 0):
            raise ValueError("curvature diagonal must be positive")
        if np.any(self.sigma2 < 0):
            raise ValueError("noise variances must be nonnegative")
        if self.gamma < 0 or self.gamma * float(self.a.max()) >= 1.0:
            raise ValueError("need 0 <= gamma < 1 / max(a)")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if not 0 <= self.embed_fraction <= 1:
            raise ValueError("embed_fraction must be in [0, 1]")
        count = self.embed_fraction * self.dim
        if abs(count - round(count)) > 1e-9:
            raise ValueError("embed_fraction * dim must be an integer for clean pairing")
        if self.k_values.size == 0:
            raise ValueError("k_values must be non-empty")

    @property
    def dim(self) -> int:
        return self.a.size

    def mean_k_squared(self) -> float:
        return float(np.mean(self.k_values**2))

    def per_coordinate_k(self) -> np.ndarray:
        """k broadcast across coordinates, cycling when fewer values are given."""
        reps = int(np.ceil(self.dim / self.k_values.size))
        return np.tile(self.k_values, reps)[: self.dim]


@dataclass
class NQMResult:
    empirical_variance: np.ndarray
    closedform_variance: np.ndarray
    empirical_loss: float
    closedform_loss: float
    empirical_mean: np.ndarray


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def closed_form_sgd_variance(config: NQMConfig) -> np.ndarray:
    """Steady-state per-coordinate iterate variance of plain SGD."""
    ga = config.gamma * config.a
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (config.gamma**2 * config.a**2 * config.sigma2) / (1.0 - (1.0 - ga) ** 2)
    return np.where(ga * config.sigma2 == 0.0, 0.0, v)


def _averaging_factor(config: NQMConfig) -> np.ndarray:
    """Variance contraction of sampled averaging relative to SGD at the sync points."""
    alpha, ell = config.alpha, config.interval
    q = 1.0 - config.gamma * config.a
    x = 1.0 - q ** (2 * ell)
    y = 1.0 - q**ell
    denom = alpha**2 * x + 2.0 * alpha * (1.0 - alpha) * y
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = alpha**2 * x / denom
    return np.where(denom == 0.0, 1.0, factor)


def closed_form_sma_variance(config: NQMConfig) -> np.ndarray:
    """Steady-state variance of the averaged state, no embedding."""
    return _averaging_factor(config) * closed_form_sgd_variance(config)


def closed_form_proposed_variance(config: NQMConfig) -> np.ndarray:
    """Averaged variance scaled by the embedded mixture weight 1 - p + p E[k^2]."""
    p = config.embed_fraction
    mix = 1.0 - p + p * config.mean_k_squared()
    return mix * closed_form_sma_variance(config)


def expected_loss(config: NQMConfig, second_moment: np.ndarray) -> float:
    """Expected quadratic loss given per-coordinate second moments of the iterates."""
    return float(0.5 * np.sum(config.a * (second_moment + config.sigma2)))


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


class _Accumulator:
    """Per-seed sums of recorded states; reduction over seeds happens in index order."""

    def __init__(self, n_seeds: int, dim: int):
        self.sum1 = np.zeros((n_seeds, dim))
        self.sum2 = np.zeros((n_seeds, dim))
        self.count = 0


def _check_divergence(state: np.ndarray, what: str) -> None:
    finite = np.isfinite(state)
    if not finite.all():
        coord = int(np.argwhere(~finite)[0][-1])
        raise FloatingPointError(f"divergence in {what} at coordinate {coord}")


def _simulate_block(config: NQMConfig, method: str, seed: int,
                    seed_ids: np.ndarray) -> _Accumulator:
    """Simulate one block of seeds; per-seed generators keep streams independent."""
    d = config.dim
    nb = seed_ids.size
    ga = config.gamma * config.a
    sig = np.sqrt(config.sigma2)
    alpha, ell = config.alpha, config.interval
    burn_in = config.steps // 2
    two_systems = method == METHOD_PROPOSED

    gens = [spawn(seed, "nqm", method, int(s)) for s in seed_ids]
    theta = np.zeros((2 if two_systems else 1, nb, d))
    shadow = np.zeros_like(theta)
    acc = _Accumulator(nb, d)
    if two_systems:
        k = config.per_coordinate_k()
        p = config.embed_fraction
        weight2 = p * k**2  # contribution of the embedded replica to the mixture
        weight1 = np.full(d, 1.0 - p)
        mean_w2 = p * k
        mean_w1 = weight1

    done = 0
    while done < config.steps:
        chunk = min(_CHUNK, config.steps - done)
        noise = np.empty((chunk, theta.shape[0], nb, d))
        for si, g in enumerate(gens):
            draw = g.standard_normal((chunk, theta.shape[0], d)) * sig
            noise[:, :, si, :] = draw
        for t in range(chunk):
            step = done + t + 1
            theta += ga * (noise[t] - theta)
            if method == METHOD_SGD:
                if step > burn_in:
                    acc.sum1 += theta[0]
                    acc.sum2 += theta[0] ** 2
                    acc.count += 1
            elif step % ell == 0:
                shadow *= 1.0 - alpha
                shadow += alpha * theta
                theta[:] = shadow
                if step > burn_in:
                    if two_systems:
                        acc.sum1 += mean_w1 * shadow[0] + mean_w2 * shadow[1]
                        acc.sum2 += weight1 * shadow[0] ** 2 + weight2 * shadow[1] ** 2
                    else:
                        acc.sum1 += shadow[0]
                        acc.sum2 += shadow[0] ** 2
                    acc.count += 1
        _check_divergence(theta, f"{method} iterates")
        done += chunk
    return acc


def simulate(config: NQMConfig, method: str, seed: int = 0,
             workers: int = 1) -> NQMResult:
    """Monte-Carlo steady-state moments for one method, deterministic per seed.

    Seeds are split into fixed blocks so the result does not depend on the
    worker count; within each block the dynamics are vectorized across seeds.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    blocks = [np.arange(lo, min(lo + _SEED_BLOCK, config.num_seeds))
              for lo in range(0, config.num_seeds, _SEED_BLOCK)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(lambda b: _simulate_block(config, method, seed, b), blocks))
    else:
        accs = [_simulate_block(config, method, seed, b) for b in blocks]

    sum1 = np.concatenate([a.sum1 for a in accs], axis=0)
    sum2 = np.concatenate([a.sum2 for a in accs], axis=0)
    count = accs[0].count
    if count == 0:
        raise ValueError("no recorded states; increase steps")
    total = count * config.num_seeds
    mean = sum1.sum(axis=0) / total
    m2 = sum2.sum(axis=0) / total

    if method == METHOD_SGD:
        closed = closed_form_sgd_variance(config)
    elif method == METHOD_SMA:
        closed = closed_form_sma_variance(config)
    else:
        closed = closed_form_proposed_variance(config)
    return NQMResult(
        empirical_variance=m2,
        closedform_variance=closed,
        empirical_loss=expected_loss(config, m2),
        closedform_loss=expected_loss(config, closed),
        empirical_mean=mean,
    )


def write_variance_csv(path, config: NQMConfig, results: dict[str, NQMResult]) -> None:
    """One row per (method, coordinate) with empirical vs closed-form variance."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "coordinate", "a", "sigma2", "v_emp", "v_closed", "rel_err"])
        for method in sorted(results):
            res = results[method]
            for i in range(config.dim):
                v_emp = float(res.empirical_variance[i])
                v_closed = float(res.closedform_variance[i])
                rel = abs(v_emp - v_closed) / v_closed if v_closed > 0 else 0.0
                w.writerow([method, i, repr(float(config.a[i])), repr(float(config.sigma2[i])),
                            repr(v_emp), repr(v_closed), repr(rel)])
