"""Desk-scale rate-distortion codec with analytic forward and backward passes.

The architecture is a fixed affine-tanh-affine autoencoder with an affine
hyper path and a learned entropy model:

- analysis:        y  = A2 tanh(A1 x + b1) + b2
- quantization:    y_hat = y + u (training, u ~ Uniform(-1/2, 1/2)) or round(y) (eval)
- hyper analysis:  z  = Ha y + ba, z_hat analogous
- hyper synthesis: h  = Hs z_hat + bs
- entropy params:  (mu, log sigma) = Ew h + be, Gaussian conditional for y_hat
- factorized prior: per-dimension logistic (loc, log scale) for z_hat
- synthesis:       x_hat = S2 tanh(S1 y_hat + c1) + c2

Rates are bits of the unit quantization bin under the respective model,
normalized per input dimension (the per-pixel convention for flattened
patches). The total loss is ``lambda * distortion_scale * MSE + rate_y + rate_z``.

Everything is float64 and written so the gradient of the training-mode loss
is exact (the additive noise is a fixed, seed-determined constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from .paramstore import (
    ROLE_ANALYSIS,
    ROLE_ENTROPY_PARAMS,
    ROLE_HYPER_ANALYSIS,
    ROLE_HYPER_SYNTHESIS,
    ROLE_SYNTHESIS,
    FlatParams,
    LayerSpan,
)
from .seeds import spawn

_LN2 = float(np.log(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# Bin probabilities are floored here before the log so the rate stays finite.
PROB_FLOOR = 1e-12

QUANT_NOISE = "noise"
QUANT_ROUND = "round"


@dataclass
class ToyCodecConfig:
    input_dim: int = 64
    hidden_dim: int = 32
    latent_dim: int = 16
    hyper_dim: int = 8
    rd_lambda: float = 0.0018
    distortion_scale: float = 255.0**2

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "latent_dim", "hyper_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        # lambda = 0 is permitted for rate-only evaluation; training requires > 0.
        if self.rd_lambda < 0:
            raise ValueError("rd_lambda must be >= 0")
        if self.distortion_scale <= 0:
            raise ValueError("distortion_scale must be > 0")


@dataclass
class Batch:
    inputs: np.ndarray  # (B, D), values in [0, 1]
    seed: int

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class LossBreakdown:
    total: float
    distortion: float
    rate_y: float
    rate_z: float


@dataclass
class CachedLatents:
    """Latents captured by one clean forward pass, for rate-only re-evaluation.

    ``y`` is the pre-quantization latent; the entropy path is recomputed from it
    so perturbations of any entropy-side layer are reflected. ``z_noise`` is the
    realized additive noise (None in round mode) so the recomputation is bit
    exact against the originating forward pass.
    """

    y: np.ndarray
    y_hat: np.ndarray
    z_noise: np.ndarray | None
    quant: str
    rate_y: float
    rate_z: float


# ---------------------------------------------------------------------------
# layout and initialization
# ---------------------------------------------------------------------------


# Large weight matrices are subdivided into spans of at most this many
# parameters. The matrices stay contiguous in the flat vector; the finer table
# only makes the layer-budget selection in the sensitivity pass less lumpy.
MAX_SPAN = 512


def _matrix_blocks(config: ToyCodecConfig) -> list[tuple[str, str, int]]:
    d, h, k, j = config.input_dim, config.hidden_dim, config.latent_dim, config.hyper_dim
    g = 2 * k
    return [
        ("analysis.w1", ROLE_ANALYSIS, h * d),
        ("analysis.b1", ROLE_ANALYSIS, h),
        ("analysis.w2", ROLE_ANALYSIS, k * h),
        ("analysis.b2", ROLE_ANALYSIS, k),
        ("synthesis.w1", ROLE_SYNTHESIS, h * k),
        ("synthesis.b1", ROLE_SYNTHESIS, h),
        ("synthesis.w2", ROLE_SYNTHESIS, d * h),
        ("synthesis.b2", ROLE_SYNTHESIS, d),
        ("hyper_analysis.w", ROLE_HYPER_ANALYSIS, j * k),
        ("hyper_analysis.b", ROLE_HYPER_ANALYSIS, j),
        ("hyper_synthesis.w", ROLE_HYPER_SYNTHESIS, g * j),
        ("hyper_synthesis.b", ROLE_HYPER_SYNTHESIS, g),
        ("entropy_params.w", ROLE_ENTROPY_PARAMS, g * g),
        ("entropy_params.b", ROLE_ENTROPY_PARAMS, g),
        ("entropy_params.prior_loc", ROLE_ENTROPY_PARAMS, j),
        ("entropy_params.prior_log_scale", ROLE_ENTROPY_PARAMS, j),
    ]


def build_layers(config: ToyCodecConfig) -> list[LayerSpan]:
    """Fixed layer table; matrices above MAX_SPAN are split into part spans."""
    layers = []
    pos = 0
    for name, role, length in _matrix_blocks(config):
        if length <= MAX_SPAN:
            layers.append(LayerSpan(name, role, pos, length))
            pos += length
            continue
        n_parts = (length + MAX_SPAN - 1) // MAX_SPAN
        base = length // n_parts
        rem = length % n_parts
        for part in range(n_parts):
            plen = base + (1 if part < rem else 0)
            layers.append(LayerSpan(f"{name}:{part}", role, pos, plen))
            pos += plen
    return layers


def param_count(config: ToyCodecConfig) -> int:
    return sum(s.len for s in build_layers(config))


class _Net:
    """Views into a flat vector, reshaped as the architecture's matrices."""

    def __init__(self, params: FlatParams, config: ToyCodecConfig):
        d, h, k, j = config.input_dim, config.hidden_dim, config.latent_dim, config.hyper_dim
        g = 2 * k
        expected = param_count(config)
        if params.n != expected:
            raise ValueError(f"parameter layout mismatch: have {params.n}, architecture needs {expected}")
        v = params.values
        regions: dict[str, tuple[int, int]] = {}
        for span in params.layers:
            base = span.name.split(":", 1)[0]
            start, length = regions.get(base, (span.start, 0))
            regions[base] = (min(start, span.start), length + span.len)

        def view(name, shape):
            start, length = regions[name]
            return v[start : start + length].reshape(shape)

        self.A1 = view("analysis.w1", (h, d))
        self.b1 = view("analysis.b1", (h,))
        self.A2 = view("analysis.w2", (k, h))
        self.b2 = view("analysis.b2", (k,))
        self.S1 = view("synthesis.w1", (h, k))
        self.c1 = view("synthesis.b1", (h,))
        self.S2 = view("synthesis.w2", (d, h))
        self.c2 = view("synthesis.b2", (d,))
        self.Ha = view("hyper_analysis.w", (j, k))
        self.ba = view("hyper_analysis.b", (j,))
        self.Hs = view("hyper_synthesis.w", (g, j))
        self.bs = view("hyper_synthesis.b", (g,))
        self.Ew = view("entropy_params.w", (g, g))
        self.be = view("entropy_params.b", (g,))
        self.prior_loc = view("entropy_params.prior_loc", (j,))
        self.prior_log_scale = view("entropy_params.prior_log_scale", (j,))


def init_params(config: ToyCodecConfig, seed: int) -> FlatParams:
    """Deterministic initialization: fan-in scaled normals, biases zero.

    The synthesis output bias starts at 0.5 to center reconstructions of
    [0, 1] data; prior loc/log-scale start at 0 (unit logistic scale).
    """
    layers = build_layers(config)
    n = sum(s.len for s in layers)
    values = np.zeros(n, dtype=np.float64)
    params = FlatParams(values, layers)
    rng = spawn(seed, "init")
    fan_in = {
        "analysis.w1": config.input_dim,
        "analysis.w2": config.hidden_dim,
        "synthesis.w1": config.latent_dim,
        "synthesis.w2": config.hidden_dim,
        "hyper_analysis.w": config.latent_dim,
        "hyper_synthesis.w": config.hyper_dim,
        "entropy_params.w": 2 * config.latent_dim,
    }
    for span in layers:
        base = span.name.split(":", 1)[0]
        if base in fan_in:
            scale = 1.0 / np.sqrt(fan_in[base])
            values[span.slice] = rng.standard_normal(span.len) * scale
    values[params.layer("synthesis.b2").slice] = 0.5
    return params


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

# Binomial low-pass taps; fixed so batches depend only on (B, D, seed).
_SMOOTH_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def generate_batch(batch_size: int, input_dim: int, seed: int) -> Batch:
    """Smoothed random fields, min-max normalized to [0, 1] per sample."""
    if batch_size < 1 or input_dim < 1:
        raise ValueError("batch_size and input_dim must be >= 1")
    rng = spawn(seed, "batch")
    noise = rng.standard_normal((batch_size, input_dim))
    pad = _SMOOTH_KERNEL.size // 2
    padded = np.pad(noise, ((0, 0), (pad, pad)), mode="reflect")
    smooth = np.zeros_like(noise)
    for i, w in enumerate(_SMOOTH_KERNEL):
        smooth += w * padded[:, i : i + input_dim]
    lo = smooth.min(axis=1, keepdims=True)
    hi = smooth.max(axis=1, keepdims=True)
    span = hi - lo
    out = np.where(span > 0, (smooth - lo) / np.where(span > 0, span, 1.0), 0.0)
    return Batch(inputs=out, seed=int(seed))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values after {stage}")


def _quantize(y: np.ndarray, quant: str, rng: np.random.Generator | None):
    if quant == QUANT_ROUND:
        return np.round(y), None
    if quant == QUANT_NOISE:
        u = rng.uniform(-0.5, 0.5, size=y.shape)
        return y + u, u
    raise ValueError(f"unknown quantization mode {quant!r}")


def _gaussian_bin_prob(v, mu, sigma):
    """P(v falls in its unit bin) under N(mu, sigma^2), with derivatives' pieces."""
    hi = (v + 0.5 - mu) / sigma
    lo = (v - 0.5 - mu) / sigma
    p = ndtr(hi) - ndtr(lo)
    return p, hi, lo


def _logistic_bin_prob(v, loc, scale):
    hi = (v + 0.5 - loc) / scale
    lo = (v - 0.5 - loc) / scale
    f_hi = expit(hi)
    f_lo = expit(lo)
    return f_hi - f_lo, hi, lo, f_hi, f_lo


def _bits(p):
    return -np.log2(np.maximum(p, PROB_FLOOR))


class _ForwardTrace:
    """Intermediates from one forward pass, kept for the backward sweep."""

    __slots__ = (
        "x", "t1", "y", "y_hat", "u_y", "z", "z_hat", "u_z", "h", "mu", "log_sigma",
        "sigma", "py", "py_hi", "py_lo", "pz", "pz_hi", "pz_lo", "pz_fhi", "pz_flo",
        "prior_scale", "t2", "x_hat", "breakdown",
    )


def _forward(params: FlatParams, config: ToyCodecConfig, batch: Batch,
             noise_seed: int, quant: str) -> _ForwardTrace:
    net = _Net(params, config)
    x = np.asarray(batch.inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"batch shape {x.shape} does not match input_dim {config.input_dim}")
    rng = spawn(noise_seed, "quant-noise") if quant == QUANT_NOISE else None

    tr = _ForwardTrace()
    tr.x = x
    a1 = x @ net.A1.T + net.b1
    tr.t1 = np.tanh(a1)
    tr.y = tr.t1 @ net.A2.T + net.b2
    _check_finite(tr.y, "analysis")
    tr.y_hat, tr.u_y = _quantize(tr.y, quant, rng)

    tr.z = tr.y @ net.Ha.T + net.ba
    _check_finite(tr.z, "hyper_analysis")
    tr.z_hat, tr.u_z = _quantize(tr.z, quant, rng)

    tr.h = tr.z_hat @ net.Hs.T + net.bs
    g = tr.h @ net.Ew.T + net.be
    _check_finite(g, "entropy_params")
    k = config.latent_dim
    tr.mu = g[:, :k]
    tr.log_sigma = g[:, k:]
    with np.errstate(over="ignore"):  # overflow becomes inf and fails the check below
        tr.sigma = np.exp(tr.log_sigma)
    _check_finite(tr.sigma, "entropy_params")

    tr.py, tr.py_hi, tr.py_lo = _gaussian_bin_prob(tr.y_hat, tr.mu, tr.sigma)
    tr.prior_scale = np.exp(net.prior_log_scale)
    tr.pz, tr.pz_hi, tr.pz_lo, tr.pz_fhi, tr.pz_flo = _logistic_bin_prob(
        tr.z_hat, net.prior_loc, tr.prior_scale
    )

    s1 = tr.y_hat @ net.S1.T + net.c1
    tr.t2 = np.tanh(s1)
    tr.x_hat = tr.t2 @ net.S2.T + net.c2
    _check_finite(tr.x_hat, "synthesis")

    b = x.shape[0]
    d = config.input_dim
    distortion = float(np.mean((x - tr.x_hat) ** 2))
    rate_y = float(_bits(tr.py).sum() / (b * d))
    rate_z = float(_bits(tr.pz).sum() / (b * d))
    total = config.rd_lambda * config.distortion_scale * distortion + rate_y + rate_z
    tr.breakdown = LossBreakdown(total=total, distortion=distortion, rate_y=rate_y, rate_z=rate_z)
    return tr


def forward_loss(params: FlatParams, config: ToyCodecConfig, batch: Batch,
                 noise_seed: int = 0, quant: str = QUANT_NOISE,
                 return_latents: bool = False):
    """Rate-distortion loss of the batch; optionally also the cached latents."""
    tr = _forward(params, config, batch, noise_seed, quant)
    if not return_latents:
        return tr.breakdown
    cache = CachedLatents(
        y=tr.y.copy(),
        y_hat=tr.y_hat.copy(),
        z_noise=None if tr.u_z is None else tr.u_z.copy(),
        quant=quant,
        rate_y=tr.breakdown.rate_y,
        rate_z=tr.breakdown.rate_z,
    )
    return tr.breakdown, cache


def loss_and_grad(params: FlatParams, config: ToyCodecConfig, batch: Batch,
                  noise_seed: int = 0) -> tuple[LossBreakdown, np.ndarray]:
    """Training-mode loss and its exact gradient w.r.t. every parameter.

    The additive quantization noise is a fixed function of ``noise_seed``, so
    the loss is a smooth deterministic function of the parameters and the
    returned gradient is the exact derivative of that function.
    """
    tr = _forward(params, config, batch, noise_seed, QUANT_NOISE)
    net = _Net(params, config)
    x = tr.x
    b, d = x.shape
    lam = config.rd_lambda * config.distortion_scale

    grad = np.zeros(params.n, dtype=np.float64)
    gnet = _Net(FlatParams(grad, params.layers), config)

    # distortion -> synthesis
    dx_hat = lam * 2.0 * (tr.x_hat - x) / (b * d)
    gnet.S2 += dx_hat.T @ tr.t2
    gnet.c2 += dx_hat.sum(axis=0)
    dt2 = dx_hat @ net.S2
    ds1 = dt2 * (1.0 - tr.t2**2)
    gnet.S1 += ds1.T @ tr.y_hat
    gnet.c1 += ds1.sum(axis=0)
    dy_hat = ds1 @ net.S1

    # rate of the latent (Gaussian conditional)
    coeff = 1.0 / (b * d)
    live_y = tr.py > PROB_FLOOR
    dLdp_y = np.where(live_y, -coeff / (np.maximum(tr.py, PROB_FLOOR) * _LN2), 0.0)
    phi_hi = _INV_SQRT_2PI * np.exp(-0.5 * tr.py_hi**2)
    phi_lo = _INV_SQRT_2PI * np.exp(-0.5 * tr.py_lo**2)
    dp_dv = (phi_hi - phi_lo) / tr.sigma
    dp_dmu = -dp_dv
    dp_dsigma = -(phi_hi * tr.py_hi - phi_lo * tr.py_lo) / tr.sigma
    dy_hat = dy_hat + dLdp_y * dp_dv
    dmu = dLdp_y * dp_dmu
    dlog_sigma = dLdp_y * dp_dsigma * tr.sigma
    dg = np.concatenate([dmu, dlog_sigma], axis=1)

    # entropy parameter network and hyper synthesis
    gnet.Ew += dg.T @ tr.h
    gnet.be += dg.sum(axis=0)
    dh = dg @ net.Ew
    gnet.Hs += dh.T @ tr.z_hat
    gnet.bs += dh.sum(axis=0)
    dz_hat = dh @ net.Hs

    # rate of the hyper latent (logistic factorized prior)
    live_z = tr.pz > PROB_FLOOR
    dLdp_z = np.where(live_z, -coeff / (np.maximum(tr.pz, PROB_FLOOR) * _LN2), 0.0)
    f_hi = tr.pz_fhi * (1.0 - tr.pz_fhi)
    f_lo = tr.pz_flo * (1.0 - tr.pz_flo)
    dp_dvz = (f_hi - f_lo) / tr.prior_scale
    dp_dloc = -dp_dvz
    dp_dscale = -(f_hi * tr.pz_hi - f_lo * tr.pz_lo) / tr.prior_scale
    dz_hat = dz_hat + dLdp_z * dp_dvz
    gnet.prior_loc += (dLdp_z * dp_dloc).sum(axis=0)
    gnet.prior_log_scale += (dLdp_z * dp_dscale).sum(axis=0) * tr.prior_scale

    # hyper analysis (z_hat = z + const noise)
    dz = dz_hat
    gnet.Ha += dz.T @ tr.y
    gnet.ba += dz.sum(axis=0)
    dy = dy_hat + dz @ net.Ha  # y_hat = y + const noise, plus the hyper path

    # analysis
    gnet.A2 += dy.T @ tr.t1
    gnet.b2 += dy.sum(axis=0)
    dt1 = dy @ net.A2
    da1 = dt1 * (1.0 - tr.t1**2)
    gnet.A1 += da1.T @ x
    gnet.b1 += da1.sum(axis=0)

    _check_finite(grad, "gradient")
    return tr.breakdown, grad


def backward(params: FlatParams, config: ToyCodecConfig, batch: Batch,
             noise_seed: int = 0) -> np.ndarray:
    """Gradient of the training-mode total loss (same noise realization as forward)."""
    return loss_and_grad(params, config, batch, noise_seed)[1]


def eval_rate_only(params: FlatParams, config: ToyCodecConfig,
                   cache: CachedLatents) -> float:
    """rate_y + rate_z recomputed from cached latents under current entropy-side weights.

    Only the entropy path (hyper analysis, hyper synthesis, entropy parameters,
    factorized prior) is evaluated; analysis and synthesis layers are never read.
    """
    if cache is None:
        raise ValueError("missing latent cache")
    net = _Net(params, config)
    y, y_hat = cache.y, cache.y_hat
    z = y @ net.Ha.T + net.ba
    if cache.quant == QUANT_ROUND:
        z_hat = np.round(z)
    else:
        if cache.z_noise is None:
            raise ValueError("missing latent cache: no stored quantization noise")
        z_hat = z + cache.z_noise
    h = z_hat @ net.Hs.T + net.bs
    g = h @ net.Ew.T + net.be
    k = config.latent_dim
    mu, log_sigma = g[:, :k], g[:, k:]
    with np.errstate(over="ignore"):  # overflow becomes inf and fails the check below
        sigma = np.exp(log_sigma)
    _check_finite(sigma, "entropy_params")
    py, _, _ = _gaussian_bin_prob(y_hat, mu, sigma)
    scale = np.exp(net.prior_log_scale)
    pz = _logistic_bin_prob(z_hat, net.prior_loc, scale)[0]
    b, d = y.shape[0], config.input_dim
    return float(_bits(py).sum() / (b * d) + _bits(pz).sum() / (b * d))
