"""Server-side defense: spectral discrepancy masks over client updates,
speckle-aware adversarial samples, and health-based client weighting."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from fedsar import model as nn
from fedsar.datasim import I_MAX
from fedsar.errors import ConfigurationError, ContractViolation
from fedsar.numerics import (
    WaveletPyramid,
    _as_generator,
    dwt2_haar,
    idwt2_haar,
    kl_divergence_rows,
    percentile,
)

TAU_STEPS = (90.0, 95.0, 98.0)


@dataclass(frozen=True)
class DefenseParams:
    zeta: float = 1.5
    gamma: float = 1.0
    delta: float = 1.0
    xi: float = 0.05
    beta: float = 0.5
    levels: int = 3
    looks: float = 3.0
    tau_percentile: float = 95.0
    xi_floor: float = 0.05
    xi_cap: float = 0.15

    def __post_init__(self):
        if not self.zeta > 0:
            raise ConfigurationError(f"zeta must be > 0, got {self.zeta}")
        if self.gamma < 0 or self.delta < 0:
            raise ConfigurationError("gamma and delta must be >= 0")
        if not 0.0 <= self.xi <= 0.5:
            raise ConfigurationError(f"xi must lie in [0, 0.5], got {self.xi}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if self.levels < 1:
            raise ConfigurationError(f"wavelet levels must be >= 1, got {self.levels}")
        if not self.looks > 0:
            raise ConfigurationError(f"looks must be > 0, got {self.looks}")
        if not 0.0 <= self.xi_floor <= self.xi_cap <= 0.5:
            raise ConfigurationError("need 0 <= xi_floor <= xi_cap <= 0.5")
        if self.tau_percentile not in TAU_STEPS:
            raise ConfigurationError(f"tau_percentile must be one of {TAU_STEPS}, got {self.tau_percentile}")


# --------------------------------------------------------------------------
# Spectral inversion


def update_grid_indices(d: int, height: int, width: int) -> np.ndarray:
    """Parameter coordinates that fill an ``height x width`` grid, row-major."""
    cells = height * width
    if cells <= 0:
        raise ContractViolation("grid must have positive area")
    if d >= cells:
        stride = -(-d // cells)
        return np.arange(0, d, stride)[:cells]
    return np.arange(d)


def update_to_grid(delta, height: int, width: int) -> np.ndarray:
    """Pack a flat update into a grid; strided subsample or zero-pad."""
    delta = np.asarray(delta, dtype=np.float64).ravel()
    idx = update_grid_indices(delta.size, height, width)
    grid = np.zeros(height * width)
    grid[:idx.size] = delta[idx]
    return grid.reshape(height, width)


def energy_map(delta, levels: int, height: int = 32, width: int = 32) -> np.ndarray:
    """Squared Haar coefficients of the gridded update."""
    coef = dwt2_haar(update_to_grid(delta, height, width), levels).packed
    return coef * coef


def discrepancy(energies) -> np.ndarray:
    maps = [np.asarray(e, dtype=np.float64) for e in energies]
    if len(maps) < 2:
        raise ContractViolation(f"discrepancy needs at least 2 energy maps, got {len(maps)}")
    if any(m.shape != maps[0].shape for m in maps):
        raise ContractViolation("energy maps differ in shape")
    stack = np.stack(maps)
    return stack.max(axis=0) - stack.min(axis=0)


def threshold_mask(disc, zeta: float) -> np.ndarray:
    """1 where the discrepancy exceeds ``zeta`` times its mean, else 0."""
    if not zeta > 0:
        raise ConfigurationError(f"zeta must be > 0, got {zeta}")
    disc = np.asarray(disc, dtype=np.float64)
    return (disc > zeta * disc.mean()).astype(np.float64)


def spatialize_mask(mask, levels: int) -> np.ndarray:
    """Inverse Haar of the binary mask, rescaled to [0, 1].

    An all-zero inverse stays all-zero; a constant non-zero inverse maps to
    all ones.
    """
    field = idwt2_haar(WaveletPyramid(levels, np.asarray(mask, dtype=np.float64)))
    lo, hi = field.min(), field.max()
    if hi == lo:
        return np.zeros_like(field) if hi == 0 else np.ones_like(field)
    return (field - lo) / (hi - lo)


# --------------------------------------------------------------------------
# Adversarial samples


def generate_adversarial(images, params: DefenseParams, spatial_mask, rng,
                         proxy_amplitude: float = I_MAX) -> np.ndarray:
    """Speckle the chips and add the mask-shaped trigger proxy, then clip.

    Speckle is the centred Gamma factor ``1 + N`` with ``N = G - 1``.
    """
    x = np.asarray(images, dtype=np.float64)
    gen = _as_generator(rng)
    shape = x.shape
    speckle = gen.gamma(shape=params.looks, scale=1.0 / params.looks, size=shape)
    proxy = params.xi * proxy_amplitude * np.asarray(spatial_mask, dtype=np.float64)
    return np.clip(x * speckle + proxy, 0.0, I_MAX)


def composite_loss(params: nn.ModelParams, x, x_adv, y, beta: float) -> float:
    if beta < 0:
        raise ConfigurationError(f"beta must be >= 0, got {beta}")
    y = np.asarray(y, dtype=np.int64).ravel()
    rows = np.arange(y.size)
    clean = -np.mean(np.log(nn.forward(params, x)[rows, y]))
    if beta == 0:
        return float(clean)
    adv = -np.mean(np.log(nn.forward(params, x_adv)[rows, y]))
    return float(clean + beta * adv)


def composite_loss_and_grad(params: nn.ModelParams, x, x_adv, y_adv_labels, y, beta: float):
    """Clean cross-entropy plus ``beta`` times adversarial cross-entropy.

    ``x_adv`` may hold a different batch from ``x`` (the broadcast set), with
    its own labels. Returns ``(total, clean, adversarial, gradient)``.
    """
    clean, grad = nn.backward(params, x, y)
    if x_adv is None or beta == 0:
        return clean, clean, 0.0, grad
    adv, grad_adv = nn.backward(params, x_adv, y_adv_labels)
    return clean + beta * adv, clean, adv, grad + beta * grad_adv


# --------------------------------------------------------------------------
# Health scoring


def health_score(current, previous, probe_now, probe_prev, gamma: float, delta: float) -> float:
    """Update drift (L2) plus mean per-sample KL drift on the probe set."""
    cur = np.asarray(current, dtype=np.float64)
    prev = np.asarray(previous, dtype=np.float64)
    if cur.shape != prev.shape:
        raise ContractViolation("consecutive updates differ in length")
    drift = float(np.linalg.norm(cur - prev))
    kl = float(np.mean(kl_divergence_rows(probe_now, probe_prev)))
    return gamma * drift + delta * kl


@dataclass
class WeightResult:
    weights: dict[int, float]
    tau: float
    pruned: list[int]
    fallback: bool


def health_weights(scores: dict[int, float], gamma: float, tau_percentile: float) -> WeightResult:
    """``exp(-gamma * H)`` below the percentile threshold, 0 at or above it,
    normalized over clients in ascending id order."""
    if not scores:
        raise ContractViolation("no health scores to weight")
    ids = sorted(scores)
    values = [scores[i] for i in ids]
    tau = percentile(values, tau_percentile)
    raw = {i: (math.exp(-gamma * scores[i]) if scores[i] < tau else 0.0) for i in ids}
    pruned = [i for i in ids if raw[i] == 0.0]
    total = 0.0
    for i in ids:
        total += raw[i]
    if total == 0.0:
        return WeightResult({i: 1.0 / len(ids) for i in ids}, tau, pruned, True)
    return WeightResult({i: raw[i] / total for i in ids}, tau, pruned, False)


# --------------------------------------------------------------------------
# Parameter adaptation


@dataclass(frozen=True)
class RoundFeedback:
    pruned_fraction: float
    adv_loss_variance: float | None
    prev_adv_loss_variance: float | None


def adapt_params(params: DefenseParams, feedback: RoundFeedback) -> DefenseParams:
    """Deterministic closed-loop update of the threshold percentile, xi and zeta."""
    tau_p = params.tau_percentile
    if feedback.pruned_fraction > 0.5:
        pos = TAU_STEPS.index(tau_p)
        tau_p = TAU_STEPS[min(pos + 1, len(TAU_STEPS) - 1)]
    xi, zeta = params.xi, params.zeta
    rising = (
        feedback.adv_loss_variance is not None
        and feedback.prev_adv_loss_variance is not None
        and feedback.adv_loss_variance > feedback.prev_adv_loss_variance
    )
    if rising:
        xi = min(1.1 * xi, params.xi_cap)
        zeta = max(0.9 * zeta, 1.0)
    else:
        xi = max(0.95 * xi, params.xi_floor)
    return replace(params, tau_percentile=tau_p, xi=xi, zeta=zeta)
