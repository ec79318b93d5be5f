"""Geometric-decay check of federated gradient descent on a quadratic
surrogate ``L_i(theta) = 0.5 (theta - a_i)^T A (theta - a_i)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedsar.errors import ConfigurationError, ContractViolation

TOLERANCE = 1e-6


@dataclass
class ContractionReport:
    ratios: list[float]
    rho: float
    eta: float
    smoothness: float
    dominance: float
    passed: bool


def contraction_factor(eta: float, smoothness: float, dominance: float) -> float:
    """``rho = 1 - 2 eta mu + 2 L eta^2 mu``."""
    return 1.0 - 2.0 * eta * dominance + 2.0 * smoothness * eta * eta * dominance


def _extreme_eigenvalues(curvature: np.ndarray) -> tuple[float, float]:
    if curvature.ndim != 2 or curvature.shape[0] != curvature.shape[1]:
        raise ContractViolation(f"curvature must be square, got {curvature.shape}")
    if not np.allclose(curvature, curvature.T, rtol=0, atol=1e-12):
        raise ContractViolation("curvature must be symmetric")
    eig = np.linalg.eigvalsh(curvature)
    if eig[0] <= 0:
        raise ContractViolation(f"curvature is not positive definite (min eigenvalue {eig[0]:.3g})")
    return float(eig[-1]), float(eig[0])


def verify_contraction(eta: float, targets, curvature, rounds: int, theta0=None) -> ContractionReport:
    """Run ``rounds`` of one-local-step, equal-weight federated averaging and
    compare each round's suboptimality ratio against ``rho``.

    ``targets`` is an ``(n_clients, d)`` array of per-client optima. The
    global optimum is their mean. If ``theta0`` is omitted the run starts at
    the origin.
    """
    A = np.asarray(curvature, dtype=np.float64)
    a = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    smooth, mu = _extreme_eigenvalues(A)
    if a.shape[1] != A.shape[0]:
        raise ContractViolation(f"targets have dimension {a.shape[1]}, curvature {A.shape[0]}")
    if not eta > 0:
        raise ConfigurationError(f"step size must be > 0, got {eta}")
    if eta >= 1.0 / (2.0 * smooth):
        raise ConfigurationError(
            f"step size {eta} violates eta < 1/(2L) = {1.0 / (2.0 * smooth):.6g}"
        )
    if rounds < 1:
        raise ConfigurationError(f"rounds must be >= 1, got {rounds}")

    optimum = a.mean(axis=0)
    theta = np.zeros(A.shape[0]) if theta0 is None else np.asarray(theta0, dtype=np.float64).copy()

    def excess(t):
        diff = t - optimum
        return 0.5 * float(diff @ A @ diff)

    rho = contraction_factor(eta, smooth, mu)
    ratios = []
    gap = excess(theta)
    for _ in range(rounds):
        local = [theta - eta * (A @ (theta - ai)) for ai in a]
        theta = np.mean(local, axis=0)
        new_gap = excess(theta)
        ratios.append(0.0 if gap == 0.0 else new_gap / gap)
        gap = new_gap
    passed = all(r <= rho + TOLERANCE for r in ratios)
    return ContractionReport(ratios, rho, float(eta), smooth, mu, passed)


def random_spd(dim: int, rng, condition: float = 10.0) -> np.ndarray:
    """Random SPD matrix with eigenvalues spread log-uniformly in [1, condition]."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    eig = np.exp(rng.uniform(0.0, np.log(condition), size=dim))
    eig[0], eig[-1] = 1.0, condition
    return (q * eig) @ q.T
