"""Numeric property suite behind ``fedsar verify``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from fedsar import aggregation
from fedsar import model as nn
from fedsar.harness.contraction import random_spd, verify_contraction
from fedsar.numerics import dwt2_haar, idwt2_haar, sample_speckle

# Finite differences cannot resolve gradients much below sqrt(machine eps)
# times the loss scale, so tiny components are compared absolutely.
GRAD_FLOOR = 1e-6


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def haar_matrix_1d(n: int) -> np.ndarray:
    """One analysis level as an explicit ``n x n`` matrix: sums then differences."""
    m = np.zeros((n, n))
    s = 1.0 / np.sqrt(2.0)
    for i in range(n // 2):
        m[i, 2 * i] = m[i, 2 * i + 1] = s
        m[n // 2 + i, 2 * i] = s
        m[n // 2 + i, 2 * i + 1] = -s
    return m


def brute_force_level(grid: np.ndarray) -> np.ndarray:
    """Packed single-level coefficients via ``kron(A, A) vec(X)``."""
    h, w = grid.shape
    op = np.kron(haar_matrix_1d(h), haar_matrix_1d(w))
    return (op @ grid.ravel()).reshape(h, w)


def relative_gradient_error(analytic, numeric, floor: float = GRAD_FLOOR) -> np.ndarray:
    a = np.abs(np.asarray(analytic))
    n = np.abs(np.asarray(numeric))
    return np.abs(np.asarray(analytic) - np.asarray(numeric)) / np.maximum(np.maximum(a, n), floor)


def finite_difference_gradient(params: nn.ModelParams, x, y, step: float = 1e-5, coords=None) -> np.ndarray:
    coords = np.arange(params.flat.size) if coords is None else np.asarray(coords)
    out = np.empty(coords.size)
    for k, i in enumerate(coords):
        plus = params.flat.copy()
        plus[i] += step
        minus = params.flat.copy()
        minus[i] -= step
        lp, _ = nn.backward(nn.ModelParams(plus, params.arch), x, y)
        lm, _ = nn.backward(nn.ModelParams(minus, params.arch), x, y)
        out[k] = (lp - lm) / (2.0 * step)
    return out


def check_wavelet(trials: int = 100) -> Check:
    rng = np.random.default_rng(11)
    worst_rec = worst_parseval = 0.0
    for _ in range(trials):
        x = rng.normal(size=(32, 32))
        pyr = dwt2_haar(x, 3)
        worst_rec = max(worst_rec, float(np.abs(idwt2_haar(pyr) - x).max()))
        worst_parseval = max(worst_parseval, abs(float((pyr.packed ** 2).sum() / (x ** 2).sum()) - 1.0))
    x = rng.normal(size=(32, 32))
    worst_oracle = float(np.abs(dwt2_haar(x, 1).packed - brute_force_level(x)).max())
    ok = worst_rec < 1e-9 and worst_parseval < 1e-9 and worst_oracle < 1e-9
    return Check("wavelet", ok, f"reconstruction {worst_rec:.2e}, parseval {worst_parseval:.2e}, "
                                f"matrix oracle {worst_oracle:.2e}")


def check_speckle(draws: int = 1_000_000) -> Check:
    rows = []
    ok = True
    side = int(np.ceil(np.sqrt(draws)))
    for i, looks in enumerate((1.0, 2.0, 4.0, 8.0)):
        g = sample_speckle(side, side, looks, np.random.default_rng(100 + i)).ravel()[:draws]
        dm, dv = abs(g.mean() - 1.0), abs(g.var() - 1.0 / looks)
        ok &= dm < 5e-3 and dv < 5e-2 / looks
        rows.append(f"L={looks:g}: |dmean|={dm:.1e} |dvar|={dv:.1e}")
    return Check("speckle moments", bool(ok), "; ".join(rows))


def check_gradient() -> Check:
    rng = np.random.default_rng(5)
    arch = nn.Architecture(num_classes=3, height=8, width=8)
    params = nn.init_params(arch, rng)
    params.flat += rng.normal(0.0, 0.1, params.flat.size)
    x = rng.gamma(2.0, 0.5, size=(4, 8, 8))
    y = np.array([0, 1, 2, 1])
    _, grad = nn.backward(params, x, y)
    err = relative_gradient_error(grad, finite_difference_gradient(params, x, y)).max()
    return Check("gradient", bool(err < 1e-4), f"max relative error {err:.2e} over {grad.size} parameters")


def check_aggregators(instances: int = 50) -> Check:
    rng = np.random.default_rng(3)
    worst_affine = 0.0
    ok = True
    for _ in range(instances):
        n, d, f = int(rng.integers(4, 8)), int(rng.integers(1, 6)), 1
        stack = rng.normal(size=(n, d))
        ups = [aggregation.ClientUpdate(i, stack[i], int(rng.integers(1, 50))) for i in range(n)]
        # brute-force Krum
        dist = ((stack[:, None] - stack[None]) ** 2).sum(-1)
        scores = [np.sort(np.delete(dist[i], i))[:n - f - 2].sum() for i in range(n)]
        ok &= np.array_equal(aggregation.krum(ups, f), stack[int(np.argmin(scores))])
        med = np.array([np.sort(stack[:, j])[n // 2] if n % 2 else
                        0.5 * (np.sort(stack[:, j])[n // 2 - 1] + np.sort(stack[:, j])[n // 2]) for j in range(d)])
        ok &= np.array_equal(aggregation.coordinate_median(ups), med)
        c = rng.normal(size=d)
        shifted = [aggregation.ClientUpdate(u.client_id, u.params + c, u.num_samples) for u in ups]
        worst_affine = max(worst_affine, float(np.abs(aggregation.fedavg(shifted) - (aggregation.fedavg(ups) + c)).max()))
    ok &= worst_affine < 1e-9
    return Check("aggregators", bool(ok), f"{instances} instances, affine error {worst_affine:.1e}")


def check_contraction(matrices: int = 10) -> Check:
    ident = verify_contraction(0.25, np.ones((3, 4)), np.eye(4), 10, theta0=np.zeros(4) + 3.0)
    ok = ident.passed and all(abs(r - 0.5625) < 1e-12 for r in ident.ratios)
    rng = np.random.default_rng(8)
    worst_margin = -np.inf
    for _ in range(matrices):
        A = random_spd(6, rng)
        A = 0.5 * (A + A.T)
        eta = 1.0 / (4.0 * np.linalg.eigvalsh(A)[-1])
        rep = verify_contraction(eta, rng.normal(size=(5, 6)), A, 25, theta0=rng.normal(size=6) * 5)
        ok &= rep.passed
        worst_margin = max(worst_margin, max(rep.ratios) - rep.rho)
    return Check("contraction", bool(ok), f"identity ratio {ident.ratios[0]:.6f}, "
                                          f"worst (ratio - rho) {worst_margin:.3e}")


def run_all(quick: bool = False) -> list[Check]:
    checks = [
        lambda: check_wavelet(20 if quick else 100),
        check_speckle,
        check_gradient,
        lambda: check_aggregators(10 if quick else 50),
        check_contraction,
    ]
    out = []
    for fn in checks:
        t = time.perf_counter()
        c = fn()
        c.seconds = time.perf_counter() - t
        out.append(c)
    return out
