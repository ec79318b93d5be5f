"""Numeric primitives: orthonormal 2-D Haar transform, Gamma speckle,
KL divergence, percentiles and seeded random streams.

Grids are plain ``float64`` numpy arrays of shape ``(height, width)``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from fedsar import kernels
from fedsar.errors import ConfigurationError, ContractViolation

KL_EPS = 1e-8


def as_grid(values) -> np.ndarray:
    grid = np.ascontiguousarray(values, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise ContractViolation(f"expected a non-empty 2-D grid, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ContractViolation("grid contains non-finite values")
    return grid


# --------------------------------------------------------------------------
# Random streams


def _stream_key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    raise ContractViolation(f"stream-id parts must be non-negative ints or strings, got {part!r}")


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    Streams with the same ``(seed, stream_id)`` replay the same sequence;
    distinct ids are spawned as independent children of the seed.

    >>> a = RngStream(7, ("client", 3)).generator().random()
    >>> b = RngStream(7, ("client", 3)).generator().random()
    >>> a == b
    True
    """

    seed: int
    stream_id: tuple = ()

    def generator(self) -> np.random.Generator:
        key = tuple(_stream_key(p) for p in self.stream_id)
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(parts))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise ContractViolation(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


# --------------------------------------------------------------------------
# Haar wavelets


@dataclass
class WaveletPyramid:
    """Level-``levels`` Haar coefficients packed into one grid.

    The packed grid has the source dimensions. At level ``j`` (1-based) the
    active block is the top-left ``(H/2^(j-1), W/2^(j-1))`` region, split
    into LL (top-left), HL (top-right), LH (bottom-left) and HH
    (bottom-right) quadrants; only the deepest LL survives.
    """

    levels: int
    packed: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.packed.shape

    def subband(self, level: int, name: str) -> np.ndarray:
        if not 1 <= level <= self.levels:
            raise ContractViolation(f"level {level} outside 1..{self.levels}")
        h, w = self.packed.shape
        n, m = h >> (level - 1), w >> (level - 1)
        hn, hm = n // 2, m // 2
        if name == "LL":
            if level != self.levels:
                raise ContractViolation("only the deepest level keeps an LL band")
            return self.packed[:hn, :hm]
        slices = {
            "HL": (slice(0, hn), slice(hm, m)),
            "LH": (slice(hn, n), slice(0, hm)),
            "HH": (slice(hn, n), slice(hm, m)),
        }
        if name not in slices:
            raise ContractViolation(f"unknown subband {name!r}")
        return self.packed[slices[name]]

    def ll_shape(self) -> tuple[int, int]:
        h, w = self.packed.shape
        return h >> self.levels, w >> self.levels

    def detail_mask(self) -> np.ndarray:
        """Boolean grid that is True at every detail (non-LL) coefficient."""
        mask = np.ones(self.packed.shape, dtype=bool)
        lh, lw = self.ll_shape()
        mask[:lh, :lw] = False
        return mask


def check_divisible(shape: tuple[int, int], levels: int) -> None:
    if levels < 1:
        raise ConfigurationError(f"decomposition level must be >= 1, got {levels}")
    step = 2**levels
    for name, size in zip(("height", "width"), shape):
        if size % step:
            raise ConfigurationError(
                f"{name} {size} is not divisible by 2^{levels}={step}"
            )


def dwt2_haar(source, levels: int) -> WaveletPyramid:
    """Orthonormal multi-level 2-D Haar analysis (Mallat layout)."""
    grid = as_grid(source)
    check_divisible(grid.shape, levels)
    packed = grid.copy()
    work = np.empty_like(packed)
    h, w = grid.shape
    for j in range(levels):
        n, m = h >> j, w >> j
        kernels.haar_fwd_level(packed, work, n, m)
        packed[:n, :m] = work[:n, :m]
    return WaveletPyramid(levels, packed)


def idwt2_haar(pyramid: WaveletPyramid) -> np.ndarray:
    """Exact inverse of :func:`dwt2_haar`."""
    packed = as_grid(pyramid.packed)
    check_divisible(packed.shape, pyramid.levels)
    out = packed.copy()
    work = np.empty_like(out)
    h, w = out.shape
    for j in reversed(range(pyramid.levels)):
        n, m = h >> j, w >> j
        kernels.haar_inv_level(out, work, n, m)
        out[:n, :m] = work[:n, :m]
    return out


# --------------------------------------------------------------------------
# Speckle, divergence, percentile


def sample_speckle(height: int, width: int, looks: float, rng) -> np.ndarray:
    """Unit-mean Gamma speckle field: shape ``looks``, scale ``1/looks``."""
    if not looks > 0:
        raise ConfigurationError(f"equivalent number of looks must be > 0, got {looks}")
    gen = _as_generator(rng)
    return gen.gamma(shape=looks, scale=1.0 / looks, size=(height, width))


def kl_divergence(p, q, eps: float = KL_EPS) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractViolation(f"probability vectors differ in shape: {p.shape} vs {q.shape}")
    return float(np.sum(p * np.log((p + eps) / (q + eps))))


def kl_divergence_rows(p, q, eps: float = KL_EPS) -> np.ndarray:
    """Row-wise KL divergence of two probability matrices."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2:
        raise ContractViolation(f"probability matrices differ in shape: {p.shape} vs {q.shape}")
    return np.sum(p * np.log((p + eps) / (q + eps)), axis=1)


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile, rank ``p/100 * (n-1)`` on sorted data."""
    data = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if data.size == 0:
        raise ContractViolation("percentile of an empty list")
    if not 0.0 <= p <= 100.0:
        raise ContractViolation(f"percentile must lie in [0, 100], got {p}")
    rank = p / 100.0 * (data.size - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, data.size - 1)
    frac = rank - lo
    return float(data[lo] + frac * (data[hi] - data[lo]))
