"""Backdoor triggers, shard poisoning and attack schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from fedsar.datasim import I_MAX, ChipSet
from fedsar.errors import ConfigurationError, ContractViolation
from fedsar.numerics import RngStream, _as_generator, dwt2_haar, idwt2_haar, WaveletPyramid

TRIGGER_LEVELS = 3
MODES = ("spatial-patch", "spectral-LL")
SCHEDULES = ("one-shot", "persistent", "adaptive")


@dataclass(frozen=True)
class TriggerPattern:
    mode: str = "spectral-LL"
    location: tuple[int, int] = (0, 0)
    amplitude: float = 0.8
    patch: tuple = ((1.0, 1.0, 1.0), (1.0, 1.0, 1.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown trigger mode {self.mode!r}; expected one of {MODES}")
        if self.amplitude < 0:
            raise ConfigurationError(f"trigger amplitude must be >= 0, got {self.amplitude}")

    @property
    def patch_array(self) -> np.ndarray:
        return np.asarray(self.patch, dtype=np.float64)


def _ll_anchor(trigger: TriggerPattern, shape: tuple[int, int]) -> tuple[int, int]:
    """Top-left LL index of the 3x3 block nearest the trigger location."""
    ph, pw = trigger.patch_array.shape
    lh, lw = shape[0] >> TRIGGER_LEVELS, shape[1] >> TRIGGER_LEVELS
    if lh < ph or lw < pw:
        raise ContractViolation(f"LL band {lh}x{lw} is smaller than the {ph}x{pw} trigger")
    step = 2**TRIGGER_LEVELS
    r = min(max(int(round(trigger.location[0] / step)), 0), lh - ph)
    c = min(max(int(round(trigger.location[1] / step)), 0), lw - pw)
    return r, c


def trigger_delta(trigger: TriggerPattern, shape: tuple[int, int]) -> np.ndarray:
    """Additive field the trigger places on a chip, before clipping."""
    patch = trigger.amplitude * I_MAX * trigger.patch_array
    ph, pw = patch.shape
    r, c = trigger.location
    if trigger.mode == "spatial-patch":
        if r < 0 or c < 0 or r + ph > shape[0] or c + pw > shape[1]:
            raise ContractViolation(f"trigger at {trigger.location} does not fit a {shape} chip")
        delta = np.zeros(shape)
        delta[r:r + ph, c:c + pw] = patch
        return delta
    if r < 0 or c < 0 or r >= shape[0] or c >= shape[1]:
        raise ContractViolation(f"trigger location {trigger.location} outside a {shape} chip")
    coef = np.zeros(shape)
    ar, ac = _ll_anchor(trigger, shape)
    coef[ar:ar + ph, ac:ac + pw] = patch
    return idwt2_haar(WaveletPyramid(TRIGGER_LEVELS, coef))


def embed_trigger(image, trigger: TriggerPattern) -> np.ndarray:
    """Add the trigger to one chip (or a stack of chips) and clip."""
    img = np.asarray(image, dtype=np.float64)
    delta = trigger_delta(trigger, img.shape[-2:])
    return np.clip(img + delta, 0.0, I_MAX)


def poison_shard(shard: ChipSet, ratio: float, trigger: TriggerPattern, target: int,
                 rng) -> tuple[ChipSet, np.ndarray]:
    """Trigger and relabel ``floor(ratio * n)`` chips, preferring non-target ones.

    Returns the poisoned copy and the sorted indices that were changed.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError(f"poisoning ratio must lie in [0, 1], got {ratio}")
    n = len(shard)
    count = int(math.floor(ratio * n + 1e-12))
    out = shard.copy()
    if count == 0:
        return out, np.zeros(0, dtype=np.int64)
    gen = _as_generator(rng)
    others = np.flatnonzero(shard.labels != target)
    if others.size >= count:
        chosen = gen.choice(others, size=count, replace=False)
    else:
        rest = np.flatnonzero(shard.labels == target)
        chosen = np.concatenate([others, gen.choice(rest, size=count - others.size, replace=False)])
    chosen = np.sort(chosen)
    out.images[chosen] = embed_trigger(shard.images[chosen], trigger)
    out.labels[chosen] = target
    return out, chosen


@dataclass(frozen=True)
class AttackPlan:
    malicious: tuple[int, ...] = ()
    ratio: float = 0.3
    target: int = 0
    schedule: str = "persistent"
    start_round: int = 1  # the single poisoning round for one-shot attacks
    trigger: TriggerPattern = field(default_factory=TriggerPattern)
    period: int = 20
    jitter: int = 1

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown attack schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigurationError(f"poisoning ratio must lie in [0, 1], got {self.ratio}")


def attack_schedule(plan: AttackPlan, round_index: int,
                    stream: RngStream | None = None) -> tuple[bool, float, TriggerPattern]:
    """Whether malicious clients poison this round, the strength, and the trigger."""
    if round_index < 1:
        raise ContractViolation(f"rounds are 1-based, got {round_index}")
    if plan.schedule == "one-shot":
        return round_index == plan.start_round, 1.0, plan.trigger
    if plan.schedule == "persistent":
        return True, 1.0, plan.trigger
    strength = 0.5 + 0.5 * math.sin(2.0 * math.pi * round_index / plan.period)
    stream = stream or RngStream(0, ("attack-jitter",))
    gen = stream.child(round_index).generator()
    dr, dc = (int(v) for v in gen.integers(-plan.jitter, plan.jitter + 1, size=2))
    r0, c0 = plan.trigger.location
    trig = replace(
        plan.trigger,
        location=(max(r0 + dr, 0), max(c0 + dc, 0)),
        amplitude=plan.trigger.amplitude * strength,
    )
    return True, strength, trig
