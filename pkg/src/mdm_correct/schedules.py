"""State space, noise/remask schedules and the absorbing forward process.

Sequences are plain integer numpy arrays. Data tokens live in ``[0, V)`` and
the mask token is stored as ``V`` (one past the data range). Batched
operations accept ``(D,)`` or ``(n, D)`` arrays.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

PROB_ATOL = 1e-9


class ScheduleError(ValueError):
    """Raised for out-of-domain schedule queries and invalid kernel arguments."""


@dataclass(frozen=True)
class StateSpace:
    vocab_size: int

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    def is_data(self, x) -> np.ndarray:
        x = np.asarray(x)
        return (x >= 0) & (x < self.vocab_size)

    def validate(self, x, allow_mask: bool = True) -> np.ndarray:
        """Return ``x`` as an int64 array after checking every entry."""
        x = np.asarray(x, dtype=np.int64)
        if x.ndim == 0 or x.shape[-1] < 1:
            raise ValueError("sequence must have length >= 1")
        ok = self.is_data(x)
        if allow_mask:
            ok |= x == self.mask_id
        if not ok.all():
            raise ValueError(f"sequence contains invalid tokens: {np.unique(x[~ok])}")
        return x


def all_masked(space: StateSpace, D: int, n: int | None = None) -> np.ndarray:
    shape = (D,) if n is None else (n, D)
    return np.full(shape, space.mask_id, dtype=np.int64)


def check_categorical(probs, atol: float = PROB_ATOL) -> np.ndarray:
    """Validate a categorical (or a stack of them along the last axis)."""
    p = np.asarray(probs, dtype=float)
    if (p < 0).any():
        raise ValueError("categorical has negative entries")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=atol, rtol=0):
        raise ValueError("categorical does not sum to 1")
    return p


# -- noise schedules ---------------------------------------------------------


class NoiseKind(str, enum.Enum):
    LINEAR = "linear"
    COSINE = "cosine"


@dataclass(frozen=True)
class NoiseSchedule:
    """Keep-probability alpha(t) with alpha(0) = 1 and alpha(1) = 0."""

    kind: NoiseKind = NoiseKind.LINEAR

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))

    def alpha(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind is NoiseKind.LINEAR:
            a = 1.0 - t
        else:
            a = np.where(t >= 1.0, 0.0, np.cos(0.5 * np.pi * t))
        return a if a.ndim else float(a)

    def dalpha(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind is NoiseKind.LINEAR:
            d = np.full_like(t, -1.0)
        else:
            d = -0.5 * np.pi * np.sin(0.5 * np.pi * t)
        return d if d.ndim else float(d)

    def time_of_alpha(self, a, tol: float = 1e-12):
        """Invert alpha: the time s with alpha(s) = a.

        Closed form for the linear schedule; vectorised bisection otherwise.
        """
        a = np.clip(np.asarray(a, dtype=float), 0.0, 1.0)
        if self.kind is NoiseKind.LINEAR:
            s = 1.0 - a
        else:
            lo = np.zeros_like(a)
            hi = np.ones_like(a)
            while np.max(hi - lo, initial=0.0) > tol:
                mid = 0.5 * (lo + hi)
                above = self.alpha(mid) > a
                lo = np.where(above, mid, lo)
                hi = np.where(above, hi, mid)
            s = 0.5 * (lo + hi)
        return s if s.ndim else float(s)


def eval_alpha(schedule: NoiseSchedule, t: float) -> tuple[float, float]:
    """Return ``(alpha(t), alpha'(t))``."""
    if not 0.0 <= t <= 1.0:
        raise ScheduleError(f"t must lie in [0, 1], got {t}")
    return schedule.alpha(t), schedule.dalpha(t)


def time_grid(T: int) -> list[tuple[int, float, float]]:
    """Steps in generation order as ``(i, t, s)`` with t = i/T, s = (i-1)/T."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return [(i, i / T, (i - 1) / T) for i in range(T, 0, -1)]


# -- remask schedules --------------------------------------------------------


class RemaskKind(str, enum.Enum):
    CONSTANT = "constant"
    CAPPED_CONSTANT = "capped_constant"
    ZERO_TAIL = "zero_tail"


@dataclass(frozen=True)
class RemaskSchedule:
    kind: RemaskKind = RemaskKind.CONSTANT
    eta: float = 0.0
    tail_off: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", RemaskKind(self.kind))
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be a probability, got {self.eta}")
        if self.tail_off < 0:
            raise ValueError("tail_off must be >= 0")


class Sigma(NamedTuple):
    value: float
    clamped: bool


def sigma_upper(alpha_t: float, alpha_s: float) -> float:
    """Largest sigma keeping every remasking-kernel branch a probability."""
    if alpha_t <= 0.0:
        return 1.0
    return min(1.0, (1.0 - alpha_s) / alpha_t)


def eval_sigma(schedule: RemaskSchedule, step_index: int, T: int,
               alpha_t: float, alpha_s: float) -> Sigma:
    """Remask probability for the ``step_index``-th step (1-based, generation order).

    The result is clamped into the valid range; ``clamped`` is set when a
    Constant schedule had to be cut down.
    """
    if alpha_s < alpha_t:
        raise ScheduleError("need alpha_s >= alpha_t")
    if not 1 <= step_index <= T:
        raise ScheduleError(f"step_index {step_index} outside [1, {T}]")
    upper = sigma_upper(alpha_t, alpha_s)
    if schedule.kind is RemaskKind.ZERO_TAIL and step_index > T - schedule.tail_off:
        return Sigma(0.0, False)
    sigma = min(schedule.eta, upper)
    clamped = schedule.kind is RemaskKind.CONSTANT and sigma < schedule.eta
    return Sigma(max(sigma, 0.0), clamped)


def remdm_branch_probs(alpha_t, alpha_s, sigma):
    """(unmask, stay-masked) probabilities for a masked coordinate under remasking.

    Broadcasts over array arguments.
    """
    if np.any(np.asarray(alpha_t) >= 1.0):
        raise ScheduleError("alpha_t = 1: reverse kernel undefined for a masked coordinate")
    up = alpha_s - (1.0 - sigma) * alpha_t
    keep = 1.0 - alpha_s - sigma * alpha_t
    # the numerators add up to 1 - alpha_t; dividing by their float sum keeps
    # the two branches summing to 1 even when 1 - alpha_t is tiny
    total = up + keep
    return up / total, keep / total


# -- forward process and oracle reverse kernel -------------------------------


def forward_sample(x0, t: float, schedule: NoiseSchedule, rng: np.random.Generator,
                   space: StateSpace) -> np.ndarray:
    """Mask each coordinate of ``x0`` independently with probability 1 - alpha(t)."""
    x0 = space.validate(x0, allow_mask=False)
    a, _ = eval_alpha(schedule, t)
    keep = rng.random(x0.shape) < a
    return np.where(keep, x0, space.mask_id)


def _kernel_frame(alpha_t, alpha_s, predicted, V: int):
    a_t = np.asarray(alpha_t, dtype=float)
    a_s = np.asarray(alpha_s, dtype=float)
    if np.any(a_s < a_t):
        raise ScheduleError("need alpha_s >= alpha_t")
    shape = np.broadcast_shapes(a_t.shape, a_s.shape, np.shape(predicted)[:-1])
    return a_t, a_s, np.zeros(shape + (V + 1,))


def reverse_kernel_prob(x_t_d: int, alpha_t, alpha_s, predicted,
                        space: StateSpace) -> np.ndarray:
    """Distribution of x_s^d given x_t^d over ``V + 1`` outcomes (mask last).

    ``alpha_t``, ``alpha_s`` and the leading axes of ``predicted`` broadcast;
    the result has one trailing axis of length ``V + 1``.
    """
    V = space.vocab_size
    a_t, a_s, out = _kernel_frame(alpha_t, alpha_s, predicted, V)
    if x_t_d != space.mask_id:
        out[..., x_t_d] = 1.0
        return out
    if np.any(a_t >= 1.0):
        raise ScheduleError("alpha_t = 1 with a masked coordinate")
    p = check_categorical(predicted)
    up, keep = a_s - a_t, 1.0 - a_s
    out[..., :V] = (up / (up + keep))[..., None] * p
    out[..., V] = keep / (up + keep)
    return out


def remdm_kernel_prob(x_t_d: int, alpha_t, alpha_s, sigma, predicted,
                      space: StateSpace) -> np.ndarray:
    """Remasking generalisation of :func:`reverse_kernel_prob` (same broadcasting)."""
    V = space.vocab_size
    a_t, a_s, out = _kernel_frame(alpha_t, alpha_s, predicted, V)
    sig = np.asarray(sigma, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        upper = np.where(a_t <= 0.0, 1.0, np.minimum(1.0, (1.0 - a_s) / a_t))
    if np.any(sig < 0.0) or np.any(sig > upper + 1e-12):
        raise ScheduleError(f"sigma {sigma} outside the valid range")
    if x_t_d != space.mask_id:
        out[..., x_t_d] = 1.0 - sig
        out[..., V] = sig
        return out
    unmask, stay = remdm_branch_probs(a_t, a_s, sig)
    out[..., :V] = np.asarray(unmask)[..., None] * check_categorical(predicted)
    out[..., V] = stay
    return out


def sample_tokens(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from categoricals along the last axis using uniforms ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[..., None] * cdf[..., -1:] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def binomial_bound(p: float, n: int, k: float = 4.0) -> float:
    return k * math.sqrt(p * (1.0 - p) / n)
