"""Reverse-time CTMC of the masking process: rates, hazards and simulators.

Reverse-time rates are returned as nonnegative magnitudes; the forward-time
sign convention would make them negative.
"""
from __future__ import annotations

import math

import numpy as np

from .schedules import NoiseSchedule, ScheduleError, all_masked, sample_tokens
from .targets import DataDistribution, Denoiser


def forward_rate(t: float, schedule: NoiseSchedule) -> float:
    """Masking rate -alpha'(t)/alpha(t) of the forward chain."""
    a = schedule.alpha(t)
    if a <= 0.0:
        raise ScheduleError(f"alpha({t}) = 0: forward rate is singular")
    return -schedule.dalpha(t) / a


def unmask_hazard(t: float, schedule: NoiseSchedule) -> float:
    """Per-coordinate reverse-time unmasking hazard |alpha'(t)| / (1 - alpha(t))."""
    a = schedule.alpha(t)
    if a >= 1.0:
        raise ScheduleError(f"alpha({t}) = 1: reverse rate is singular")
    return abs(schedule.dalpha(t)) / (1.0 - a)


def reverse_rate_marginal(x_t, d: int, v: int, t: float, schedule: NoiseSchedule,
                          denoiser: Denoiser) -> float:
    """Rate of x_t^d: mask -> v, via the posterior-marginalised form."""
    x_t = np.asarray(x_t)
    if x_t[d] != denoiser.space.mask_id:
        return 0.0
    return unmask_hazard(t, schedule) * float(denoiser.predict(x_t)[d, v])


def reverse_rate_ratio(x_t, d: int, v: int, t: float, schedule: NoiseSchedule,
                       q0: DataDistribution) -> float:
    """Same rate via the forward-rate times likelihood-ratio form.

    Enumerates the support directly: the posterior over clean sequences is
    built from forward-process likelihoods, not from the oracle denoiser.
    """
    space = q0.space
    x_t = np.asarray(x_t)
    if x_t[d] != space.mask_id:
        return 0.0
    a = schedule.alpha(t)
    if a >= 1.0:
        raise ScheduleError(f"alpha({t}) = 1: reverse rate is singular")
    x_s = x_t.copy()
    x_s[d] = v

    def forward_lik(x, x0):
        masked = x == space.mask_id
        if np.any(~masked & (x != x0)):
            return 0.0
        n_masked = int(masked.sum())
        return a ** (len(x) - n_masked) * (1.0 - a) ** n_masked

    lik_t = np.array([forward_lik(x_t, x0) for x0 in q0.support])
    evidence = float(lik_t @ q0.probs)
    if evidence == 0.0:
        raise ScheduleError("x_t has zero probability under the forward process")
    post = lik_t * q0.probs / evidence
    total = 0.0
    for x0, w, l_t in zip(q0.support, post, lik_t):
        if w == 0.0:
            continue
        total += forward_lik(x_s, x0) / l_t * w
    return forward_rate(t, schedule) * total


def cumulative_hazard(s: float, t: float, schedule: NoiseSchedule) -> float:
    """Integrated unmasking hazard over [s, t]: log((1 - alpha_t) / (1 - alpha_s)).

    Infinite when alpha_s = 1, i.e. no coordinate survives masked down to s.
    """
    if not 0.0 <= s <= t <= 1.0:
        raise ScheduleError(f"need 0 <= s <= t <= 1, got s={s}, t={t}")
    a_s, a_t = schedule.alpha(s), schedule.alpha(t)
    if a_s >= 1.0:
        return math.inf
    return math.log((1.0 - a_t) / (1.0 - a_s))


def next_event_time(t, n_masked, schedule: NoiseSchedule, e) -> np.ndarray:
    """Solve n_masked * hazard(s, t) = e for s (inverse-transform sampling).

    Returns 0 where the solution would fall at or below the absorbing endpoint.
    """
    t = np.asarray(t, dtype=float)
    one_minus = (1.0 - schedule.alpha(t)) * np.exp(-np.asarray(e) / np.maximum(n_masked, 1))
    s = schedule.time_of_alpha(1.0 - one_minus)
    return np.clip(s, 0.0, t)


def gillespie_sample(denoiser: Denoiser, D: int, schedule: NoiseSchedule,
                     rng: np.random.Generator, n: int | None = None,
                     return_times: bool = False):
    """Exact event-driven simulation of the reverse chain from the all-mask state.

    Each event unmasks one uniformly chosen masked coordinate with a token
    drawn from the denoiser at the current state. Trajectories in a batch are
    independent; since every trajectory has exactly D events they advance in
    lockstep over events, not over time.
    """
    space = denoiser.space
    batch = 1 if n is None else n
    x = all_masked(space, D, batch)
    t = np.ones(batch)
    times = np.zeros((batch, D))
    rows = np.arange(batch)
    for k in range(D):
        n_masked = D - k
        t = next_event_time(t, n_masked, schedule, rng.exponential(size=batch))
        times[:, k] = t
        masked = x == space.mask_id
        # uniform pick among masked coordinates: rank-th masked position
        rank = np.minimum((rng.random(batch) * n_masked).astype(np.int64), n_masked - 1)
        pos = np.argmax(np.cumsum(masked, axis=1) > rank[:, None], axis=1)
        probs = denoiser.predict(x)[rows, pos]
        x[rows, pos] = sample_tokens(probs, rng.random(batch))
    out = x[0] if n is None else x
    if return_times:
        return out, (times[0] if n is None else times)
    return out


def tau_leaping_step(x_t, t: float, s: float, schedule: NoiseSchedule, denoiser: Denoiser,
                     rng: np.random.Generator) -> np.ndarray:
    """One first-order leap from t to s with the denoiser frozen at x_t.

    Masked coordinates unmask independently with probability
    (alpha_s - alpha_t) / (1 - alpha_t). Consumes two uniform arrays of the
    batch shape regardless of the state.
    """
    if not s < t:
        raise ScheduleError("tau-leaping needs s < t")
    x_t = np.asarray(x_t, dtype=np.int64)
    a_t, a_s = schedule.alpha(t), schedule.alpha(s)
    if a_t >= 1.0:
        raise ScheduleError("alpha_t = 1")
    p_unmask = (a_s - a_t) / (1.0 - a_t)
    probs = denoiser.predict(x_t)
    u = rng.random(x_t.shape)
    u_tok = rng.random(x_t.shape)
    masked = x_t == denoiser.space.mask_id
    return np.where(masked & (u < p_unmask), sample_tokens(probs, u_tok), x_t)
