import itertools

import numpy as np
import pytest

from mdm_correct.schedules import NoiseSchedule


def brute_force_posterior(q0, x, t, schedule=NoiseSchedule()):
    """Per-position posterior by explicit Bayes over the support.

    Independent of the library path: weights each clean sequence by the
    forward-process likelihood of ``x`` at time ``t``.
    """
    a = schedule.alpha(t)
    mask = q0.space.mask_id
    w = []
    for x0 in q0.support:
        lik = 1.0
        for xd, x0d in zip(x, x0):
            if xd == mask:
                lik *= 1 - a
            elif xd == x0d:
                lik *= a
            else:
                lik = 0.0
        w.append(lik)
    w = np.array(w) * q0.probs
    w /= w.sum()
    out = np.zeros((q0.D, q0.V))
    for wk, x0 in zip(w, q0.support):
        out[np.arange(q0.D), x0] += wk
    return out


def all_partial_states(q0):
    """Every masked/unmasked pattern of every support element."""
    mask = q0.space.mask_id
    seen = set()
    for x0 in q0.support:
        for keep in itertools.product([0, 1], repeat=q0.D):
            x = tuple(int(v) if k else mask for v, k in zip(x0, keep))
            if x not in seen:
                seen.add(x)
                yield np.array(x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
