"""Finite-support data distributions and their exact posterior denoiser.

Under an absorbing (masking) forward process the posterior over clean data
given a partially masked sequence is just the data distribution conditioned on
agreement at the unmasked coordinates; the keep-probabilities cancel, so the
oracle needs no time input.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol

import numpy as np

from .schedules import StateSpace

MAX_SUPPORT = 4096
_CHUNK_ELEMS = 4_000_000

Fallback = Literal["raise", "nearest"]


class InconsistentStateError(ValueError):
    """No support element agrees with the unmasked coordinates of a sequence."""


@dataclass(frozen=True, eq=False)
class DataDistribution:
    support: np.ndarray
    probs: np.ndarray
    space: StateSpace
    name: str = "table"
    _onehot: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        support = np.atleast_2d(np.asarray(self.support, dtype=np.int64))
        probs = np.asarray(self.probs, dtype=float)
        if support.shape[0] != probs.shape[0]:
            raise ValueError("support and probs have different lengths")
        if support.shape[0] > MAX_SUPPORT:
            raise ValueError(f"support size {support.shape[0]} exceeds {MAX_SUPPORT}")
        self.space.validate(support, allow_mask=False)
        if (probs <= 0).any():
            raise ValueError("support probabilities must be > 0")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        if len({tuple(r) for r in support}) != support.shape[0]:
            raise ValueError("support sequences must be pairwise distinct")
        support.setflags(write=False)
        probs.setflags(write=False)
        onehot = np.eye(self.space.vocab_size)[support]
        onehot.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "_onehot", onehot)

    @property
    def D(self) -> int:
        return self.support.shape[1]

    @property
    def V(self) -> int:
        return self.space.vocab_size

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(v) for v in row): float(p) for row, p in zip(self.support, self.probs)}

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.probs), size=n, p=self.probs)
        return self.support[idx]


# -- constructors ------------------------------------------------------------


def _uniform(rows, V: int, name: str) -> DataDistribution:
    rows = np.asarray(rows, dtype=np.int64)
    return DataDistribution(rows, np.full(len(rows), 1.0 / len(rows)), StateSpace(V), name)


def all_equal(D: int, V: int) -> DataDistribution:
    """Uniform over the V constant sequences."""
    _check_dims(D, V)
    return _uniform([[v] * D for v in range(V)], V, f"all_equal({D},{V})")


def parity(D: int) -> DataDistribution:
    """Uniform over binary sequences with an even number of ones."""
    _check_dims(D, 2)
    rows = [r for r in itertools.product(range(2), repeat=D) if sum(r) % 2 == 0]
    return _uniform(rows, 2, f"parity({D})")


def product_uniform(D: int, V: int) -> DataDistribution:
    _check_dims(D, V)
    return _uniform(list(itertools.product(range(V), repeat=D)), V, f"product_uniform({D},{V})")


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    V = transition.shape[0]
    A = np.vstack([transition.T - np.eye(V), np.ones(V)])
    b = np.zeros(V + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def markov_chain(D: int, V: int, transition) -> DataDistribution:
    """Path measure of the stationary chain with the given transition matrix."""
    _check_dims(D, V)
    P = np.asarray(transition, dtype=float)
    if P.shape != (V, V) or (P < 0).any() or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("transition must be a row-stochastic V x V matrix")
    pi = stationary_distribution(P)
    rows = np.array(list(itertools.product(range(V), repeat=D)), dtype=np.int64)
    if len(rows) > MAX_SUPPORT:
        raise ValueError(f"V**D = {len(rows)} exceeds the support cap {MAX_SUPPORT}")
    p = pi[rows[:, 0]] * np.prod(P[rows[:, :-1], rows[:, 1:]], axis=1)
    keep = p > 0
    rows, p = rows[keep], p[keep]
    return DataDistribution(rows, p / p.sum(), StateSpace(V), f"markov_chain({D},{V})")


def peaked_transition(V: int, stay: float = 0.8) -> np.ndarray:
    """Transition matrix that repeats the previous token with probability ``stay``."""
    P = np.full((V, V), (1.0 - stay) / (V - 1))
    np.fill_diagonal(P, stay)
    return P


def parse_table(text: str, vocab_size: int | None = None) -> DataDistribution:
    """Parse ``tok tok ... tok<TAB>prob`` lines; ``#`` starts a comment."""
    rows, probs = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tokens, prob = line.rsplit(None, 1)
            rows.append([int(tok) for tok in tokens.split()])
            probs.append(float(prob))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}") from exc
    if not rows:
        raise ValueError("table has no support elements")
    if len({len(r) for r in rows}) != 1:
        raise ValueError("all sequences in the table must have the same length")
    V = vocab_size if vocab_size is not None else max(2, max(max(r) for r in rows) + 1)
    return DataDistribution(np.array(rows), np.array(probs), StateSpace(V), "table")


def load_table(path, vocab_size: int | None = None) -> DataDistribution:
    return parse_table(Path(path).read_text(), vocab_size)


def build_distribution(kind: str, **params) -> DataDistribution:
    """Dispatch on a lowercase kind name; used by the config loader."""
    kind = kind.lower()
    if kind == "all_equal":
        return all_equal(params["D"], params["V"])
    if kind == "parity":
        return parity(params["D"])
    if kind == "product_uniform":
        return product_uniform(params["D"], params["V"])
    if kind == "markov_chain":
        P = params.get("transition")
        if P is None:
            P = peaked_transition(params["V"], params.get("stay", 0.8))
        return markov_chain(params["D"], params["V"], P)
    if kind in ("table", "explicit_table"):
        return load_table(params["path"], params.get("V"))
    raise ValueError(f"unknown distribution kind {kind!r}")


def _check_dims(D: int, V: int):
    if D < 1:
        raise ValueError("D must be >= 1")
    if V < 2:
        raise ValueError("V must be >= 2")


# -- posteriors --------------------------------------------------------------


def _posteriors(q0: DataDistribution, X: np.ndarray, leave_out: bool,
                fallback: Fallback | None) -> tuple[np.ndarray, np.ndarray]:
    """Per-position posteriors for a batch ``X`` of shape (n, D).

    With ``leave_out`` the posterior at each position ignores that position's
    own token. Returns ``(marginals (n, D, V), consistent (n, D))``; rows that
    no support element explains are zero unless ``fallback == "nearest"``, in
    which case the posterior conditions on the support elements with the
    fewest disagreements.
    """
    n, D = X.shape
    K = q0.support.shape[0]
    out = np.zeros((n, D, q0.V))
    ok = np.zeros((n, D), dtype=bool)
    step = max(1, _CHUNK_ELEMS // (K * D))
    for lo in range(0, n, step):
        Xc = X[lo:lo + step]
        visible = Xc < q0.V
        mism = visible[:, None, :] & (Xc[:, None, :] != q0.support[None, :, :])
        count = mism.sum(axis=2, dtype=np.int32)
        if leave_out:
            count = count[:, :, None] - mism
        else:
            count = np.broadcast_to(count[:, :, None], mism.shape)
        best = count.min(axis=1, keepdims=True)
        consistent = best[:, 0, :] == 0
        if fallback == "nearest":
            hit = count == best
        else:
            hit = count == 0
        w = np.where(hit, q0.probs[None, :, None], 0.0)
        z = w.sum(axis=1)
        marg = np.einsum("nkd,kdv->ndv", w, q0._onehot)
        good = z > 0
        marg[good] /= z[good][:, None]
        out[lo:lo + step] = marg
        ok[lo:lo + step] = consistent
    return out, ok


def _as_batch(q0: DataDistribution, x) -> tuple[np.ndarray, bool]:
    x = q0.space.validate(x)
    if x.shape[-1] != q0.D:
        raise ValueError(f"sequence length {x.shape[-1]} != D = {q0.D}")
    return np.atleast_2d(x), x.ndim == 1


def posterior_marginals(q0: DataDistribution, x, fallback: Fallback | None = None) -> np.ndarray:
    """Exact per-position posterior of the clean data given partial sequence ``x``.

    Unmasked positions come back as point masses on their token.
    """
    X, single = _as_batch(q0, x)
    marg, ok = _posteriors(q0, X, leave_out=False, fallback=fallback)
    if fallback != "nearest" and not ok.all():
        bad = X[~ok.all(axis=1)][0]
        raise InconsistentStateError(f"no support element agrees with {bad.tolist()}")
    return marg[0] if single else marg


def leave_one_out(q0: DataDistribution, x, d: int, fallback: Fallback | None = None) -> float:
    """Posterior probability of ``x[d]`` given the rest of ``x`` with ``d`` masked.

    Without a fallback an unexplainable remainder gives 0: no clean sequence
    makes the token possible.
    """
    x = q0.space.validate(x)
    if x.ndim != 1 or x.shape[0] != q0.D:
        raise ValueError("leave_one_out expects a single sequence of length D")
    if not 0 <= d < q0.D:
        raise IndexError(f"position {d} out of range")
    if x[d] == q0.space.mask_id:
        raise ValueError(f"position {d} is masked")
    marg, _ = _posteriors(q0, x[None, :], leave_out=True, fallback=fallback)
    return float(marg[0, d, x[d]])


class Denoiser(Protocol):
    space: StateSpace
    D: int

    def predict(self, x) -> np.ndarray: ...

    def leave_one_out(self, x, d: int) -> float: ...


class OracleDenoiser:
    """Exact-posterior stand-in for a trained masked diffusion network.

    ``predict`` returns a distribution at every position. Masked positions get
    the posterior given the visible tokens; unmasked positions get the
    leave-one-out posterior, which is what a network would emit there and what
    the likelihood re-evaluation consumes.

    ``fallback`` decides what happens on states the data distribution cannot
    explain (parallel unmasking produces them on constrained targets):
    ``"raise"`` errors, ``"nearest"`` conditions on the support elements with
    the fewest disagreements.
    """

    def __init__(self, q0: DataDistribution, fallback: Fallback = "nearest"):
        if fallback not in ("raise", "nearest"):
            raise ValueError(f"unknown fallback {fallback!r}")
        self.q0 = q0
        self.fallback = fallback
        self.space = q0.space
        self.D = q0.D

    def predict(self, x) -> np.ndarray:
        X, single = _as_batch(self.q0, x)
        marg, ok = _posteriors(self.q0, X, leave_out=True, fallback=self.fallback)
        if self.fallback == "raise" and not ok.all():
            bad = X[~ok.all(axis=1)][0]
            raise InconsistentStateError(f"no support element agrees with {bad.tolist()}")
        return marg[0] if single else marg

    def likelihoods(self, x) -> np.ndarray:
        """Leave-one-out probability of every unmasked token (NaN where masked)."""
        X, single = _as_batch(self.q0, x)
        marg, _ = _posteriors(self.q0, X, leave_out=True, fallback=self.fallback)
        visible = X < self.space.mask_id
        tok = np.where(visible, X, 0)
        ell = np.take_along_axis(marg, tok[..., None], axis=-1)[..., 0]
        ell = np.where(visible, ell, np.nan)
        return ell[0] if single else ell

    def leave_one_out(self, x, d: int) -> float:
        return leave_one_out(self.q0, x, d, fallback=None if self.fallback == "raise" else "nearest")


def oracle_denoiser(q0: DataDistribution, fallback: Fallback = "nearest") -> OracleDenoiser:
    return OracleDenoiser(q0, fallback)
