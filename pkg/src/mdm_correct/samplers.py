"""Generation loops: vanilla tau-leaping, Top-K confidence decoding, ReMDM and
training-free self-correction with re-evaluated likelihoods.

Every sampler works on a batch of ``n`` trajectories held in an ``(n, D)``
array and returns ``(D,)`` when called with ``n=None``. Random draws are
taken in fixed shapes so that a given generator state always produces the
same output, and so that self-correction with a zero remask schedule
consumes exactly the draws of the vanilla sampler.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .ctmc import tau_leaping_step
from .schedules import (
    NoiseSchedule,
    RemaskKind,
    RemaskSchedule,
    ScheduleError,
    all_masked,
    eval_sigma,
    remdm_branch_probs,
    sample_tokens,
    sigma_upper,
    time_grid,
)
from .targets import Denoiser

KL_FLOOR = 1e-12


class Strategy(str, enum.Enum):
    VANILLA = "vanilla"
    TOP_K = "top_k"
    TOP_K_MARGIN = "top_k_margin"
    REMDM = "remdm"
    SELF_CORRECT = "self_correct"


class ScoreType(str, enum.Enum):
    CURRENT = "current"
    CUMULATED = "cumulated"


class Rule(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


class Criterion(str, enum.Enum):
    LIKELIHOOD = "likelihood"
    TOP_K_MARGIN = "top_k_margin"
    KL = "kl"
    WASSERSTEIN = "wasserstein"


class KernelRemaskMode(str, enum.Enum):
    SCORE_BASED = "score_based"
    IID = "iid"
    BOTH = "both"


class TokenDraw(str, enum.Enum):
    SAMPLE = "sample"
    ARGMAX = "argmax"


class GroundMetric(str, enum.Enum):
    DISCRETE = "discrete"
    INDEX = "index"


_ENUM_FIELDS = {
    "strategy": Strategy,
    "score_type": ScoreType,
    "rule": Rule,
    "criterion": Criterion,
    "kernel_remask_mode": KernelRemaskMode,
    "token_draw": TokenDraw,
    "ground_metric": GroundMetric,
}


@dataclass(frozen=True)
class SamplerConfig:
    T: int = 16
    strategy: Strategy = Strategy.VANILLA
    score_type: ScoreType = ScoreType.CUMULATED
    rule: Rule = Rule.DETERMINISTIC
    criterion: Criterion = Criterion.LIKELIHOOD
    remask_schedule: RemaskSchedule = field(default_factory=RemaskSchedule)
    kernel_remask_mode: KernelRemaskMode = KernelRemaskMode.SCORE_BASED
    reset_on_remask: bool = True
    unmask_budget: tuple[int, ...] | None = None
    token_draw: TokenDraw = TokenDraw.SAMPLE
    temperature: float = 1.0
    accumulate: bool = False
    ground_metric: GroundMetric = GroundMetric.DISCRETE

    def __post_init__(self):
        for name, cls in _ENUM_FIELDS.items():
            object.__setattr__(self, name, cls(getattr(self, name)))
        if self.unmask_budget is not None:
            object.__setattr__(self, "unmask_budget", tuple(int(b) for b in self.unmask_budget))
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @property
    def caches_distributions(self) -> bool:
        return self.criterion in (Criterion.KL, Criterion.WASSERSTEIN)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, RemaskSchedule):
                v = {"kind": v.kind.value, "eta": v.eta, "tail_off": v.tail_off}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown sampler keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("remask_schedule"), dict):
            d["remask_schedule"] = RemaskSchedule(**d["remask_schedule"])
        return cls(**d)


# -- scoring primitives ------------------------------------------------------


def confidence_score(dist, kind: str = "max_prob") -> np.ndarray | float:
    """Max probability or top-two margin of categoricals along the last axis."""
    p = np.asarray(dist, dtype=float)
    if kind == "max_prob":
        out = p.max(axis=-1)
    elif kind == "margin":
        if p.shape[-1] == 1:
            out = p[..., 0]
        else:
            top2 = np.partition(p, -2, axis=-1)[..., -2:]
            out = top2[..., 1] - top2[..., 0]
    else:
        raise ValueError(f"unknown confidence kind {kind!r}")
    return out if np.ndim(out) else float(out)


def criterion_distance(prev, cur, kind: Criterion | str,
                       metric: GroundMetric | str = GroundMetric.DISCRETE):
    """KL(prev || cur) or 1-Wasserstein between categoricals along the last axis.

    Under the discrete ground metric W1 is the total-variation distance; the
    ``index`` metric treats tokens as points 0..V-1 on a line.
    """
    kind, metric = Criterion(kind), GroundMetric(metric)
    p = np.asarray(prev, dtype=float)
    q = np.asarray(cur, dtype=float)
    if kind is Criterion.KL:
        ratio = p / np.maximum(q, KL_FLOOR)
        terms = np.where(p > 0, p * np.log(np.where(p > 0, ratio, 1.0)), 0.0)
        out = np.maximum(terms.sum(axis=-1), 0.0)
    elif kind is Criterion.WASSERSTEIN:
        if metric is GroundMetric.DISCRETE:
            out = 0.5 * np.abs(p - q).sum(axis=-1)
        else:
            out = np.abs(np.cumsum(p - q, axis=-1)).sum(axis=-1)
    else:
        raise ValueError(f"{kind} is not a distance criterion")
    return out if np.ndim(out) else float(out)


@dataclass
class CorrectionState:
    """Per-position remasking scores for a batch of trajectories.

    ``sentinel`` marks positions whose token currently has zero likelihood;
    they are remasked before anything else. ``prev_dists`` and ``generated``
    back the distribution-change criteria.
    """

    scores: np.ndarray
    sentinel: np.ndarray
    generated: np.ndarray
    prev_dists: np.ndarray | None = None

    @classmethod
    def initial(cls, n: int, D: int) -> "CorrectionState":
        return cls(np.zeros((n, D)), np.zeros((n, D), dtype=bool), np.zeros((n, D), dtype=bool))

    def reset(self, positions: np.ndarray) -> "CorrectionState":
        return replace(
            self,
            scores=np.where(positions, 0.0, self.scores),
            sentinel=self.sentinel & ~positions,
        )


def update_scores(state: CorrectionState, x_s, denoiser: Denoiser,
                  score_type: ScoreType | str = ScoreType.CUMULATED,
                  criterion: Criterion | str = Criterion.LIKELIHOOD,
                  accumulate: bool = False,
                  ground_metric: GroundMetric | str = GroundMetric.DISCRETE,
                  dists: np.ndarray | None = None) -> CorrectionState:
    """Re-evaluate every unmasked position of ``x_s`` and fold it into the scores.

    For the likelihood criterion the per-step value is the leave-one-out
    probability of the current token (``Current``) or its log added to the
    running score (``Cumulated``); a zero likelihood raises the sentinel.
    Margin and distance criteria replace the score each step unless
    ``accumulate`` is set, in which case per-step values are summed. Distance
    scores are negated so that lower always means "remask first".
    """
    score_type, criterion = ScoreType(score_type), Criterion(criterion)
    x_s = np.atleast_2d(x_s)
    if dists is None:
        dists = np.atleast_3d(denoiser.predict(x_s)).reshape(*x_s.shape, -1)
    visible = x_s != denoiser.space.mask_id
    tok = np.where(visible, x_s, 0)
    scores = state.scores.copy()
    sentinel = state.sentinel.copy()

    if criterion is Criterion.LIKELIHOOD:
        ell = np.take_along_axis(dists, tok[..., None], axis=-1)[..., 0]
        if score_type is ScoreType.CURRENT:
            step = ell
        else:
            with np.errstate(divide="ignore"):
                step = np.log(ell)
        cumulate = score_type is ScoreType.CUMULATED
        zero = visible & (ell <= 0.0)
        sentinel = np.where(visible, zero | (sentinel & cumulate), sentinel)
    elif criterion is Criterion.TOP_K_MARGIN:
        step = confidence_score(dists, "margin")
        cumulate = accumulate
    else:
        step = np.zeros(x_s.shape)
        if state.prev_dists is not None:
            dist = criterion_distance(state.prev_dists, dists, criterion, ground_metric)
            step = np.where(state.generated, -dist, 0.0)
        cumulate = accumulate

    scores = np.where(visible, scores + step if cumulate else step, scores)
    return CorrectionState(
        scores=scores,
        sentinel=sentinel,
        generated=visible.copy(),
        prev_dists=dists if criterion in (Criterion.KL, Criterion.WASSERSTEIN) else state.prev_dists,
    )


def remask_select(state: CorrectionState, eligible, K, rule: Rule | str,
                  rng: np.random.Generator | None = None,
                  temperature: float = 1.0) -> np.ndarray:
    """Boolean mask of the positions to remask in each row.

    Sentinel positions always go first. Deterministic picks the ``K`` lowest
    scores with ties to the lowest index. Stochastic draws ``K`` positions
    without replacement with probability proportional to exp(-score /
    temperature), realised by perturbing log-weights with Gumbel noise and
    keeping the top ``K`` (the same law as sequential weighted draws, with no
    exponentials that could overflow).
    """
    rule = Rule(rule)
    eligible = np.atleast_2d(np.asarray(eligible, dtype=bool))
    n, D = eligible.shape
    K = np.minimum(np.broadcast_to(np.asarray(K, dtype=np.int64), (n,)), eligible.sum(axis=1))
    if K.max(initial=0) <= 0:
        return np.zeros((n, D), dtype=bool)
    scores = np.atleast_2d(state.scores)
    sentinel = np.atleast_2d(state.sentinel) & eligible
    tier = np.where(eligible, np.where(sentinel, 0, 1), 2)
    if rule is Rule.DETERMINISTIC:
        secondary = np.where(tier == 1, scores, 0.0)
    else:
        if rng is None:
            raise ValueError("stochastic remasking needs a random generator")
        g = rng.gumbel(size=(n, D))
        secondary = np.where(tier == 1, scores / temperature - g, -g)
    order = np.lexsort((secondary, tier), axis=-1)
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(D)[None, :].repeat(n, axis=0), axis=-1)
    return rank < K[:, None]


# -- samplers ----------------------------------------------------------------


def _finish(x: np.ndarray, denoiser: Denoiser, single: bool) -> np.ndarray:
    masked = x == denoiser.space.mask_id
    if masked.any():
        x = force_unmask(x, denoiser)
    return x[0] if single else x


def force_unmask(x: np.ndarray, denoiser: Denoiser) -> np.ndarray:
    """Fill every remaining mask with the argmax of the denoiser's prediction."""
    x = np.atleast_2d(np.asarray(x, dtype=np.int64)).copy()
    masked = x == denoiser.space.mask_id
    rows = np.flatnonzero(masked.any(axis=1))
    if len(rows):
        best = denoiser.predict(x[rows]).argmax(axis=-1)
        x[rows] = np.where(masked[rows], best, x[rows])
    return x


def sample_vanilla(config: SamplerConfig, denoiser: Denoiser, schedule: NoiseSchedule,
                   D: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Standard masked-diffusion sampler: T tau-leaping steps from all-mask."""
    x = all_masked(denoiser.space, D, 1 if n is None else n)
    for _, t, s in time_grid(config.T):
        x = tau_leaping_step(x, t, s, schedule, denoiser, rng)
    return _finish(x, denoiser, n is None)


def default_unmask_budget(T: int, D: int, schedule: NoiseSchedule) -> tuple[int, ...]:
    """Per-step unmask counts tracking the expected vanilla progress D * alpha(s)."""
    done = [round(D * schedule.alpha(s)) for _, _, s in time_grid(T)]
    prev = [0] + done[:-1]
    return tuple(int(b - a) for a, b in zip(prev, done))


def sample_confidence(config: SamplerConfig, denoiser: Denoiser, schedule: NoiseSchedule,
                      D: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Top-K decoding: unmask the most confident masked positions each step."""
    kind = "margin" if config.strategy is Strategy.TOP_K_MARGIN else "max_prob"
    budget = config.unmask_budget or default_unmask_budget(config.T, D, schedule)
    if len(budget) != config.T:
        raise ValueError(f"unmask_budget has {len(budget)} entries, expected T = {config.T}")
    mask_id = denoiser.space.mask_id
    x = all_masked(denoiser.space, D, 1 if n is None else n)
    for b in budget:
        probs = denoiser.predict(x)
        masked = x == mask_id
        conf = confidence_score(probs, kind)
        u_tok = rng.random(x.shape)
        if config.token_draw is TokenDraw.ARGMAX:
            tok = probs.argmax(axis=-1)
        else:
            tok = sample_tokens(probs, u_tok)
        order = np.lexsort((-conf, ~masked), axis=-1)
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(D)[None, :].repeat(len(x), axis=0), axis=-1)
        take = masked & (rank < min(b, D))
        x = np.where(take, tok, x)
    return _finish(x, denoiser, n is None)


def remdm_step(x_t, t: float, s: float, sigma: float, schedule: NoiseSchedule,
               denoiser: Denoiser, rng: np.random.Generator,
               probs: np.ndarray | None = None) -> np.ndarray:
    """One step of the remasking reverse kernel.

    Uses the same two uniform arrays as :func:`tau_leaping_step`; with
    ``sigma = 0`` the two produce identical output from identical draws.
    """
    a_t, a_s = schedule.alpha(t), schedule.alpha(s)
    if not 0.0 <= sigma <= sigma_upper(a_t, a_s) + 1e-12:
        raise ScheduleError(f"sigma {sigma} outside [0, {sigma_upper(a_t, a_s)}]")
    x_t = np.asarray(x_t, dtype=np.int64)
    p_unmask, _ = remdm_branch_probs(a_t, a_s, sigma)
    if probs is None:
        probs = denoiser.predict(x_t)
    u = rng.random(x_t.shape)
    u_tok = rng.random(x_t.shape)
    mask_id = denoiser.space.mask_id
    masked = x_t == mask_id
    out = np.where(masked & (u < p_unmask), sample_tokens(probs, u_tok), x_t)
    if sigma > 0:
        out = np.where(~masked & (u < sigma), mask_id, out)
    return out


def sample_remdm(config: SamplerConfig, denoiser: Denoiser, schedule: NoiseSchedule,
                 D: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    x = all_masked(denoiser.space, D, 1 if n is None else n)
    for k, (_, t, s) in enumerate(time_grid(config.T), 1):
        a_t, a_s = schedule.alpha(t), schedule.alpha(s)
        sigma = eval_sigma(config.remask_schedule, k, config.T, a_t, a_s).value
        x = remdm_step(x, t, s, sigma, schedule, denoiser, rng)
    return _finish(x, denoiser, n is None)


def remask_count(sigma: float, D: int) -> int:
    """Remask budget floor(sigma * D), robust to representation error in sigma."""
    return int(math.floor(sigma * D + 1e-9))


def self_correct_sample(config: SamplerConfig, denoiser: Denoiser, schedule: NoiseSchedule,
                        D: int, rng: np.random.Generator, n: int | None = None,
                        trace: list | None = None) -> np.ndarray:
    """Training-free self-correction.

    Each step (1) applies the reverse update, (2) re-scores every generated
    token with the denoiser, (3) remasks the ``floor(sigma_t * D)`` least
    trusted tokens. ``trace``, when given, collects per-step counts
    ``(unmasked_before, newly_unmasked, remasked, unmasked_after)``.
    """
    mask_id = denoiser.space.mask_id
    batch = 1 if n is None else n
    x = all_masked(denoiser.space, D, batch)
    state = CorrectionState.initial(batch, D)
    mode = config.kernel_remask_mode
    scoring = mode is not KernelRemaskMode.IID and config.remask_schedule.eta > 0
    iid = mode is not KernelRemaskMode.SCORE_BASED
    for k, (_, t, s) in enumerate(time_grid(config.T), 1):
        a_t, a_s = schedule.alpha(t), schedule.alpha(s)
        sigma = eval_sigma(config.remask_schedule, k, config.T, a_t, a_s).value
        before = x != mask_id
        x_new = remdm_step(x, t, s, sigma, schedule, denoiser, rng) if iid else _masked_branch(
            x, a_t, a_s, sigma, denoiser, rng)
        after = x_new != mask_id
        fresh = ~before & after
        dropped = before & ~after
        if dropped.any() and config.reset_on_remask:
            state = state.reset(dropped)
        x = x_new
        remasked = np.zeros_like(after)
        if scoring:
            state = update_scores(state, x, denoiser, config.score_type, config.criterion,
                                  config.accumulate, config.ground_metric)
            K = remask_count(sigma, D)
            remasked = remask_select(state, after, K, config.rule, rng, config.temperature)
            x = np.where(remasked, mask_id, x)
            state.generated &= ~remasked
            if config.reset_on_remask:
                state = state.reset(remasked)
        if trace is not None:
            trace.append((before.sum(axis=1), fresh.sum(axis=1),
                          (dropped | remasked).sum(axis=1), (x != mask_id).sum(axis=1)))
    return _finish(x, denoiser, n is None)


def _masked_branch(x, a_t, a_s, sigma, denoiser, rng):
    # score-based mode: generated tokens are kept here, step (3) does the remasking
    p_unmask, _ = remdm_branch_probs(a_t, a_s, sigma)
    probs = denoiser.predict(x)
    u = rng.random(x.shape)
    u_tok = rng.random(x.shape)
    masked = x == denoiser.space.mask_id
    return np.where(masked & (u < p_unmask), sample_tokens(probs, u_tok), x)


SAMPLERS = {
    Strategy.VANILLA: sample_vanilla,
    Strategy.TOP_K: sample_confidence,
    Strategy.TOP_K_MARGIN: sample_confidence,
    Strategy.REMDM: sample_remdm,
    Strategy.SELF_CORRECT: self_correct_sample,
}


def sample(config: SamplerConfig, denoiser: Denoiser, schedule: NoiseSchedule, D: int,
           rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    if config.strategy is Strategy.SELF_CORRECT and config.remask_schedule is None:
        raise ValueError("self_correct needs a remask schedule")
    return SAMPLERS[config.strategy](config, denoiser, schedule, D, rng, n)


def zero_tail(eta: float, tail_off: int = 1) -> RemaskSchedule:
    return RemaskSchedule(RemaskKind.ZERO_TAIL, eta, tail_off)
