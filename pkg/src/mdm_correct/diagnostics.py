"""Ground-truth checks: total variation, exact sampler laws and flip studies."""
from __future__ import annotations

import csv
import itertools
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .samplers import (
    Criterion,
    GroundMetric,
    KernelRemaskMode,
    Rule,
    SamplerConfig,
    ScoreType,
    Strategy,
    TokenDraw,
    confidence_score,
    criterion_distance,
    default_unmask_budget,
    remask_count,
    sample,
)
from .schedules import NoiseSchedule, eval_sigma, remdm_branch_probs, time_grid
from .targets import DataDistribution, Denoiser, OracleDenoiser

DP_STATE_CAP = 20_000
LOG_FLOOR = math.log(1e-300)


class OracleSizeError(ValueError):
    pass


# -- distributions over sequences --------------------------------------------


@dataclass
class EmpiricalDistribution:
    counts: Counter
    N: int

    @classmethod
    def from_samples(cls, samples) -> "EmpiricalDistribution":
        samples = np.atleast_2d(np.asarray(samples))
        rows, counts = np.unique(samples, axis=0, return_counts=True)
        c = Counter({tuple(int(v) for v in r): int(k) for r, k in zip(rows, counts)})
        return cls(c, int(samples.shape[0]))

    def probs(self) -> dict[tuple[int, ...], float]:
        return {k: v / self.N for k, v in self.counts.items()}


def _as_law(p) -> Mapping[tuple, float]:
    if isinstance(p, DataDistribution):
        return p.as_dict()
    if isinstance(p, EmpiricalDistribution):
        return p.probs()
    return p


def tv_distance(p, q) -> float:
    """Half the L1 distance between two laws over sequences."""
    p, q = _as_law(p), _as_law(q)
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def mc_tv_bound(n_states: int, N: int, k: float = 4.0) -> float:
    """Crude bound on the Monte-Carlo TV noise floor: k * sqrt(K / N)."""
    return k * math.sqrt(n_states / N)


def empirical_tv(samples, q0: DataDistribution) -> float:
    return tv_distance(EmpiricalDistribution.from_samples(samples), q0)


def bootstrap_tv(samples, q0: DataDistribution, rng: np.random.Generator,
                 n_boot: int = 200) -> tuple[float, float]:
    """Empirical TV to ``q0`` and its bootstrap standard error."""
    emp = EmpiricalDistribution.from_samples(samples)
    keys = sorted(set(emp.counts) | set(q0.as_dict()))
    target = q0.as_dict()
    q = np.array([target.get(k, 0.0) for k in keys])
    c = np.array([emp.counts.get(k, 0) for k in keys], dtype=float)
    tv = 0.5 * np.abs(c / emp.N - q).sum()
    boot = rng.multinomial(emp.N, c / emp.N, size=n_boot) / emp.N
    se = float(np.std(0.5 * np.abs(boot - q).sum(axis=1), ddof=1))
    return float(tv), se


# -- exact output law by dynamic programming ---------------------------------


def _product_outcomes(options: list[list[tuple[int, float]]]):
    for combo in itertools.product(*options):
        p = 1.0
        for _, w in combo:
            p *= w
        if p > 0.0:
            yield tuple(v for v, _ in combo), p


def _coordinate_options(x, probs, p_unmask, p_remask, mask_id):
    opts = []
    for d, tok in enumerate(x):
        if tok == mask_id:
            o = [(v, p_unmask * float(pv)) for v, pv in enumerate(probs[d]) if pv > 0]
            if 1.0 - p_unmask > 0:
                o.append((mask_id, 1.0 - p_unmask))
        elif p_remask > 0:
            o = [(tok, 1.0 - p_remask), (mask_id, p_remask)]
        else:
            o = [(tok, 1.0)]
        opts.append(o)
    return opts


def _finalize(law, denoiser, mask_id):
    out = defaultdict(float)
    for key, p in law.items():
        x = key[0] if isinstance(key[0], tuple) else key
        if mask_id in x:
            best = denoiser.predict(np.array(x)).argmax(axis=-1)
            x = tuple(int(b) if v == mask_id else v for v, b in zip(x, best))
        out[x] += p
    return dict(out)


def exact_sampler_law(config: SamplerConfig, q0: DataDistribution, schedule: NoiseSchedule,
                      denoiser: Denoiser | None = None) -> dict[tuple[int, ...], float]:
    """Exact output distribution of a sampler by propagating state probabilities.

    Brute force: every reachable state is enumerated at every step along with
    its per-coordinate transition options. Only for tiny instances.
    """
    V, D = q0.V, q0.D
    if (V + 1) ** D > DP_STATE_CAP:
        raise OracleSizeError(f"(|S|+1)^D = {(V + 1) ** D} exceeds {DP_STATE_CAP}")
    den = denoiser if denoiser is not None else OracleDenoiser(q0)
    mask_id = V
    start = tuple([mask_id] * D)
    strategy = config.strategy
    if strategy is Strategy.SELF_CORRECT:
        return _finalize(_self_correct_law(config, den, schedule, D, start), den, mask_id)

    law = {start: 1.0}
    budget = None
    if strategy in (Strategy.TOP_K, Strategy.TOP_K_MARGIN):
        budget = config.unmask_budget or default_unmask_budget(config.T, D, schedule)
    for k, (_, t, s) in enumerate(time_grid(config.T), 1):
        a_t, a_s = schedule.alpha(t), schedule.alpha(s)
        new = defaultdict(float)
        for x, px in law.items():
            probs = den.predict(np.array(x))
            if budget is not None:
                outcomes = _confidence_outcomes(x, probs, budget[k - 1], config, mask_id)
            else:
                sigma = 0.0
                if strategy is Strategy.REMDM:
                    sigma = eval_sigma(config.remask_schedule, k, config.T, a_t, a_s).value
                p_unmask, _ = remdm_branch_probs(a_t, a_s, sigma)
                outcomes = _product_outcomes(_coordinate_options(x, probs, p_unmask, sigma, mask_id))
            for y, py in outcomes:
                new[y] += px * py
        law = dict(new)
    return _finalize(law, den, mask_id)


def _confidence_outcomes(x, probs, b, config, mask_id):
    kind = "margin" if config.strategy is Strategy.TOP_K_MARGIN else "max_prob"
    masked = [d for d, v in enumerate(x) if v == mask_id]
    conf = confidence_score(probs, kind)
    chosen = sorted(masked, key=lambda d: (-conf[d], d))[:b]
    opts = []
    for d, tok in enumerate(x):
        if d not in chosen:
            opts.append([(tok, 1.0)])
        elif config.token_draw is TokenDraw.ARGMAX:
            opts.append([(int(np.argmax(probs[d])), 1.0)])
        else:
            opts.append([(v, float(pv)) for v, pv in enumerate(probs[d]) if pv > 0])
    return _product_outcomes(opts)


def _select_sets(eligible, scores, sentinel, K, rule, temperature):
    """Yield (frozenset of remasked positions, probability)."""
    if K <= 0:
        yield frozenset(), 1.0
        return
    if rule is Rule.DETERMINISTIC:
        order = sorted(eligible, key=lambda d: (0 if sentinel[d] else 1,
                                                0.0 if sentinel[d] else scores[d], d))
        yield frozenset(order[:K]), 1.0
        return
    acc = defaultdict(float)

    def rec(chosen, p):
        if len(chosen) == K:
            acc[frozenset(chosen)] += p
            return
        rest = [d for d in eligible if d not in chosen]
        sent = [d for d in rest if sentinel[d]]
        if sent:
            for d in sent:
                rec(chosen + [d], p / len(sent))
            return
        logw = np.array([-scores[d] / temperature for d in rest])
        w = np.exp(logw - logw.max())
        w /= w.sum()
        for d, wd in zip(rest, w):
            rec(chosen + [d], p * wd)

    rec([], 1.0)
    yield from acc.items()


def _self_correct_law(config, den, schedule, D, start):
    mask_id = den.space.mask_id
    mode = config.kernel_remask_mode
    scoring = mode is not KernelRemaskMode.IID and config.remask_schedule.eta > 0
    iid = mode is not KernelRemaskMode.SCORE_BASED
    cumulate_lik = config.score_type is ScoreType.CUMULATED
    zeros = tuple([0.0] * D)
    falses = tuple([False] * D)
    # state: (x, scores, sentinel, generated, prev_eval_x)
    law = {(start, zeros, falses, falses, None): 1.0}
    for k, (_, t, s) in enumerate(time_grid(config.T), 1):
        a_t, a_s = schedule.alpha(t), schedule.alpha(s)
        sigma = eval_sigma(config.remask_schedule, k, config.T, a_t, a_s).value
        p_unmask, _ = remdm_branch_probs(a_t, a_s, sigma)
        new = defaultdict(float)
        for (x, scores, sentinel, generated, prev_x), px in law.items():
            probs = den.predict(np.array(x))
            opts = _coordinate_options(x, probs, p_unmask, sigma if iid else 0.0, mask_id)
            for y, py in _product_outcomes(opts):
                sc, se, gen = list(scores), list(sentinel), list(generated)
                if config.reset_on_remask:
                    for d in range(D):
                        if x[d] != mask_id and y[d] == mask_id:
                            sc[d], se[d] = 0.0, False
                if not scoring:
                    new[(y, tuple(sc), tuple(se), tuple(gen), prev_x)] += px * py
                    continue
                dists = den.predict(np.array(y))
                prev_d = den.predict(np.array(prev_x)) if prev_x is not None else None
                visible = [d for d in range(D) if y[d] != mask_id]
                for d in visible:
                    if config.criterion is Criterion.LIKELIHOOD:
                        ell = float(dists[d][y[d]])
                        if cumulate_lik:
                            sc[d] = sc[d] + (math.log(ell) if ell > 0 else -math.inf)
                            se[d] = se[d] or ell <= 0
                        else:
                            sc[d], se[d] = ell, ell <= 0
                    elif config.criterion is Criterion.TOP_K_MARGIN:
                        m = float(confidence_score(dists[d], "margin"))
                        sc[d] = sc[d] + m if config.accumulate else m
                    else:
                        dist = 0.0
                        if prev_d is not None and gen[d]:
                            dist = float(criterion_distance(prev_d[d], dists[d], config.criterion,
                                                            config.ground_metric))
                        sc[d] = sc[d] - dist if config.accumulate else -dist
                gen = [y[d] != mask_id for d in range(D)]
                keep_x = y if config.caches_distributions else None
                K = min(remask_count(sigma, D), len(visible))
                for R, pr in _select_sets(visible, sc, se, K, config.rule, config.temperature):
                    z = tuple(mask_id if d in R else y[d] for d in range(D))
                    sc2, se2, gen2 = list(sc), list(se), list(gen)
                    for d in R:
                        gen2[d] = False
                        if config.reset_on_remask:
                            sc2[d], se2[d] = 0.0, False
                    new[(z, tuple(sc2), tuple(se2), tuple(gen2), keep_x)] += px * py * pr
        law = dict(new)
    return law


# -- flipped-token and rank studies ------------------------------------------


FLIP_CSV_HEADER = ["step", "t", "mean_correct", "mean_flipped", "rank_single", "rank_accum", "n"]


@dataclass
class FlipReport:
    step: np.ndarray
    t: np.ndarray
    mean_correct: np.ndarray
    mean_flipped: np.ndarray
    se_correct: np.ndarray
    se_flipped: np.ndarray
    se_gap: np.ndarray
    rank_single: np.ndarray
    rank_accum: np.ndarray
    n: np.ndarray
    skipped: np.ndarray
    n_samples: int

    def gap_z(self) -> np.ndarray:
        """Correct-minus-flipped gap over its paired (per-sample) standard error."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.mean_correct - self.mean_flipped) / self.se_gap

    def rows(self) -> list[list]:
        return [[int(k), float(t), float(c), float(f), float(rs), float(ra), int(n)]
                for k, t, c, f, rs, ra, n in zip(self.step, self.t, self.mean_correct,
                                                  self.mean_flipped, self.rank_single,
                                                  self.rank_accum, self.n)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FLIP_CSV_HEADER)
            for row in self.rows():
                w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])

    def summary(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "skipped": self.skipped.tolist(),
            "se_correct": self.se_correct.tolist(),
            "se_flipped": self.se_flipped.tolist(),
            "se_gap": self.se_gap.tolist(),
            "gap_z": [None if not np.isfinite(z) else float(z) for z in self.gap_z()],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _mean_rank(values: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Rank among visible entries per row, 1 = largest, ties share the mean rank."""
    v = np.where(visible, values, np.nan)
    vi, vj = v[:, :, None], v[:, None, :]
    both = visible[:, :, None] & visible[:, None, :]
    greater = (both & (vj > vi)).sum(axis=2)
    ties = (both & (vj == vi)).sum(axis=2) - 1
    return 1.0 + greater + 0.5 * ties


def _mean_se(per_sample: np.ndarray, use: np.ndarray) -> tuple[float, float, int]:
    vals = per_sample[use]
    n = len(vals)
    if n == 0:
        return math.nan, math.nan, 0
    se = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return float(vals.mean()), se, n


def flipped_token_experiment(q0: DataDistribution, n_samples: int, T_grid, flip_count: int,
                             rng: np.random.Generator, schedule: NoiseSchedule | None = None,
                             denoiser: Denoiser | None = None) -> FlipReport:
    """Likelihood and rank of artificially flipped tokens along noising trajectories.

    Each sample draws clean data and a reveal order; at every grid time the
    revealed coordinates form x_t (nested as t decreases). The ``flip_count``
    earliest-revealed coordinates carry a different random token; given the
    revealed set they are a uniform choice of unmasked tokens. Leave-one-out
    likelihoods are averaged over flipped and over correct positions, and
    flipped positions are ranked among all revealed ones by the single-step
    likelihood and by the log-likelihood accumulated along the trajectory.
    A sample contributes at a grid time only if both a flipped and a correct
    token are revealed; otherwise it is counted as skipped.

    ``T_grid`` is either a step count T (times (T-k)/T for k = 1..T) or an
    explicit decreasing sequence of times.
    """
    schedule = schedule or NoiseSchedule()
    den = denoiser if denoiser is not None else OracleDenoiser(q0)
    if isinstance(T_grid, (int, np.integer)):
        times = np.array([(T_grid - k) / T_grid for k in range(1, T_grid + 1)])
    else:
        times = np.asarray(list(T_grid), dtype=float)
    V, D = q0.V, q0.D
    if flip_count < 1 or flip_count >= D:
        raise ValueError("flip_count must be in [1, D)")
    mask_id = q0.space.mask_id
    x0 = q0.sample(rng, n_samples)
    u = rng.random((n_samples, D))
    order = np.argsort(u, axis=1)
    flipped = np.zeros((n_samples, D), dtype=bool)
    np.put_along_axis(flipped, order[:, :flip_count], True, axis=1)
    shift = rng.integers(1, V, size=(n_samples, D))
    x_flip = np.where(flipped, (x0 + shift) % V, x0)

    accum = np.zeros((n_samples, D))
    stats = defaultdict(list)
    for k, t in enumerate(times, 1):
        visible = u < schedule.alpha(t)
        x_t = np.where(visible, x_flip, mask_id)
        ell = np.nan_to_num(den.likelihoods(x_t), nan=0.0)
        with np.errstate(divide="ignore"):
            accum = np.where(visible, accum + np.maximum(np.log(ell), LOG_FLOOR), accum)
        r_single = _mean_rank(ell, visible)
        r_accum = _mean_rank(accum, visible)
        vf = visible & flipped
        vc = visible & ~flipped
        use = vf.any(axis=1) & vc.any(axis=1)
        nf = np.maximum(vf.sum(axis=1), 1)
        nc = np.maximum(vc.sum(axis=1), 1)
        mf, sf, n = _mean_se((ell * vf).sum(axis=1) / nf, use)
        per_c = (ell * vc).sum(axis=1) / nc
        mc, sc, _ = _mean_se(per_c, use)
        _, sg, _ = _mean_se(per_c - (ell * vf).sum(axis=1) / nf, use)
        rs, _, _ = _mean_se((r_single * vf).sum(axis=1) / nf, use)
        ra, _, _ = _mean_se((r_accum * vf).sum(axis=1) / nf, use)
        for key, val in (("step", k), ("t", t), ("mean_correct", mc), ("mean_flipped", mf),
                         ("se_correct", sc), ("se_flipped", sf), ("se_gap", sg), ("rank_single", rs),
                         ("rank_accum", ra), ("n", n), ("skipped", n_samples - n)):
            stats[key].append(val)
    return FlipReport(**{k: np.array(v) for k, v in stats.items()}, n_samples=n_samples)


# -- steps sweep -------------------------------------------------------------


def tv_vs_steps_sweep(q0: DataDistribution, sampler_configs: Mapping[str, SamplerConfig],
                      T_list: Iterable[int], N: int, rng: np.random.Generator,
                      schedule: NoiseSchedule | None = None, denoiser: Denoiser | None = None,
                      n_boot: int = 200) -> list[dict]:
    """Empirical TV to ``q0`` (with bootstrap stderr) for each sampler and step count."""
    if N < 1000:
        raise ValueError("N must be >= 1000")
    schedule = schedule or NoiseSchedule()
    den = denoiser if denoiser is not None else OracleDenoiser(q0)
    T_list = list(T_list)
    children = rng.spawn(len(sampler_configs) * len(T_list))
    rows = []
    for i, (name, cfg) in enumerate(sampler_configs.items()):
        for j, T in enumerate(T_list):
            child = children[i * len(T_list) + j]
            x = sample(replace(cfg, T=T), den, schedule, q0.D, child, n=N)
            tv, se = bootstrap_tv(x, q0, child, n_boot)
            rows.append({"sampler": name, "T": T, "tv": tv, "stderr": se, "n": N})
    return rows


def rate_audit(q0: DataDistribution, schedule: NoiseSchedule, n_states: int,
               rng: np.random.Generator) -> np.ndarray:
    """|ratio-form - marginal-form| reverse rates on random masked states.

    States are drawn by masking clean samples at a random time, so every
    state is consistent with the data.
    """
    from .ctmc import reverse_rate_marginal, reverse_rate_ratio

    den = OracleDenoiser(q0, fallback="raise")
    errs = np.empty(n_states)
    for i in range(n_states):
        t = float(rng.uniform(0.02, 1.0))
        x0 = q0.sample(rng, 1)[0]
        x_t = np.where(rng.random(q0.D) < schedule.alpha(t), x0, q0.space.mask_id)
        d = int(rng.integers(q0.D))
        x_t[d] = q0.space.mask_id
        v = int(rng.integers(q0.V))
        errs[i] = abs(reverse_rate_ratio(x_t, d, v, t, schedule, q0)
                      - reverse_rate_marginal(x_t, d, v, t, schedule, den))
    return errs
