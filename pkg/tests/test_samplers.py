import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdm_correct.diagnostics import EmpiricalDistribution, empirical_tv, exact_sampler_law, mc_tv_bound, tv_distance
from mdm_correct.samplers import (
    CorrectionState,
    SamplerConfig,
    confidence_score,
    criterion_distance,
    default_unmask_budget,
    force_unmask,
    remask_count,
    remask_select,
    remdm_step,
    sample,
    self_correct_sample,
    update_scores,
    zero_tail,
)
from mdm_correct.schedules import NoiseSchedule, RemaskSchedule, ScheduleError, eval_sigma, time_grid
from mdm_correct.targets import (
    OracleDenoiser,
    all_equal,
    markov_chain,
    parity,
    peaked_transition,
    product_uniform,
)

LINEAR = NoiseSchedule("linear")


def sc_config(**kw):
    base = dict(T=4, strategy="self_correct", remask_schedule=zero_tail(0.34, 1))
    base.update(kw)
    return SamplerConfig(**base)


# -- scoring primitives ------------------------------------------------------


def test_confidence_score_examples():
    p = [0.5, 0.3, 0.2]
    assert confidence_score(p, "max_prob") == 0.5
    assert confidence_score(p, "margin") == pytest.approx(0.2)
    assert confidence_score([0.5, 0.5], "margin") == 0.0
    np.testing.assert_allclose(confidence_score([[1, 0], [0.3, 0.7]], "margin"), [1.0, 0.4])
    with pytest.raises(ValueError):
        confidence_score(p, "entropy")


def test_criterion_distance_examples():
    assert criterion_distance([0.5, 0.5], [0.75, 0.25], "kl") == pytest.approx(0.143841, abs=1e-6)
    assert criterion_distance([0.2, 0.8], [0.2, 0.8], "kl") == 0.0
    # zero in the second argument is floored rather than infinite
    assert math.isfinite(criterion_distance([0.5, 0.5], [1.0, 0.0], "kl"))
    assert criterion_distance([1, 0, 0], [0, 0, 1], "wasserstein") == 1.0
    assert criterion_distance([1, 0, 0], [0, 0, 1], "wasserstein", "index") == 2.0
    assert criterion_distance([0.5, 0.5, 0], [0, 0.5, 0.5], "wasserstein", "index") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        criterion_distance([1, 0], [0, 1], "likelihood")


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=5), st.lists(st.floats(0.01, 1), min_size=5, max_size=5))
def test_distances_nonnegative(a, b):
    p = np.array(a) / sum(a)
    q = np.array(b[: len(a)]) / sum(b[: len(a)])
    assert criterion_distance(p, q, "kl") >= 0
    tv = criterion_distance(p, q, "wasserstein")
    assert 0 <= tv <= 1
    assert criterion_distance(p, q, "wasserstein", "index") >= tv - 1e-12


SPACE_DEN = OracleDenoiser(product_uniform(3, 2))  # only its state space is used below
M = 2


def test_update_scores_likelihood_current_and_cumulated():
    x = np.array([[0, 1, M]])
    dists = np.array([[[0.25, 0.75], [1.0, 0.0], [0.5, 0.5]]])
    cur = update_scores(CorrectionState.initial(1, 3), x, SPACE_DEN, "current", dists=dists)
    np.testing.assert_array_equal(cur.scores, [[0.25, 0.0, 0.0]])
    np.testing.assert_array_equal(cur.sentinel, [[False, True, False]])
    cum = update_scores(CorrectionState.initial(1, 3), x, SPACE_DEN, "cumulated", dists=dists)
    assert cum.scores[0, 0] == pytest.approx(math.log(0.25))
    assert cum.scores[0, 1] == -math.inf
    assert cum.scores[0, 2] == 0.0
    np.testing.assert_array_equal(cum.generated, [[True, True, False]])

    healed = np.array([[[0.5, 0.5], [0.0, 1.0], [0.5, 0.5]]])
    cur2 = update_scores(cur, x, SPACE_DEN, "current", dists=healed)
    assert not cur2.sentinel[0, 1]
    assert cur2.scores[0, 1] == 1.0
    cum2 = update_scores(cum, x, SPACE_DEN, "cumulated", dists=healed)
    assert cum2.sentinel[0, 1]
    assert cum2.scores[0, 0] == pytest.approx(math.log(0.25) + math.log(0.5))


def test_update_scores_margin_and_distance():
    x = np.array([[0, 1, M]])
    d1 = np.array([[[0.9, 0.1], [0.5, 0.5], [0.5, 0.5]]])
    d2 = np.array([[[0.6, 0.4], [0.5, 0.5], [0.5, 0.5]]])
    st1 = update_scores(CorrectionState.initial(1, 3), x, SPACE_DEN, criterion="top_k_margin", dists=d1)
    np.testing.assert_allclose(st1.scores, [[0.8, 0.0, 0.0]])
    acc = update_scores(st1, x, SPACE_DEN, criterion="top_k_margin", accumulate=True, dists=d2)
    np.testing.assert_allclose(acc.scores, [[1.0, 0.0, 0.0]])

    w1 = update_scores(CorrectionState.initial(1, 3), x, SPACE_DEN, criterion="wasserstein", dists=d1)
    # nothing generated before this evaluation: distance zero
    np.testing.assert_array_equal(w1.scores, 0.0)
    w2 = update_scores(w1, x, SPACE_DEN, criterion="wasserstein", dists=d2)
    np.testing.assert_allclose(w2.scores, [[-0.3, 0.0, 0.0]])


def test_remask_select_deterministic_examples():
    st_ = CorrectionState.initial(1, 4)
    st_.scores[:] = [0.3, 0.1, 0.2, 0.1]
    elig = np.ones((1, 4), dtype=bool)
    np.testing.assert_array_equal(remask_select(st_, elig, 2, "deterministic"), [[0, 1, 0, 1]])
    np.testing.assert_array_equal(remask_select(st_, elig, 1, "deterministic"), [[0, 1, 0, 0]])
    st_.sentinel[0, 0] = True
    np.testing.assert_array_equal(remask_select(st_, elig, 1, "deterministic"), [[1, 0, 0, 0]])
    np.testing.assert_array_equal(remask_select(st_, [[1, 0, 1, 0]], 2, "deterministic"), [[1, 0, 1, 0]])
    # K exceeding the eligible count and K = 0
    assert remask_select(st_, [[0, 0, 1, 0]], 3, "deterministic").sum() == 1
    assert remask_select(st_, elig, 0, "deterministic").sum() == 0


@settings(max_examples=100)
@given(st.lists(st.integers(-20, 20), min_size=5, max_size=5), st.integers(0, 5))
def test_deterministic_selection_invariant_to_monotone_transform(scores, K):
    a = CorrectionState.initial(1, 5)
    a.scores[:] = scores
    b = CorrectionState.initial(1, 5)
    b.scores[:] = np.exp(np.array(scores)) * 3 + 1
    elig = np.ones((1, 5), dtype=bool)
    np.testing.assert_array_equal(remask_select(a, elig, K, "deterministic"),
                                  remask_select(b, elig, K, "deterministic"))


def test_sentinels_dominate_any_score():
    st_ = CorrectionState.initial(1, 3)
    st_.scores[:] = [-1e300, 5.0, -math.inf]
    st_.sentinel[:] = [False, True, False]
    out = remask_select(st_, np.ones((1, 3), dtype=bool), 1, "stochastic", np.random.default_rng(0))
    np.testing.assert_array_equal(out, [[0, 1, 0]])


def test_stochastic_selection_law():
    N = 60_000
    rng = np.random.default_rng(1)
    st_ = CorrectionState(np.tile([0.0, 0.0, 0.0, 0.0], (N, 1)), np.zeros((N, 4), bool), np.ones((N, 4), bool))
    freq = remask_select(st_, np.ones((N, 4), bool), 1, "stochastic", rng).mean(axis=0)
    assert np.all(np.abs(freq - 0.25) <= 4 * math.sqrt(0.25 * 0.75 / N))

    # weights exp(-score): 1, 2, 4; two draws without replacement
    w = np.array([1.0, 2.0, 4.0])
    st_ = CorrectionState(np.tile(-np.log(w), (N, 1)), np.zeros((N, 3), bool), np.ones((N, 3), bool))
    sel = remask_select(st_, np.ones((N, 3), bool), 2, "stochastic", rng)
    W = w.sum()
    for left_out in range(3):
        i, j = [d for d in range(3) if d != left_out]
        p = w[i] / W * w[j] / (W - w[i]) + w[j] / W * w[i] / (W - w[j])
        f = (~sel[:, left_out]).mean()
        assert abs(f - p) <= 4 * math.sqrt(p * (1 - p) / N)


def test_stochastic_temperature_flattens():
    N = 40_000
    rng = np.random.default_rng(2)
    st_ = CorrectionState(np.tile([0.0, math.log(2)], (N, 1)), np.zeros((N, 2), bool), np.ones((N, 2), bool))
    f = remask_select(st_, np.ones((N, 2), bool), 1, "stochastic", rng, temperature=1.0)[:, 0].mean()
    assert abs(f - 2 / 3) <= 0.01
    f = remask_select(st_, np.ones((N, 2), bool), 1, "stochastic", rng, temperature=1e6)[:, 0].mean()
    assert abs(f - 0.5) <= 0.01
    with pytest.raises(ValueError):
        remask_select(st_, np.ones((N, 2), bool), 1, "stochastic", None)


# -- kernels and samplers ----------------------------------------------------


def test_remdm_step_hand_values():
    q = product_uniform(1, 2)
    den = OracleDenoiser(q)
    N = 40_000
    t, s = 0.5, 0.25  # alpha_t = 0.5, alpha_s = 0.75
    x = remdm_step(np.full((N, 1), 2), t, s, 0.2, LINEAR, den, np.random.default_rng(3))
    p = (x[:, 0] != 2).mean()
    assert abs(p - 0.7) <= 4 * math.sqrt(0.21 / N)
    x = remdm_step(np.zeros((N, 1), dtype=int), t, s, 0.2, LINEAR, den, np.random.default_rng(3))
    assert abs((x[:, 0] == 2).mean() - 0.2) <= 4 * math.sqrt(0.16 / N)
    with pytest.raises(ScheduleError):
        remdm_step(np.zeros((1, 1), dtype=int), t, s, 0.9, LINEAR, den, np.random.default_rng(3))


@pytest.mark.parametrize("q", [all_equal(4, 3), parity(5)], ids=lambda q: q.name)
def test_zero_sigma_reproduces_vanilla_bytes(q):
    den = OracleDenoiser(q)
    van = sample(SamplerConfig(T=6), den, LINEAR, q.D, np.random.default_rng(9), n=500)
    for cfg in (sc_config(T=6, remask_schedule=RemaskSchedule("constant", 0.0)),
                SamplerConfig(T=6, strategy="remdm", remask_schedule=RemaskSchedule("constant", 0.0)),
                sc_config(T=6, remask_schedule=zero_tail(0.3, 6))):
        out = sample(cfg, den, LINEAR, q.D, np.random.default_rng(9), n=500)
        assert out.tobytes() == van.tobytes()


@pytest.mark.parametrize("mode", ["score_based", "iid", "both"])
def test_trace_conserves_tokens(mode):
    q = all_equal(6, 4)
    den = OracleDenoiser(q)
    trace = []
    cfg = sc_config(T=8, remask_schedule=zero_tail(0.34, 1), kernel_remask_mode=mode)
    x = self_correct_sample(cfg, den, LINEAR, 6, np.random.default_rng(4), n=300, trace=trace)
    assert len(trace) == 8
    for before, fresh, removed, after in trace:
        np.testing.assert_array_equal(after, before + fresh - removed)
        assert (after >= 0).all() and (after <= 6).all()
    assert (x != q.space.mask_id).all()


def test_score_based_remask_count_is_floor_sigma_d():
    q = all_equal(6, 4)
    den = OracleDenoiser(q)
    trace = []
    cfg = sc_config(T=8, remask_schedule=zero_tail(0.34, 1))
    self_correct_sample(cfg, den, LINEAR, 6, np.random.default_rng(5), n=200, trace=trace)
    for k, ((_, t, s), (before, fresh, removed, after)) in enumerate(zip(time_grid(8), trace), 1):
        sigma = eval_sigma(cfg.remask_schedule, k, 8, LINEAR.alpha(t), LINEAR.alpha(s)).value
        K = remask_count(sigma, 6)
        assert (k == 8) == (K == 0)
        np.testing.assert_array_equal(removed, np.minimum(K, before + fresh))


def test_remask_count():
    assert remask_count(0.34, 6) == 2
    assert remask_count(0.29, 100) == 29
    assert remask_count(0.0, 10) == 0


def test_default_budget_sums_to_d():
    for T, D in [(1, 3), (4, 6), (16, 5), (3, 8)]:
        b = default_unmask_budget(T, D, LINEAR)
        assert len(b) == T and sum(b) == D and min(b) >= 0


def test_force_unmask_uses_argmax():
    den = OracleDenoiser(all_equal(3, 3))
    np.testing.assert_array_equal(force_unmask([[1, 3, 3]], den), [[1, 1, 1]])
    np.testing.assert_array_equal(force_unmask([[0, 1, 2]], den), [[0, 1, 2]])


# -- exact laws via the DP oracle -------------------------------------------


def test_top_k_single_steps_is_exact_on_all_equal():
    q = all_equal(2, 2)
    cfg = SamplerConfig(T=2, strategy="top_k", unmask_budget=(1, 1))
    assert tv_distance(exact_sampler_law(cfg, q, LINEAR), q) <= 1e-12


def test_top_k_one_shot_equals_vanilla_one_step():
    q = all_equal(3, 2)
    top = exact_sampler_law(SamplerConfig(T=1, strategy="top_k", unmask_budget=(3,)), q, LINEAR)
    van = exact_sampler_law(SamplerConfig(T=1), q, LINEAR)
    assert tv_distance(top, van) <= 1e-12


def test_margin_and_max_prob_agree_on_binary_vocab():
    q = markov_chain(3, 2, peaked_transition(2, 0.7))
    a = exact_sampler_law(SamplerConfig(T=3, strategy="top_k", unmask_budget=(1, 1, 1)), q, LINEAR)
    b = exact_sampler_law(SamplerConfig(T=3, strategy="top_k_margin", unmask_budget=(1, 1, 1)), q, LINEAR)
    assert tv_distance(a, b) <= 1e-12


def test_top_k_budget_length_checked():
    q = all_equal(2, 2)
    with pytest.raises(ValueError):
        sample(SamplerConfig(T=2, strategy="top_k", unmask_budget=(2,)), OracleDenoiser(q), LINEAR, 2,
               np.random.default_rng(0), n=2)


def test_zero_likelihood_token_is_remasked_first():
    q = all_equal(3, 2)
    den = OracleDenoiser(q)
    x = np.array([[0, 0, 1]])
    for score_type in ("current", "cumulated"):
        st_ = update_scores(CorrectionState.initial(1, 3), x, den, score_type)
        np.testing.assert_array_equal(st_.sentinel, [[False, False, True]])
        np.testing.assert_array_equal(remask_select(st_, x != 2, 1, "deterministic"), [[0, 0, 1]])


@pytest.mark.parametrize("eta", [0.0, 0.34, 0.5, 1.0])
@pytest.mark.parametrize("rule", ["deterministic", "stochastic"])
def test_product_target_exact_for_any_sigma(eta, rule):
    q = product_uniform(3, 2)
    cfg = sc_config(T=3, rule=rule, remask_schedule=RemaskSchedule("capped_constant", eta))
    assert tv_distance(exact_sampler_law(cfg, q, LINEAR), q) <= 1e-12
    remdm = SamplerConfig(T=3, strategy="remdm", remask_schedule=RemaskSchedule("capped_constant", eta))
    assert tv_distance(exact_sampler_law(remdm, q, LINEAR), q) <= 1e-12


@pytest.mark.parametrize("cfg", [
    SamplerConfig(T=3),
    SamplerConfig(T=3, strategy="remdm", remask_schedule=RemaskSchedule("capped_constant", 0.3)),
    SamplerConfig(T=3, strategy="top_k_margin"),
    sc_config(T=3),
    sc_config(T=3, score_type="current", rule="stochastic"),
    sc_config(T=3, criterion="kl"),
    sc_config(T=3, criterion="wasserstein", accumulate=True, rule="stochastic", temperature=0.5),
    sc_config(T=3, criterion="top_k_margin", kernel_remask_mode="both"),
    sc_config(T=3, kernel_remask_mode="iid", reset_on_remask=False),
], ids=lambda c: f"{c.strategy.value}-{c.score_type.value}-{c.rule.value}-{c.criterion.value}")
def test_sampler_matches_dp_law(cfg):
    q = all_equal(3, 2)
    law = exact_sampler_law(cfg, q, LINEAR)
    assert abs(sum(law.values()) - 1) <= 1e-12
    N = 20_000
    x = sample(cfg, OracleDenoiser(q), LINEAR, 3, np.random.default_rng(7), n=N)
    emp_tv = empirical_tv(x, q)
    assert abs(emp_tv - tv_distance(law, q)) <= mc_tv_bound(8, N)
    assert tv_distance(EmpiricalDistribution.from_samples(x), law) <= mc_tv_bound(8, N)


def test_sampler_config_round_trip():
    cfg = sc_config(criterion="kl", unmask_budget=(1, 2), temperature=0.5)
    again = SamplerConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert replace(cfg, T=9).T == 9
    with pytest.raises(KeyError):
        SamplerConfig.from_dict({"T": 2, "bogus": 1})
    with pytest.raises(ValueError):
        SamplerConfig(T=0)
    with pytest.raises(ValueError):
        SamplerConfig(strategy="greedy")


def test_single_sample_shape():
    q = parity(3)
    x = sample(sc_config(), OracleDenoiser(q), LINEAR, 3, np.random.default_rng(0))
    assert x.shape == (3,)
    assert tuple(x) in q.as_dict() or (x < 2).all()
