import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import enumerate_bootstrap

from ep_lab.agents import QLearningConfig, QTable, greedy_policy, train
from ep_lab.core import EMPTY, EpisodeTrace, Policy
from ep_lab.envs.deliberation import (EP, STEP, DeliberationExtractor, make_sequential_env,
                                      make_single_task_env, mode_action)
from ep_lab.envs.patrol import PatrolExtractor, module_level_env
from ep_lab.evaluation import (MEAN, RATE, BootstrapConfig, KeyAlphabetMismatch, MetricsRow, bootstrap_ci,
                               check_compatible, cross_eval, evaluate, mode_distribution_by_urgency,
                               rows_to_csv, rows_to_markdown, run_episodes, summarize)


def fake_traces(decisions_per_episode):
    return [EpisodeTrace(i, "deliberation-x", counters={"decisions": d}) for i, d in enumerate(decisions_per_episode)]


# -- bootstrap ---------------------------------------------------------------------------

def test_constant_sample_has_zero_width():
    assert bootstrap_ci([5, 5, 5, 5]) == (5.0, 0.0)


def test_rate_of_all_successes():
    assert bootstrap_ci([(1, 1)] * 30, RATE) == (1.0, 0.0)


def test_two_point_sample_matches_enumeration():
    stats = enumerate_bootstrap([0.0, 1.0], np.mean)
    assert stats == [0.0, 0.5, 0.5, 1.0]
    # the enumerated outcomes are equally likely, so quantiles come from the step CDF
    lo, hi = np.percentile(stats, [2.5, 97.5], method="inverted_cdf")
    point, hw = bootstrap_ci([0, 1], MEAN, BootstrapConfig(resamples=5000))
    assert point == 0.5
    # each extreme has mass 1/4, far above the 2.5% tails
    assert hw == pytest.approx((hi - lo) / 2, abs=0.02) and hw == pytest.approx(0.5, abs=0.02)


def test_rate_path_matches_enumeration():
    data = [(1, 2), (3, 4)]
    stats = enumerate_bootstrap(data, lambda xs: sum(a for a, _ in xs) / sum(b for _, b in xs))
    assert stats == [0.5, 4 / 6, 4 / 6, 0.75]
    lo, hi = np.percentile(stats, [2.5, 97.5], method="inverted_cdf")
    point, hw = bootstrap_ci(data, RATE, BootstrapConfig(resamples=5000))
    assert point == 4 / 6 and hw == pytest.approx((hi - lo) / 2, abs=1e-12)


def test_rate_recomputes_from_pooled_counts():
    # per-episode ratios would average to 0.5; pooled counts give 10/11
    point, _ = bootstrap_ci([(10, 10), (0, 1)], RATE)
    assert point == pytest.approx(10 / 11)


def test_half_width_scales_like_inverse_sqrt_n():
    rng = np.random.default_rng(0)
    widths = {n: bootstrap_ci(rng.integers(0, 2, n), MEAN)[1] for n in (100, 400)}
    ratio = widths[100] / widths[400]
    assert 2 / 1.5 <= ratio <= 2 * 1.5


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.integers(0, 1000))
def test_bootstrap_deterministic_and_contains_point(xs, seed):
    cfg = BootstrapConfig(resamples=200, seed=seed)
    a, b = bootstrap_ci(xs, MEAN, cfg), bootstrap_ci(xs, MEAN, cfg)
    assert a == b and a[1] >= 0
    assert a[0] == pytest.approx(float(np.mean(xs)))


@pytest.mark.parametrize("data,kind", [([], MEAN), ([(0, 0), (0, 0)], RATE), ([1, 2], "median"),
                                       ([1, 2], RATE)])
def test_bootstrap_errors(data, kind):
    with pytest.raises(ValueError):
        bootstrap_ci(data, kind)


def test_bootstrap_config_validation():
    with pytest.raises(ValueError):
        BootstrapConfig(resamples=0)
    with pytest.raises(ValueError):
        BootstrapConfig(level=1.0)


# -- mode distributions --------------------------------------------------------------------

def test_mode_distribution_always_mode_one():
    dist = mode_distribution_by_urgency(fake_traces([[(0, 1), (3, 1)], [(4, 1)]]))
    assert set(dist) == {0, 3, 4}
    for row in dist.values():
        assert list(row) == [1.0, 0.0, 0.0, 0.0, 0.0]


def test_mode_distribution_uniform_policy():
    # 10000 uniform decisions per urgency bucket, 50 per episode
    rng = np.random.default_rng(3)
    modes = rng.integers(1, 6, size=(5, 10000))
    eps = [[(b, int(m)) for b in range(5) for m in modes[b, k:k + 50]] for k in range(0, 10000, 50)]
    dist = mode_distribution_by_urgency(fake_traces(eps))
    assert len(dist) == 5
    for row in dist.values():
        assert row.sum() == pytest.approx(1.0)
        assert np.all(np.abs(row - 0.2) < 0.02)


def test_mode_distribution_from_episodes():
    pol = Policy(lambda w, r: mode_action(r.randint(1, 5)) if w is not None else EMPTY, name="uniform")
    traces = run_episodes(make_single_task_env(), pol, DeliberationExtractor, 2000)
    dist = mode_distribution_by_urgency(traces)
    assert sorted(dist) == [0, 1, 2, 3, 4]
    assert sum(row.sum() for row in dist.values()) == pytest.approx(5.0)
    assert all(np.all(np.abs(row - 0.2) < 0.08) for row in dist.values())


def test_mode_distribution_ep_trained_follows_slack():
    env = make_single_task_env(semantics=EP)
    q = train(env, QLearningConfig(training_episodes=3000), extractor=DeliberationExtractor())
    _row, traces = evaluate(env, greedy_policy(q, env), DeliberationExtractor, 1000)
    dist = mode_distribution_by_urgency(traces)
    assert dist[0][4] < dist[4][4]


# -- metrics and cross-evaluation -------------------------------------------------------

@pytest.fixture(scope="module")
def ep_table():
    env = make_sequential_env(semantics=EP)
    return train(env, QLearningConfig(training_episodes=1000), extractor=DeliberationExtractor())


def test_deliberation_rates_sum_to_one(ep_table):
    env = make_sequential_env(semantics=STEP)
    row, _ = evaluate(env, greedy_policy(ep_table, env), DeliberationExtractor, 200)
    assert row["success_rate"] + row["failure_rate"] + row["timeout_rate"] == pytest.approx(1.0)
    assert row["timeout_rate"] == 0.0
    assert sum(row[f"mode{m}_usage"] for m in range(1, 6)) == pytest.approx(1.0)


def test_patrol_rates_and_unresolved_sum_to_one():
    pol = Policy(lambda w, r: EMPTY, name="ignore")
    row, traces = evaluate(module_level_env(), pol, PatrolExtractor, 50)
    unresolved = sum(t.counters["unresolved"] for t in traces) / sum(t.counters["alarms"] for t in traces)
    assert row["resolve_rate"] + row["expire_rate"] + unresolved == pytest.approx(1.0)
    assert row["resolve_rate"] == 0.0 and "ticks_per_alarm" not in row.metrics


def test_cross_eval_same_env_equals_plain_eval(ep_table):
    env = make_sequential_env(semantics=EP)
    a, _ = cross_eval(ep_table, "EP", env, "EP", DeliberationExtractor, 100)
    b, _ = evaluate(env, greedy_policy(ep_table, env), DeliberationExtractor, 100)
    assert a.metrics == b.metrics and a.method == "EP->EP"


def test_cross_eval_rejects_foreign_table():
    q = QTable(5, "deliberation-single", tuple(f"mode{m}" for m in range(1, 6)))
    with pytest.raises(KeyAlphabetMismatch):
        check_compatible(q, module_level_env())
    with pytest.raises(KeyAlphabetMismatch):
        check_compatible(QTable(3, "deliberation", ("a", "b", "c")), make_sequential_env())


def test_workers_do_not_change_results(ep_table):
    env = make_sequential_env(semantics=EP)
    pol = greedy_policy(ep_table, env)
    one = run_episodes(env, pol, DeliberationExtractor, 40, workers=1)
    two = run_episodes(env, pol, DeliberationExtractor, 40, workers=3)
    assert [t.counters for t in one] == [t.counters for t in two]


def test_metrics_row_validation():
    with pytest.raises(ValueError):
        MetricsRow("x", "m", 0)
    with pytest.raises(ValueError):
        MetricsRow("x", "m", 1, {"timeout_rate": (1.5, 0.0)})


# -- table output ---------------------------------------------------------------------------

def test_csv_round_trip(ep_table):
    env = make_sequential_env(semantics=EP)
    row, _ = evaluate(env, greedy_policy(ep_table, env), DeliberationExtractor, 50, method="EP")
    text = rows_to_csv([row])
    back = list(csv.DictReader(io.StringIO(text)))
    assert back[0]["method"] == "EP" and int(back[0]["n"]) == 50
    assert float(back[0]["mean_return"]) == row["mean_return"]
    assert float(back[0]["timeout_rate_ci"]) == row.half_width("timeout_rate")


def test_markdown_alignment_and_missing_cells():
    rows = [MetricsRow("patrol-module", "EP", 10, {"mean_return": (12.345, 0.5), "resolve_rate": (0.9, 0.01)}),
            MetricsRow("patrol-module", "Loop", 10, {"mean_return": (-3.0, 1.25)})]
    md = rows_to_markdown(rows, "patrol-module")
    lines = md.splitlines()
    assert len({len(l) for l in lines}) == 1
    assert "12.35 ± 0.50" in lines[2] and "90.00 ± 1.00" in lines[2]
    assert "n/a" in lines[3] and lines[0].startswith("| Method")


def test_summarize_generic_env():
    traces = [EpisodeTrace(0, "toy", utility_by_tag={"task_reward": 1.0}),
              EpisodeTrace(1, "toy", utility_by_tag={"task_reward": 3.0})]
    row = summarize("toy", "m", traces)
    assert row["mean_return"] == 2.0 and set(row.metrics) == {"mean_return"}
