import pytest
from hypothesis import given
from hypothesis import strategies as st

from ep_lab.agents import (CONTINUE, PATCH_COMMIT_RULES, RESPOND_ALARM, PatchProThresholds, QLearningConfig,
                           QTable, greedy_policy, patch_policy, patchpro_policy, q_update, train)
from ep_lab.envs.deliberation import DeliberationExtractor, make_single_task_env, single_task_config
from ep_lab.envs.patrol import ALARM_NAV, HANDLING, PATROL_NAV, RESOLVING, PatrolView


# -- q_update ------------------------------------------------------------------------

def test_q_update_from_zero():
    q = QTable(2)
    assert q_update(q, "s", 0, 1.0, "t", False, QLearningConfig(learning_rate=0.5), gamma=0.9) == 0.5


def test_q_update_terminal_full_step():
    q = QTable(2)
    q.values["s"] = [3.0, 7.0]
    q.values["t"] = [100.0, 100.0]
    assert q_update(q, "s", 1, -2.5, "t", True, QLearningConfig(learning_rate=1.0), gamma=0.9) == -2.5


def test_q_update_bootstraps_from_next_max():
    q = QTable(2)
    q.values["s"] = [1.0, 0.0]
    q.values["t"] = [2.0, -1.0]
    assert q_update(q, "s", 0, 0.0, "t", False, QLearningConfig(), gamma=0.9) == pytest.approx(1.08)


def test_q_update_needs_a_discount():
    with pytest.raises(ValueError):
        q_update(QTable(1), "s", 0, 0.0, "t", False, QLearningConfig())


def test_unvisited_rows_read_zero_and_ties_go_low():
    q = QTable(3)
    assert q.row(("x",)) == [0.0, 0.0, 0.0] and q.greedy(("x",)) == 0
    q.values["k"] = [1.0, 5.0, 5.0]
    assert q.greedy("k") == 1 and q.greedy("k", (0, 2)) == 2


# -- schedule and config ---------------------------------------------------------------

def test_epsilon_schedule():
    cfg = QLearningConfig(training_episodes=1000)
    assert cfg.decay_episodes == 800
    assert cfg.epsilon(0) == 1.0
    assert cfg.epsilon(400) == pytest.approx(0.525)
    assert cfg.epsilon(800) == 0.05 and cfg.epsilon(999) == 0.05


@given(st.integers(1, 5000), st.floats(0, 1), st.floats(0, 1))
def test_epsilon_is_monotone_and_lands_exactly(n, a, b):
    start, end = max(a, b), min(a, b)
    cfg = QLearningConfig(epsilon_start=start, epsilon_end=end, epsilon_decay_episodes=n)
    eps = [cfg.epsilon(i) for i in range(0, n + 3, max(1, n // 50))]
    assert all(x >= y - 1e-12 for x, y in zip(eps, eps[1:]))
    assert cfg.epsilon(n) == end and cfg.epsilon(n + 7) == end


@pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"learning_rate": 1.5}, {"epsilon_start": 1.2},
                                {"epsilon_end": -0.1}])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        QLearningConfig(**kw)


# -- training ----------------------------------------------------------------------------

def test_zero_episodes_gives_empty_table():
    assert len(train(make_single_task_env(), QLearningConfig(training_episodes=0),
                     extractor=DeliberationExtractor())) == 0


def test_training_is_byte_reproducible():
    env = make_single_task_env()
    cfg = QLearningConfig(training_episodes=500, seed=7)
    a = train(env, cfg, extractor=DeliberationExtractor()).to_text()
    b = train(env, cfg, extractor=DeliberationExtractor()).to_text()
    assert a == b
    assert train(env, QLearningConfig(training_episodes=500, seed=8), extractor=DeliberationExtractor()).to_text() != a


def test_qtable_text_round_trip():
    q = train(make_single_task_env(), QLearningConfig(training_episodes=300), extractor=DeliberationExtractor())
    back = QTable.from_text(q.to_text())
    assert back == q and back.labels == q.labels and back.to_text() == q.to_text()


@pytest.mark.parametrize("text", ["", '{"kind": "other"}\n',
                                  '{"kind": "qtable", "schema": "", "n_actions": 2, "labels": []}\n'
                                  '{"key": [0, 1], "values": [1.0]}\n'])
def test_qtable_rejects_malformed_text(text):
    with pytest.raises(ValueError):
        QTable.from_text(text)


def test_trained_single_task_policy_respects_slack():
    cfg = single_task_config()
    env = make_single_task_env(cfg)
    q = train(env, QLearningConfig(training_episodes=8000), extractor=DeliberationExtractor())
    pol = greedy_policy(q, env)
    assert len(q) == 15
    for (urgency, difficulty) in q.values:
        slack = cfg.ticks(cfg.slack_choices_s[urgency])
        mode = q.greedy((urgency, difficulty)) + 1
        assert cfg.duration_ticks[mode - 1] <= slack, (urgency, difficulty, mode)
    assert pol.name == "greedy"


# -- Patch rule table --------------------------------------------------------------------

def view(mode=HANDLING, phase_name="Observe", left=10, dist=3, remaining=2, progress=0.5, cost=-1.0):
    return PatrolView(mode, 0, phase_name, remaining, progress, left, dist, cost)


@pytest.mark.parametrize("depth", [2, 3])
def test_patch_patrol_nav_and_observe_always_respond(depth):
    assert patch_policy(view(mode=PATROL_NAV, phase_name="-", left=22), depth) == RESPOND_ALARM
    assert patch_policy(view(phase_name="Observe", left=22), depth) == RESPOND_ALARM


@pytest.mark.parametrize("depth,phase,left,expected", [
    (2, "Commit", 6, RESPOND_ALARM), (2, "Commit", 7, CONTINUE), (2, "Commit", 1, RESPOND_ALARM),
    (3, "Verify", 8, RESPOND_ALARM), (3, "Verify", 9, CONTINUE),
    (3, "Commit", 2, CONTINUE), (3, "Commit", 20, CONTINUE),
])
def test_patch_handling_rows(depth, phase, left, expected):
    assert patch_policy(view(phase_name=phase, left=left), depth) == expected


def test_patch_rule_constants():
    assert PATCH_COMMIT_RULES == {(2, "Commit"): 6, (3, "Verify"): 8, (3, "Commit"): None}


@pytest.mark.parametrize("mode", [ALARM_NAV, RESOLVING])
def test_patch_continues_without_alarm_or_when_already_responding(mode):
    assert patch_policy(None, 2) == CONTINUE
    assert patch_policy(view(left=0), 2) == CONTINUE
    assert patch_policy(view(mode=mode, left=5), 3) == CONTINUE


# -- PatchPro threshold table --------------------------------------------------------

def test_patchpro_threshold_rows_and_constants():
    thr = PatchProThresholds()
    assert thr.rows == {(2, "Observe"): (16, 1.0, 2.0), (2, "Commit"): (8, 0.5, 3.5),
                        (3, "Observe"): (18, 1.0, 2.0), (3, "Verify"): (12, 0.8, 3.0),
                        (3, "Commit"): (8, 0.5, 4.5)}
    assert thr.very_urgent_ticks == 3 and thr.net_alarm_value == 45.0 == 25 - (-20)


def test_patchpro_rejects_negative_thresholds():
    with pytest.raises(ValueError):
        PatchProThresholds(rows={(2, "Commit"): (-1, 0.5, 3.5)})
    with pytest.raises(ValueError):
        PatchProThresholds(very_urgent_ticks=-1)


def test_patchpro_infeasible_alarm_is_skipped():
    assert patchpro_policy(view(mode=PATROL_NAV, left=9, dist=10), 2) == CONTINUE
    assert patchpro_policy(view(mode=PATROL_NAV, left=12, dist=10), 2) == RESPOND_ALARM


@pytest.mark.parametrize("depth,phase", [(2, "Observe"), (2, "Commit"), (3, "Verify"), (3, "Commit")])
def test_patchpro_very_urgent_overrides_phase(depth, phase):
    # 3 ticks left, alarm adjacent: responds even deep into a costly phase
    v = view(phase_name=phase, left=3, dist=1, remaining=9, progress=0.99, cost=-7.0)
    assert patchpro_policy(v, depth) == RESPOND_ALARM
    # one tick more and only Observe (cutoff 1.0) still passes the threshold stage
    expected = RESPOND_ALARM if phase == "Observe" else CONTINUE
    assert patchpro_policy(v._replace(alarm_remaining=4), depth) == expected


def test_patchpro_finish_first():
    # 3 ticks of phase + 3 distance + 2 resolve = 8 <= 8 -> finish the phase first
    v = view(phase_name="Commit", left=8, dist=3, remaining=3, progress=0.1, cost=-5.0)
    assert patchpro_policy(v, 2) == CONTINUE
    assert patchpro_policy(v._replace(phase_remaining=4), 2) == RESPOND_ALARM


# Each row: the threshold stage fires at exactly the urgency threshold with progress
# just under the cutoff, and every single failing condition turns it off.
ROWS = [(2, "Observe", 16, 1.0, -1.0), (2, "Commit", 8, 0.5, -5.0), (3, "Observe", 18, 1.0, -1.0),
        (3, "Verify", 12, 0.8, -4.0), (3, "Commit", 8, 0.5, -7.0)]


@pytest.mark.parametrize("depth,phase,urgency,cutoff,cost", ROWS)
def test_patchpro_threshold_stage_per_row(depth, phase, urgency, cutoff, cost):
    base = view(phase_name=phase, left=urgency, dist=2, remaining=urgency, progress=cutoff - 0.01, cost=cost)
    assert patchpro_policy(base, depth) == RESPOND_ALARM
    assert patchpro_policy(base._replace(alarm_remaining=urgency + 1, phase_remaining=urgency + 1), depth) == CONTINUE
    assert patchpro_policy(base._replace(progress=cutoff), depth) == CONTINUE


@pytest.mark.parametrize("depth,phase,urgency,cutoff,cost", ROWS)
def test_patchpro_cost_value_check_per_row(depth, phase, urgency, cutoff, cost):
    thr = PatchProThresholds()
    ratio = thr.rows[(depth, phase)][2]
    assert thr.net_alarm_value >= ratio * abs(cost)      # the tabulated costs all pass
    base = view(phase_name=phase, left=urgency, dist=2, remaining=urgency, progress=0.0, cost=cost)
    too_costly = -(thr.net_alarm_value / ratio) - 0.5
    assert patchpro_policy(base._replace(interrupt_cost=too_costly), depth) == CONTINUE


def test_patchpro_commit_cost_arithmetic():
    assert 45.0 >= 3.5 * 5 == 17.5
