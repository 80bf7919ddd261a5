import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ep_lab.belief import (POMDP, FiniteEP, ImpossibleObservationError, NodeBudgetExceeded, OptionSpec,
                           bellman_optimal_value, dump_finite_ep, encode_option, expected_utility,
                           load_finite_ep, obs_predictive, pomdp_sync_reduce, posterior, predict,
                           random_finite_ep, update)
from ep_lab.core import EMPTY, InadmissibleInterventionError, Policy, run_episode
from oracles import expectimax, joint_bayes, textbook_pomdp_update

seeds = st.integers(0, 2**32 - 1)


def two_state(F, O, U=None, obs=("{}", "{e}")):
    F = np.asarray(F, float)
    S, I = F.shape[0], F.shape[1]
    U = np.zeros((S, I)) if U is None else U
    return FiniteEP(("s0", "s1"), tuple(frozenset() if i == 0 else frozenset([f"a{i}"]) for i in range(I)),
                    tuple(frozenset() if y == "{}" else frozenset([y.strip("{}")]) for y in obs), F,
                    np.asarray(O, float), np.asarray(U, float))


def random_belief(rng, n):
    return rng.dirichlet(np.ones(n))


# -- predict / posterior / predictive -------------------------------------------------

def test_predict_identity_keeps_belief():
    ep = two_state([[[1, 0]], [[0, 1]]], [[1, 0], [1, 0]])
    b = np.array([0.3, 0.7])
    assert np.array_equal(predict(b, 0, ep), b)


def test_predict_absorbing_state():
    ep = two_state([[[0, 1]], [[0, 1]]], [[1, 0], [1, 0]])
    assert np.allclose(predict(np.array([0.5, 0.5]), 0, ep), [0, 1])


def test_predict_hand_computed():
    ep = two_state([[[0.5, 0.5]], [[0.2, 0.8]]], [[1, 0], [1, 0]])
    assert np.allclose(predict(np.array([0.3, 0.7]), 0, ep), [0.29, 0.71], atol=1e-15)


def test_predict_unknown_index():
    ep = two_state([[[1, 0]], [[0, 1]]], [[1, 0], [1, 0]])
    with pytest.raises(IndexError):
        predict(np.array([1.0, 0.0]), 3, ep)


def test_posterior_bayes_by_hand_and_predictive():
    # O({e}|s0) = 1, O({e}|s1) = 0.5
    ep = two_state([[[1, 0]], [[0, 1]]], [[0, 1], [0.5, 0.5]])
    b = np.array([0.5, 0.5])
    assert np.allclose(posterior(b, 1, ep), [2 / 3, 1 / 3], atol=1e-15)
    assert np.allclose(obs_predictive(b, 0, ep), [0.25, 0.75], atol=1e-15)


def test_empty_observation_is_evidence():
    ep = two_state([[[1, 0]], [[0, 1]]], [[0, 1], [0.5, 0.5]])
    # seeing nothing rules out s0, which always emits
    assert np.allclose(posterior(np.array([0.5, 0.5]), 0, ep), [0, 1])


def test_uninformative_observation_leaves_belief():
    ep = two_state([[[1, 0]], [[0, 1]]], [[0.3, 0.7], [0.3, 0.7]])
    b = np.array([0.2, 0.8])
    assert np.allclose(posterior(b, 1, ep), b, atol=1e-15)


def test_impossible_observation_raises_with_label():
    ep = two_state([[[1, 0]], [[0, 1]]], [[1, 0], [1, 0]])
    with pytest.raises(ImpossibleObservationError) as exc:
        posterior(np.array([0.5, 0.5]), 1, ep)
    assert exc.value.obs_index == 1 and "e" in exc.value.label


def test_point_mass_predictive_under_deterministic_observation():
    ep = two_state([[[0, 1]], [[0, 1]]], [[1, 0], [0, 1]])
    assert np.array_equal(obs_predictive(np.array([1.0, 0.0]), 0, ep), [0, 1])


@given(seeds, st.floats(0, 1))
def test_predictive_is_linear_in_belief(seed, lam):
    rng = np.random.default_rng(seed)
    ep = random_finite_ep(rng)
    b1, b2 = random_belief(rng, ep.n_states), random_belief(rng, ep.n_states)
    mix = lam * b1 + (1 - lam) * b2
    mix /= mix.sum()
    for A in range(ep.n_interventions):
        lhs = obs_predictive(mix, A, ep)
        rhs = lam * obs_predictive(b1, A, ep) + (1 - lam) * obs_predictive(b2, A, ep)
        assert np.allclose(lhs, rhs, atol=1e-12)


@given(seeds)
def test_update_matches_joint_bayes_oracle(seed):
    rng = np.random.default_rng(seed)
    ep = random_finite_ep(rng)
    b = random_belief(rng, ep.n_states)
    for A in range(ep.n_interventions):
        for Y in range(ep.n_obs):
            want = joint_bayes(b.tolist(), A, Y, ep.F.tolist(), ep.O.tolist())
            if want is None:
                with pytest.raises(ImpossibleObservationError):
                    update(b, A, Y, ep)
                continue
            got = update(b, A, Y, ep)
            assert np.abs(got - np.array(want)).sum() <= 1e-9


@given(seeds)
def test_beliefs_and_predictives_normalised(seed):
    rng = np.random.default_rng(seed)
    ep = random_finite_ep(rng)
    b = random_belief(rng, ep.n_states)
    for A in range(ep.n_interventions):
        assert abs(predict(b, A, ep).sum() - 1) <= 1e-12
        py = obs_predictive(b, A, ep)
        assert abs(py.sum() - 1) <= 1e-12
        for Y in np.flatnonzero(py > 0):
            assert abs(update(b, A, int(Y), ep).sum() - 1) <= 1e-12


# -- Bellman -------------------------------------------------------------------------

def test_bellman_single_state_two_sets():
    ep = FiniteEP(("s",), (frozenset(), frozenset(["a"])), (frozenset(),), np.ones((1, 2, 1)),
                  np.ones((1, 1)), np.array([[1.0, 2.0]]))
    assert bellman_optimal_value(ep, np.array([1.0]), 1) == (2.0, 1)


def test_bellman_horizon_zero():
    ep = random_finite_ep(np.random.default_rng(0))
    assert bellman_optimal_value(ep, ep.initial, 0) == (0.0, 0)


def test_bellman_ties_go_to_lowest_index():
    ep = FiniteEP(("s",), (frozenset(), frozenset(["a"])), (frozenset(),), np.ones((1, 2, 1)),
                  np.ones((1, 1)), np.array([[1.0, 1.0]]))
    assert bellman_optimal_value(ep, np.array([1.0]), 3)[1] == 0


def test_bellman_node_budget():
    ep = random_finite_ep(np.random.default_rng(1), max_states=4, max_sets=3, max_obs=3)
    with pytest.raises(NodeBudgetExceeded):
        bellman_optimal_value(ep, ep.initial, 12, node_budget=1000)


@given(seeds, st.integers(1, 3))
def test_bellman_matches_expectimax_oracle(seed, h):
    rng = np.random.default_rng(seed)
    ep = random_finite_ep(rng, max_states=3, max_sets=2, max_obs=2)
    b = random_belief(rng, ep.n_states)
    v, i = bellman_optimal_value(ep, b, h)
    ov, oi = expectimax(b.tolist(), h, ep.F.tolist(), ep.O.tolist(), ep.U.tolist(), ep.gamma)
    assert abs(v - ov) <= 1e-9 and i == oi


@given(seeds, st.integers(0, 3))
def test_bellman_monotone_in_horizon_for_nonnegative_utilities(seed, h):
    rng = np.random.default_rng(seed)
    base = random_finite_ep(rng, max_states=3, max_sets=2, max_obs=2)
    ep = FiniteEP(base.states, base.intervention_sets, base.obs_sets, base.F, base.O, np.abs(base.U),
                  base.gamma)
    assert bellman_optimal_value(ep, ep.initial, h + 1)[0] >= bellman_optimal_value(ep, ep.initial, h)[0] - 1e-12


@given(seeds, st.floats(0.1, 10.0))
def test_bellman_argmax_stable_under_scaling(seed, c):
    rng = np.random.default_rng(seed)
    ep = random_finite_ep(rng, max_states=3, max_sets=3, max_obs=2)
    scaled = FiniteEP(ep.states, ep.intervention_sets, ep.obs_sets, ep.F, ep.O, c * ep.U, ep.gamma)
    v, i = bellman_optimal_value(ep, ep.initial, 2)
    vs, is_ = bellman_optimal_value(scaled, ep.initial, 2)
    assert is_ == i and vs == pytest.approx(c * v, rel=1e-9, abs=1e-12)


def test_expected_utility_is_belief_weighted():
    ep = random_finite_ep(np.random.default_rng(4))
    b = ep.initial
    assert expected_utility(b, 0, ep) == pytest.approx(float(sum(b[s] * ep.U[s, 0] for s in range(ep.n_states))))


# -- synchronised POMDP reduction -------------------------------------------------------

def tiger():
    # states: tiger-left, tiger-right; action 0 = listen; obs: hear-left, hear-right
    T = np.zeros((2, 1, 2))
    T[0, 0, 0] = T[1, 0, 1] = 1.0
    Z = np.array([[0.85, 0.15], [0.15, 0.85]])
    return POMDP(T, Z, np.array([[-1.0], [-1.0]]), 0.95, ("listen",), ("hear-left", "hear-right"))


def test_tiger_listen_matches_textbook():
    ep = pomdp_sync_reduce(tiger())
    b = np.array([0.5, 0.5])
    got = update(b, 0, 0, ep)
    assert np.allclose(got, [0.85, 0.15], atol=1e-12)
    got2 = update(got, 0, 0, ep)
    # 0.85^2 / (0.85^2 + 0.15^2)
    assert got2[0] == pytest.approx(0.7225 / 0.745, abs=1e-12)


def test_fully_observed_mdp_gives_point_masses():
    S = 3
    rng = np.random.default_rng(2)
    T = np.zeros((S, 2, S))
    for s in range(S):
        for a in range(2):
            T[s, a, rng.integers(S)] = 1.0
    ep = pomdp_sync_reduce(POMDP(T, np.eye(S), np.zeros((S, 2))))
    b = np.full(S, 1 / S)
    for a in range(2):
        for y in np.flatnonzero(obs_predictive(b, a, ep) > 0):
            post = update(b, a, int(y), ep)
            assert sorted(post) == [0.0] * (S - 1) + [1.0]


@given(seeds)
def test_reduction_matches_textbook_and_uses_singletons(seed):
    rng = np.random.default_rng(seed)
    S, A, Y = rng.integers(1, 5), rng.integers(1, 4), rng.integers(1, 4)
    T = rng.dirichlet(np.ones(S), size=(S, A))
    Z = rng.dirichlet(np.ones(Y), size=S)
    ep = pomdp_sync_reduce(POMDP(T, Z, rng.normal(size=(S, A))))
    assert all(len(x) == 1 for x in ep.intervention_sets)
    assert all(len(y) == 1 for y in ep.obs_sets)
    b = random_belief(rng, S)
    for a in range(A):
        for y in range(Y):
            want = textbook_pomdp_update(b.tolist(), a, y, T.tolist(), Z.tolist())
            assert np.abs(update(b, a, y, ep) - want).max() <= 1e-12


# -- option encoding ------------------------------------------------------------------

def chain_base(n=5, emit_at=2):
    """Deterministic chain 0..n-1 with one 'advance' set; state ``emit_at`` emits {e}."""
    F = np.zeros((n, 2, n))
    for s in range(n):
        F[s, 0, s] = 1.0
        F[s, 1, min(s + 1, n - 1)] = 1.0
    O = np.zeros((n, 2))
    O[:, 0] = 1.0
    O[emit_at] = [0.0, 1.0]
    return FiniteEP(tuple(f"c{s}" for s in range(n)), (EMPTY, frozenset(["advance"])),
                    (frozenset(), frozenset(["e"])), F, O, np.zeros((n, 2)),
                    initial=np.eye(n)[0])


def forced_empty(ep, s):
    return ep.admissible[s].sum() == 1 and ep.admissible[s, ep.intervention_sets.index(EMPTY)]


def run_option(ep, horizon=6):
    spec = ep.to_spec(horizon)
    opt = ep.runtime_sets()[-1]
    fired = []

    def decide(w, rng):
        if not fired:
            fired.append(1)
            return opt
        return EMPTY

    return run_episode(spec, Policy(decide), None, seed=0)


def test_option_running_three_ticks_forces_three_empty_ticks():
    base = chain_base()
    # issued at c0, stops on reaching c4: the option occupies ticks 0..3
    opt = OptionSpec(frozenset([0]), (1,) * 5, (False, False, False, False, True), "go")
    ep = encode_option(base, opt)
    tr = run_option(ep)
    idx = {str(s): i for i, s in enumerate(ep.states)}
    forced = [forced_empty(ep, idx[r.annotation["state"]]) for r in tr.records]
    assert forced == [False, True, True, True, False, False]
    assert tr.records[4].annotation["state"] == str(("c4", False))


def test_immediate_termination_keeps_base_admissibility():
    base = chain_base()
    opt = OptionSpec(frozenset(range(5)), (1,) * 5, (True,) * 5, "go")
    ep = encode_option(base, opt)
    tr = run_option(ep)
    idx = {str(s): i for i, s in enumerate(ep.states)}
    for r in tr.records:
        s = idx[r.annotation["state"]]
        assert s % 2 == 0
        assert np.array_equal(ep.admissible[s, :base.n_interventions], base.admissible[s // 2])


def test_observation_during_option_reaches_history():
    base = chain_base(emit_at=2)
    opt = OptionSpec(frozenset([0]), (1,) * 5, (False, False, False, False, True), "go")
    tr = run_option(encode_option(base, opt))
    seen = [r.tick for r in tr.records if any(e.id == "e" for e in r.observations)]
    assert seen == [2]
    assert tr.records[2].annotation["state"] == str(("c2", True))


def test_option_outside_initiation_is_inadmissible():
    base = chain_base()
    ep = encode_option(base, OptionSpec(frozenset([0]), (1,) * 5, (True,) * 5, "go"))
    b = np.zeros(ep.n_states)
    b[2] = 1.0                    # idle in c1
    with pytest.raises(InadmissibleInterventionError):
        predict(b, ep.n_interventions - 1, ep)


def test_option_belief_stays_consistent():
    base = chain_base()
    ep = encode_option(base, OptionSpec(frozenset([0]), (1,) * 5, (False,) * 4 + (True,), "go"))
    b = predict(ep.initial, ep.n_interventions - 1, ep)
    assert b[3] == 1.0            # (c1, running)
    assert ep.allowed(b) == [0]


# -- text format ------------------------------------------------------------------------

def test_text_round_trip():
    ep = random_finite_ep(np.random.default_rng(7))
    back = load_finite_ep(dump_finite_ep(ep))
    assert back.states == ep.states and back.intervention_sets == ep.intervention_sets
    assert np.array_equal(back.F, ep.F) and np.array_equal(back.O, ep.O) and np.array_equal(back.U, ep.U)
    assert back.gamma == ep.gamma


def test_text_fixture_and_diagnostics():
    text = """
    name toy
    gamma 0.9
    state s0
    state s1
    intervention {}
    intervention {a}
    obs {}
    obs {e}
    F s0 {} s0 1.0
    F s0 {a} s1 1.0
    F s1 {} s1 1.0
    F s1 {a} s1 1.0
    O s0 {} 1.0
    O s1 {e} 1.0
    U s0 {a} -1.0
    inadmissible s1 {a}
    """
    ep = load_finite_ep(text)
    assert ep.gamma == 0.9 and not ep.admissible[1, 1]
    assert np.allclose(update(np.array([1.0, 0.0]), 1, 1, ep), [0, 1])
    with pytest.raises(ValueError, match="line 2"):
        load_finite_ep("state s0\nbogus 1\n")


def test_invalid_tables_rejected():
    with pytest.raises(ValueError):
        two_state([[[0.5, 0.6]], [[0, 1]]], [[1, 0], [1, 0]])
    with pytest.raises(ValueError):
        two_state([[[1, 0]], [[0, 1]]], [[0.9, 0], [1, 0]])
