"""Exact belief tracking and finite-horizon planning for small tabular EPs.

A :class:`FiniteEP` enumerates its states, its admissible intervention sets
and the observation *sets* it can emit; the kernels are dense numpy arrays::

    F[s, i, s']   transition probability under intervention set i
    O[s', y]      probability of emitting observation set y from s'
    U[s, i]       immediate utility

Beliefs are plain 1-D float arrays over states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EMPTY, EngagementProcessSpec, InadmissibleInterventionError, intervention

TOL = 1e-12


class ImpossibleObservationError(ValueError):
    """Observation set has zero probability under the predictive belief."""

    def __init__(self, obs_index: int, label=None):
        self.obs_index = obs_index
        self.label = label
        super().__init__(f"observation set {label!r} (index {obs_index}) has zero likelihood")


class NodeBudgetExceeded(RuntimeError):
    pass


def _label(x) -> frozenset:
    if isinstance(x, frozenset):
        return x
    if isinstance(x, str):
        return frozenset([x])
    return frozenset(x)


@dataclass(frozen=True, eq=False)
class FiniteEP:
    states: tuple
    intervention_sets: tuple        # labels, frozensets of action ids
    obs_sets: tuple                 # labels, frozensets of event ids
    F: np.ndarray
    O: np.ndarray
    U: np.ndarray
    gamma: float = 1.0
    admissible: np.ndarray | None = None    # bool [S, I]; None means all
    initial: np.ndarray | None = None       # initial belief; None means uniform
    name: str = "finite-ep"

    def __post_init__(self):
        S, I, Y = len(self.states), len(self.intervention_sets), len(self.obs_sets)
        F = np.asarray(self.F, dtype=float)
        O = np.asarray(self.O, dtype=float)
        U = np.asarray(self.U, dtype=float)
        if F.shape != (S, I, S) or O.shape != (S, Y) or U.shape != (S, I):
            raise ValueError(f"kernel shapes {F.shape}, {O.shape}, {U.shape} do not match "
                             f"{S} states, {I} intervention sets, {Y} observation sets")
        if (F < 0).any() or (O < 0).any():
            raise ValueError("negative probability in F or O")
        if not np.allclose(F.sum(axis=2), 1.0, rtol=0, atol=TOL):
            raise ValueError("every F row must sum to 1")
        if not np.allclose(O.sum(axis=1), 1.0, rtol=0, atol=TOL):
            raise ValueError("every O row must sum to 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        adm = np.ones((S, I), bool) if self.admissible is None else np.asarray(self.admissible, bool)
        if adm.shape != (S, I):
            raise ValueError("admissible mask must be [S, I]")
        init = np.full(S, 1.0 / S) if self.initial is None else np.asarray(self.initial, float)
        check_belief(init)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "O", O)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "admissible", adm)
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "intervention_sets", tuple(_label(a) for a in self.intervention_sets))
        object.__setattr__(self, "obs_sets", tuple(_label(y) for y in self.obs_sets))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_interventions(self) -> int:
        return len(self.intervention_sets)

    @property
    def n_obs(self) -> int:
        return len(self.obs_sets)

    def allowed(self, b: np.ndarray) -> list:
        """Intervention indices admissible in every state the belief supports."""
        support = np.asarray(b) > 0
        return [i for i in range(self.n_interventions) if self.admissible[support, i].all()]

    def runtime_sets(self) -> tuple:
        """Intervention sets as :class:`AtomicAction` sets, in index order."""
        return tuple(intervention(*sorted(a)) for a in self.intervention_sets)

    def to_spec(self, horizon: int) -> EngagementProcessSpec:
        """Sampling view of this EP for the episode runner.

        States are integers; intervention set ``i`` is ``intervention(*label_i)``.
        """
        acts = self.runtime_sets()
        index = {a: i for i, a in enumerate(acts)}
        S = self.n_states

        def initial(rng):
            return _sample(self.initial, rng.transition)

        def transition(s, A, rng):
            return _sample(self.F[s, index[A]], rng.transition)

        def observation(s, rng):
            y = self.obs_sets[_sample(self.O[s], rng.observation)]
            return tuple((e, None) for e in sorted(y))

        def utility(s, A):
            u = self.U[s, index[A]]
            return (("other", float(u)),) if u else ()

        def admissible(s, A):
            i = index.get(A)
            return i is not None and bool(self.admissible[s, i])

        alphabet = tuple(sorted({a for A in self.intervention_sets for a in A}))
        return EngagementProcessSpec(
            name=self.name, initial=initial, transition=transition, observation=observation,
            utility=utility, admissible=admissible, horizon=horizon, gamma_tick=self.gamma,
            action_alphabet=alphabet,
            enumerate_interventions=lambda s: [A for i, A in enumerate(acts) if self.admissible[s, i]],
            annotate=lambda s: {"state": str(self.states[s])},
        )


def _sample(p: np.ndarray, r) -> int:
    x = r.random()
    acc = 0.0
    for i, pi in enumerate(p):
        acc += pi
        if x < acc:
            return i
    return int(np.flatnonzero(p)[-1])


def check_belief(b: np.ndarray) -> None:
    b = np.asarray(b, dtype=float)
    if b.ndim != 1 or (b < 0).any() or abs(b.sum() - 1.0) > TOL:
        raise ValueError("belief must be a non-negative vector summing to 1")


def predict(b: np.ndarray, A: int, ep: FiniteEP) -> np.ndarray:
    """Predictive belief ``sum_s F(s'|s, A) b(s)`` before the next observation."""
    if not 0 <= A < ep.n_interventions:
        raise IndexError(f"unknown intervention set index {A}")
    b = np.asarray(b, dtype=float)
    bad = (b > 0) & ~ep.admissible[:, A]
    if bad.any():
        s = int(np.flatnonzero(bad)[0])
        raise InadmissibleInterventionError(
            _fmt(ep.intervention_sets[A]), None,
            f"{_fmt(ep.intervention_sets[A])} inadmissible in state {ep.states[s]!r}")
    return b @ ep.F[:, A, :]


def posterior(b_bar: np.ndarray, Y: int, ep: FiniteEP) -> np.ndarray:
    """Condition a predictive belief on observation set ``Y`` (possibly empty)."""
    if not 0 <= Y < ep.n_obs:
        raise IndexError(f"unknown observation set index {Y}")
    w = ep.O[:, Y] * b_bar
    z = w.sum()
    if z <= 0.0:
        raise ImpossibleObservationError(Y, _fmt(ep.obs_sets[Y]))
    return w / z


def obs_predictive(b: np.ndarray, A: int, ep: FiniteEP) -> np.ndarray:
    """Distribution over observation sets after applying ``A``."""
    return predict(b, A, ep) @ ep.O


def update(b: np.ndarray, A: int, Y: int, ep: FiniteEP) -> np.ndarray:
    return posterior(predict(b, A, ep), Y, ep)


def expected_utility(b: np.ndarray, A: int, ep: FiniteEP) -> float:
    # U depends on (s, A) only, so marginalising the next state is a no-op
    return float(np.asarray(b) @ ep.U[:, A])


def bellman_optimal_value(ep: FiniteEP, b: np.ndarray, horizon: int,
                          node_budget: int = 10**7) -> tuple:
    """Exact finite-horizon optimum ``(value, best intervention index)``.

    Enumerates every admissible intervention set and every observation set of
    positive probability.  Ties resolve to the lowest index.  Raises
    :class:`NodeBudgetExceeded` once more than ``node_budget`` nodes are expanded.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    b = np.asarray(b, dtype=float)
    check_belief(b)
    nodes = [0]
    OT = ep.O.T

    def value(b, h):
        nodes[0] += 1
        if nodes[0] > node_budget:
            raise NodeBudgetExceeded(f"more than {node_budget} expectimax nodes at horizon {horizon}")
        if h == 0:
            return 0.0, 0
        allowed = ep.allowed(b)
        if not allowed:
            raise InadmissibleInterventionError("*", None, "no intervention set admissible for belief")
        best, best_i = -np.inf, allowed[0]
        for i in allowed:
            v = float(b @ ep.U[:, i])
            if h > 1:
                bb = b @ ep.F[:, i, :]
                joint = OT * bb          # [Y, S'] unnormalised posteriors
                py = joint.sum(axis=1)
                cont = 0.0
                for y in np.flatnonzero(py > 0):
                    cont += py[y] * value(joint[y] / py[y], h - 1)[0]
                v += ep.gamma * cont
            if v > best:
                best, best_i = v, i
        return best, best_i

    return value(b, horizon)


# -- reductions ---------------------------------------------------------------

@dataclass(frozen=True)
class POMDP:
    T: np.ndarray           # [S, A, S'] P(s'|s,a)
    Z: np.ndarray           # [S', Y] P(y|s')
    R: np.ndarray           # [S, A]
    gamma: float = 1.0
    actions: tuple = ()
    observations: tuple = ()


def pomdp_sync_reduce(p: POMDP) -> FiniteEP:
    """Synchronised EP: one singleton intervention set per action and one
    singleton observation set per observation symbol."""
    T, Z, R = (np.asarray(x, float) for x in (p.T, p.Z, p.R))
    S, nA, _ = T.shape
    acts = p.actions or tuple(f"a{i}" for i in range(nA))
    obs = p.observations or tuple(f"y{j}" for j in range(Z.shape[1]))
    return FiniteEP(tuple(range(S)), tuple(frozenset([a]) for a in acts),
                    tuple(frozenset([y]) for y in obs), T, Z, R, p.gamma, name="pomdp")


@dataclass(frozen=True)
class OptionSpec:
    initiation: frozenset           # base state indices where the option may start
    policy: tuple                   # base state -> base intervention index run by the option
    terminate: tuple                # base state -> bool, checked on the state reached
    name: str = "option"


def encode_option(base: FiniteEP, opt: OptionSpec) -> FiniteEP:
    """Augment ``base`` with an active-option flag.

    Augmented state ``2*s + f``; ``f = 1`` while the option runs.  Issuing the
    option intervention executes ``opt.policy`` for one tick and keeps the flag
    up until a state with ``terminate`` set is reached.  While the flag is up
    the only admissible set is the empty one, under which the option keeps
    executing.  Observations are emitted every tick as in ``base``.
    """
    S, I = base.n_states, base.n_interventions
    if EMPTY not in base.intervention_sets:
        raise ValueError("base EP must offer the empty intervention set")
    if len(opt.policy) != S or len(opt.terminate) != S:
        raise ValueError("option policy and termination must cover every base state")
    if any(not 0 <= a < I for a in opt.policy):
        raise ValueError("option policy refers to an unknown intervention set")
    if any(not 0 <= s < S for s in opt.initiation):
        raise ValueError("initiation set refers to an unknown state")
    empty = base.intervention_sets.index(EMPTY)
    o = I                                       # index of the new option intervention
    term = np.asarray(opt.terminate, bool)
    S2, I2 = 2 * S, I + 1
    F = np.zeros((S2, I2, S2))
    U = np.zeros((S2, I2))
    adm = np.zeros((S2, I2), bool)

    def run(s):
        nxt = base.F[s, opt.policy[s]]
        row = np.zeros(S2)
        row[0::2] = nxt * term                  # terminated: flag down
        row[1::2] = nxt * ~term                 # still running
        return row, base.U[s, opt.policy[s]]

    for s in range(S):
        idle, busy = 2 * s, 2 * s + 1
        for i in range(I):
            F[idle, i, 0::2] = base.F[s, i]
            U[idle, i] = base.U[s, i]
            adm[idle, i] = base.admissible[s, i]
        row, u = run(s)
        F[idle, o], U[idle, o] = row, u
        adm[idle, o] = s in opt.initiation
        # busy: every set gets the option's dynamics but only the empty set is admissible
        for i in range(I2):
            F[busy, i], U[busy, i] = row, u
        adm[busy, empty] = True
    O = np.repeat(base.O, 2, axis=0)
    init = np.zeros(S2)
    init[0::2] = base.initial
    states = tuple((st, f) for st in base.states for f in (False, True))
    return FiniteEP(states, base.intervention_sets + (frozenset([opt.name]),), base.obs_sets,
                    F, O, U, base.gamma, adm, init, name=f"{base.name}+{opt.name}")


# -- text format --------------------------------------------------------------
#
#   # comment
#   name    toy
#   gamma   0.9
#   state   s0
#   intervention {}          one line per set, {a,b} without spaces
#   obs     {e}
#   F   s0 {} s1 0.5         unlisted entries are 0
#   O   s1 {e} 1.0
#   U   s0 {a} 1.0
#   init s0 1.0              optional, default uniform
#   inadmissible s0 {a}      optional

def _parse_set(tok: str) -> frozenset:
    if not (tok.startswith("{") and tok.endswith("}")):
        raise ValueError(f"expected a set like {{a,b}}, got {tok!r}")
    inner = tok[1:-1].strip()
    return frozenset(x.strip() for x in inner.split(",")) if inner else frozenset()


def _fmt(s: frozenset) -> str:
    return "{" + ",".join(sorted(s)) + "}"


def load_finite_ep(text: str) -> FiniteEP:
    states, acts, obs = [], [], []
    rows, gamma, name, init, inadm = [], 1.0, "finite-ep", {}, []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind = tok[0]
        try:
            if kind == "name":
                name = tok[1]
            elif kind == "gamma":
                gamma = float(tok[1])
            elif kind == "state":
                states.append(tok[1])
            elif kind == "intervention":
                acts.append(_parse_set(tok[1]))
            elif kind == "obs":
                obs.append(_parse_set(tok[1]))
            elif kind in ("F", "O", "U", "init", "inadmissible"):
                rows.append((n, kind, tok[1:]))
            else:
                raise ValueError(f"unknown row kind {kind!r}")
        except (IndexError, ValueError) as e:
            raise ValueError(f"line {n}: {e}") from None
    si = {s: i for i, s in enumerate(states)}
    ai = {a: i for i, a in enumerate(acts)}
    yi = {y: i for i, y in enumerate(obs)}
    S, I, Y = len(states), len(acts), len(obs)
    F, O, U = np.zeros((S, I, S)), np.zeros((S, Y)), np.zeros((S, I))
    adm = np.ones((S, I), bool)
    for n, kind, t in rows:
        try:
            if kind == "F":
                F[si[t[0]], ai[_parse_set(t[1])], si[t[2]]] = float(t[3])
            elif kind == "O":
                O[si[t[0]], yi[_parse_set(t[1])]] = float(t[2])
            elif kind == "U":
                U[si[t[0]], ai[_parse_set(t[1])]] = float(t[2])
            elif kind == "init":
                init[si[t[0]]] = float(t[1])
            else:
                adm[si[t[0]], ai[_parse_set(t[1])]] = False
        except (IndexError, KeyError, ValueError) as e:
            raise ValueError(f"line {n}: bad {kind} row ({e})") from None
    b0 = None
    if init:
        b0 = np.zeros(S)
        for i, v in init.items():
            b0[i] = v
    return FiniteEP(tuple(states), tuple(acts), tuple(obs), F, O, U, gamma, adm, b0, name)


def dump_finite_ep(ep: FiniteEP) -> str:
    lines = [f"name {ep.name}", f"gamma {float(ep.gamma)!r}"]
    lines += [f"state {s}" for s in ep.states]
    lines += [f"intervention {_fmt(a)}" for a in ep.intervention_sets]
    lines += [f"obs {_fmt(y)}" for y in ep.obs_sets]
    st = [str(s) for s in ep.states]
    for s, i, s2 in zip(*np.nonzero(ep.F)):
        lines.append(f"F {st[s]} {_fmt(ep.intervention_sets[i])} {st[s2]} {float(ep.F[s, i, s2])!r}")
    for s, y in zip(*np.nonzero(ep.O)):
        lines.append(f"O {st[s]} {_fmt(ep.obs_sets[y])} {float(ep.O[s, y])!r}")
    for s, i in zip(*np.nonzero(ep.U)):
        lines.append(f"U {st[s]} {_fmt(ep.intervention_sets[i])} {float(ep.U[s, i])!r}")
    for s in np.flatnonzero(ep.initial):
        lines.append(f"init {st[s]} {float(ep.initial[s])!r}")
    for s, i in zip(*np.nonzero(~ep.admissible)):
        lines.append(f"inadmissible {st[s]} {_fmt(ep.intervention_sets[i])}")
    return "\n".join(lines) + "\n"


def random_finite_ep(rng: np.random.Generator, max_states: int = 4, max_sets: int = 3,
                     max_obs: int = 3, gamma: float | None = None) -> FiniteEP:
    """Random dense EP for property tests; some O entries are zeroed."""
    S = int(rng.integers(1, max_states + 1))
    I = int(rng.integers(1, max_sets + 1))
    Y = int(rng.integers(1, max_obs + 1))
    F = rng.dirichlet(np.ones(S), size=(S, I))
    O = rng.dirichlet(np.ones(Y), size=S)
    if Y > 1:
        O[rng.random((S, Y)) < 0.2] = 0.0
        O[O.sum(axis=1) == 0, 0] = 1.0
        O /= O.sum(axis=1, keepdims=True)
    U = rng.normal(size=(S, I))
    g = float(rng.uniform(0.5, 1.0)) if gamma is None else gamma
    acts = [frozenset()] + [frozenset([f"a{i}"]) for i in range(1, I)]
    obs = [frozenset()] + [frozenset([f"e{j}"]) for j in range(1, Y)]
    return FiniteEP(tuple(f"s{i}" for i in range(S)), tuple(acts), tuple(obs), F, O, U, g)
