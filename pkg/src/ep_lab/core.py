"""Engagement-process primitives and the tick-level interaction loop.

An environment is an :class:`EngagementProcessSpec`: an initial-state sampler,
a transition kernel over (state, intervention set), a state-conditioned
observation kernel that emits *event sets*, and a utility function of
(state, intervention set).  Actions and observations are decoupled: at any tick
the agent may trigger nothing (the empty set) and the environment may emit
nothing.

Tick ordering used throughout::

    Y_t ~ O(s_t)          observed at tick t
    A_t ~ pi(w_t)         w_t folds (A_{t-1}, Y_t, u_{t-1}) into w_{t-1}
    u_t = U(s_t, A_t)     evaluated before the transition
    s_{t+1} ~ F(s_t, A_t)
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

__all__ = [
    "AtomicAction", "ObservationEvent", "UtilityEvent", "UTILITY_TAGS", "EMPTY",
    "intervention", "EpisodeRng", "AgentView", "EngagementProcessSpec",
    "HistoryRecord", "Extractor", "LastObservation", "Policy", "TickRecord",
    "EpisodeTrace", "InadmissibleInterventionError", "step", "run_episode",
    "discounted_return", "every_tick", "fold_history", "trace_to_jsonl",
    "trace_from_jsonl",
]

UTILITY_TAGS = ("task_reward", "penalty", "time_cost", "interrupt_cost", "switch_cost", "other")


class AtomicAction(NamedTuple):
    id: str
    payload: Hashable = None

    def __str__(self) -> str:
        return self.id if self.payload is None else f"{self.id}:{self.payload}"


class ObservationEvent(NamedTuple):
    id: str
    payload: Any
    emitted_at: int


class UtilityEvent(NamedTuple):
    value: float
    tick: int
    tag: str


# The empty intervention set.  Continuation of ongoing processes is always
# expressed by triggering nothing.
EMPTY: frozenset = frozenset()


def intervention(*ids: str | AtomicAction) -> frozenset:
    """Build an intervention set from action ids or :class:`AtomicAction` values."""
    return frozenset(a if isinstance(a, AtomicAction) else AtomicAction(a) for a in ids)


class InadmissibleInterventionError(ValueError):
    def __init__(self, action_id: str, tick: int | None = None, detail: str = ""):
        self.action_id = action_id
        self.tick = tick
        where = "" if tick is None else f" at tick {tick}"
        msg = f"inadmissible intervention {action_id!r}{where}"
        super().__init__(msg + (f": {detail}" if detail else ""))


STREAMS = ("transition", "observation", "arrival", "policy")


class EpisodeRng:
    """Named, independent random sub-streams derived from one episode seed.

    Adding draws to one stream never shifts another, so e.g. an extra
    observation draw leaves transition sampling untouched.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAMS))
        for name, child in zip(STREAMS, children):
            state = child.generate_state(2, dtype=np.uint64)
            setattr(self, name, random.Random(int(state[0]) << 64 | int(state[1])))

    transition: random.Random
    observation: random.Random
    arrival: random.Random
    policy: random.Random


# purposes that derive per-episode seeds from one base seed
EVAL, TRAIN, EXPLORE = 0, 1, 2


def episode_seed(base_seed: int, index: int, purpose: int = EVAL) -> int:
    """Deterministic seed for episode ``index`` of a batch.

    Training and evaluation batches built from the same base seed use
    disjoint streams (``purpose``).
    """
    return int(np.random.SeedSequence([int(base_seed), purpose, int(index)]).generate_state(1)[0])


@dataclass(frozen=True)
class AgentView:
    """Discrete interface a tabular learner sees.

    ``key`` maps an information state to a hashable table key (or ``None`` when
    there is nothing to decide); ``menu`` lists the candidate intervention sets
    in a fixed order so that action indices are stable across semantics.
    """

    schema: str
    menu: tuple
    key: Callable[[Any], Hashable | None]
    labels: tuple = ()
    # indices of menu entries the agent may pick given its information state
    allowed: Callable[[Any], tuple] | None = None

    def allowed_actions(self, w) -> tuple:
        if self.allowed is None:
            return tuple(range(len(self.menu)))
        return self.allowed(w)

    def action_labels(self) -> tuple:
        if self.labels:
            return self.labels
        return tuple("+".join(sorted(str(a) for a in A)) or "∅" for A in self.menu)


def _never(state) -> bool:
    return False


@dataclass(frozen=True)
class EngagementProcessSpec:
    """An engagement process E = (S, A, Y, F, O, U) with horizon and discount.

    Kernels receive the episode's :class:`EpisodeRng` and draw from the named
    sub-stream they own (``transition``, ``observation`` or ``arrival``); given
    the streams they are deterministic.  ``transition`` may update the state in place and return
    it; the runner never keeps references to past states, only annotations.
    """

    name: str
    initial: Callable[[EpisodeRng], Any]
    transition: Callable[[Any, frozenset, "EpisodeRng"], Any]
    observation: Callable[[Any, "EpisodeRng"], tuple]
    utility: Callable[[Any, frozenset], tuple]
    admissible: Callable[[Any, frozenset], bool]
    horizon: int
    gamma_tick: float = 1.0
    action_alphabet: tuple = ()
    enumerate_interventions: Callable[[Any], Iterable[frozenset]] | None = None
    terminal: Callable[[Any], bool] = _never
    annotate: Callable[[Any], dict] | None = None
    summary: Callable[[Any], dict] | None = None
    # Discount applied across the transition that produced the given state;
    # defaults to gamma_tick.  Used by learners, not by the reported return.
    discount: Callable[[Any], float] | None = None
    agent_view: AgentView | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma_tick <= 1.0:
            raise ValueError(f"gamma_tick must lie in (0, 1], got {self.gamma_tick}")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")


def _violation(spec: EngagementProcessSpec, state, interventions: frozenset) -> str | None:
    ids = [a.id for a in interventions]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        return dup
    if spec.action_alphabet:
        for a in interventions:
            if a.id not in spec.action_alphabet:
                return a.id
    if spec.admissible(state, interventions):
        return None
    for a in sorted(interventions):
        if not spec.admissible(state, frozenset([a])):
            return a.id
    return "+".join(sorted(ids)) or "∅"


def step(spec: EngagementProcessSpec, state, interventions: frozenset, rng: EpisodeRng,
         tick: int = 0):
    """Advance one tick.

    Returns ``(next_state, observations, utilities)``: utilities come from
    ``(state, interventions)`` before the transition, observations from the
    *next* state and are stamped with ``tick + 1``.
    """
    bad = _violation(spec, state, interventions)
    if bad is not None:
        raise InadmissibleInterventionError(bad, tick)
    utils = tuple(UtilityEvent(v, tick, tag) for tag, v in spec.utility(state, interventions))
    nxt = spec.transition(state, interventions, rng)
    obs = tuple(ObservationEvent(i, p, tick + 1) for i, p in spec.observation(nxt, rng))
    return nxt, obs, utils


def discounted_return(utilities: Sequence[float], gamma_tick: float) -> float:
    """Sum of ``gamma_tick**t * u_t``."""
    if not 0.0 < gamma_tick <= 1.0:
        raise ValueError("gamma_tick must lie in (0, 1]")
    total, g = 0.0, 1.0
    for u in utilities:
        total += g * u
        g *= gamma_tick
    return total


# -- agent side ---------------------------------------------------------------

class HistoryRecord(NamedTuple):
    """One history entry: (A_{t-1}, Y_t, u_{t-1}); at t = 0 only Y_0 is set."""

    interventions: frozenset
    observations: tuple
    utilities: tuple


class Extractor:
    """Information-state extractor phi, expressed as a fold over history records.

    Subclasses override :meth:`update`; :func:`fold_history` replays a full
    history so ``phi(h_t, t)`` is a pure function of its inputs.
    """

    def initial(self):
        return None

    def update(self, w, record: HistoryRecord, t: int):
        raise NotImplementedError


class LastObservation(Extractor):
    """Keeps the payload of the most recent event with a given id."""

    def __init__(self, event_id: str | None = None):
        self.event_id = event_id

    def update(self, w, record, t):
        for ev in record.observations:
            if self.event_id is None or ev.id == self.event_id:
                w = ev.payload
        return w


class EventLog(Extractor):
    """Full history as an information state (tuple of records)."""

    def initial(self):
        return ()

    def update(self, w, record, t):
        return w + (record,)


def fold_history(extractor: Extractor, history: Sequence[HistoryRecord], t: int | None = None):
    w = extractor.initial()
    for k, rec in enumerate(history if t is None else history[: t + 1]):
        w = extractor.update(w, rec, k)
    return w


def every_tick(state) -> bool:
    return True


@dataclass
class Policy:
    """``decide`` maps (information state, rng) to an intervention set; it is
    only consulted on ticks where ``gate(state)`` holds."""

    decide: Callable[[Any, random.Random], frozenset]
    gate: Callable[[Any], bool] = every_tick
    name: str = "policy"


# -- traces -------------------------------------------------------------------

class TickRecord(NamedTuple):
    tick: int
    annotation: dict
    interventions: frozenset
    observations: tuple
    utilities: tuple


@dataclass
class EpisodeTrace:
    seed: int
    spec_name: str
    records: list = field(default_factory=list)
    ticks: int = 0
    total_return: float = 0.0
    utility_by_tag: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    aborted_at: int | None = None

    @property
    def raw_return(self) -> float:
        """Undiscounted sum of utilities (what experiment tables report)."""
        return float(sum(self.utility_by_tag.values()))

    def history(self) -> list:
        """History records (A_{t-1}, Y_t, u_{t-1}) reconstructed from the trace."""
        out = []
        prev_a, prev_u = EMPTY, ()
        for r in self.records:
            out.append(HistoryRecord(prev_a, r.observations, prev_u))
            prev_a, prev_u = r.interventions, r.utilities
        return out


def run_episode(spec: EngagementProcessSpec, policy: Policy, extractor: Extractor | None,
                seed: int, record: bool = True, validate: bool = True) -> EpisodeTrace:
    """Run one episode and return its trace.

    With ``record=False`` only the terminal summary is kept, which is what the
    evaluation harness uses for thousands of long episodes.
    """
    rng = EpisodeRng(seed)
    extractor = extractor or LastObservation()
    trace = EpisodeTrace(seed=int(seed), spec_name=spec.name)
    by_tag = dict.fromkeys(UTILITY_TAGS, 0.0)

    state = spec.initial(rng)
    obs = tuple(ObservationEvent(i, p, 0) for i, p in spec.observation(state, rng))
    w = extractor.update(extractor.initial(), HistoryRecord(EMPTY, obs, ()), 0)

    gate, decide = policy.gate, policy.decide
    utility, transition, observe = spec.utility, spec.transition, spec.observation
    terminal, annotate = spec.terminal, spec.annotate
    prng = rng.policy
    gamma, disc, total = spec.gamma_tick, 1.0, 0.0

    t = 0
    while t < spec.horizon and not terminal(state):
        A = decide(w, prng) if gate(state) else EMPTY
        if validate and A is not EMPTY:
            bad = _violation(spec, state, A)
            if bad is not None:
                trace.aborted_at = t
                raise InadmissibleInterventionError(bad, t, f"policy {policy.name!r}")
        raw = utility(state, A)
        u = 0.0
        for tag, v in raw:
            u += v
            by_tag[tag] += v
        total += disc * u
        disc *= gamma
        if record:
            trace.records.append(TickRecord(
                t, annotate(state) if annotate else {}, A, obs,
                tuple(UtilityEvent(v, t, tag) for tag, v in raw)))
        state = transition(state, A, rng)
        t += 1
        ys = observe(state, rng)
        obs = tuple(ObservationEvent(i, p, t) for i, p in ys) if ys else ()
        w = extractor.update(w, HistoryRecord(A, obs, raw), t)

    trace.ticks = t
    trace.total_return = total
    trace.utility_by_tag = {k: v for k, v in by_tag.items() if v != 0.0}
    if spec.summary:
        trace.counters = spec.summary(state)
    return trace


# -- serialization ------------------------------------------------------------
#
# One JSON object per line.  Line 1 is a header, then one line per tick:
#   tick          int
#   annotation    object (environment-specific, e.g. pos/mode/phase/alarm)
#   interventions list of action strings ("id" or "id:payload"), sorted
#   observations  list of {"id", "payload"}; emitted_at equals tick
#   utilities     object tag -> summed value at this tick
# and a final footer line with the terminal summary.

def _action_str(a: AtomicAction) -> str:
    return str(a)


def _parse_action(s: str) -> AtomicAction:
    if ":" in s:
        i, p = s.split(":", 1)
        try:
            return AtomicAction(i, int(p))
        except ValueError:
            return AtomicAction(i, p)
    return AtomicAction(s)


def _jsonable(x):
    if isinstance(x, tuple):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if hasattr(x, "_asdict"):
        return _jsonable(x._asdict())
    return x


def trace_to_jsonl(trace: EpisodeTrace) -> str:
    lines = [json.dumps({"kind": "header", "seed": trace.seed, "spec": trace.spec_name},
                        sort_keys=True)]
    for r in trace.records:
        utils: dict = {}
        for ev in r.utilities:
            utils[ev.tag] = utils.get(ev.tag, 0.0) + ev.value
        lines.append(json.dumps({
            "tick": r.tick,
            "annotation": _jsonable(r.annotation),
            "interventions": sorted(_action_str(a) for a in r.interventions),
            "observations": [{"id": e.id, "payload": _jsonable(e.payload)} for e in r.observations],
            "utilities": utils,
        }, sort_keys=True))
    lines.append(json.dumps({
        "kind": "footer", "ticks": trace.ticks, "total_return": trace.total_return,
        "utility_by_tag": trace.utility_by_tag, "counters": _jsonable(trace.counters),
    }, sort_keys=True))
    return "\n".join(lines) + "\n"


def trace_from_jsonl(text: str | Iterable[str]) -> EpisodeTrace:
    lines = text.splitlines() if isinstance(text, str) else list(text)
    trace = None
    records = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"trace line {n}: {exc}") from None
        kind = obj.get("kind")
        if kind == "header":
            trace = EpisodeTrace(seed=obj["seed"], spec_name=obj["spec"])
        elif kind == "footer":
            if trace is None:
                raise ValueError("trace footer before header")
            trace.ticks = obj["ticks"]
            trace.total_return = obj["total_return"]
            trace.utility_by_tag = obj["utility_by_tag"]
            trace.counters = obj["counters"]
        else:
            t = obj["tick"]
            records.append(TickRecord(
                t, obj["annotation"],
                frozenset(_parse_action(s) for s in obj["interventions"]),
                tuple(ObservationEvent(e["id"], e["payload"], t) for e in obj["observations"]),
                tuple(UtilityEvent(v, t, tag) for tag, v in sorted(obj["utilities"].items())),
            ))
    if trace is None:
        raise ValueError("trace has no header line")
    trace.records = records
    return trace


def iter_utilities(trace: EpisodeTrace) -> Iterator[float]:
    for r in trace.records:
        yield sum(ev.value for ev in r.utilities)
