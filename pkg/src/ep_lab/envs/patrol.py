"""Grid patrol with asynchronous alarms.

The upper level chooses, tick by tick, whether to keep the current routine or
respond to the active alarm; navigation, checkpoint handling and alarm
resolution run on their own once started.  Two decision interfaces share the
same dynamics:

* EP   - the policy is consulted every tick (:func:`ep_gate`),
* Loop - only when a module or phase has just completed (:func:`loop_gate`).

Module level treats checkpoint handling as one 20-tick routine whose progress
survives an interruption.  State level splits it into phases with interruption
costs; an interrupted phase restarts, finished phases are kept.

All counts are ticks.  An alarm spawned during the transition out of tick ``t``
is first visible at ``t + 1`` with its full deadline ``D``; responding at once
from distance ``d`` resolves it iff ``d + resolve_ticks <= D``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

from ..core import EMPTY, AgentView, EngagementProcessSpec, intervention

PATROL_NAV, HANDLING, ALARM_NAV, RESOLVING = range(4)
MODE_NAMES = ("PatrolNav", "Handling", "AlarmNav", "Resolving")

RESPOND = intervention("respond_alarm")
HANDLE_NEXT = intervention("handle_next_checkpoint")
ACTIONS = ("continue", "handle_next_checkpoint", "respond_alarm")


@dataclass(frozen=True)
class PhaseSpec:
    name: str
    duration_ticks: int
    interrupt_cost: float = 0.0

    def __post_init__(self):
        if self.duration_ticks < 1:
            raise ValueError(f"phase {self.name} needs at least one tick")
        if self.interrupt_cost > 0:
            raise ValueError("interrupt costs are non-positive utilities")


@dataclass(frozen=True)
class PatrolConfig:
    grid_size: int = 8
    checkpoints: tuple = ((0, 0), (0, 7), (7, 7), (7, 0))
    episode_ticks: int = 1000
    handle_ticks: int = 20
    checkpoint_reward: float = 1.0
    alarm_prob_per_tick: float = 0.15
    alarm_min_distance: int = 5
    deadline_range_ticks: tuple = (14, 22)
    resolve_ticks: int = 2
    alarm_reward: float = 25.0
    expire_penalty: float = -20.0
    active_tick_penalty: float = -0.5
    phases: tuple | None = None
    gamma: float = 0.99
    start_pos: tuple = (0, 0)

    def __post_init__(self):
        for x, y in self.checkpoints:
            if not (0 <= x < self.grid_size and 0 <= y < self.grid_size):
                raise ValueError(f"checkpoint {(x, y)} outside {self.grid_size}x{self.grid_size} grid")
        lo, hi = self.deadline_range_ticks
        if lo > hi:
            raise ValueError("deadline range must satisfy lo <= hi")
        if not any(abs(x) + abs(y) >= self.alarm_min_distance
                   for x in range(self.grid_size) for y in range(self.grid_size)):
            raise ValueError("alarm_min_distance unreachable on this grid")

    @property
    def depth(self) -> int:
        return len(self.phases) if self.phases else 1

    def handling_phases(self) -> tuple:
        if self.phases:
            return tuple(self.phases)
        return (PhaseSpec("Handle", self.handle_ticks, 0.0),)


def module_level_config(**overrides) -> PatrolConfig:
    return replace(PatrolConfig(), **overrides)


DEPTH_PHASES = {
    2: (PhaseSpec("Observe", 4, -1.0), PhaseSpec("Commit", 10, -5.0)),
    3: (PhaseSpec("Observe", 3, -1.0), PhaseSpec("Verify", 5, -4.0), PhaseSpec("Commit", 10, -7.0)),
}


def state_level_config(depth: int, **overrides) -> PatrolConfig:
    if depth not in DEPTH_PHASES:
        raise ValueError(f"depth must be 2 or 3, got {depth}")
    base = PatrolConfig(
        checkpoints=((1, 1), (1, 6), (6, 6), (6, 1)),
        alarm_prob_per_tick=0.07,
        deadline_range_ticks=(7, 12),
        phases=DEPTH_PHASES[depth],
    )
    return replace(base, **overrides)


class Alarm(NamedTuple):
    pos: tuple
    deadline_remaining: int


class PatrolView(NamedTuple):
    """What the upper level observes about the ongoing routine and the alarm."""

    mode: int
    phase: int                # index into the handling phases (0 outside handling)
    phase_name: str
    phase_remaining: int      # ticks left in the current phase
    progress: float           # fraction of the current phase already done
    alarm_remaining: int      # 0 when no alarm is active
    distance: int             # Manhattan distance to the alarm (0 when none)
    interrupt_cost: float     # cost of leaving the current phase now


def manhattan(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def nav_step(pos, target):
    """One cell toward ``target``; the x axis is closed before the y axis."""
    x, y = pos
    tx, ty = target
    if x != tx:
        return (x + (1 if tx > x else -1), y)
    if y != ty:
        return (x, y + (1 if ty > y else -1))
    return pos


def spawn_alarm(rng, cfg: PatrolConfig, agent_pos, alarm_active: bool) -> Alarm | None:
    """Maybe spawn an alarm this tick (never while one is active).

    Cells are drawn uniformly and rejected until their Manhattan distance from
    the agent is at least ``alarm_min_distance``.
    """
    if alarm_active or rng.random() >= cfg.alarm_prob_per_tick:
        return None
    n = cfg.grid_size
    ax, ay = agent_pos
    while True:
        x, y = rng.randrange(n), rng.randrange(n)
        if abs(x - ax) + abs(y - ay) >= cfg.alarm_min_distance:
            break
    lo, hi = cfg.deadline_range_ticks
    return Alarm((x, y), rng.randint(lo, hi))


class PatrolState:
    __slots__ = (
        "tick", "pos", "mode", "target", "phase", "phase_done", "boundary",
        "alarm_pos", "alarm_left", "alarm_spawn", "resolve_left", "events",
        "alarms", "resolved", "expired", "resolve_ticks", "active_ticks",
        "interrupts", "interrupt_cost", "checkpoints_done",
    )

    def __init__(self, pos, target, mode):
        self.tick = 0
        self.pos = pos
        self.mode = mode
        self.target = target
        self.phase = 0
        self.phase_done = 0
        self.boundary = True
        self.alarm_pos = None
        self.alarm_left = 0
        self.alarm_spawn = -1
        self.resolve_left = 0
        self.events = ()
        self.alarms = self.resolved = self.expired = 0
        self.resolve_ticks = self.active_ticks = self.interrupts = 0
        self.interrupt_cost = 0.0
        self.checkpoints_done = 0

    @property
    def alarm(self) -> Alarm | None:
        if self.alarm_left <= 0:
            return None
        return Alarm(self.alarm_pos, self.alarm_left)


class PatrolEnv:
    """Dynamics shared by the module-level and state-level experiments."""

    def __init__(self, cfg: PatrolConfig):
        self.cfg = cfg
        self.phases = cfg.handling_phases()
        self.durations = tuple(p.duration_ticks for p in self.phases)
        self.costs = tuple(p.interrupt_cost for p in self.phases)
        self.preserve_progress = cfg.phases is None
        self.level = "module" if cfg.phases is None else f"state-d{cfg.depth}"

    # -- kernels --------------------------------------------------------------

    def initial(self, rng) -> PatrolState:
        cfg = self.cfg
        start = tuple(cfg.start_pos)
        target = min(range(len(cfg.checkpoints)),
                     key=lambda i: (manhattan(start, cfg.checkpoints[i]), i))
        mode = HANDLING if cfg.checkpoints[target] == start else PATROL_NAV
        return PatrolState(start, target, mode)

    def admissible(self, s: PatrolState, A: frozenset) -> bool:
        if not A:
            return True
        if A == RESPOND:
            return s.alarm_left > 0 and s.mode < ALARM_NAV
        if A == HANDLE_NEXT:
            return s.mode == ALARM_NAV
        return False

    def interventions(self, s: PatrolState):
        return [A for A in (EMPTY, RESPOND, HANDLE_NEXT) if self.admissible(s, A)]

    def utility(self, s: PatrolState, A: frozenset) -> tuple:
        cfg = self.cfg
        out = []
        alarm = s.alarm_left > 0
        if alarm:
            out.append(("penalty", cfg.active_tick_penalty))
        mode = s.mode
        if A:
            if A == RESPOND:
                if mode == HANDLING and s.phase_done > 0 and self.costs[s.phase] != 0.0:
                    out.append(("interrupt_cost", self.costs[s.phase]))
                mode = ALARM_NAV
            else:
                mode = PATROL_NAV
        resolved = False
        if mode == RESOLVING and s.resolve_left == 1:
            out.append(("task_reward", cfg.alarm_reward))
            resolved = True
        elif mode == HANDLING or (mode == PATROL_NAV and s.pos == cfg.checkpoints[s.target]):
            phase = s.phase
            if phase == len(self.durations) - 1 and s.phase_done + 1 == self.durations[phase]:
                out.append(("task_reward", cfg.checkpoint_reward))
        if alarm and not resolved and s.alarm_left == 1:
            out.append(("penalty", cfg.expire_penalty))
        return tuple(out)

    def transition(self, s: PatrolState, A: frozenset, rng) -> PatrolState:
        cfg = self.cfg
        had_alarm = s.alarm_left > 0
        if had_alarm:
            s.active_ticks += 1
        if A:
            if A == RESPOND:
                if s.mode == HANDLING and s.phase_done > 0:
                    s.interrupts += 1
                    s.interrupt_cost -= self.costs[s.phase]
                    if not self.preserve_progress:
                        s.phase_done = 0
                s.mode = ALARM_NAV
            else:
                s.mode = PATROL_NAV
        s.boundary = False
        events = []
        mode = s.mode
        resolved = False

        if mode == PATROL_NAV:
            goal = cfg.checkpoints[s.target]
            if s.pos == goal:
                mode = s.mode = HANDLING
            else:
                s.pos = nav_step(s.pos, goal)
                if s.pos == goal:
                    s.mode = HANDLING
                    s.boundary = True
                    events.append(("module_done", "nav_checkpoint"))
        if mode == HANDLING:
            s.phase_done += 1
            if s.phase_done == self.durations[s.phase]:
                s.boundary = True
                events.append(("module_done", self.phases[s.phase].name))
                s.phase += 1
                s.phase_done = 0
                if s.phase == len(self.durations):
                    s.phase = 0
                    s.checkpoints_done += 1
                    s.target = (s.target + 1) % len(cfg.checkpoints)
                    s.mode = PATROL_NAV
        elif mode == ALARM_NAV:
            if s.pos != s.alarm_pos:
                s.pos = nav_step(s.pos, s.alarm_pos)
            if s.pos == s.alarm_pos:
                s.mode = RESOLVING
                s.resolve_left = cfg.resolve_ticks
                s.boundary = True
                events.append(("module_done", "nav_alarm"))
        elif mode == RESOLVING:
            s.resolve_left -= 1
            if s.resolve_left == 0:
                resolved = True
                s.resolved += 1
                s.resolve_ticks += s.tick - s.alarm_spawn
                s.alarm_left = 0
                s.mode = PATROL_NAV
                s.boundary = True
                events.append(("alarm_resolve", s.alarm_pos))

        if had_alarm and not resolved:
            s.alarm_left -= 1
            if s.alarm_left == 0:
                s.expired += 1
                events.append(("alarm_expire", s.alarm_pos))
                if s.mode >= ALARM_NAV:
                    s.mode = PATROL_NAV
                    s.boundary = True
        elif not had_alarm:
            new = spawn_alarm(rng.arrival, cfg, s.pos, False)
            if new is not None:
                s.alarm_pos, s.alarm_left = new
                s.alarm_spawn = s.tick
                s.alarms += 1
                events.append(("alarm_spawn", new))
        s.tick += 1
        s.events = events
        return s

    def view(self, s: PatrolState) -> PatrolView:
        handling = s.mode == HANDLING
        phase = s.phase
        dur = self.durations[phase]
        return PatrolView(
            s.mode, phase, self.phases[phase].name if handling else MODE_NAMES[s.mode],
            dur - s.phase_done if handling else 0,
            s.phase_done / dur if handling else 0.0,
            s.alarm_left,
            manhattan(s.pos, s.alarm_pos) if s.alarm_left > 0 else 0,
            self.costs[phase] if handling and s.phase_done > 0 else 0.0,
        )

    def observation(self, s: PatrolState, rng) -> tuple:
        ev = s.events
        if s.alarm_left > 0:
            return (*ev, ("status", self.view(s)))
        return tuple(ev) if ev else ()

    def annotate(self, s: PatrolState) -> dict:
        handling = s.mode == HANDLING
        phase = self.phases[s.phase]
        return {
            "pos": list(s.pos),
            "mode": MODE_NAMES[s.mode],
            "phase": phase.name if handling else None,
            "handle_left": sum(self.durations[s.phase:]) - s.phase_done,
            "phase_left": self.durations[s.phase] - s.phase_done,
            "target": s.target,
            "boundary": s.boundary,
            "alarm": None if s.alarm_left <= 0 else {"pos": list(s.alarm_pos), "left": s.alarm_left},
            "grid": self.cfg.grid_size,
            "checkpoints": [list(c) for c in self.cfg.checkpoints],
        }

    def summary(self, s: PatrolState) -> dict:
        return {
            "alarms": s.alarms, "resolved": s.resolved, "expired": s.expired,
            "unresolved": s.alarms - s.resolved - s.expired,
            "resolve_ticks": s.resolve_ticks, "alarm_active_ticks": s.active_ticks,
            "interrupts": s.interrupts, "interrupt_cost": s.interrupt_cost,
            "checkpoints": s.checkpoints_done,
        }

    def discount(self, s) -> float:
        return self.cfg.gamma


# -- decision interfaces and agent view ---------------------------------------

def ep_gate(state: PatrolState) -> bool:
    return True


def loop_gate(state: PatrolState) -> bool:
    return state.boundary


class PatrolExtractor:
    """Information state: the latest routine/alarm status, ``None`` when no
    alarm is active (the status event is only emitted while one is)."""

    def initial(self):
        return None

    def update(self, w, record, t):
        for ev in record.observations:
            if ev.id == "status":
                return ev.payload
        return None


def patrol_key(v: PatrolView | None):
    """(mode/phase, alarm present, deadline bucket /4, distance bucket /3,
    progress quartile)."""
    if v is None:
        return None
    mode_phase = v.phase + 1 if v.mode == HANDLING else -v.mode - 1
    return (mode_phase, 1 if v.alarm_remaining > 0 else 0, v.alarm_remaining // 4,
            v.distance // 3, min(3, int(v.progress * 4)))


def patrol_allowed(v: PatrolView | None) -> tuple:
    if v is None or v.alarm_remaining <= 0 or v.mode >= ALARM_NAV:
        return (0,)
    return (0, 1)


def _make_spec(env: PatrolEnv, name: str) -> EngagementProcessSpec:
    cfg = env.cfg
    return EngagementProcessSpec(
        name=name,
        initial=env.initial,
        transition=env.transition,
        observation=env.observation,
        utility=env.utility,
        admissible=env.admissible,
        horizon=cfg.episode_ticks,
        gamma_tick=cfg.gamma,
        action_alphabet=("handle_next_checkpoint", "respond_alarm"),
        enumerate_interventions=env.interventions,
        annotate=env.annotate,
        summary=env.summary,
        discount=env.discount,
        agent_view=AgentView(f"patrol-{env.level}", (EMPTY, RESPOND), patrol_key,
                             ("continue", "respond_alarm"), allowed=patrol_allowed),
    )


def module_level_env(cfg: PatrolConfig | None = None) -> EngagementProcessSpec:
    cfg = cfg or module_level_config()
    if cfg.phases:
        raise ValueError("module-level patrol takes a config without phases")
    return _make_spec(PatrolEnv(cfg), "patrol-module")


def state_level_env(cfg: PatrolConfig | None = None, depth: int = 2) -> EngagementProcessSpec:
    cfg = cfg or state_level_config(depth)
    if not cfg.phases or len(cfg.phases) != depth:
        raise ValueError(f"state-level patrol at depth {depth} needs {depth} phases")
    return _make_spec(PatrolEnv(cfg), f"patrol-state-d{depth}")
