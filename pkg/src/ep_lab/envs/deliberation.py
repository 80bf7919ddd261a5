"""Urgency-aware deliberation: pick one of five thinking modes per task.

Deeper modes succeed more often but take longer.  Under ``EP`` semantics the
clock runs while the agent deliberates, so a slow mode can blow the deadline;
under ``Step`` semantics deliberation is instantaneous.  Everything else (task
distribution, rewards, success model) is shared.

Time is discretised at ``ticks_per_second`` (10 by default, so the 0.2 s mode
lasts 2 ticks); all clock and deadline arithmetic is done in integer ticks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

from ..core import EMPTY, AgentView, AtomicAction, EngagementProcessSpec

EP, STEP = "EP", "Step"
SUCCESS, FAILURE, TIMEOUT = "success", "failure", "timeout"
N_MODES = 5


@dataclass(frozen=True)
class DeliberationConfig:
    mode_durations_s: tuple = (0.2, 0.8, 1.6, 3.0, 5.0)
    mode_alphas: tuple = (0.0, 0.8, 1.6, 2.4, 3.2)
    beta: float = 3.5
    slack_choices_s: tuple = (0.3, 1.0, 2.0, 4.0, 8.0)
    deadline_gaps_s: tuple = (0.4, 0.9, 1.6, 3.5, 5.5)
    difficulty_bin_edges: tuple = (0.33, 0.66)
    # remaining-slack bucket edges; midpoints of the single-task slack choices
    urgency_edges_s: tuple = (0.65, 1.5, 3.0, 6.0)
    reward_success: float = 4.0
    penalty_fail: float = -2.0
    tasks_per_episode: int = 1
    gamma_second: float = 1.0
    gamma_task: float = 1.0
    ticks_per_second: int = 10

    def __post_init__(self):
        if len(self.mode_durations_s) != N_MODES or len(self.mode_alphas) != N_MODES:
            raise ValueError("five modes expected")
        for seq, name in ((self.mode_durations_s, "durations"), (self.mode_alphas, "alphas")):
            if any(b <= a for a, b in zip(seq, seq[1:])):
                raise ValueError(f"mode {name} must be strictly increasing")
        lo, hi = self.difficulty_bin_edges
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("difficulty bin edges must be increasing inside (0, 1)")
        if self.tasks_per_episode < 1:
            raise ValueError("tasks_per_episode must be positive")
        if self.ticks_per_second < 1:
            raise ValueError("ticks_per_second must be positive")

    def ticks(self, seconds: float) -> int:
        return int(round(seconds * self.ticks_per_second))

    @property
    def duration_ticks(self) -> tuple:
        return tuple(self.ticks(d) for d in self.mode_durations_s)


def single_task_config(**overrides) -> DeliberationConfig:
    return replace(DeliberationConfig(), **overrides)


def sequential_config(**overrides) -> DeliberationConfig:
    base = DeliberationConfig(tasks_per_episode=10, gamma_second=0.995, gamma_task=0.95)
    return replace(base, **overrides)


def success_prob(mode: int, u: float, cfg: DeliberationConfig | None = None) -> float:
    """``sigmoid(alpha_m - beta * u)`` for mode 1..5."""
    cfg = cfg or DeliberationConfig()
    if not 1 <= mode <= N_MODES:
        raise ValueError(f"mode must be in 1..{N_MODES}, got {mode}")
    z = cfg.mode_alphas[mode - 1] - cfg.beta * u
    return 1.0 / (1.0 + math.exp(-z))


def difficulty_bin(u: float, cfg: DeliberationConfig) -> int:
    lo, hi = cfg.difficulty_bin_edges
    return 0 if u < lo else (1 if u < hi else 2)


def urgency_bucket(slack_ticks: int, cfg: DeliberationConfig) -> int:
    s = slack_ticks / cfg.ticks_per_second
    return sum(1 for e in cfg.urgency_edges_s if s >= e)


def mode_action(m: int) -> frozenset:
    return frozenset([AtomicAction("mode", m)])


MODE_MENU = tuple(mode_action(m) for m in range(1, N_MODES + 1))


class TaskView(NamedTuple):
    urgency: int
    difficulty: int
    task: int


class DeliberationState:
    __slots__ = (
        "tick", "clock", "task", "deadlines", "difficulties", "luck", "pending", "pending_left",
        "awaiting", "outcomes", "done", "last_dclock", "last_dtask",
        "successes", "failures", "timeouts", "mode_counts", "decisions",
    )

    def __init__(self, deadlines, difficulties, luck):
        self.tick = 0
        self.clock = 0
        self.task = 0
        self.deadlines = deadlines
        self.difficulties = difficulties
        self.luck = luck            # per-task uniform; success iff luck < p(mode, u)
        self.pending = 0            # mode being deliberated (1..5), 0 when idle
        self.pending_left = 0
        self.awaiting = True        # current task waits for a mode choice
        self.outcomes = ()          # (task, kind) resolved by the last transition
        self.done = False
        self.last_dclock = 0
        self.last_dtask = 0
        self.successes = self.failures = self.timeouts = 0
        self.mode_counts = [0] * N_MODES
        self.decisions = []         # (urgency bucket, mode) per decided task


class DeliberationEnv:
    def __init__(self, cfg: DeliberationConfig, semantics: str, sequential: bool):
        if semantics not in (EP, STEP):
            raise ValueError(f"semantics must be EP or Step, got {semantics!r}")
        self.cfg = cfg
        self.semantics = semantics
        self.sequential = sequential
        self.durations = cfg.duration_ticks
        self.real_time = semantics == EP

    def initial(self, rng) -> DeliberationState:
        cfg, r = self.cfg, rng.arrival
        n = cfg.tasks_per_episode
        if self.sequential:
            deadlines, acc = [], 0
            for _ in range(n):
                acc += cfg.ticks(r.choice(cfg.deadline_gaps_s))
                deadlines.append(acc)
        else:
            deadlines = [cfg.ticks(r.choice(cfg.slack_choices_s)) for _ in range(n)]
        difficulties = [r.random() for _ in range(n)]
        t = rng.transition
        luck = [t.random() for _ in range(n)]
        return DeliberationState(deadlines, difficulties, luck)

    def view(self, s: DeliberationState) -> TaskView:
        k = s.task
        return TaskView(urgency_bucket(s.deadlines[k] - s.clock, self.cfg),
                        difficulty_bin(s.difficulties[k], self.cfg), k)

    def admissible(self, s: DeliberationState, A: frozenset) -> bool:
        if not A:
            return True
        if len(A) != 1 or not s.awaiting:
            return False
        (a,) = A
        return a.id == "mode" and isinstance(a.payload, int) and 1 <= a.payload <= N_MODES

    def interventions(self, s):
        return [EMPTY] + (list(MODE_MENU) if s.awaiting else [])

    def _advance(self, s: DeliberationState, A: frozenset):
        """Deterministic effect of ``A`` on ``s``: (clock, task, pending, left, outcomes).

        The success coin of every task is drawn up front (``s.luck``), so the
        outcome of a resolution is a function of the state and the choice.
        """
        clock, task, pending, left = s.clock, s.task, s.pending, s.pending_left
        if A:
            (a,) = A
            pending, left = a.payload, self.durations[a.payload - 1]
        out = ()
        if pending and self.real_time:
            clock += 1
            left -= 1
        elif self.real_time and not s.done:
            clock += 1
        if pending and (left <= 0 or not self.real_time):
            if self.real_time and clock > s.deadlines[task]:
                kind = TIMEOUT
            elif s.luck[task] < success_prob(pending, s.difficulties[task], self.cfg):
                kind = SUCCESS
            else:
                kind = FAILURE
            out = [(task, kind)]
            pending, left = 0, 0
            task += 1
            # later tasks whose deadline already passed expire on arrival
            while task < len(s.deadlines) and clock > s.deadlines[task]:
                out.append((task, TIMEOUT))
                task += 1
            out = tuple(out)
        return clock, task, pending, left, out

    def utility(self, s: DeliberationState, A: frozenset) -> tuple:
        if not A and not s.pending:
            return ()
        cfg = self.cfg
        return tuple(("task_reward", cfg.reward_success) if kind == SUCCESS
                     else ("penalty", cfg.penalty_fail) for _k, kind in self._advance(s, A)[4])

    def transition(self, s: DeliberationState, A: frozenset, rng) -> DeliberationState:
        task0, clock0 = s.task, s.clock
        if A:
            m = next(iter(A)).payload
            s.mode_counts[m - 1] += 1
            s.decisions.append((self.view(s).urgency, m))
            s.awaiting = False
        s.clock, s.task, s.pending, s.pending_left, out = self._advance(s, A)
        for _k, kind in out:
            if kind == SUCCESS:
                s.successes += 1
            elif kind == FAILURE:
                s.failures += 1
            else:
                s.timeouts += 1
        if out:
            if s.task == len(s.deadlines):
                s.done = True
            else:
                s.awaiting = True
        s.outcomes = out
        s.last_dclock = s.clock - clock0
        s.last_dtask = s.task - task0
        s.tick += 1
        return s

    def observation(self, s: DeliberationState, rng) -> tuple:
        ev = [("outcome", o) for o in s.outcomes]
        if s.awaiting and (s.tick == 0 or s.outcomes):
            ev.append(("task", self.view(s)))
        return tuple(ev)

    def terminal(self, s: DeliberationState) -> bool:
        return s.done

    def discount(self, s: DeliberationState) -> float:
        cfg = self.cfg
        return (cfg.gamma_second ** (s.last_dclock / cfg.ticks_per_second)
                * cfg.gamma_task ** s.last_dtask)

    def annotate(self, s: DeliberationState) -> dict:
        return {
            "clock_s": s.clock / self.cfg.ticks_per_second, "task": s.task,
            "pending_mode": s.pending or None, "pending_left": s.pending_left if s.pending else 0,
            "deadline_s": s.deadlines[s.task] / self.cfg.ticks_per_second if s.task < len(s.deadlines) else None,
            "semantics": self.semantics,
        }

    def summary(self, s: DeliberationState) -> dict:
        return {
            "tasks": len(s.deadlines), "successes": s.successes, "failures": s.failures,
            "timeouts": s.timeouts, "mode_counts": list(s.mode_counts),
            "decisions": [list(d) for d in s.decisions],
        }

    def horizon(self) -> int:
        per_task = max(self.durations) + 2
        return self.cfg.tasks_per_episode * per_task + 2


class DeliberationExtractor:
    """Current task view while a mode choice is pending, else ``None``."""

    def initial(self):
        return None

    def update(self, w, record, t):
        if record.interventions:
            w = None
        for ev in record.observations:
            if ev.id == "task":
                w = ev.payload
        return w


def deliberation_key(v: TaskView | None):
    return None if v is None else (v.urgency, v.difficulty)


def _make_spec(env: DeliberationEnv, name: str) -> EngagementProcessSpec:
    cfg = env.cfg
    return EngagementProcessSpec(
        name=f"{name}-{env.semantics}",
        initial=env.initial,
        transition=env.transition,
        observation=env.observation,
        utility=env.utility,
        admissible=env.admissible,
        horizon=env.horizon(),
        gamma_tick=cfg.gamma_second ** (1.0 / cfg.ticks_per_second),
        action_alphabet=("mode",),
        enumerate_interventions=env.interventions,
        terminal=env.terminal,
        annotate=env.annotate,
        summary=env.summary,
        discount=env.discount,
        agent_view=AgentView(name, MODE_MENU, deliberation_key,
                             tuple(f"mode{m}" for m in range(1, N_MODES + 1))),
    )


def make_single_task_env(cfg: DeliberationConfig | None = None, semantics: str = EP) -> EngagementProcessSpec:
    cfg = cfg or single_task_config()
    if cfg.tasks_per_episode != 1:
        raise ValueError("single-task environment needs tasks_per_episode = 1")
    return _make_spec(DeliberationEnv(cfg, semantics, sequential=False), "deliberation-single")


def make_sequential_env(cfg: DeliberationConfig | None = None, semantics: str = EP) -> EngagementProcessSpec:
    cfg = cfg or sequential_config()
    return _make_spec(DeliberationEnv(cfg, semantics, sequential=True), "deliberation-sequential")
