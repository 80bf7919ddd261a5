"""Digital assistant: a long main task interleaved with asynchronous emails.

One tick is the time to emit one main-task token (``token_time_cost`` time
units), so every action duration is a whole number of ticks.  Email arrivals,
urgencies, slacks and the main-task token stream are all drawn when the
episode starts; after that the dynamics are deterministic and scheduled events
(arrivals, reminders, polls) come off a heap ordered by (tick, insertion seq).

The interface decides when emails become visible to the agent:

* ``AgentLoop``: when an inbox check finishes, which the loop does only at
  main-unit boundaries (and continuously once the main task is done);
* ``PeriodicPoll``: the same, plus a snapshot of the inbox every
  ``polling_interval`` time units that also interrupts generation;
* ``EP``: at the arrival tick, while generation is still unfolding.

The triage model is :class:`ScriptedTriage`, a deterministic rule shared by all
interfaces.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

from ..core import EMPTY, AtomicAction, EngagementProcessSpec, EpisodeTrace, Policy, run_episode

AGENT_LOOP, PERIODIC_POLL, EP = "AgentLoop", "PeriodicPoll", "EP"
INTERFACES = (AGENT_LOOP, PERIODIC_POLL, EP)
URGENCIES = ("high", "medium", "low")
TIMED = ("check_inbox", "triage", "open", "handle", "reminder")

IDLE, GENERATING, BUSY = "idle", "generating", "busy"


@dataclass(frozen=True)
class AssistantConfig:
    horizon: float = 90.0
    arrival_rate: float = 0.2
    token_time_cost: float = 0.05
    main_target_units: int = 4
    main_tokens: tuple = (600, 1000)        # total main-task tokens ~ U{lo..hi}
    urgency_probs: tuple = (0.4, 0.4, 0.2)
    slack_ranges: tuple = ((5.0, 15.0), (15.0, 25.0), (25.0, 35.0))
    check_inbox: float = 0.1
    open: float = 0.1
    handle: float = 1.0
    reminder: float = 0.1
    return_to_main: float = 0.1
    triage: float = 0.2
    polling_interval: float = 15.0
    decomposition: str = "milestones"       # or "single"
    # scoring
    w_progress: float = 0.4
    w_completed: float = 0.8
    w_on_time: float = 0.4
    w_timeout: float = -0.5
    w_switch: float = -0.005
    w_interrupt: float = -0.005
    urgency_weights: tuple = (1.2, 0.5, 0.1)
    balanced_main_weight: float = 0.6
    balanced_gap_penalty: float = 0.5

    def __post_init__(self):
        for name in ("check_inbox", "open", "handle", "reminder", "return_to_main", "triage",
                     "polling_interval", "token_time_cost", "horizon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if abs(sum(self.urgency_probs) - 1.0) > 1e-9 or min(self.urgency_probs) < 0:
            raise ValueError("urgency_probs must be a distribution")
        if self.decomposition not in ("single", "milestones"):
            raise ValueError(f"decomposition must be single or milestones, got {self.decomposition!r}")
        if self.main_target_units < 1:
            raise ValueError("main_target_units must be positive")
        lo, hi = self.main_tokens
        if not 0 < lo <= hi:
            raise ValueError("main_tokens must be a positive range")
        for d in ("check_inbox", "open", "handle", "reminder", "return_to_main", "triage"):
            if self.ticks(getattr(self, d)) < 1:
                raise ValueError(f"{d} is shorter than one tick")

    def ticks(self, t: float) -> int:
        return int(round(t / self.token_time_cost))

    def duration_ticks(self, kind: str) -> int:
        return self.ticks(getattr(self, kind))

    @property
    def horizon_ticks(self) -> int:
        return self.ticks(self.horizon)


class EmailView(NamedTuple):
    id: int
    urgency: str
    arrival: int        # tick
    deadline: int       # tick


class Effects(NamedTuple):
    status: str
    action: AtomicAction | None
    left: int
    focus: str
    switch: bool
    interrupt: bool
    tokens: int
    unit_done: bool
    completed: AtomicAction | None


class Email:
    __slots__ = ("id", "urgency", "arrival", "deadline", "visible_at", "first_response",
                 "opened", "handled_at", "on_time", "timed_out", "reminder_at")

    def __init__(self, id, urgency, arrival, deadline):
        self.id, self.urgency, self.arrival, self.deadline = id, urgency, arrival, deadline
        self.visible_at = None
        self.first_response = None
        self.opened = False
        self.handled_at = None
        self.on_time = False
        self.timed_out = False
        self.reminder_at = None

    def view(self) -> EmailView:
        return EmailView(self.id, self.urgency, self.arrival, self.deadline)

    def record(self) -> dict:
        return {k: getattr(self, k) for k in self.__slots__}


class AssistantState:
    __slots__ = ("tick", "emails", "queue", "seq", "units", "unit", "unit_done_tokens",
                 "status", "action", "action_left", "focus", "main_done", "pending_reminders",
                 "by_deadline", "events", "switches", "interruptions", "tokens")

    def __init__(self, emails, units):
        self.tick = 0
        self.emails = emails
        self.queue = []                 # (tick, seq, kind, payload)
        self.seq = 0
        self.units = units              # token count per main-task unit
        self.unit = 0
        self.unit_done_tokens = 0
        self.status = IDLE
        self.action = None              # AtomicAction being executed
        self.action_left = 0
        self.focus = "main"
        self.main_done = False
        self.pending_reminders = []     # fired but not yet delivered (non-EP)
        self.by_deadline = {}
        self.events = []
        self.switches = 0
        self.interruptions = 0
        self.tokens = 0

    def push(self, tick, kind, payload=None):
        heapq.heappush(self.queue, (tick, self.seq, kind, payload))
        self.seq += 1


class AssistantEnv:
    def __init__(self, cfg: AssistantConfig, interface: str):
        if interface not in INTERFACES:
            raise ValueError(f"interface must be one of {INTERFACES}, got {interface!r}")
        self.cfg = cfg
        self.interface = interface
        self.T = cfg.horizon_ticks
        self.dur = {k: cfg.duration_ticks(k) for k in TIMED}
        self.return_ticks = cfg.duration_ticks("return_to_main")

    # -- sampling -------------------------------------------------------------
    def initial(self, rng) -> AssistantState:
        cfg, r = self.cfg, rng.arrival
        emails, t, i = [], 0.0, 0
        while True:
            t += r.expovariate(cfg.arrival_rate)
            arr = int(math.ceil(t / cfg.token_time_cost - 1e-9))
            if arr >= self.T:
                break
            x, acc, k = r.random(), 0.0, len(URGENCIES) - 1
            for j, p in enumerate(cfg.urgency_probs):
                acc += p
                if x < acc:
                    k = j
                    break
            lo, hi = cfg.slack_ranges[k]
            emails.append(Email(i, URGENCIES[k], arr, arr + cfg.ticks(r.uniform(lo, hi))))
            i += 1
        total = rng.transition.randint(*cfg.main_tokens)
        n = cfg.main_target_units if cfg.decomposition == "milestones" else 1
        units = [total // n + (1 if j < total % n else 0) for j in range(n)]
        s = AssistantState(emails, units)
        for e in emails:
            s.push(e.arrival, "arrival", e.id)
            s.by_deadline.setdefault(e.deadline, []).append(e.id)
        if self.interface == PERIODIC_POLL:
            step = cfg.ticks(cfg.polling_interval)
            for p in range(step, self.T, step):
                s.push(p, "poll")
        return s

    def progress_units(self, s: AssistantState) -> float:
        return self.cfg.main_target_units * s.tokens / sum(s.units)

    # -- kernels --------------------------------------------------------------
    def admissible(self, s: AssistantState, A: frozenset) -> bool:
        if not A:
            return True
        if len(A) != 1 or s.status == BUSY:
            return False
        (a,) = A
        if a.id == "main":
            return not s.main_done and s.status == IDLE
        if a.id not in TIMED:
            return False
        if a.id in ("open", "handle", "reminder"):
            eid = a.payload[0] if a.id == "reminder" else a.payload
            if not isinstance(eid, int) or not 0 <= eid < len(s.emails):
                return False
            e = s.emails[eid]
            if e.visible_at is None or e.handled_at is not None:
                return False
            if a.id == "handle" and not e.opened:
                return False
        return True

    def _effects(self, s: AssistantState, A: frozenset) -> "Effects":
        """What happens during this tick; pure, shared by utility and transition."""
        status, action, left, focus = s.status, s.action, s.action_left, s.focus
        switch = interrupt = False
        if A:
            (a,) = A
            new_focus = "main" if a.id == "main" else "email"
            switch = new_focus != focus
            if status == GENERATING and a.id != "main":
                interrupt = s.unit_done_tokens > 0
            if a.id == "main":
                if switch:
                    status, action, left = BUSY, a, self.return_ticks
                else:
                    status = GENERATING
            else:
                status, action, left = BUSY, a, self.dur[a.id]
            focus = new_focus
        tokens, unit_done, completed = 0, False, None
        if status == GENERATING:
            tokens = 1
            unit_done = s.unit_done_tokens + 1 == s.units[s.unit]
        elif status == BUSY:
            left -= 1
            if left == 0:
                completed = action
        return Effects(status, action, left, focus, switch, interrupt, tokens, unit_done, completed)

    def utility(self, s: AssistantState, A: frozenset) -> tuple:
        cfg = self.cfg
        eff = self._effects(s, A)
        out = []
        if eff.tokens:
            out.append(("task_reward", cfg.w_progress * cfg.main_target_units / sum(s.units)))
            if eff.unit_done and s.unit == len(s.units) - 1:
                out.append(("task_reward", cfg.w_completed))
        c = eff.completed
        if c is not None and c.id == "handle" and s.tick + 1 <= s.emails[c.payload].deadline:
            out.append(("task_reward", cfg.w_on_time))
        for eid in s.by_deadline.get(s.tick, ()):
            if s.emails[eid].handled_at is None:
                out.append(("penalty", cfg.w_timeout))
        if eff.switch:
            out.append(("switch_cost", cfg.w_switch))
        if eff.interrupt:
            out.append(("interrupt_cost", cfg.w_interrupt))
        return tuple(out)

    def _make_visible(self, s: AssistantState, t: int):
        for e in s.emails:
            if e.arrival > t:
                break
            if e.visible_at is None:
                e.visible_at = t
                s.events.append(("email", e.view()))
        for eid in s.pending_reminders:
            s.events.append(("reminder", eid))
        s.pending_reminders = []

    def _complete(self, s: AssistantState, a: AtomicAction, t: int):
        if a.id == "main":
            s.status = GENERATING
            s.events.append(("generating", None))
            return
        s.status = IDLE
        s.events.append(("done", a.id))
        if a.id == "check_inbox":
            self._make_visible(s, t)
        elif a.id == "open":
            s.emails[a.payload].opened = True
        elif a.id == "handle":
            e = s.emails[a.payload]
            e.handled_at = t
            e.on_time = t <= e.deadline
        elif a.id == "reminder":
            eid, at = a.payload
            s.emails[eid].reminder_at = at
            s.push(max(at, t), "reminder", eid)

    def transition(self, s: AssistantState, A: frozenset, rng) -> AssistantState:
        eff = self._effects(s, A)
        s.events = []
        t1 = s.tick + 1
        if A:
            (a,) = A
            if a.id in ("open", "handle"):
                e = s.emails[a.payload]
                if e.first_response is None:
                    e.first_response = s.tick
        s.switches += eff.switch
        s.interruptions += eff.interrupt
        if eff.status == GENERATING and s.status != GENERATING:
            s.events.append(("generating", None))
        s.status, s.action, s.action_left, s.focus = eff.status, eff.action, eff.left, eff.focus
        if eff.tokens:
            s.tokens += 1
            s.unit_done_tokens += 1
            if eff.unit_done:
                s.unit += 1
                s.unit_done_tokens = 0
                s.status = IDLE
                s.events.append(("unit_done", s.unit))
                if s.unit == len(s.units):
                    s.main_done = True
                    s.events.append(("main_done", None))
        if eff.completed is not None:
            self._complete(s, eff.completed, t1)
        for eid in s.by_deadline.get(s.tick, ()):
            e = s.emails[eid]
            if e.handled_at is None:
                e.timed_out = True
        q = s.queue
        while q and q[0][0] <= t1:
            _t, _seq, kind, payload = heapq.heappop(q)
            if kind == "arrival":
                if self.interface == EP:
                    e = s.emails[payload]
                    e.visible_at = t1
                    s.events.append(("email", e.view()))
            elif kind == "reminder":
                if self.interface == EP:
                    s.events.append(("reminder", payload))
                else:
                    s.pending_reminders.append(payload)
            elif kind == "poll":
                self._make_visible(s, t1)
                s.events.append(("poll", None))
        s.tick = t1
        return s

    def observation(self, s: AssistantState, rng) -> tuple:
        return tuple(s.events)

    def terminal(self, s: AssistantState) -> bool:
        return False

    def annotate(self, s: AssistantState) -> dict:
        return {
            "time": round(s.tick * self.cfg.token_time_cost, 4), "status": s.status,
            "action": str(s.action) if s.status == BUSY and s.action is not None else None,
            "focus": s.focus, "unit": s.unit, "progress_units": round(self.progress_units(s), 6),
            "visible": [e.id for e in s.emails if e.visible_at is not None and e.handled_at is None
                        and not e.timed_out],
            "interface": self.interface,
        }

    def summary(self, s: AssistantState) -> dict:
        cfg = self.cfg
        return {
            "interface": self.interface, "decomposition": cfg.decomposition,
            "progress_units": self.progress_units(s), "completed": s.main_done,
            "switches": s.switches, "interruptions": s.interruptions,
            "horizon_ticks": self.T, "tick_time": cfg.token_time_cost,
            "emails": [e.record() for e in s.emails],
        }


# -- agent side -----------------------------------------------------------------

class AssistantInfo:
    """Agent-side summary of the history; updated in place by the extractor."""

    __slots__ = ("t", "emails", "opened", "handled", "deferred", "reminded", "status",
                 "new_events", "check_due", "poll_due", "main_done")

    def __init__(self):
        self.t = 0
        self.emails = {}        # id -> EmailView, visible emails only
        self.opened = set()
        self.handled = set()
        self.deferred = set()   # reminder set, not yet delivered
        self.reminded = set()   # deferred once already
        self.status = IDLE
        self.new_events = False
        self.check_due = False  # a main unit just finished
        self.poll_due = False
        self.main_done = False


class AssistantExtractor:
    def initial(self):
        return AssistantInfo()

    def update(self, w: AssistantInfo, record, t):
        w.t = t
        for a in record.interventions:
            w.status = BUSY
            if a.id == "main":
                continue
            if a.id == "triage":
                w.new_events = False
            elif a.id == "check_inbox":
                w.check_due = w.poll_due = False
            elif a.id == "open":
                w.opened.add(a.payload)
            elif a.id == "handle":
                w.handled.add(a.payload)
            elif a.id == "reminder":
                w.deferred.add(a.payload[0])
                w.reminded.add(a.payload[0])
        for ev in record.observations:
            k = ev.id
            if k == "email":
                w.emails[ev.payload.id] = ev.payload
                w.new_events = True
            elif k == "reminder":
                w.deferred.discard(ev.payload)
                w.new_events = True
            elif k == "generating":
                w.status = GENERATING
            elif k == "done":
                w.status = IDLE
            elif k == "unit_done":
                w.status = IDLE
                w.check_due = True
            elif k == "main_done":
                w.main_done = True
            elif k == "poll":
                w.poll_due = True
        return w


_URGENCY_RANK = {u: i for i, u in enumerate(URGENCIES)}


@dataclass(frozen=True)
class ScriptedTriage:
    """Deterministic stand-in for a triage model.

    Pending emails are taken in (deadline ascending, urgency descending) order.
    Emails that can no longer be opened and handled by their deadline are
    skipped.  An email with more than ``defer_slack`` time units of slack is
    deferred once with a reminder ``reminder_lead`` units before its deadline.
    """
    defer_slack: float = 20.0
    reminder_lead: float = 4.0

    def rule(self, w: AssistantInfo, cfg: AssistantConfig) -> list:
        t = w.t
        d_open, d_handle = cfg.duration_ticks("open"), cfg.duration_ticks("handle")
        defer, lead = cfg.ticks(self.defer_slack), cfg.ticks(self.reminder_lead)
        pending = [e for e in w.emails.values()
                   if e.id not in w.handled and e.id not in w.deferred]
        pending.sort(key=lambda e: (e.deadline, _URGENCY_RANK[e.urgency], e.id))
        plan = []
        for e in pending:
            opened = e.id in w.opened
            if t + (0 if opened else d_open) + d_handle > e.deadline:
                continue
            if e.deadline - t > defer and e.id not in w.reminded:
                plan.append(AtomicAction("reminder", (e.id, e.deadline - lead)))
            elif not opened:
                plan.append(AtomicAction("open", e.id))
            else:
                plan.append(AtomicAction("handle", e.id))
        return plan


MAIN = frozenset([AtomicAction("main")])
CHECK = frozenset([AtomicAction("check_inbox")])
TRIAGE = frozenset([AtomicAction("triage")])


def interface_policy(interface: str, cfg: AssistantConfig, triage: ScriptedTriage | None = None) -> Policy:
    """Loop controller for one interface wrapped around the shared triage rule."""
    triage = triage or ScriptedTriage()
    event_driven = interface == EP

    def decide(w: AssistantInfo, rng):
        if w.status == BUSY:
            return EMPTY
        if w.status == GENERATING:
            if event_driven and w.new_events:
                return TRIAGE
            if interface == PERIODIC_POLL and w.poll_due:
                return CHECK
            return EMPTY
        if not event_driven and (w.check_due or w.poll_due):
            return CHECK
        if w.new_events:
            return TRIAGE
        plan = triage.rule(w, cfg)
        if plan:
            return frozenset([plan[0]])
        if not w.main_done:
            return MAIN
        return EMPTY if event_driven else CHECK

    return Policy(decide, name=interface)


def make_assistant_env(cfg: AssistantConfig | None = None, interface: str = EP) -> EngagementProcessSpec:
    cfg = cfg or AssistantConfig()
    env = AssistantEnv(cfg, interface)
    return EngagementProcessSpec(
        name=f"assistant-{cfg.decomposition}-{interface}",
        initial=env.initial,
        transition=env.transition,
        observation=env.observation,
        utility=env.utility,
        admissible=env.admissible,
        horizon=env.T,
        gamma_tick=1.0,
        action_alphabet=("main",) + TIMED,
        annotate=env.annotate,
        summary=env.summary,
    )


def simulate_assistant(cfg: AssistantConfig | None, interface: str, triage: ScriptedTriage | None = None,
                       seed: int = 0, record: bool = False) -> EpisodeTrace:
    cfg = cfg or AssistantConfig()
    spec = make_assistant_env(cfg, interface)
    return run_episode(spec, interface_policy(interface, cfg, triage), AssistantExtractor(), seed,
                       record=record)


# -- scoring ----------------------------------------------------------------------

@dataclass(frozen=True)
class AssistantOutcome:
    progress_units: float
    completed: bool
    on_time: int
    timeouts: int
    switches: int
    interruptions: int
    emails: tuple = ()          # (urgency, on_time) per arrived email

    @classmethod
    def from_counters(cls, c: dict) -> "AssistantOutcome":
        em = c["emails"]
        return cls(c["progress_units"], bool(c["completed"]), sum(e["on_time"] for e in em),
                   sum(e["timed_out"] for e in em), c["switches"], c["interruptions"],
                   tuple((e["urgency"], bool(e["on_time"])) for e in em))


def _outcome(x) -> AssistantOutcome:
    if isinstance(x, AssistantOutcome):
        return x
    if isinstance(x, EpisodeTrace):
        return AssistantOutcome.from_counters(x.counters)
    return AssistantOutcome.from_counters(x)


def utility_score(trace, cfg: AssistantConfig | None = None) -> float:
    """Additive episode utility from progress, completion, emails, switches and interruptions."""
    cfg = cfg or AssistantConfig()
    o = _outcome(trace)
    return (cfg.w_progress * o.progress_units + cfg.w_completed * o.completed
            + cfg.w_on_time * o.on_time + cfg.w_timeout * o.timeouts
            + cfg.w_switch * o.switches + cfg.w_interrupt * o.interruptions)


def email_score(emails, cfg: AssistantConfig | None = None) -> float:
    """Urgency-weighted on-time rate; 1.0 when no email arrived."""
    cfg = cfg or AssistantConfig()
    weight = dict(zip(URGENCIES, cfg.urgency_weights))
    total = sum(weight[u] for u, _ in emails)
    if total == 0:
        return 1.0
    return sum(weight[u] for u, ok in emails if ok) / total


def main_score(main_progress: float, target: float) -> float:
    if target <= 0:
        raise ValueError("target must be positive")
    return min(1.0, main_progress / target)


def balanced_score(main_progress: float, target: float, emails, cfg: AssistantConfig | None = None) -> float:
    cfg = cfg or AssistantConfig()
    m, e = main_score(main_progress, target), email_score(emails, cfg)
    a = cfg.balanced_main_weight
    return a * m + (1 - a) * e - cfg.balanced_gap_penalty * abs(m - e)


@dataclass(frozen=True)
class AssistantMetrics:
    interface: str
    decomposition: str
    utility: float
    balanced: float
    timeout_rate: float
    latency: float | None           # mean first-response delay over answered emails
    main: float
    visibility_delay: float | None  # mean over arrived emails; unseen ones count up to the horizon
    emails: int
    timeouts: int
    responded: int
    latency_sum: float
    visibility_sum: float

    def row(self) -> dict:
        return asdict(self)


def episode_metrics(trace: EpisodeTrace, cfg: AssistantConfig | None = None) -> AssistantMetrics:
    cfg = cfg or AssistantConfig()
    c = trace.counters
    dt, T = c["tick_time"], c["horizon_ticks"]
    o = AssistantOutcome.from_counters(c)
    em = c["emails"]
    lat = [(e["first_response"] - e["arrival"]) * dt for e in em if e["first_response"] is not None]
    vis = [((e["visible_at"] if e["visible_at"] is not None else T) - e["arrival"]) * dt for e in em]
    n = len(em)
    return AssistantMetrics(
        interface=c["interface"], decomposition=c["decomposition"],
        utility=utility_score(o, cfg),
        balanced=balanced_score(o.progress_units, cfg.main_target_units, o.emails, cfg),
        timeout_rate=o.timeouts / n if n else 0.0,
        latency=sum(lat) / len(lat) if lat else None,
        main=main_score(o.progress_units, cfg.main_target_units),
        visibility_delay=sum(vis) / n if n else None,
        emails=n, timeouts=o.timeouts, responded=len(lat),
        latency_sum=sum(lat), visibility_sum=sum(vis),
    )
