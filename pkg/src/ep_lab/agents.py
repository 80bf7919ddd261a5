"""Tabular Q-learning, greedy evaluation policies and the hand-written patrol patches."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (EMPTY, EXPLORE, TRAIN, EngagementProcessSpec, EpisodeRng, HistoryRecord, LastObservation,
                   ObservationEvent, Policy, episode_seed, every_tick)
from .envs.patrol import ALARM_NAV, HANDLING, PATROL_NAV, RESPOND, PatrolView


@dataclass(frozen=True)
class QLearningConfig:
    learning_rate: float = 0.1
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int | None = None   # default: 80% of training
    gamma: float | None = None                  # default: the environment's discount
    training_episodes: int = 8000
    seed: int = 42

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        for e in (self.epsilon_start, self.epsilon_end):
            if not 0.0 <= e <= 1.0:
                raise ValueError("epsilons must lie in [0, 1]")

    @property
    def decay_episodes(self) -> int:
        if self.epsilon_decay_episodes is not None:
            return self.epsilon_decay_episodes
        return int(0.8 * self.training_episodes)

    def epsilon(self, episode: int) -> float:
        """Linear decay, flat at ``epsilon_end`` from ``decay_episodes`` on."""
        n = self.decay_episodes
        if n <= 0 or episode >= n:
            return self.epsilon_end
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * episode / n


class QTable:
    """State key -> action-value row.  Unvisited keys read as zeros."""

    def __init__(self, n_actions: int, schema: str = "", labels: tuple = ()):
        self.n_actions = n_actions
        self.schema = schema
        self.labels = tuple(labels)
        self.values: dict = {}

    def __len__(self):
        return len(self.values)

    def __contains__(self, key):
        return key in self.values

    def row(self, key) -> list:
        r = self.values.get(key)
        return r if r is not None else [0.0] * self.n_actions

    def _row_mut(self, key) -> list:
        r = self.values.get(key)
        if r is None:
            r = self.values[key] = [0.0] * self.n_actions
        return r

    def greedy(self, key, allowed=None) -> int:
        """Best action; ties go to the lowest index."""
        r = self.row(key)
        idx = range(self.n_actions) if allowed is None else allowed
        best, best_v = -1, -np.inf
        for a in idx:
            if r[a] > best_v:
                best, best_v = a, r[a]
        return best

    def max_value(self, key, allowed=None) -> float:
        r = self.values.get(key)
        if r is None:
            return 0.0
        if allowed is None:
            return max(r)
        return max(r[a] for a in allowed)

    # key tuple -> value row, one JSON object per line, keys sorted
    def to_text(self) -> str:
        head = {"kind": "qtable", "schema": self.schema, "n_actions": self.n_actions,
                "labels": list(self.labels)}
        lines = [json.dumps(head, sort_keys=True)]
        for key in sorted(self.values, key=repr):
            lines.append(json.dumps({"key": _key_to_json(key), "values": self.values[key]}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "QTable":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines:
            raise ValueError("empty QTable file")
        head = json.loads(lines[0])
        if head.get("kind") != "qtable":
            raise ValueError("not a QTable file (missing header)")
        q = cls(head["n_actions"], head["schema"], tuple(head["labels"]))
        for n, line in enumerate(lines[1:], 2):
            obj = json.loads(line)
            vals = [float(v) for v in obj["values"]]
            if len(vals) != q.n_actions:
                raise ValueError(f"line {n}: expected {q.n_actions} values, got {len(vals)}")
            q.values[_key_from_json(obj["key"])] = vals
        return q

    def __eq__(self, other):
        return (isinstance(other, QTable) and self.n_actions == other.n_actions
                and self.schema == other.schema and self.values == other.values)


def _key_to_json(key):
    if isinstance(key, tuple):
        return [_key_to_json(k) for k in key]
    return key


def _key_from_json(obj):
    if isinstance(obj, list):
        return tuple(_key_from_json(k) for k in obj)
    return obj


def q_update(q: QTable, key, action: int, reward: float, next_key, done: bool,
             cfg: QLearningConfig, gamma: float | None = None, next_allowed=None) -> float:
    """One-step backup ``Q += lr * (r + gamma * max Q(next) * (1 - done) - Q)``.

    ``gamma`` overrides ``cfg.gamma``; the SMDP learner passes the discount
    accumulated since the previous decision.
    """
    g = cfg.gamma if gamma is None else gamma
    if g is None:
        raise ValueError("no discount given")
    target = reward
    if not done:
        target += g * q.max_value(next_key, next_allowed)
    r = q._row_mut(key)
    r[action] += cfg.learning_rate * (target - r[action])
    return r[action]


def train(env: EngagementProcessSpec, cfg: QLearningConfig, gate: Callable = every_tick,
          extractor=None, log: Callable[[int, float], None] | None = None,
          log_every: int = 1000) -> QTable:
    """Epsilon-greedy tabular Q-learning over decision ticks.

    Decisions happen on ticks where ``gate(state)`` passes and the agent view
    offers more than one action; utilities and discounts accumulate between
    decisions (semi-Markov backup).  Training episode ``i`` runs on
    ``episode_seed(cfg.seed, i, TRAIN)``; exploration draws from its own stream.
    """
    view = env.agent_view
    if view is None:
        raise ValueError(f"{env.name} exposes no agent view to learn on")
    q = QTable(len(view.menu), view.schema, view.action_labels())
    extractor = extractor or LastObservation()
    explore = random.Random(episode_seed(cfg.seed, 0, EXPLORE))
    menu, keyf, allowedf = view.menu, view.key, view.allowed_actions
    utility, transition, observe, terminal = env.utility, env.transition, env.observation, env.terminal
    disc_of = env.discount
    gamma_tick = env.gamma_tick if cfg.gamma is None else cfg.gamma
    lr = cfg.learning_rate
    returns = []

    for ep in range(cfg.training_episodes):
        eps = cfg.epsilon(ep)
        rng = EpisodeRng(episode_seed(cfg.seed, ep, TRAIN))
        state = env.initial(rng)
        obs = tuple(ObservationEvent(i, p, 0) for i, p in observe(state, rng))
        w = extractor.update(extractor.initial(), HistoryRecord(EMPTY, obs, ()), 0)
        p_key = p_act = None
        acc_r, acc_d, ep_ret = 0.0, 1.0, 0.0
        t = 0
        while t < env.horizon and not terminal(state):
            A = EMPTY
            if gate(state):
                key = keyf(w)
                if key is not None:
                    allowed = allowedf(w)
                    if len(allowed) > 1:
                        if p_key is not None:
                            row = q._row_mut(p_key)
                            nxt = q.values.get(key)
                            best = max(nxt[a] for a in allowed) if nxt is not None else 0.0
                            row[p_act] += lr * (acc_r + acc_d * best - row[p_act])
                        if explore.random() < eps:
                            a = allowed[explore.randrange(len(allowed))]
                        else:
                            a = q.greedy(key, allowed)
                        p_key, p_act, acc_r, acc_d = key, a, 0.0, 1.0
                        A = menu[a]
                    elif allowed:
                        A = menu[allowed[0]]
            raw = utility(state, A)
            u = 0.0
            for _tag, v in raw:
                u += v
            ep_ret += u
            state = transition(state, A, rng)
            t += 1
            if p_key is not None:
                acc_r += acc_d * u
                acc_d *= disc_of(state) if disc_of else gamma_tick
            ys = observe(state, rng)
            obs = tuple(ObservationEvent(i, p, t) for i, p in ys) if ys else ()
            w = extractor.update(w, HistoryRecord(A, obs, raw), t)
        if p_key is not None:
            row = q._row_mut(p_key)
            row[p_act] += lr * (acc_r - row[p_act])
        returns.append(ep_ret)
        if log and (ep + 1) % log_every == 0:
            log(ep + 1, float(np.mean(returns[-log_every:])))
    return q


def greedy_policy(q: QTable, env: EngagementProcessSpec, gate: Callable = every_tick,
                  name: str = "greedy") -> Policy:
    view = env.agent_view
    menu, keyf, allowedf = view.menu, view.key, view.allowed_actions

    def decide(w, rng):
        key = keyf(w)
        if key is None:
            return EMPTY
        allowed = allowedf(w)
        if len(allowed) == 1:
            return menu[allowed[0]]
        return menu[q.greedy(key, allowed)]

    return Policy(decide, gate, name)


# -- hand-written patrol patches ----------------------------------------------

CONTINUE, RESPOND_ALARM = "continue", "respond"

# (depth, phase) -> remaining alarm ticks at or below which Patch responds;
# None means never respond from that phase.
PATCH_COMMIT_RULES = {(2, "Commit"): 6, (3, "Verify"): 8, (3, "Commit"): None}


def patch_policy(v: PatrolView | None, depth: int) -> str:
    """Simple Patch: current phase and remaining alarm time only."""
    if v is None or v.alarm_remaining <= 0 or v.mode >= ALARM_NAV:
        return CONTINUE
    if v.mode == PATROL_NAV or v.phase_name == "Observe":
        return RESPOND_ALARM
    if v.mode != HANDLING:
        return CONTINUE
    limit = PATCH_COMMIT_RULES.get((depth, v.phase_name))
    if limit is not None and v.alarm_remaining <= limit:
        return RESPOND_ALARM
    return CONTINUE


@dataclass(frozen=True)
class PatchProThresholds:
    # (depth, phase) -> (urgency threshold ticks, progress cutoff, cost ratio)
    rows: dict = field(default_factory=lambda: {
        (2, "Observe"): (16, 1.0, 2.0),
        (2, "Commit"): (8, 0.5, 3.5),
        (3, "Observe"): (18, 1.0, 2.0),
        (3, "Verify"): (12, 0.8, 3.0),
        (3, "Commit"): (8, 0.5, 4.5),
    })
    very_urgent_ticks: int = 3
    # resolve reward plus the avoided expiry penalty: 25 - (-20)
    net_alarm_value: float = 45.0

    def __post_init__(self):
        for k, (urg, cut, ratio) in self.rows.items():
            if urg < 0 or cut < 0 or ratio < 0:
                raise ValueError(f"negative threshold for {k}")
        if self.very_urgent_ticks < 0:
            raise ValueError("very_urgent_ticks must be non-negative")


def patchpro_policy(v: PatrolView | None, depth: int, thr: PatchProThresholds | None = None,
                    resolve_ticks: int = 2) -> str:
    """PatchPro: feasibility, very-urgent override, patrol-navigation response,
    finish-first, then phase thresholds with a cost-value check, in that order."""
    thr = thr or PatchProThresholds()
    if v is None or v.alarm_remaining <= 0 or v.mode >= ALARM_NAV:
        return CONTINUE
    left, dist = v.alarm_remaining, v.distance
    if dist + resolve_ticks > left:
        return CONTINUE
    if left <= thr.very_urgent_ticks:
        return RESPOND_ALARM
    if v.mode == PATROL_NAV:
        return RESPOND_ALARM
    if v.phase_remaining + dist + resolve_ticks <= left:
        return CONTINUE
    urgency, cutoff, ratio = thr.rows[(depth, v.phase_name)]
    if (left <= urgency and v.progress < cutoff
            and thr.net_alarm_value >= ratio * abs(v.interrupt_cost)):
        return RESPOND_ALARM
    return CONTINUE


def rule_policy(rule: Callable[[PatrolView | None], str], name: str) -> Policy:
    """Wrap a patch rule as an every-tick policy."""
    def decide(v, rng):
        return RESPOND if rule(v) == RESPOND_ALARM else EMPTY
    return Policy(decide, every_tick, name)
