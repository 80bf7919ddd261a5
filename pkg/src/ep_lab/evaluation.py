"""Episode metrics, bootstrap intervals, cross-evaluation and table output."""

from __future__ import annotations

import csv
import io
import multiprocessing as mp
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .agents import QTable, greedy_policy
from .core import EVAL, EngagementProcessSpec, EpisodeTrace, Policy, episode_seed, every_tick, run_episode

MEAN, RATE = "mean", "rate_from_counts"


@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 1000
    level: float = 0.95
    seed: int = 42

    def __post_init__(self):
        if self.resamples < 1:
            raise ValueError("resamples must be at least 1")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")


def bootstrap_ci(data, kind: str = MEAN, cfg: BootstrapConfig | None = None) -> tuple:
    """``(point, half_width)`` by the percentile bootstrap over episodes.

    ``kind="mean"`` takes one value per episode.  ``kind="rate_from_counts"``
    takes one ``(numerator, denominator)`` pair per episode; each resample sums
    both columns before dividing, so episodes weigh in by their denominators.
    """
    cfg = cfg or BootstrapConfig()
    arr = np.asarray(data, dtype=float)
    n = len(arr)
    if n == 0:
        raise ValueError("bootstrap_ci needs a non-empty sample")
    rng = np.random.default_rng(cfg.seed)
    idx = rng.integers(0, n, size=(cfg.resamples, n))
    if kind == MEAN:
        if arr.ndim != 1:
            raise ValueError("mean bootstrap expects one value per episode")
        point = float(arr.mean())
        stats = arr[idx].mean(axis=1)
    elif kind == RATE:
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("rate bootstrap expects (numerator, denominator) pairs")
        num, den = arr[:, 0], arr[:, 1]
        if den.sum() <= 0:
            raise ValueError("rate bootstrap with zero total denominator")
        point = float(num.sum() / den.sum())
        d = den[idx].sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            stats = num[idx].sum(axis=1) / d
        stats = stats[d > 0]
    else:
        raise ValueError(f"unknown bootstrap kind {kind!r}")
    tail = 100.0 * (1.0 - cfg.level) / 2.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return point, float(hi - lo) / 2.0


# -- metrics per environment family -----------------------------------------------

def env_kind(name: str) -> str:
    for k in ("deliberation", "patrol", "assistant"):
        if name.startswith(k):
            return k
    return "generic"


def _deliberation_metrics(traces, bs, env_cfg=None):
    c = [t.counters for t in traces]
    tasks = [x["tasks"] for x in c]
    dec = [sum(x["mode_counts"]) for x in c]
    out = {
        "mean_return": bootstrap_ci([t.raw_return for t in traces], MEAN, bs),
        "success_rate": bootstrap_ci(list(zip([x["successes"] for x in c], tasks)), RATE, bs),
        "failure_rate": bootstrap_ci(list(zip([x["failures"] for x in c], tasks)), RATE, bs),
        "timeout_rate": bootstrap_ci(list(zip([x["timeouts"] for x in c], tasks)), RATE, bs),
    }
    if sum(dec):
        for m in range(5):
            out[f"mode{m + 1}_usage"] = bootstrap_ci(list(zip([x["mode_counts"][m] for x in c], dec)), RATE, bs)
    return out


def _patrol_metrics(traces, bs, env_cfg=None):
    c = [t.counters for t in traces]
    alarms = [x["alarms"] for x in c]
    out = {"mean_return": bootstrap_ci([t.raw_return for t in traces], MEAN, bs)}
    if sum(alarms):
        out["resolve_rate"] = bootstrap_ci(list(zip([x["resolved"] for x in c], alarms)), RATE, bs)
        out["expire_rate"] = bootstrap_ci(list(zip([x["expired"] for x in c], alarms)), RATE, bs)
    if sum(x["resolved"] for x in c):
        out["ticks_per_alarm"] = bootstrap_ci(
            list(zip([x["resolve_ticks"] for x in c], [x["resolved"] for x in c])), RATE, bs)
    out["interrupt_cost"] = bootstrap_ci([x["interrupt_cost"] for x in c], MEAN, bs)
    return out


def _assistant_metrics(traces, bs, env_cfg=None):
    from .envs.assistant import episode_metrics
    ms = [episode_metrics(t, env_cfg) for t in traces]
    out = {
        "utility": bootstrap_ci([m.utility for m in ms], MEAN, bs),
        "balanced": bootstrap_ci([m.balanced for m in ms], MEAN, bs),
        "main": bootstrap_ci([m.main for m in ms], MEAN, bs),
    }
    if sum(m.emails for m in ms):
        out["timeout_rate"] = bootstrap_ci([(m.timeouts, m.emails) for m in ms], RATE, bs)
        out["visibility_delay"] = bootstrap_ci([(m.visibility_sum, m.emails) for m in ms], RATE, bs)
    if sum(m.responded for m in ms):
        out["latency"] = bootstrap_ci([(m.latency_sum, m.responded) for m in ms], RATE, bs)
    return out


_METRICS = {"deliberation": _deliberation_metrics, "patrol": _patrol_metrics,
            "assistant": _assistant_metrics}


@dataclass
class MetricsRow:
    env: str
    method: str
    n: int
    metrics: dict = field(default_factory=dict)     # name -> (point, half_width)

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("a metrics row needs at least one episode")
        for k, (v, _h) in self.metrics.items():
            if k.endswith(("_rate", "_usage")) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")

    def __getitem__(self, name: str) -> float:
        return self.metrics[name][0]

    def half_width(self, name: str) -> float:
        return self.metrics[name][1]

    def flat(self) -> dict:
        d = {"env": self.env, "method": self.method, "n": self.n}
        for k, (v, h) in self.metrics.items():
            d[k] = v
            d[f"{k}_ci"] = h
        return d


def summarize(env_name: str, method: str, traces: Sequence[EpisodeTrace],
              bs: BootstrapConfig | None = None, env_cfg=None) -> MetricsRow:
    """One metrics row; ``env_cfg`` supplies scoring weights where the family has them."""
    bs = bs or BootstrapConfig()
    kind = env_kind(env_name)
    if kind in _METRICS:
        metrics = _METRICS[kind](traces, bs, env_cfg)
    else:
        metrics = {"mean_return": bootstrap_ci([t.raw_return for t in traces], MEAN, bs)}
    return MetricsRow(env_name, method, len(traces), metrics)


# -- running evaluations ------------------------------------------------------------

_JOB = None


def _run_range(bounds):
    env, policy, make_extractor, seed, record, lo, hi = _JOB
    return [run_episode(env, policy, make_extractor(), episode_seed(seed, i, EVAL), record=record)
            for i in range(lo, hi)]


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def run_episodes(env: EngagementProcessSpec, policy: Policy, make_extractor: Callable,
                 episodes: int, seed: int = 42, workers: int = 1, record: bool = False) -> list:
    """Evaluation episodes ``0..episodes-1`` on ``episode_seed(seed, i, EVAL)``.

    With ``workers > 1`` contiguous chunks run in forked processes; results
    come back in episode order, so the output does not depend on ``workers``.
    """
    global _JOB
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    workers = max(1, min(workers, episodes))
    if workers == 1 or "fork" not in mp.get_all_start_methods():
        _JOB = (env, policy, make_extractor, seed, record, 0, episodes)
        try:
            return _run_range(None)
        finally:
            _JOB = None
    edges = np.linspace(0, episodes, workers + 1).astype(int)
    chunks = [(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]
    return _run_chunks_forked(env, policy, make_extractor, seed, record, chunks)


def _run_chunks_forked(env, policy, make_extractor, seed, record, chunks):
    # env kernels are closures and do not pickle, so each chunk gets its own
    # forked worker that inherits the job through the module global
    global _JOB
    results = [None] * len(chunks)
    ctx = mp.get_context("fork")
    pools = []
    for j, (lo, hi) in enumerate(chunks):
        _JOB = (env, policy, make_extractor, seed, record, lo, hi)
        pool = ctx.Pool(1)
        pools.append((j, pool, pool.apply_async(_run_range, (None,))))
    _JOB = None
    for j, pool, res in pools:
        results[j] = res.get()
        pool.close()
        pool.join()
    return [t for chunk in results for t in chunk]


def evaluate(env: EngagementProcessSpec, policy: Policy, make_extractor: Callable, episodes: int,
             seed: int = 42, method: str | None = None, workers: int = 1,
             bs: BootstrapConfig | None = None, env_cfg=None, record: bool = False) -> tuple:
    """Run ``episodes`` evaluation episodes; returns ``(MetricsRow, traces)``."""
    traces = run_episodes(env, policy, make_extractor, episodes, seed, workers, record)
    return summarize(env.name, method or policy.name, traces, bs, env_cfg), traces


class KeyAlphabetMismatch(ValueError):
    pass


def check_compatible(q: QTable, env: EngagementProcessSpec) -> None:
    view = env.agent_view
    if view is None:
        raise KeyAlphabetMismatch(f"{env.name} exposes no agent view")
    if q.schema != view.schema:
        raise KeyAlphabetMismatch(f"table state keys are {q.schema!r}, {env.name} uses {view.schema!r}")
    if q.labels != view.action_labels() or q.n_actions != len(view.menu):
        raise KeyAlphabetMismatch(f"table actions {q.labels} differ from {env.name} actions "
                                  f"{view.action_labels()}")


def cross_eval(q: QTable, train_label: str, eval_env: EngagementProcessSpec, eval_label: str,
               make_extractor: Callable, episodes: int, seed: int = 42, gate: Callable = every_tick,
               workers: int = 1, bs: BootstrapConfig | None = None) -> tuple:
    """Greedy evaluation of a trained table in another (compatible) environment."""
    check_compatible(q, eval_env)
    policy = greedy_policy(q, eval_env, gate, name=f"{train_label}->{eval_label}")
    return evaluate(eval_env, policy, make_extractor, episodes, seed, policy.name, workers, bs)


def mode_distribution_by_urgency(traces: Sequence[EpisodeTrace], n_modes: int = 5) -> dict:
    """urgency bucket -> frequency of each mode over decisions taken in that bucket."""
    counts: dict = {}
    for t in traces:
        for bucket, mode in t.counters["decisions"]:
            row = counts.setdefault(int(bucket), np.zeros(n_modes))
            row[mode - 1] += 1
    return {b: row / row.sum() for b, row in sorted(counts.items())}


# -- tables ---------------------------------------------------------------------------

# (metric, header, scale) per table layout
LAYOUTS = {
    "deliberation": (("mean_return", "Mean return", 1), ("success_rate", "Success rate (%)", 100),
                     ("timeout_rate", "Timeout rate (%)", 100), ("mode5_usage", "Mode 5 usage (%)", 100)),
    "patrol-module": (("mean_return", "Mean return", 1), ("resolve_rate", "Resolve rate (%)", 100),
                      ("expire_rate", "Expire rate (%)", 100), ("ticks_per_alarm", "Ticks per alarm", 1)),
    "patrol-state": (("mean_return", "Mean return", 1), ("resolve_rate", "Resolve rate (%)", 100),
                     ("expire_rate", "Expire rate (%)", 100), ("interrupt_cost", "Interrupt cost", 1)),
    "assistant": (("utility", "Utility", 1), ("balanced", "Balanced", 1), ("timeout_rate", "Timeout", 1),
                  ("latency", "Latency", 1), ("main", "Main", 1)),
}


def rows_to_csv(rows: Sequence[MetricsRow]) -> str:
    flat = [r.flat() for r in rows]
    cols = []
    for f in flat:
        cols += [k for k in f if k not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for f in flat:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in f.items()})
    return buf.getvalue()


def rows_to_markdown(rows: Sequence[MetricsRow], layout: str, first_header: str = "Method",
                     digits: int = 2) -> str:
    cols = LAYOUTS[layout]
    head = [first_header] + [h for _m, h, _s in cols]
    body = []
    for r in rows:
        cells = [r.method]
        for m, _h, scale in cols:
            if m in r.metrics:
                v, h = r.metrics[m]
                cells.append(f"{v * scale:.{digits}f} ± {h * scale:.{digits}f}")
            else:
                cells.append("n/a")
        body.append(cells)
    widths = [max(len(x) for x in col) for col in zip(head, *body)]

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = [line(head), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out += [line(c) for c in body]
    return "\n".join(out) + "\n"
