"""Experiment configuration files.

Grammar (INI, read with :mod:`configparser`; ``#`` and ``;`` start comments)::

    [experiment]
    id = deliberation-single        # required when no --experiment flag is given
    methods = EP, Step              # optional subset, in output order
    seed = 42
    train_episodes = 8000
    eval_episodes = 3000
    out = results/deliberation      # optional output directory

    [qlearning]
    learning_rate = 0.1
    epsilon_start = 1.0
    epsilon_end = 0.05
    decay_fraction = 0.8            # epsilon reaches epsilon_end after this share of training

    [bootstrap]
    resamples = 1000
    level = 0.95
    seed = 42

    [deliberation] | [patrol.module] | [patrol.state.depth2] | [patrol.state.depth3] | [assistant]
    <field> = <value>               # overrides one environment field

Only the environment section matching the experiment is accepted
(``[deliberation]`` for both deliberation experiments, ``[assistant]`` for
both assistant decompositions).

Environment sections accept exactly the fields of the matching config
dataclass.  Scalars are written plainly; tuples as comma lists
(``mode_durations_s = 0.2, 0.8, 1.6, 3.0, 5.0``) or Python literals for
nested values (``checkpoints = (0, 0), (0, 7)``).  Patrol phases are
``(name, ticks, interrupt_cost)`` triples.  Every section and field is
optional; anything not given keeps the built-in default.
"""

from __future__ import annotations

import ast
import configparser
import hashlib
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .envs.assistant import AGENT_LOOP, PERIODIC_POLL, AssistantConfig
from .envs.assistant import EP as ASSISTANT_EP
from .envs.deliberation import EP, STEP, sequential_config, single_task_config
from .envs.patrol import PhaseSpec, module_level_config, state_level_config
from .evaluation import BootstrapConfig


class ConfigError(ValueError):
    """Bad configuration; the message names the file, line and field where known."""


@dataclass(frozen=True)
class ExperimentInfo:
    family: str
    methods: tuple
    train_episodes: int
    eval_episodes: int
    learned: tuple = ()       # methods that need a Q-table


EXPERIMENTS = {
    "deliberation-single": ExperimentInfo("deliberation", (EP, STEP), 8000, 3000, (EP, STEP)),
    "deliberation-sequential": ExperimentInfo("deliberation", (EP, STEP), 8000, 3000, (EP, STEP)),
    "patrol-module": ExperimentInfo("patrol", ("EP", "Loop"), 8000, 3000, ("EP", "Loop")),
    "patrol-state-d2": ExperimentInfo("patrol", ("EP", "PatchPro", "Patch", "Loop"), 8000, 3000,
                                      ("EP", "Loop")),
    "patrol-state-d3": ExperimentInfo("patrol", ("EP", "PatchPro", "Patch", "Loop"), 8000, 3000,
                                      ("EP", "Loop")),
    # 200 seeds x 5 episodes per interface
    "assistant-single": ExperimentInfo("assistant", (AGENT_LOOP, PERIODIC_POLL, ASSISTANT_EP), 0, 1000),
    "assistant-milestones": ExperimentInfo("assistant", (AGENT_LOOP, PERIODIC_POLL, ASSISTANT_EP), 0, 1000),
}


@dataclass(frozen=True)
class QSettings:
    learning_rate: float = 0.1
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    decay_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.decay_fraction <= 1.0:
            raise ValueError("decay_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    methods: tuple
    seed: int
    train_episodes: int
    eval_episodes: int
    env: object
    qlearning: QSettings = field(default_factory=QSettings)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    out: str | None = None

    @property
    def info(self) -> ExperimentInfo:
        return EXPERIMENTS[self.experiment]

    @property
    def family(self) -> str:
        return self.info.family

    @property
    def env_section(self) -> str:
        return env_section(self.experiment)

    def to_text(self) -> str:
        """Canonical, fully resolved config text; loading it gives back ``self``."""
        lines = ["[experiment]", f"id = {self.experiment}", f"methods = {', '.join(self.methods)}",
                 f"seed = {self.seed}", f"train_episodes = {self.train_episodes}",
                 f"eval_episodes = {self.eval_episodes}"]
        for name, obj in (("qlearning", self.qlearning), ("bootstrap", self.bootstrap),
                          (self.env_section, self.env)):
            lines += ["", f"[{name}]"]
            for f in fields(obj):
                lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def env_section(experiment: str) -> str:
    """Config section holding the environment overrides of ``experiment``."""
    if experiment == "patrol-module":
        return "patrol.module"
    if experiment.startswith("patrol-state-d"):
        return f"patrol.state.depth{experiment[-1]}"
    return EXPERIMENTS[experiment].family


def default_env_config(experiment: str):
    if experiment == "deliberation-single":
        return single_task_config()
    if experiment == "deliberation-sequential":
        return sequential_config()
    if experiment == "patrol-module":
        return module_level_config()
    if experiment.startswith("patrol-state-d"):
        return state_level_config(int(experiment[-1]))
    if experiment.startswith("assistant-"):
        return AssistantConfig(decomposition=experiment.split("-", 1)[1])
    raise ConfigError(f"unknown experiment {experiment!r}; expected one of {', '.join(EXPERIMENTS)}")


def default_config(experiment: str) -> ExperimentConfig:
    env = default_env_config(experiment)
    info = EXPERIMENTS[experiment]
    return ExperimentConfig(experiment, info.methods, 42, info.train_episodes, info.eval_episodes, env)


# -- value formatting and parsing ---------------------------------------------------

def _format_value(v, nested: bool = False) -> str:
    if isinstance(v, PhaseSpec):
        return repr((v.name, v.duration_ticks, v.interrupt_cost))
    if isinstance(v, tuple):
        body = ", ".join(_format_value(x, True) for x in v)
        if nested:
            return f"({body},)" if len(v) == 1 else f"({body})"
        # a lone nested item needs the trailing comma to stay a list of one
        return body + "," if len(v) == 1 and isinstance(v[0], (tuple, PhaseSpec)) else body
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str) and nested:
        return repr(v)
    if v is None:
        return "none"
    return str(v)


def _parse_literal(text: str):
    try:
        v = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ValueError(f"cannot parse {text!r}") from None
    return v


def _coerce(text: str, default, name: str):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"expected a number, got {text!r}") from None
    if isinstance(default, str):
        return text
    if default is None and text.lower() == "none":
        return None
    if isinstance(default, tuple) or default is None:
        v = _parse_literal(text)
        if not isinstance(v, tuple):
            v = (v,)
        if name == "phases":
            if v and isinstance(v[0], str):
                v = (v,)
            return tuple(PhaseSpec(str(p[0]), int(p[1]), float(p[2]) if len(p) > 2 else 0.0) for p in v)
        if default and isinstance(default[0], tuple):
            if v and not isinstance(v[0], tuple):
                v = (v,)
            return tuple(tuple(x) for x in v)
        return v
    raise ValueError(f"unsupported field type for {name}")


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return i
    return None


# -- loading --------------------------------------------------------------------------

def _apply(obj, sec, text, where, section, parse_name=lambda n: n):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in sec.items():
        line = _line_of(text, section, key)
        loc = f"{where}:{line}" if line else where
        if key not in known:
            raise ConfigError(f"{loc}: unknown field {key!r} in [{section}]; "
                              f"known fields: {', '.join(sorted(known))}")
        try:
            updates[key] = _coerce(raw, getattr(obj, key), key)
        except ValueError as e:
            raise ConfigError(f"{loc}: field {key!r} in [{section}]: {e}") from None
    try:
        return replace(obj, **updates)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where}: [{section}]: {e}") from None


_EXPERIMENT_KEYS = ("id", "methods", "seed", "train_episodes", "eval_episodes", "out")


def parse_config(text: str, experiment: str | None = None, where: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None,
                                       default_section="__defaults__")
    parser.optionxform = str        # keys are case-sensitive field names
    try:
        parser.read_string(text, source=where)
    except configparser.Error as e:
        raise ConfigError(f"{where}: {e}") from None

    exp_sec = parser["experiment"] if parser.has_section("experiment") else {}
    file_id = exp_sec.get("id")
    if experiment and file_id and file_id.strip() != experiment:
        raise ConfigError(f"{where}: config is for {file_id.strip()!r} but --experiment is {experiment!r}")
    exp_id = experiment or (file_id.strip() if file_id else None)
    if not exp_id:
        raise ConfigError(f"{where}: no experiment id (set [experiment] id or pass --experiment)")
    if exp_id not in EXPERIMENTS:
        raise ConfigError(f"{where}: unknown experiment {exp_id!r}; expected one of {', '.join(EXPERIMENTS)}")
    cfg = default_config(exp_id)
    section = cfg.env_section

    allowed = {"experiment", "qlearning", "bootstrap", section}
    for name in parser.sections():
        if name not in allowed:
            line = _line_of(text, name, None)
            raise ConfigError(f"{where}:{line}: unknown section [{name}] for experiment {exp_id}; "
                              f"allowed: {', '.join(sorted(allowed))}")

    updates = {}
    for key, raw in exp_sec.items():
        line = _line_of(text, "experiment", key)
        loc = f"{where}:{line}" if line else where
        raw = raw.strip()
        if key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"{loc}: unknown field {key!r} in [experiment]; "
                              f"known fields: {', '.join(_EXPERIMENT_KEYS)}")
        if key == "id":
            continue
        if key == "methods":
            methods = tuple(m.strip() for m in raw.split(",") if m.strip())
            bad = [m for m in methods if m not in cfg.info.methods]
            if bad or not methods:
                raise ConfigError(f"{loc}: field 'methods': {bad or 'empty'} not in {cfg.info.methods}")
            updates["methods"] = methods
        elif key == "out":
            updates["out"] = raw
        else:
            try:
                n = int(raw)
            except ValueError:
                raise ConfigError(f"{loc}: field {key!r} in [experiment]: expected an integer, got {raw!r}") from None
            if n < 0 or (key == "eval_episodes" and n == 0):
                raise ConfigError(f"{loc}: field {key!r} in [experiment] out of range: {n}")
            updates[key] = n
    if parser.has_section("qlearning"):
        updates["qlearning"] = _apply(cfg.qlearning, parser["qlearning"], text, where, "qlearning")
    if parser.has_section("bootstrap"):
        updates["bootstrap"] = _apply(cfg.bootstrap, parser["bootstrap"], text, where, "bootstrap")
    if parser.has_section(section):
        updates["env"] = _apply(cfg.env, parser[section], text, where, section)
    cfg = replace(cfg, **updates)
    _check_env(cfg, where)
    return cfg


def _check_env(cfg: ExperimentConfig, where: str) -> None:
    e, x = cfg.env, cfg.experiment
    if x == "deliberation-single" and e.tasks_per_episode != 1:
        raise ConfigError(f"{where}: deliberation-single needs tasks_per_episode = 1")
    if x == "patrol-module" and e.phases:
        raise ConfigError(f"{where}: patrol-module takes no phases")
    if x.startswith("patrol-state-d") and (not e.phases or len(e.phases) != int(x[-1])):
        raise ConfigError(f"{where}: {x} needs exactly {x[-1]} phases")
    if x.startswith("assistant-") and e.decomposition != x.split("-", 1)[1]:
        raise ConfigError(f"{where}: {x} fixes decomposition = {x.split('-', 1)[1]}")


def load_config(path: str | Path | None, experiment: str | None = None) -> ExperimentConfig:
    """Config from ``path``, or the embedded defaults of ``experiment`` when ``path`` is None."""
    if path is None:
        if experiment is None:
            raise ConfigError("either a config file or an experiment id is required")
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
        return default_config(experiment)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {str(p)!r}: {e.strerror or e}") from None
    return parse_config(text, experiment, str(p))
