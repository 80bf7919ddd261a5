"""``ep-lab``: train, evaluate, cross-evaluate, render and replay experiments.

Every run writes ``config.ini`` (the fully resolved configuration) and
``manifest.json`` (config hash, seeds, versions, input and output hashes)
into its output directory.  ``ep-lab replay <manifest>`` reruns the recorded
command and checks that every output file comes back byte-identical.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .agents import QLearningConfig, QTable, greedy_policy, patch_policy, patchpro_policy, rule_policy, train
from .config import EXPERIMENTS, ConfigError, ExperimentConfig, load_config
from .core import EVAL, episode_seed, every_tick, run_episode, trace_from_jsonl, trace_to_jsonl
from .envs.assistant import AssistantExtractor, ScriptedTriage, interface_policy, make_assistant_env
from .envs.deliberation import EP, STEP, DeliberationExtractor, make_sequential_env, make_single_task_env
from .envs.patrol import PatrolExtractor, ep_gate, loop_gate, module_level_env, state_level_env
from .evaluation import (KeyAlphabetMismatch, MetricsRow, check_compatible, default_workers, evaluate,
                         mode_distribution_by_urgency, rows_to_csv, rows_to_markdown)
from .render import CRITERIA, find_first_event, render_window

log = logging.getLogger("ep_lab")

USAGE_ERROR, RUNTIME_ERROR = 1, 2


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


# -- experiment plumbing ------------------------------------------------------------

def make_env(cfg: ExperimentConfig, method: str | None = None):
    x = cfg.experiment
    if x == "deliberation-single":
        return make_single_task_env(cfg.env, method or EP)
    if x == "deliberation-sequential":
        return make_sequential_env(cfg.env, method or EP)
    if x == "patrol-module":
        return module_level_env(cfg.env)
    if x.startswith("patrol-state-d"):
        return state_level_env(cfg.env, int(x[-1]))
    return make_assistant_env(cfg.env, method or EP)


def make_extractor_factory(cfg: ExperimentConfig):
    return {"deliberation": DeliberationExtractor, "patrol": PatrolExtractor,
            "assistant": AssistantExtractor}[cfg.family]


def method_gate(cfg: ExperimentConfig, method: str):
    if cfg.family == "patrol":
        return loop_gate if method == "Loop" else ep_gate
    return every_tick


def qlearning_config(cfg: ExperimentConfig, episodes: int | None = None) -> QLearningConfig:
    n = cfg.train_episodes if episodes is None else episodes
    q = cfg.qlearning
    return QLearningConfig(learning_rate=q.learning_rate, epsilon_start=q.epsilon_start,
                           epsilon_end=q.epsilon_end, epsilon_decay_episodes=int(q.decay_fraction * n),
                           training_episodes=n, seed=cfg.seed)


def train_method(cfg: ExperimentConfig, method: str, log_rows: list | None = None) -> QTable:
    """Q-table for one learned method; ``log_rows`` collects (episode, mean return)."""
    if method not in cfg.info.learned:
        raise UsageError(f"{cfg.experiment}: method {method} is not learned")
    env = make_env(cfg, method)
    every = min(1000, cfg.train_episodes) or 1

    def record(ep, mean):
        log.info("%s %s: episode %d mean return %.4f", cfg.experiment, method, ep, mean)
        if log_rows is not None:
            log_rows.append((ep, mean))

    return train(env, qlearning_config(cfg), method_gate(cfg, method), make_extractor_factory(cfg)(),
                 log=record, log_every=every)


def method_policy(cfg: ExperimentConfig, method: str, tables: dict, env=None):
    env = env or make_env(cfg, method)
    if method in cfg.info.learned:
        q = tables[method]
        check_compatible(q, env)
        return greedy_policy(q, env, method_gate(cfg, method), name=method)
    if cfg.family == "patrol":
        depth = int(cfg.experiment[-1])
        if method == "PatchPro":
            rule = partial(patchpro_policy, depth=depth, resolve_ticks=cfg.env.resolve_ticks)
        else:
            rule = partial(patch_policy, depth=depth)
        return rule_policy(rule, method)
    if cfg.family == "assistant":
        return interface_policy(method, cfg.env, ScriptedTriage())
    raise UsageError(f"no policy for method {method}")


def eval_method(cfg: ExperimentConfig, method: str, tables: dict, workers: int,
                eval_env_method: str | None = None, label: str | None = None):
    env = make_env(cfg, eval_env_method or method)
    policy = method_policy(cfg, method, tables, env)
    return evaluate(env, policy, make_extractor_factory(cfg), cfg.eval_episodes, cfg.seed,
                    label or method, workers, cfg.bootstrap, cfg.env)


def table_layout(cfg: ExperimentConfig) -> str:
    if cfg.family == "patrol":
        return "patrol-module" if cfg.experiment == "patrol-module" else "patrol-state"
    return cfg.family


# -- files and manifests ---------------------------------------------------------------

def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(out: Path, name: str, text: str, written: list) -> Path:
    p = out / name
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    written.append(name)
    return p


def _versions() -> dict:
    return {"ep_lab": __version__, "python": platform.python_version(), "numpy": np.__version__}


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, args: dict, written: list,
                   inputs: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "experiment": cfg.experiment,
        "config_sha256": cfg.digest(),
        "config": cfg.to_text(),
        "seeds": {"train": cfg.seed, "eval": cfg.seed, "bootstrap": cfg.bootstrap.seed},
        "episodes": {"train": cfg.train_episodes, "eval": cfg.eval_episodes},
        "arguments": args,
        "inputs": inputs or {},
        "versions": _versions(),
        "outputs": {name: sha256_file(out / name) for name in sorted(written)},
    }
    p = out / "manifest.json"
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return p


def resolve_config(args) -> ExperimentConfig:
    if args.config is None and args.experiment is None:
        raise UsageError("pass --experiment or --config")
    cfg = load_config(args.config, args.experiment)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "train_episodes", None) is not None:
        updates["train_episodes"] = args.train_episodes
    if args.episodes is not None:
        if args.episodes < 1:
            raise UsageError("--episodes must be positive")
        updates["train_episodes" if args.command == "train" else "eval_episodes"] = args.episodes
    if getattr(args, "methods", None):
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        bad = [m for m in methods if m not in cfg.info.methods]
        if bad:
            raise UsageError(f"unknown methods {bad}; {cfg.experiment} offers {cfg.info.methods}")
        updates["methods"] = methods
    return replace(cfg, **updates)


def output_dir(args, cfg: ExperimentConfig) -> Path:
    out = args.out or os.environ.get("EP_LAB_OUT") or cfg.out or str(Path("results") / cfg.experiment)
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def load_tables(cfg: ExperimentConfig, tables_dir: str | None, methods, written_inputs: dict) -> dict:
    """Tables from ``tables_dir`` when given, otherwise trained in-process."""
    tables = {}
    for m in methods:
        if m not in cfg.info.learned:
            continue
        if tables_dir:
            p = Path(tables_dir) / f"qtable-{m}.txt"
            if not p.exists():
                raise UsageError(f"missing table {p}")
            tables[m] = QTable.from_text(p.read_text())
            written_inputs[str(p.resolve())] = sha256_file(p)
        else:
            log.info("training %s (%d episodes)", m, cfg.train_episodes)
            tables[m] = train_method(cfg, m)
    return tables


def _write_tables(out: Path, rows: list, cfg: ExperimentConfig, fmt: str | None, written: list,
                  first_header: str = "Method"):
    if fmt in (None, "csv"):
        _write(out, "metrics.csv", rows_to_csv(rows), written)
    if fmt in (None, "md"):
        _write(out, "metrics.md", rows_to_markdown(rows, table_layout(cfg), first_header), written)


def _save_traces(out: Path, cfg: ExperimentConfig, method: str, tables: dict, n: int, written: list,
                 eval_env_method: str | None = None, label: str | None = None):
    env = make_env(cfg, eval_env_method or method)
    policy = method_policy(cfg, method, tables, env)
    for i in range(min(n, cfg.eval_episodes)):
        tr = run_episode(env, policy, make_extractor_factory(cfg)(), episode_seed(cfg.seed, i, EVAL))
        _write(out, f"traces/{label or method}-{i}.jsonl", trace_to_jsonl(tr), written)


# -- commands ---------------------------------------------------------------------------

def _args_record(args) -> dict:
    keep = ("experiment", "seed", "episodes", "train_episodes", "methods", "format", "save_traces",
            "tables", "trace", "criterion", "start", "n_panels")
    d = {k: getattr(args, k) for k in keep if getattr(args, k, None) is not None}
    if d.get("tables"):
        d["tables"] = str(Path(d["tables"]).resolve())
    if d.get("trace"):
        d["trace"] = str(Path(d["trace"]).resolve())
    return d


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    learned = [m for m in cfg.methods if m in cfg.info.learned]
    if not learned:
        raise UsageError(f"{cfg.experiment} has no learned methods to train")
    out = output_dir(args, cfg)
    written = []
    for m in learned:
        rows = []
        q = train_method(cfg, m, rows)
        _write(out, f"qtable-{m}.txt", q.to_text(), written)
        text = "episode,mean_return\n" + "".join(f"{e},{r!r}\n" for e, r in rows)
        _write(out, f"train-log-{m}.csv", text, written)
    _write(out, "config.ini", cfg.to_text(), written)
    write_manifest(out, "train", cfg, _args_record(args), written)
    print(f"wrote {', '.join(f'qtable-{m}.txt' for m in learned)} to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = output_dir(args, cfg)
    inputs: dict = {}
    tables = load_tables(cfg, args.tables, cfg.methods, inputs)
    rows, written = [], []
    for m in cfg.methods:
        row, _traces = eval_method(cfg, m, tables, args.workers)
        rows.append(row)
        if args.save_traces:
            _save_traces(out, cfg, m, tables, args.save_traces, written)
    _write_tables(out, rows, cfg, args.format, written)
    _write(out, "config.ini", cfg.to_text(), written)
    write_manifest(out, "eval", cfg, _args_record(args), written, inputs)
    print(rows_to_markdown(rows, table_layout(cfg)), end="")
    return 0


CROSS_CELLS = ((EP, EP), (EP, STEP), (STEP, STEP), (STEP, EP))


def cmd_cross_eval(args) -> int:
    cfg = resolve_config(args)
    if cfg.family != "deliberation":
        raise UsageError("cross-eval pairs EP and Step semantics; only deliberation experiments have both")
    out = output_dir(args, cfg)
    inputs: dict = {}
    tables = load_tables(cfg, args.tables, (EP, STEP), inputs)
    rows, written, dist_lines = [], [], ["setting,urgency_bucket," + ",".join(f"mode{m}" for m in range(1, 6))]
    for tr, ev in CROSS_CELLS:
        label = f"{tr}->{ev}"
        row, traces = eval_method(cfg, tr, tables, args.workers, eval_env_method=ev, label=label)
        rows.append(row)
        for bucket, freq in mode_distribution_by_urgency(traces).items():
            dist_lines.append(f"{label},{bucket}," + ",".join(repr(float(x)) for x in freq))
        if args.save_traces:
            _save_traces(out, cfg, tr, tables, args.save_traces, written, ev, label.replace("->", "-to-"))
    _write_tables(out, rows, cfg, args.format, written, first_header="Train -> Eval")
    _write(out, "mode-distribution.csv", "\n".join(dist_lines) + "\n", written)
    _write(out, "config.ini", cfg.to_text(), written)
    write_manifest(out, "cross-eval", cfg, _args_record(args), written, inputs)
    print(rows_to_markdown(rows, table_layout(cfg), "Train -> Eval"), end="")
    return 0


def cmd_render(args) -> int:
    path = Path(args.trace)
    try:
        trace = trace_from_jsonl(path.read_text())
    except OSError as e:
        raise UsageError(f"cannot read trace {str(path)!r}: {e.strerror or e}") from None
    except (ValueError, KeyError) as e:
        raise UsageError(f"cannot parse trace {str(path)!r}: {e}") from None
    n = args.n_panels
    if args.start is not None:
        start = args.start
    else:
        tick = find_first_event(trace, args.criterion)
        if tick is None:
            log.warning("no tick in %s meets %s; nothing rendered", path, args.criterion)
            return RUNTIME_ERROR
        # one panel of context before the event
        start = max(0, min(tick - 1, len(trace.records) - n))
    try:
        doc = render_window(trace, start, n, args.format)
    except ValueError as e:
        raise RuntimeFailure(str(e)) from None
    suffix = "txt" if args.format == "ascii" else "svg"
    out = Path(args.out) if args.out else path.with_name(f"{path.stem}-t{start}.{suffix}")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(doc)
    manifest = {"command": "render", "arguments": _args_record(args), "start_tick": start,
                "inputs": {str(path.resolve()): sha256_file(path)}, "versions": _versions(),
                "outputs": {out.name: sha256_file(out)}}
    out.with_name(out.name + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"rendered ticks {start}..{start + n - 1} to {out}")
    return 0


def cmd_replay(args) -> int:
    """Rerun a recorded command and compare every output byte for byte."""
    mpath = Path(args.manifest)
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read manifest {str(mpath)!r}: {e}") from None
    command = manifest.get("command")
    if command not in ("train", "eval", "cross-eval"):
        raise UsageError(f"manifest command {command!r} cannot be replayed")
    for p, digest in manifest.get("inputs", {}).items():
        if not Path(p).exists() or sha256_file(Path(p)) != digest:
            raise RuntimeFailure(f"input {p} is missing or changed since the recorded run")
    a = manifest["arguments"]
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "config.ini"
        cfg_path.write_text(manifest["config"])
        out = Path(args.out) if args.out else Path(tmp) / "out"
        argv = [command, "--config", str(cfg_path), "--out", str(out), "--workers", str(args.workers)]
        if a.get("format"):
            argv += ["--format", a["format"]]
        if a.get("tables"):
            argv += ["--tables", a["tables"]]
        if a.get("save_traces"):
            argv += ["--save-traces", str(a["save_traces"])]
        code = main(argv)
        if code:
            return code
        bad = []
        for name, digest in manifest["outputs"].items():
            p = out / name
            if not p.exists() or sha256_file(p) != digest:
                bad.append(name)
    if bad:
        print(f"replay differs in {len(bad)} file(s): {', '.join(bad)}", file=sys.stderr)
        return RUNTIME_ERROR
    print(f"replay identical: {len(manifest['outputs'])} file(s) match {mpath}")
    return 0


# -- argument parsing ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ep-lab", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, episodes_help):
        sp.add_argument("--experiment", choices=list(EXPERIMENTS))
        sp.add_argument("--config", help="INI config file (see ep_lab.config for the grammar)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--episodes", type=int, help=episodes_help)
        sp.add_argument("--methods", help="comma-separated subset of the experiment's methods")
        sp.add_argument("--out", help="output directory (default: $EP_LAB_OUT or results/<experiment>)")
        sp.add_argument("--workers", type=int, default=default_workers(),
                        help="evaluation worker processes (default: available processors)")

    sp = sub.add_parser("train", help="train Q-tables for the learned methods")
    common(sp, "training episodes")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate every method in its own environment"),
                                 ("cross-eval", cmd_cross_eval, "EP/Step train x eval grid (deliberation)")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, "evaluation episodes")
        sp.add_argument("--train-episodes", type=int, help="training episodes when tables are trained here")
        sp.add_argument("--tables", help="directory with qtable-<method>.txt files from `train`")
        sp.add_argument("--format", choices=("csv", "md"), help="write only this table format")
        sp.add_argument("--save-traces", type=int, default=0, metavar="K",
                        help="also write full traces of the first K evaluation episodes per method")
        sp.set_defaults(func=func)

    sp = sub.add_parser("render", help="render a patrol trace as tick panels")
    sp.add_argument("--trace", required=True, help="trace .jsonl file (from --save-traces)")
    sp.add_argument("--criterion", choices=CRITERIA, default=CRITERIA[0])
    sp.add_argument("--start", type=int, help="first tick to draw (overrides --criterion)")
    sp.add_argument("--n-panels", type=int, default=5)
    sp.add_argument("--format", choices=("ascii", "svg"), default="ascii")
    sp.add_argument("--out", help="output file")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("replay", help="rerun a manifest and verify byte-identical outputs")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="keep the replayed outputs here")
    sp.add_argument("--workers", type=int, default=default_workers())
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return USAGE_ERROR
    if args.verbose or not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("ep-lab: error: --workers must be positive", file=sys.stderr)
        return USAGE_ERROR
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"ep-lab: error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (KeyAlphabetMismatch, RuntimeFailure, ValueError) as e:
        print(f"ep-lab: runtime error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
