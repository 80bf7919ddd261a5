"""Train EP and Step tables on the single-task deliberation env and cross-evaluate.

A table learned where thinking is free picks slow modes and times out once the
clock runs during deliberation.  Run: python demos/deliberation_cross_eval.py [episodes]
"""
import sys

from ep_lab.agents import QLearningConfig, greedy_policy, train
from ep_lab.envs.deliberation import EP, STEP, DeliberationExtractor, make_single_task_env
from ep_lab.evaluation import cross_eval, mode_distribution_by_urgency

n_train = int(sys.argv[1]) if len(sys.argv) > 1 else 4000
envs = {m: make_single_task_env(semantics=m) for m in (EP, STEP)}
tables = {m: train(envs[m], QLearningConfig(training_episodes=n_train), extractor=DeliberationExtractor())
          for m in envs}

print(f"{'train -> eval':14} {'return':>8} {'timeout':>8} {'mode 5':>8}")
for tr, ev in ((EP, EP), (STEP, STEP), (STEP, EP), (EP, STEP)):
    row, traces = cross_eval(tables[tr], tr, envs[ev], ev, DeliberationExtractor, 1000)
    print(f"{tr + ' -> ' + ev:14} {row['mean_return']:8.3f} {row['timeout_rate']:8.1%} {row['mode5_usage']:8.1%}")

_, traces = cross_eval(tables[EP], EP, envs[EP], EP, DeliberationExtractor, 1000)
print("\nEP-trained mode shares by urgency bucket (0 = least slack)")
for bucket, shares in sorted(mode_distribution_by_urgency(traces).items()):
    print(bucket, " ".join(f"{x:5.2f}" for x in shares))
