"""Run PatchPro on the depth-2 patrol task and draw the first interruption.

Run: python demos/patrol_window.py
"""
from ep_lab.agents import patchpro_policy, rule_policy
from ep_lab.core import run_episode
from ep_lab.envs.patrol import PatrolExtractor, state_level_env
from ep_lab.render import FIRST_INTERRUPTION, find_first_event, render_window

env = state_level_env(depth=2)
policy = rule_policy(lambda v: patchpro_policy(v, 2), "PatchPro")
for seed in range(50):
    trace = run_episode(env, policy, PatrolExtractor(), seed, record=True)
    t = find_first_event(trace, FIRST_INTERRUPTION)
    if t is not None:
        print(f"seed {seed}: PatchPro leaves a handling phase at tick {t}, return {trace.raw_return:.1f}\n")
        print(render_window(trace, max(0, t - 1), 4))
        break
else:
    print("no interruption in the first 50 seeds")
