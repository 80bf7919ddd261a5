"""Compare how quickly each assistant interface notices and answers email.

Run: python demos/assistant_interfaces.py [episodes]
"""
import sys

import numpy as np

from ep_lab.envs.assistant import INTERFACES, AssistantConfig, episode_metrics, simulate_assistant

n = int(sys.argv[1]) if len(sys.argv) > 1 else 50
for decomposition in ("single", "milestones"):
    cfg = AssistantConfig(decomposition=decomposition)
    print(f"\n{decomposition}")
    print(f"  {'interface':13} {'utility':>8} {'balanced':>8} {'visible after':>13} {'timeouts':>8} {'main':>6}")
    for interface in INTERFACES:
        ms = [episode_metrics(simulate_assistant(cfg, interface, seed=s), cfg) for s in range(n)]
        emails = sum(m.emails for m in ms)
        print(f"  {interface:13} {np.mean([m.utility for m in ms]):8.3f} {np.mean([m.balanced for m in ms]):8.3f}"
              f" {sum(m.visibility_sum for m in ms) / emails:13.2f} {sum(m.timeouts for m in ms) / emails:8.1%}"
              f" {np.mean([m.main for m in ms]):6.2f}")
