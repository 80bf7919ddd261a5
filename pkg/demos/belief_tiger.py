"""Tiger problem as a synchronised EP: filter a few listens, then plan.

Run: python demos/belief_tiger.py
"""
import numpy as np

from ep_lab.belief import POMDP, bellman_optimal_value, pomdp_sync_reduce, update

# states: tiger-left, tiger-right; actions: listen, open-left, open-right
T = np.zeros((2, 3, 2))
T[:, 0, :] = np.eye(2)
T[:, 1:, :] = 0.5
Z = np.array([[0.85, 0.15], [0.15, 0.85]])
R = np.array([[-1.0, -100.0, 10.0], [-1.0, 10.0, -100.0]])
ep = pomdp_sync_reduce(POMDP(T, Z, R, gamma=0.95, actions=("listen", "open-left", "open-right"),
                             observations=("hear-left", "hear-right")))

b = np.array([0.5, 0.5])
print("start belief", b)
for heard in (0, 0, 1, 0):
    b = update(b, 0, heard, ep)
    v, i = bellman_optimal_value(ep, b, horizon=3)
    label = sorted(ep.intervention_sets[i])[0]
    print(f"after {sorted(ep.obs_sets[heard])[0]:10}  belief {np.round(b, 4)}  3-step value {v:8.3f}  best {label}")
