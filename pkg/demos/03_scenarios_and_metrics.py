#!/usr/bin/env python3
"""Synthetic scenarios, the constant-velocity baseline, and the metrics.

Generates a small dataset, shows what the maneuvers look like, and scores
the constant-velocity baseline with minADE / minFDE / miss rate. On straight
roads extrapolation is unbeatable; on arcs it drifts off the lane, which is
exactly the head room a learned model is supposed to claim.

Pass --plot to also write scenario_gallery.png (requires matplotlib).
"""

import sys
from collections import Counter

from dyttp.data import GenConfig, generate_synthetic
from dyttp.evaluation import constant_velocity_predict, evaluate_model
from dyttp.tensor import Rng

split = generate_synthetic(300, Rng(11), GenConfig(noise_sigma=0.1))
print(f"scenarios: {len(split.train)} train / {len(split.val)} val")

kinds = Counter(s.scenario_id.rsplit("-", 1)[1] for s in split.all_scenarios())
print("maneuver mix:", dict(sorted(kinds.items())))

sample = split.train[0]
print(f"\nsample {sample.scenario_id}: {sample.num_agents} agents, "
      f"{len(sample.lanes)} lanes, {sample.obs_steps} observed steps, "
      f"{sample.pred_steps} future steps")

print("\nconstant-velocity baseline:")
for tag in ("straight", "arc", "lane_change", None):
    subset = [s for s in split.val if tag is None or tag in s.scenario_id]
    if not subset:
        continue
    r = evaluate_model(constant_velocity_predict, subset)
    label = tag or "all"
    print(f"  {label:<12} minADE {r.minade:7.3f}   minFDE {r.minfde:7.3f}   "
          f"MR {r.mr:.3f}   ({r.count} scenarios)")

if "--plot" in sys.argv:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("\nmatplotlib not installed; skipping the gallery")
        sys.exit(0)
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    wanted = ["straight", "arc", "lane_change"]
    picked = {}
    for s in split.val:
        for w in wanted:
            if w in s.scenario_id and w not in picked:
                picked[w] = s
    for ax, (kind, s) in zip(axes, picked.items()):
        for lane in s.lanes:
            ax.plot(lane[:, 0], lane[:, 1], color="0.8", lw=4, zorder=0)
        for n in range(s.num_agents):
            h = s.agent_histories[n][s.agent_valid[n]]
            f = s.agent_futures[n][s.future_valid[n]]
            ax.plot(h[:, 0], h[:, 1], "o-", ms=2, color="tab:blue")
            ax.plot(f[:, 0], f[:, 1], ".-", ms=2, color="tab:orange")
        ax.set_title(f"{kind} ({s.scenario_id})")
        ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig("scenario_gallery.png", dpi=120)
    print("\nwrote scenario_gallery.png")
