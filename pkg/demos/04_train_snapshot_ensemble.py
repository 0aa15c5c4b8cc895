#!/usr/bin/env python3
"""A small end-to-end run: cyclical learning rate, snapshots, ensembling.

Trains a narrow model for a few short cycles on synthetic data, then compares
the final snapshot alone against the snapshot ensemble. Scale everything up
(count, width, cycles) for the real desk-scale configuration; this script is
sized to finish in well under a minute.
"""

from dyttp.backbone import ModelConfig, TrajectoryPredictor
from dyttp.data import GenConfig, generate_synthetic
from dyttp.evaluation import constant_velocity_predict, evaluate_model
from dyttp.tensor import Rng
from dyttp.training import EnsembleConfig, SchedulerConfig, lr_at, make_ensemble, train

split = generate_synthetic(200, Rng(5), GenConfig(noise_sigma=0.1))
cfg = ModelConfig(width=24, heads=4, modes=3, dropout=0.05)
sched = SchedulerConfig(eta_max=3e-3, eta_min=1e-5, cycle_length=3, num_cycles=3)

print("cosine schedule, one cycle:",
      [round(lr_at(sched, e), 5) for e in range(sched.cycle_length + 1)])

print("\ntraining (3 cycles x 3 epochs)...")
result = train(split, cfg, sched, Rng(1), batch_size=8,
               log_sink=lambda r: print(
                   f"  epoch {r['epoch']}  cycle {r['cycle']}  lr {r['lr']:.2e}  "
                   f"loss {r['train_loss']:8.3f}  val minADE {r['val_minADE']:.3f}"))

print(f"\ncaptured {len(result.snapshots)} snapshots "
      f"(cycles {[s.cycle_index for s in result.snapshots]})")

untrained = TrajectoryPredictor(cfg, Rng(1).child(0))
scores = {
    "untrained": evaluate_model(untrained.predict, split.val),
    "constant velocity": evaluate_model(constant_velocity_predict, split.val),
    "final snapshot": evaluate_model(result.model.predict, split.val),
    "prediction avg": evaluate_model(
        make_ensemble(result.snapshots, cfg, EnsembleConfig()), split.val),
    "parameter avg": evaluate_model(
        make_ensemble(result.snapshots, cfg,
                      EnsembleConfig(strategy="parameter_average")), split.val),
}
print(f"\n{'variant':<18}{'minADE':>9}{'minFDE':>9}{'MR':>7}")
for name, r in scores.items():
    print(f"{name:<18}{r.minade:>9.3f}{r.minfde:>9.3f}{r.mr:>7.3f}")
