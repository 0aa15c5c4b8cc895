"""Training: losses, cosine warm-restart scheduling, snapshots, ensembling.

The loss is a winner-take-all Laplace negative log-likelihood on the mode
whose endpoint lands closest to the ground truth, plus a weighted
cross-entropy pushing that mode's probability up. Mode selection is done
outside the tape, so classification gradients never reach the location and
scale heads through the selection.

One snapshot of the full parameter state is captured at the end of every
learning-rate cycle; at inference the snapshots are combined either by
averaging their predictions or by averaging their parameters into one model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import ModelConfig, PredictionSet, TrajectoryPredictor
from .data import DatasetSplit, Scenario
from .evaluation import evaluate_model
from .tensor import Rng, Tape, Tensor

CE_PROB_FLOOR = 1e-12  # clamp for -log(p) when a mode collapses to zero


@dataclass
class SchedulerConfig:
    eta_min: float = 1e-5
    eta_max: float = 3e-3
    cycle_length: int = 8     # epochs between warm restarts
    num_cycles: int = 4
    reset_moments_on_restart: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eta_min < self.eta_max:
            raise ValueError("need 0 <= eta_min < eta_max")
        if self.cycle_length < 1 or self.num_cycles < 1:
            raise ValueError("cycle_length and num_cycles must be >= 1")


def lr_at(cfg: SchedulerConfig, e_cur: float) -> float:
    """Cosine annealing within one cycle; e_cur is epochs since the restart."""
    if not 0.0 <= e_cur <= cfg.cycle_length:
        raise ValueError(f"e_cur {e_cur} outside [0, {cfg.cycle_length}]")
    return cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (
        1.0 + math.cos(math.pi * e_cur / cfg.cycle_length))


@dataclass
class LossBreakdown:
    total: Tensor
    reg: Tensor
    cls: Tensor
    lam: float

    def values(self) -> dict:
        return {"total": self.total.item(), "reg": self.reg.item(),
                "cls": self.cls.item(), "lambda": self.lam}


def select_best_mode(pred: PredictionSet, gt, valid_mask) -> int:
    """Mode with the smallest displacement at the last valid step; ties pick
    the lowest index. Runs outside any tape, so selection is detached."""
    valid = np.asarray(valid_mask, dtype=bool)
    if not valid.any():
        raise ValueError("no valid future step to select against")
    e = int(np.flatnonzero(valid)[-1])
    gt = np.asarray(gt, dtype=np.float64)
    d = np.linalg.norm(pred.locations.data[:, e] - gt[e], axis=-1)
    return int(np.argmin(d))


def regression_nll(pred: PredictionSet, gt, valid_mask, mode_index: int) -> Tensor:
    """Laplace NLL summed over valid steps and both coordinates, one mode.

    Each term is log(2b) + |y - mu| / b.
    """
    valid = np.asarray(valid_mask, dtype=np.float64)
    mu = T.getitem(pred.locations, mode_index)
    b = T.getitem(pred.scales, mode_index)
    if np.any(b.data <= 0.0):
        raise ValueError("regression NLL needs strictly positive scales")
    gt = np.asarray(gt, dtype=np.float64)
    terms = T.add(T.log(T.mul(b, 2.0)), T.div(T.abs_(T.sub(mu, gt)), b))
    return T.sum_(T.mul(terms, valid[:, None]))


def classification_ce(mode_probs: Tensor, best_mode_index: int) -> Tensor:
    """-log p of the selected mode, clamped at 1e-12."""
    p = T.clamp_min(T.getitem(mode_probs, best_mode_index), CE_PROB_FLOOR)
    return T.neg(T.log(p))


def loss_eligible(s: Scenario, agent: int) -> bool:
    return s.agent_valid[agent].sum() >= 2 and s.future_valid[agent].any()


def total_loss(model: TrajectoryPredictor, scenarios, lam: float = 1.0,
               rng: Rng | None = None, training: bool = True) -> LossBreakdown:
    """Regression + lam * classification, averaged over eligible agents."""
    regs, ces = [], []
    for s in scenarios:
        preds = model.forward(s, rng=rng, training=training)
        for n in range(s.num_agents):
            if not loss_eligible(s, n):
                continue
            gt, valid = s.agent_futures[n], s.future_valid[n]
            k = select_best_mode(preds[n], gt, valid)
            regs.append(regression_nll(preds[n], gt, valid, k))
            ces.append(classification_ce(preds[n].mode_probs, k))
    if not regs:
        raise ValueError("batch contains no agents eligible for the loss")
    reg = T.mean(T.stack(regs))
    cls = T.mean(T.stack(ces))
    total = T.add(reg, T.mul(cls, lam))
    return LossBreakdown(total=total, reg=reg, cls=cls, lam=lam)


class AdamW:
    """Adaptive moments with decoupled weight decay; moments keyed by name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def reset_moments(self):
        self.m.clear()
        self.v.clear()
        self.t = 0

    def step(self, named_params, lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in named_params:
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise ValueError(f"NaN gradient for parameter {name}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


@dataclass
class Snapshot:
    cycle_index: int
    params: dict                 # parameter name -> float64 ndarray
    scheduler_epoch: int         # within-cycle epoch at capture (== cycle_length)
    val_minade: float | None


class DivergenceError(RuntimeError):
    """Loss became non-finite; carries the snapshots captured so far."""

    def __init__(self, message: str, snapshots):
        super().__init__(message)
        self.snapshots = list(snapshots)


@dataclass
class TrainResult:
    model: TrajectoryPredictor
    snapshots: list
    records: list

    def log_lines(self) -> list:
        return [json.dumps(r, sort_keys=True) for r in self.records]


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def train(split: DatasetSplit, model_cfg: ModelConfig, sched_cfg: SchedulerConfig,
          rng: Rng, lam: float = 1.0, batch_size: int = 8, log_sink=None,
          initial_params: dict | None = None, start_cycle: int = 0) -> TrainResult:
    """Run num_cycles x cycle_length epochs, snapshotting at each cycle end.

    Emits one machine-readable record per epoch (epoch, cycle, lr, train
    loss, validation minADE/minFDE/MR). On a non-finite loss the run aborts
    with the completed snapshots retained on the raised DivergenceError.
    """
    train_scenarios = [s for s in split.train
                       if any(loss_eligible(s, n) for n in range(s.num_agents))]
    if not train_scenarios:
        raise ValueError("training split has no loss-eligible agents")
    model = TrajectoryPredictor(model_cfg, rng.child(0))
    if initial_params is not None:
        model.load_state_dict(initial_params)
    shuffle_rng = rng.child(1)
    dropout_rng = rng.child(2)
    opt = AdamW()
    snapshots, records = [], []

    def last_good():
        return f"snapshot_{snapshots[-1].cycle_index}" if snapshots else "none"

    epoch_global = start_cycle * sched_cfg.cycle_length
    for cycle in range(start_cycle, sched_cfg.num_cycles):
        if sched_cfg.reset_moments_on_restart and cycle > start_cycle:
            opt.reset_moments()
        val_metrics = None
        for e_cur in range(sched_cfg.cycle_length):
            lr = lr_at(sched_cfg, e_cur)
            order = shuffle_rng.permutation(len(train_scenarios))
            batch_losses = []
            for batch_idx in _chunks(order, batch_size):
                batch = [train_scenarios[i] for i in batch_idx]
                try:
                    with Tape() as tape:
                        breakdown = total_loss(model, batch, lam, dropout_rng, training=True)
                    loss_val = breakdown.total.item()
                    if not math.isfinite(loss_val):
                        raise DivergenceError(
                            f"non-finite loss at epoch {epoch_global}; "
                            f"last good snapshot: {last_good()}", snapshots)
                    T.backward(breakdown.total, tape)
                    opt.step(model.named_params(), lr)
                    model.zero_grad()
                except ValueError as err:
                    raise DivergenceError(
                        f"numerical blow-up at epoch {epoch_global} ({err}); "
                        f"last good snapshot: {last_good()}", snapshots) from err
                batch_losses.append(loss_val)
            if split.val:
                val_metrics = evaluate_model(model.predict, split.val)
            record = {
                "epoch": epoch_global,
                "cycle": cycle,
                "lr": lr,
                "train_loss": float(np.mean(batch_losses)),
                "val_minADE": val_metrics.minade if val_metrics else None,
                "val_minFDE": val_metrics.minfde if val_metrics else None,
                "val_MR": val_metrics.mr if val_metrics else None,
            }
            records.append(record)
            if log_sink is not None:
                log_sink(record)
            epoch_global += 1
        snapshots.append(Snapshot(
            cycle_index=cycle,
            params=model.state_dict(),
            scheduler_epoch=sched_cfg.cycle_length,
            val_minade=val_metrics.minade if val_metrics else None,
        ))
    return TrainResult(model=model, snapshots=snapshots, records=records)


# ---------------------------------------------------------------------------
# snapshot ensembling

@dataclass
class EnsembleConfig:
    strategy: str = "prediction_average"
    snapshots_used: int | None = None   # most recent S; None means all

    def __post_init__(self):
        if self.strategy not in ("prediction_average", "parameter_average"):
            raise ValueError(f"unknown ensemble strategy {self.strategy!r}")
        if self.snapshots_used is not None and self.snapshots_used < 1:
            raise ValueError("snapshots_used must be >= 1")


def model_from_params(params: dict, model_cfg: ModelConfig) -> TrajectoryPredictor:
    model = TrajectoryPredictor(model_cfg, Rng(0))
    model.load_state_dict(params)
    return model


def _check_compatible(snapshots):
    ref = snapshots[0].params
    for s in snapshots[1:]:
        if set(s.params) != set(ref) or any(
                s.params[k].shape != ref[k].shape for k in ref):
            raise ValueError("snapshots have mismatched architectures")


def _mean_arrays(arrays):
    # computed as base + mean of differences so averaging identical inputs
    # returns them bit for bit
    base = arrays[0]
    if len(arrays) == 1:
        return base.copy()
    acc = np.zeros_like(base)
    for a in arrays[1:]:
        acc += a - base
    return base + acc / len(arrays)


def _average_predictions(per_model) -> list:
    out = []
    for agent_preds in zip(*per_model):
        loc = _mean_arrays([p.locations.data for p in agent_preds])
        sc = _mean_arrays([p.scales.data for p in agent_preds])
        pr = _mean_arrays([p.mode_probs.data for p in agent_preds])
        ssum = pr.sum()
        if abs(ssum - 1.0) > 1e-12:  # renormalize only on real drift
            pr = pr / ssum
        out.append(PredictionSet(locations=Tensor(loc), scales=Tensor(sc),
                                 mode_probs=Tensor(pr)))
    return out


def make_ensemble(snapshots, model_cfg: ModelConfig, cfg: EnsembleConfig):
    """Build a predict(scenario) callable for a set of snapshots."""
    if not snapshots:
        raise ValueError("ensemble needs at least one snapshot")
    used = snapshots if cfg.snapshots_used is None else snapshots[-cfg.snapshots_used:]
    _check_compatible(used)

    if cfg.strategy == "parameter_average":
        params = {k: _mean_arrays([s.params[k] for s in used]) for k in used[0].params}
        return model_from_params(params, model_cfg).predict

    models = [model_from_params(s.params, model_cfg) for s in used]
    if len(models) == 1:
        return models[0].predict

    def predict(scenario: Scenario) -> list:
        return _average_predictions([m.predict(scenario) for m in models])

    return predict


def ensemble_predict(snapshots, scenario: Scenario, cfg: EnsembleConfig,
                     model_cfg: ModelConfig) -> list:
    return make_ensemble(snapshots, model_cfg, cfg)(scenario)
