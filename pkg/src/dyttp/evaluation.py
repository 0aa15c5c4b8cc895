"""Forecasting metrics, inference-latency benchmarking, and the 2x2 ablation.

Metrics follow the usual multimodal forecasting definitions: minADE is the
minimum over modes of the mean per-step Euclidean error, minFDE the minimum
over modes of the final-step error, and the miss rate the fraction of agents
whose best endpoint misses by strictly more than 2.0 m. Evaluation fan-out
across scenarios can be capped with the DYTTP_THREADS environment variable.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .backbone import ModelConfig, PredictionSet
from .data import DatasetSplit, Scenario
from .tensor import Rng, Tensor

MISS_THRESHOLD_M = 2.0


@dataclass
class MetricsReport:
    minade: float
    minfde: float
    mr: float
    count: int

    def to_dict(self) -> dict:
        return {"minADE": self.minade, "minFDE": self.minfde,
                "MR": self.mr, "count": self.count}


@dataclass
class LatencyReport:
    ave_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    iterations: int
    warmup_iterations: int

    def to_dict(self) -> dict:
        return {"ave_ms": self.ave_ms, "std_ms": self.std_ms,
                "min_ms": self.min_ms, "max_ms": self.max_ms,
                "iterations": self.iterations,
                "warmup_iterations": self.warmup_iterations}


@dataclass
class AblationCell:
    dyt_enabled: bool
    snapshot_enabled: bool
    metrics: MetricsReport | None
    latency: LatencyReport | None
    log_lines: list
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _locations(pred) -> np.ndarray:
    loc = pred.locations
    return loc.data if isinstance(loc, Tensor) else np.asarray(loc)


def min_ade(pred: PredictionSet, gt, valid_mask) -> float | None:
    """Min over modes of the mean Euclidean error at valid future steps.

    Returns None when no future step is valid (the agent is excluded, not
    scored as zero).
    """
    valid = np.asarray(valid_mask, dtype=bool)
    if not valid.any():
        return None
    loc = _locations(pred)
    gt = np.asarray(gt, dtype=np.float64)
    dist = np.linalg.norm(loc[:, valid] - gt[valid], axis=-1)
    return float(dist.mean(axis=1).min())


def min_fde(pred: PredictionSet, gt, valid_mask) -> float | None:
    """Min over modes of the final-step error; None if the final step is invalid."""
    valid = np.asarray(valid_mask, dtype=bool)
    if not valid[-1]:
        return None
    loc = _locations(pred)
    gt = np.asarray(gt, dtype=np.float64)
    return float(np.linalg.norm(loc[:, -1] - gt[-1], axis=-1).min())


def miss_rate(preds, gts, valid_masks=None) -> float:
    """Fraction of agents whose best endpoint deviates by more than 2.0 m.

    Ties at exactly 2.0 m count as hits (strict inequality). Agents with an
    invalid final step are excluded from the denominator.
    """
    if valid_masks is None:
        valid_masks = [np.ones(np.asarray(g).shape[0], dtype=bool) for g in gts]
    misses, total = 0, 0
    for pred, gt, valid in zip(preds, gts, valid_masks):
        err = min_fde(pred, gt, valid)
        if err is None:
            continue
        total += 1
        if err > MISS_THRESHOLD_M:
            misses += 1
    if total == 0:
        raise ValueError("miss_rate over an empty set of evaluated agents")
    return misses / total


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("DYTTP_THREADS", "1")))
    except ValueError:
        return 1


def _map_ordered(fn, items):
    threads = _thread_cap()
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate_model(predict_fn, scenarios, focal_only: bool = True) -> MetricsReport:
    """Aggregate minADE / minFDE / MR over scenarios.

    predict_fn maps a Scenario to one PredictionSet per agent; by default
    only the focal agent of each scenario is scored.
    """
    if not scenarios:
        raise ValueError("no scenarios to evaluate")

    def per_scenario(s: Scenario):
        preds = predict_fn(s)
        idx = [s.focal_agent] if focal_only else list(range(s.num_agents))
        rows = []
        for n in idx:
            rows.append((preds[n], s.agent_futures[n], s.future_valid[n]))
        return rows

    rows = [r for chunk in _map_ordered(per_scenario, list(scenarios)) for r in chunk]
    ades = [a for a in (min_ade(p, g, v) for p, g, v in rows) if a is not None]
    fdes = [f for f in (min_fde(p, g, v) for p, g, v in rows) if f is not None]
    mr = miss_rate([p for p, _, _ in rows], [g for _, g, _ in rows],
                   [v for _, _, v in rows])
    return MetricsReport(
        minade=float(np.mean(ades)) if ades else float("nan"),
        minfde=float(np.mean(fdes)) if fdes else float("nan"),
        mr=mr,
        count=len(scenarios),
    )


def constant_velocity_predict(s: Scenario) -> list:
    """Single-mode baseline: extrapolate each agent's last observed velocity."""
    n, t = s.agent_valid.shape
    f = s.future_valid.shape[1]
    out = []
    for i in range(n):
        valid_idx = np.flatnonzero(s.agent_valid[i])
        if len(valid_idx) >= 2:
            a, b = valid_idx[-2], valid_idx[-1]
            v = (s.agent_histories[i, b] - s.agent_histories[i, a]) / ((b - a) * 0.1)
            start = s.agent_histories[i, b]
        else:
            v = np.zeros(2)
            start = s.agent_histories[i, valid_idx[-1]] if len(valid_idx) else np.zeros(2)
        steps = np.arange(1, f + 1)[:, None] * 0.1
        loc = (start + steps * v)[None, :, :]
        out.append(PredictionSet(locations=Tensor(loc),
                                 scales=Tensor(np.ones_like(loc)),
                                 mode_probs=Tensor(np.array([1.0]))))
    return out


def bench_latency(predict_fn, scenarios, iterations: int = 1000,
                  warmup: int = 50) -> LatencyReport:
    """Wall-clock per single-scenario prediction, fixed scenario order.

    The timed region only calls predict_fn; no parameter state is created
    inside it. Runs serially to keep the variance interpretable.
    """
    if iterations < 100:
        raise ValueError("latency benchmark needs >= 100 iterations")
    if warmup < 10:
        raise ValueError("latency benchmark needs >= 10 warmup iterations")
    if not scenarios:
        raise ValueError("no scenarios to benchmark")
    order = [scenarios[i % len(scenarios)] for i in range(iterations + warmup)]
    for s in order[:warmup]:
        predict_fn(s)
    samples = np.empty(iterations)
    for i, s in enumerate(order[warmup:]):
        t0 = time.perf_counter()
        predict_fn(s)
        samples[i] = time.perf_counter() - t0
    ms = samples * 1e3
    return LatencyReport(
        ave_ms=float(ms.mean()), std_ms=float(ms.std()),
        min_ms=float(ms.min()), max_ms=float(ms.max()),
        iterations=iterations, warmup_iterations=warmup,
    )


def norm_layer_latency(norm_kind: str, shape=(32, 50, 64), iterations: int = 1000,
                       warmup: int = 100, seed: int = 0) -> float:
    """Mean forward latency (ms) of one normalization layer on a fixed shape."""
    from .layers import make_norm

    layer = make_norm(norm_kind, shape[-1])
    x = Tensor(Rng(seed).normal(shape))
    for _ in range(warmup):
        layer(x)
    t0 = time.perf_counter()
    for _ in range(iterations):
        layer(x)
    return (time.perf_counter() - t0) / iterations * 1e3


# ---------------------------------------------------------------------------
# 2x2 ablation

_CELLS = [(False, False), (True, False), (False, True), (True, True)]


def run_ablation(split: DatasetSplit, model_cfg: ModelConfig, sched_cfg, seed: int,
                 lam: float = 1.0, batch_size: int = 8,
                 bench_iterations: int = 200, bench_warmup: int = 20,
                 bench_scenarios: int = 4) -> list:
    """Train and evaluate the 2x2 grid {DynamicTanh on/off} x {snapshots on/off}.

    Every cell starts from the same seed; snapshot-disabled cells run
    inference with only the final snapshot. A diverging cell is reported as
    failed without stopping the others.
    """
    from .training import DivergenceError, EnsembleConfig, make_ensemble, train

    cells = []
    for dyt_on, snap_on in _CELLS:
        cfg = replace(model_cfg, norm_kind="dyt" if dyt_on else "layernorm")
        try:
            result = train(split, cfg, sched_cfg, Rng(seed), lam=lam,
                           batch_size=batch_size)
            snaps = result.snapshots if snap_on else result.snapshots[-1:]
            predict_fn = make_ensemble(snaps, cfg, EnsembleConfig())
            metrics = evaluate_model(predict_fn, split.val)
            latency = bench_latency(predict_fn, split.val[:bench_scenarios],
                                    iterations=bench_iterations, warmup=bench_warmup)
            cells.append(AblationCell(dyt_on, snap_on, metrics, latency,
                                      log_lines=result.log_lines()))
        except DivergenceError as e:
            cells.append(AblationCell(dyt_on, snap_on, None, None,
                                      log_lines=[], error=str(e)))
    return cells


# ---------------------------------------------------------------------------
# report rendering

def format_metrics_table(report: MetricsReport, header: str = "") -> str:
    lines = []
    if header:
        lines.append(header)
    lines.append(f"{'metric':<10}{'value':>12}")
    lines.append(f"{'minADE':<10}{report.minade:>12.4f}")
    lines.append(f"{'minFDE':<10}{report.minfde:>12.4f}")
    lines.append(f"{'MR':<10}{report.mr:>12.4f}")
    lines.append(f"{'count':<10}{report.count:>12d}")
    return "\n".join(lines)


def format_latency_table(report: LatencyReport, header: str = "") -> str:
    lines = []
    if header:
        lines.append(header)
    lines.append(f"{'stat':<10}{'ms':>12}")
    for key in ("ave_ms", "std_ms", "min_ms", "max_ms"):
        lines.append(f"{key[:-3]:<10}{getattr(report, key):>12.3f}")
    lines.append(f"{'iters':<10}{report.iterations:>12d}")
    return "\n".join(lines)


def format_ablation_table(cells) -> str:
    head = f"{'DyT':^5}{'Snapshot':^10}{'Backbone':^10}|{'ADE':>9}{'FDE':>9}{'MR':>9}{'inf(ms)':>10}"
    lines = [head, "-" * len(head)]
    for cell in cells:
        dyt = "x" if cell.dyt_enabled else ""
        snap = "x" if cell.snapshot_enabled else ""
        if cell.ok:
            lines.append(
                f"{dyt:^5}{snap:^10}{'x':^10}|"
                f"{cell.metrics.minade:>9.4f}{cell.metrics.minfde:>9.4f}"
                f"{cell.metrics.mr:>9.4f}{cell.latency.ave_ms:>10.3f}")
        else:
            lines.append(f"{dyt:^5}{snap:^10}{'x':^10}|  failed: {cell.error}")
    return "\n".join(lines)


def ablation_to_dict(cells, seed: int, model_cfg: ModelConfig) -> dict:
    from dataclasses import asdict

    return {
        "schema": "dyttp-ablation-v1",
        "seed": seed,
        "base_config": asdict(model_cfg),
        "cells": [
            {
                "dyt_enabled": c.dyt_enabled,
                "snapshot_enabled": c.snapshot_enabled,
                "seed": seed,
                "norm_kind": "dyt" if c.dyt_enabled else "layernorm",
                "metrics": c.metrics.to_dict() if c.metrics else None,
                "latency": c.latency.to_dict() if c.latency else None,
                "error": c.error,
            }
            for c in cells
        ],
    }
