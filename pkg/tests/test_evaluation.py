import math

import numpy as np
import pytest

from dyttp.backbone import ModelConfig, PredictionSet, TrajectoryPredictor
from dyttp.data import GenConfig, generate_synthetic
from dyttp.evaluation import (
    LatencyReport, MetricsReport, bench_latency,
    constant_velocity_predict, evaluate_model, format_ablation_table,
    format_latency_table, format_metrics_table, min_ade, min_fde, miss_rate,
    run_ablation,
)
from dyttp.tensor import Rng, Tensor
from dyttp.training import SchedulerConfig


def make_pred(locations):
    locations = np.asarray(locations, dtype=np.float64)
    k = locations.shape[0]
    return PredictionSet(Tensor(locations), Tensor(np.ones_like(locations)),
                         Tensor(np.full(k, 1.0 / k)))


# ---------------------------------------------------------------------------
# independent naive-loop oracle

def oracle_ade(locations, gt, valid):
    best = None
    for k in range(len(locations)):
        total, n = 0.0, 0
        for t in range(len(gt)):
            if not valid[t]:
                continue
            dx = locations[k][t][0] - gt[t][0]
            dy = locations[k][t][1] - gt[t][1]
            total += math.sqrt(dx * dx + dy * dy)
            n += 1
        if n == 0:
            return None
        ade = total / n
        if best is None or ade < best:
            best = ade
    return best


def oracle_fde(locations, gt, valid):
    if not valid[-1]:
        return None
    best = None
    for k in range(len(locations)):
        dx = locations[k][-1][0] - gt[-1][0]
        dy = locations[k][-1][1] - gt[-1][1]
        d = math.sqrt(dx * dx + dy * dy)
        if best is None or d < best:
            best = d
    return best


def oracle_mr(all_locations, all_gts, all_valids):
    misses, total = 0, 0
    for locations, gt, valid in zip(all_locations, all_gts, all_valids):
        fde = oracle_fde(locations, gt, valid)
        if fde is None:
            continue
        total += 1
        if fde > 2.0:
            misses += 1
    return misses / total


def test_min_ade_examples():
    f = 4
    gt = np.arange(f * 2, dtype=np.float64).reshape(f, 2)
    exact = make_pred(np.stack([gt, gt + 10.0]))
    assert min_ade(exact, gt, np.ones(f, dtype=bool)) == 0.0

    offset = make_pred((gt + np.array([3.0, 4.0]))[None])
    assert min_ade(offset, gt, np.ones(f, dtype=bool)) == pytest.approx(5.0, abs=1e-12)

    two = make_pred(np.stack([gt + np.array([2.0, 0.0]), gt + np.array([0.8, 0.0])]))
    assert min_ade(two, gt, np.ones(f, dtype=bool)) == pytest.approx(0.8, abs=1e-12)


def test_min_fde_examples():
    f = 4
    gt = np.zeros((f, 2))
    exact = make_pred(np.zeros((1, f, 2)))
    assert min_fde(exact, gt, np.ones(f, dtype=bool)) == 0.0

    loc = np.zeros((1, f, 2))
    loc[0, -1] = [0.0, 2.5]
    assert min_fde(make_pred(loc), gt, np.ones(f, dtype=bool)) == pytest.approx(2.5)

    # a mode with the worst ADE can still win FDE
    crossing = np.zeros((2, f, 2))
    crossing[0, :, 0] = [0.1, 0.1, 0.1, 5.0]   # good early, bad endpoint
    crossing[1, :, 0] = [4.0, 4.0, 4.0, 0.2]   # bad early, good endpoint
    pred = make_pred(crossing)
    valid = np.ones(f, dtype=bool)
    assert oracle_ade(crossing, gt, valid) == pytest.approx(min_ade(pred, gt, valid))
    assert min_fde(pred, gt, valid) == pytest.approx(0.2)
    ades = [oracle_ade(crossing[k:k + 1], gt, valid) for k in range(2)]
    assert np.argmin(ades) == 0  # ade winner is mode 0, fde winner is mode 1


def test_min_metrics_exclusions():
    f = 3
    pred = make_pred(np.zeros((2, f, 2)))
    assert min_ade(pred, np.zeros((f, 2)), np.zeros(f, dtype=bool)) is None
    assert min_fde(pred, np.zeros((f, 2)), np.array([True, True, False])) is None


def test_miss_rate_examples():
    f = 2
    gt = np.zeros((f, 2))

    def pred_with_endpoint_error(e):
        loc = np.zeros((1, f, 2))
        loc[0, -1, 0] = e
        return make_pred(loc)

    perfect = [pred_with_endpoint_error(0.0)] * 3
    assert miss_rate(perfect, [gt] * 3) == 0.0

    two = [pred_with_endpoint_error(1.9), pred_with_endpoint_error(2.1)]
    assert miss_rate(two, [gt, gt]) == 0.5

    boundary = [pred_with_endpoint_error(2.0)]
    assert miss_rate(boundary, [gt]) == 0.0  # exactly 2.0 counts as a hit

    with pytest.raises(ValueError):
        miss_rate([], [])


def test_metric_oracle_equivalence_random_instances():
    rng = Rng(77)
    all_locs, all_gts, all_valids = [], [], []
    for _ in range(1000):
        k = 1 + rng.integers(4)
        f = 1 + rng.integers(5)
        loc = rng.uniform((k, f, 2), -6.0, 6.0)
        gt = rng.uniform((f, 2), -6.0, 6.0)
        valid = rng.uniform((f,)) < 0.8
        valid = np.asarray(valid, dtype=bool)
        if not valid.any():
            valid[0] = True
        pred = make_pred(loc)
        assert min_ade(pred, gt, valid) == oracle_ade(loc.tolist(), gt.tolist(), valid.tolist())
        got_fde = min_fde(pred, gt, valid)
        want_fde = oracle_fde(loc.tolist(), gt.tolist(), valid.tolist())
        assert got_fde == want_fde
        all_locs.append(loc)
        all_gts.append(gt)
        all_valids.append(valid)
    keep = [i for i, v in enumerate(all_valids) if v[-1]]
    preds = [make_pred(all_locs[i]) for i in keep]
    assert miss_rate(preds, [all_gts[i] for i in keep], [all_valids[i] for i in keep]) == \
        oracle_mr([all_locs[i].tolist() for i in keep],
                  [all_gts[i].tolist() for i in keep],
                  [all_valids[i].tolist() for i in keep])


def test_metrics_translation_invariant():
    rng = Rng(78)
    # snap coordinates to a 2^-10 grid so adding the shift is exact in f64
    loc = np.round(rng.uniform((3, 5, 2), -4.0, 4.0) * 1024) / 1024
    gt = np.round(rng.uniform((5, 2), -4.0, 4.0) * 1024) / 1024
    valid = np.ones(5, dtype=bool)
    shift = np.array([128.0, -64.0])
    assert min_ade(make_pred(loc + shift), gt + shift, valid) == \
        min_ade(make_pred(loc), gt, valid)
    assert min_fde(make_pred(loc + shift), gt + shift, valid) == \
        min_fde(make_pred(loc), gt, valid)


def test_duplicate_mode_never_changes_metrics():
    rng = Rng(79)
    for _ in range(50):
        k = 1 + rng.integers(3)
        loc = rng.uniform((k, 4, 2), -5.0, 5.0)
        gt = rng.uniform((4, 2), -5.0, 5.0)
        valid = np.ones(4, dtype=bool)
        dup_idx = rng.integers(k)
        dup = np.concatenate([loc, loc[dup_idx:dup_idx + 1]])
        assert min_ade(make_pred(dup), gt, valid) == min_ade(make_pred(loc), gt, valid)
        assert min_fde(make_pred(dup), gt, valid) == min_fde(make_pred(loc), gt, valid)


def test_miss_rate_monotone_in_endpoint_error():
    f = 3
    gt = np.zeros((f, 2))

    def single(e):
        loc = np.zeros((1, f, 2))
        loc[0, -1, 0] = e
        return make_pred(loc)

    errors = [0.5, 1.0, 1.5, 2.5, 3.0]
    base = miss_rate([single(e) for e in errors], [gt] * 5)
    worse = miss_rate([single(e + 1.0) for e in errors], [gt] * 5)
    assert worse >= base


def test_evaluate_model_perfect_oracle_stub():
    split = generate_synthetic(12, Rng(80), GenConfig(noise_sigma=0.0))

    def oracle_predict(s):
        return [make_pred(s.agent_futures[n][None]) for n in range(s.num_agents)]

    report = evaluate_model(oracle_predict, split.all_scenarios())
    assert report.minade == 0.0
    assert report.minfde == 0.0
    assert report.mr == 0.0
    assert report.count == 12


def test_evaluate_model_thread_cap_consistent(monkeypatch):
    split = generate_synthetic(10, Rng(81))
    model = TrajectoryPredictor(ModelConfig(width=16, heads=2, modes=2, dropout=0.0), Rng(82))
    serial = evaluate_model(model.predict, split.all_scenarios())
    monkeypatch.setenv("DYTTP_THREADS", "4")
    threaded = evaluate_model(model.predict, split.all_scenarios())
    assert serial == threaded


def test_constant_velocity_baseline_on_straight():
    split = generate_synthetic(10, Rng(83), GenConfig(noise_sigma=0.0,
                                                      maneuver_mix=(1.0, 0, 0, 0)))
    report = evaluate_model(constant_velocity_predict, split.all_scenarios())
    assert report.minade < 1e-8
    assert report.mr == 0.0


def test_bench_latency_contract():
    split = generate_synthetic(3, Rng(84))

    def stub(s):
        return None

    report = bench_latency(stub, split.all_scenarios(), iterations=150, warmup=10)
    assert report.min_ms <= report.ave_ms <= report.max_ms
    assert report.std_ms >= 0.0
    assert report.iterations == 150 and report.warmup_iterations == 10
    with pytest.raises(ValueError):
        bench_latency(stub, split.all_scenarios(), iterations=50, warmup=10)
    with pytest.raises(ValueError):
        bench_latency(stub, split.all_scenarios(), iterations=150, warmup=5)


def test_bench_latency_width_monotone():
    split = generate_synthetic(2, Rng(85), GenConfig(max_agents=3))
    scens = split.all_scenarios()
    small = TrajectoryPredictor(ModelConfig(width=8, heads=2, modes=2, dropout=0.0), Rng(86))
    large = TrajectoryPredictor(ModelConfig(width=128, heads=2, modes=2, dropout=0.0), Rng(86))
    r_small = bench_latency(small.predict, scens, iterations=100, warmup=10)
    r_large = bench_latency(large.predict, scens, iterations=100, warmup=10)
    assert r_large.ave_ms > r_small.ave_ms


def test_run_ablation_grid_and_log_identity():
    split = generate_synthetic(30, Rng(87))
    cfg = ModelConfig(width=16, heads=2, modes=2, dropout=0.05)
    sched = SchedulerConfig(cycle_length=1, num_cycles=2)
    cells = run_ablation(split, cfg, sched, seed=3, batch_size=8,
                         bench_iterations=100, bench_warmup=10, bench_scenarios=2)
    assert [(c.dyt_enabled, c.snapshot_enabled) for c in cells] == \
        [(False, False), (True, False), (False, True), (True, True)]
    assert all(c.ok for c in cells)
    # snapshotting is observation-only: equal-norm cells log identically
    assert cells[1].log_lines == cells[3].log_lines
    assert cells[0].log_lines == cells[2].log_lines
    assert cells[0].log_lines != cells[1].log_lines

    table = format_ablation_table(cells)
    assert table.count("\n") == 5
    for col in ("ADE", "FDE", "MR", "inf(ms)"):
        assert col in table


def test_report_formatting():
    m = MetricsReport(minade=1.2345, minfde=2.5, mr=0.125, count=10)
    text = format_metrics_table(m, header="validation")
    assert "minADE" in text and "1.2345" in text and "validation" in text
    l = LatencyReport(ave_ms=1.5, std_ms=0.1, min_ms=1.2, max_ms=2.0,
                      iterations=100, warmup_iterations=10)
    ltext = format_latency_table(l)
    assert "ave" in ltext and "1.500" in ltext
