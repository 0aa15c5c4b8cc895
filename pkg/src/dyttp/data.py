"""Scenario data: synthetic generation, CSV ingestion, binary serialization.

A scenario holds N agent tracks sampled at 10 Hz (0.1 s steps), split into
20 observed steps and a 30-step future, plus lane centerline polylines.
Synthetic agents follow closed-form maneuvers (straight, arc, lane change)
so futures are exact analytic continuations when noise is zero. The
maneuver of the focal agent is embedded in the scenario_id suffix
(straight, arc_left, arc_right, lane_change) so subsets can be selected.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Rng

DT = 0.1
OBS_STEPS = 20
PRED_STEPS = 30

_MAGIC = b"DYTS"
_FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed input file (CSV layout, container magic/version, truncation)."""


@dataclass
class Scenario:
    agent_histories: np.ndarray   # [N, T, 2] meters
    agent_valid: np.ndarray       # [N, T] bool
    agent_futures: np.ndarray     # [N, F, 2] meters
    future_valid: np.ndarray      # [N, F] bool
    lanes: list                   # list of [P, 2] polylines, meters
    focal_agent: int
    scenario_id: str

    def __post_init__(self):
        self.agent_histories = np.asarray(self.agent_histories, dtype=np.float64)
        self.agent_valid = np.asarray(self.agent_valid, dtype=bool)
        self.agent_futures = np.asarray(self.agent_futures, dtype=np.float64)
        self.future_valid = np.asarray(self.future_valid, dtype=bool)
        self.lanes = [np.asarray(l, dtype=np.float64) for l in self.lanes]

    @property
    def num_agents(self) -> int:
        return self.agent_histories.shape[0]

    @property
    def obs_steps(self) -> int:
        return self.agent_histories.shape[1]

    @property
    def pred_steps(self) -> int:
        return self.agent_futures.shape[1]

    def validate(self):
        n, t = self.agent_valid.shape
        if self.agent_histories.shape != (n, t, 2):
            raise ValueError("history/validity shapes disagree")
        if self.agent_futures.shape[0] != n or self.future_valid.shape != self.agent_futures.shape[:2]:
            raise ValueError("future/validity shapes disagree")
        if not (0 <= self.focal_agent < n):
            raise ValueError("focal agent index out of range")
        if not self.agent_valid[self.focal_agent].all():
            raise ValueError("focal agent must have a fully observed history")
        for arr in (self.agent_histories, self.agent_futures, *self.lanes):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite coordinates")

    def translated(self, dx: float, dy: float) -> "Scenario":
        shift = np.array([dx, dy])
        return Scenario(
            self.agent_histories + shift,
            self.agent_valid.copy(),
            self.agent_futures + shift,
            self.future_valid.copy(),
            [l + shift for l in self.lanes],
            self.focal_agent,
            self.scenario_id,
        )

    def permuted(self, order) -> "Scenario":
        order = np.asarray(order)
        inv = int(np.argwhere(order == self.focal_agent)[0, 0])
        return Scenario(
            self.agent_histories[order],
            self.agent_valid[order],
            self.agent_futures[order],
            self.future_valid[order],
            [l.copy() for l in self.lanes],
            inv,
            self.scenario_id,
        )


@dataclass
class DatasetSplit:
    train: list
    val: list
    seed: int

    def all_scenarios(self):
        return self.train + self.val


# ---------------------------------------------------------------------------
# closed-form maneuver paths

def straight_path(p0, heading, speed, times):
    """Positions along a constant-velocity line at the given times."""
    times = np.asarray(times, dtype=np.float64)
    u = np.array([np.cos(heading), np.sin(heading)])
    return np.asarray(p0) + np.outer(speed * times, u)


def arc_path(p0, heading, speed, radius, turn_sign, times):
    """Constant-speed circular arc; turn_sign +1 turns left, -1 right."""
    times = np.asarray(times, dtype=np.float64)
    normal = turn_sign * np.array([-np.sin(heading), np.cos(heading)])
    center = np.asarray(p0) + radius * normal
    omega = turn_sign * speed / radius
    rel = np.asarray(p0) - center
    ang = omega * times
    cos_a, sin_a = np.cos(ang), np.sin(ang)
    x = cos_a * rel[0] - sin_a * rel[1]
    y = sin_a * rel[0] + cos_a * rel[1]
    return center + np.stack([x, y], axis=-1)


def lane_change_path(p0, heading, speed, lateral_offset, duration, times):
    """Straight longitudinal motion plus a smoothstep lateral shift.

    The shift ramps from 0 to lateral_offset over [0, duration] seconds and
    holds afterwards; negative times sit on the source lane.
    """
    times = np.asarray(times, dtype=np.float64)
    u = np.array([np.cos(heading), np.sin(heading)])
    n = np.array([-np.sin(heading), np.cos(heading)])
    tau = np.clip(times / duration, 0.0, 1.0)
    ramp = tau * tau * (3.0 - 2.0 * tau)
    return np.asarray(p0) + np.outer(speed * times, u) + np.outer(lateral_offset * ramp, n)


_MANEUVERS = ("straight", "arc_left", "arc_right", "lane_change")


@dataclass
class GenConfig:
    noise_sigma: float = 0.1
    obs_steps: int = OBS_STEPS
    pred_steps: int = PRED_STEPS
    dt: float = DT
    speed_range: tuple = (2.0, 15.0)
    radius_range: tuple = (15.0, 40.0)
    maneuver_mix: tuple = (0.40, 0.25, 0.25, 0.10)  # straight, left, right, lane change
    max_agents: int = 6
    lane_point_spacing: float = 5.0
    train_fraction: float = 0.8


def _pick_maneuver(u: float, mix) -> str:
    acc = 0.0
    for name, w in zip(_MANEUVERS, mix):
        acc += w
        if u < acc:
            return name
    return _MANEUVERS[-1]


def _agent_track(rng: Rng, cfg: GenConfig, p0, heading, maneuver):
    t = cfg.obs_steps
    f = cfg.pred_steps
    # time 0 is the last observed step
    times = (np.arange(-(t - 1), f + 1)) * cfg.dt
    speed = rng.uniform((), *cfg.speed_range)
    if maneuver == "straight":
        path = straight_path(p0, heading, speed, times)
    elif maneuver in ("arc_left", "arc_right"):
        radius = rng.uniform((), *cfg.radius_range)
        sign = 1.0 if maneuver == "arc_left" else -1.0
        path = arc_path(p0, heading, speed, radius, sign, times)
    else:
        offset = 3.5 if rng.uniform(()) < 0.5 else -3.5
        duration = rng.uniform((), 2.0, 3.0)
        path = lane_change_path(p0, heading, speed, offset, duration, times)
    return path[:t], path[t:], speed


def _centerline(path: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    n_pts = max(2, int(arc[-1] / spacing) + 1)
    targets = np.linspace(0.0, arc[-1], n_pts)
    xs = np.interp(targets, arc, path[:, 0])
    ys = np.interp(targets, arc, path[:, 1])
    return np.stack([xs, ys], axis=-1)


def generate_scenario(index: int, rng: Rng, cfg: GenConfig) -> Scenario:
    t, f = cfg.obs_steps, cfg.pred_steps
    n_agents = 1 + rng.integers(cfg.max_agents)
    focal_maneuver = _pick_maneuver(rng.uniform(()), cfg.maneuver_mix)

    histories = np.zeros((n_agents, t, 2))
    futures = np.zeros((n_agents, f, 2))
    agent_valid = np.ones((n_agents, t), dtype=bool)
    future_valid = np.ones((n_agents, f), dtype=bool)
    lanes = []

    base = rng.uniform((2,), -50.0, 50.0)
    for i in range(n_agents):
        if i == 0:
            p0, heading, maneuver = base, rng.uniform((), 0.0, 2.0 * np.pi), focal_maneuver
        else:
            p0 = base + rng.uniform((2,), -30.0, 30.0)
            heading = rng.uniform((), 0.0, 2.0 * np.pi)
            maneuver = _pick_maneuver(rng.uniform(()), cfg.maneuver_mix)
        hist, fut, _ = _agent_track(rng, cfg, p0, heading, maneuver)
        histories[i], futures[i] = hist, fut
        lanes.append(_centerline(np.concatenate([hist, fut]), cfg.lane_point_spacing))
        if i > 0 and rng.uniform(()) < 0.3:
            # late-entry neighbor: first steps unobserved, at least 2 remain valid
            missing = 1 + rng.integers(t - 2)
            agent_valid[i, :missing] = False

    if cfg.noise_sigma > 0.0:
        histories = histories + rng.normal((n_agents, t, 2), std=cfg.noise_sigma)

    sc = Scenario(
        histories, agent_valid, futures, future_valid, lanes,
        focal_agent=0,
        scenario_id=f"syn-{index:06d}-{focal_maneuver}",
    )
    sc.validate()
    return sc


def split_of(scenario_id: str, seed: int, train_fraction: float = 0.8) -> str:
    """Train/val assignment as a pure function of (scenario_id, seed)."""
    digest = hashlib.sha256(f"{scenario_id}|{seed}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0**64
    return "train" if u < train_fraction else "val"


def generate_synthetic(count: int, rng: Rng, cfg: GenConfig | None = None) -> DatasetSplit:
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = cfg or GenConfig()
    seed = int(rng.u64(1)[0])  # fold the stream position into the split key
    train, val = [], []
    for i in range(count):
        sc = generate_scenario(i, rng.child(i), cfg)
        (train if split_of(sc.scenario_id, seed, cfg.train_fraction) == "train" else val).append(sc)
    return DatasetSplit(train=train, val=val, seed=seed)


# ---------------------------------------------------------------------------
# binary container

def _write_f32(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _write_scenario(buf, sc: Scenario):
    rec = io.BytesIO()
    sid = sc.scenario_id.encode()
    rec.write(struct.pack("<H", len(sid)))
    rec.write(sid)
    n, t = sc.agent_valid.shape
    f = sc.future_valid.shape[1]
    rec.write(struct.pack("<IHHI", n, t, f, sc.focal_agent))
    _write_f32(rec, sc.agent_histories)
    rec.write(np.ascontiguousarray(sc.agent_valid, dtype=np.uint8).tobytes())
    _write_f32(rec, sc.agent_futures)
    rec.write(np.ascontiguousarray(sc.future_valid, dtype=np.uint8).tobytes())
    rec.write(struct.pack("<I", len(sc.lanes)))
    for lane in sc.lanes:
        rec.write(struct.pack("<I", lane.shape[0]))
        _write_f32(rec, lane)
    payload = rec.getvalue()
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def save_scenarios(split: DatasetSplit, path):
    with open(path, "wb") as fh:
        buf = io.BytesIO()
        t = split.train[0].obs_steps if split.train else (split.val[0].obs_steps if split.val else OBS_STEPS)
        f = split.train[0].pred_steps if split.train else (split.val[0].pred_steps if split.val else PRED_STEPS)
        buf.write(_MAGIC)
        buf.write(struct.pack("<IHHIIQ", _FORMAT_VERSION, t, f,
                              len(split.train), len(split.val),
                              split.seed & 0xFFFFFFFFFFFFFFFF))
        for sc in split.train:
            _write_scenario(buf, sc)
        for sc in split.val:
            _write_scenario(buf, sc)
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("truncated scenario file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_scenario(r: _Reader) -> Scenario:
    (rec_len,) = r.unpack("<I")
    sub = _Reader(r.take(rec_len))
    (sid_len,) = sub.unpack("<H")
    sid = sub.take(sid_len).decode()
    n, t, f, focal = sub.unpack("<IHHI")
    hist = np.frombuffer(sub.take(n * t * 2 * 4), dtype="<f4").astype(np.float64).reshape(n, t, 2)
    valid = np.frombuffer(sub.take(n * t), dtype=np.uint8).astype(bool).reshape(n, t)
    fut = np.frombuffer(sub.take(n * f * 2 * 4), dtype="<f4").astype(np.float64).reshape(n, f, 2)
    fvalid = np.frombuffer(sub.take(n * f), dtype=np.uint8).astype(bool).reshape(n, f)
    (n_lanes,) = sub.unpack("<I")
    lanes = []
    for _ in range(n_lanes):
        (pts,) = sub.unpack("<I")
        lanes.append(np.frombuffer(sub.take(pts * 2 * 4), dtype="<f4").astype(np.float64).reshape(pts, 2))
    return Scenario(hist, valid, fut, fvalid, lanes, focal, sid)


def load_scenarios(path) -> DatasetSplit:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.take(4) != _MAGIC:
        raise FormatError("not a scenario container (bad magic)")
    version, t, f, n_train, n_val, seed = r.unpack("<IHHIIQ")
    if version != _FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    train = [_read_scenario(r) for _ in range(n_train)]
    val = [_read_scenario(r) for _ in range(n_val)]
    if r.pos != len(raw):
        raise FormatError("trailing bytes after last scenario")
    return DatasetSplit(train=train, val=val, seed=seed)


# ---------------------------------------------------------------------------
# CSV ingestion (Argoverse-style motion forecasting files)

_REQUIRED_COLUMNS = {"TIMESTAMP", "TRACK_ID", "OBJECT_TYPE", "X", "Y", "CITY_NAME"}


def load_lane_map(map_path) -> list:
    with open(map_path) as fh:
        doc = json.load(fh)
    try:
        return [np.asarray(lane["points"], dtype=np.float64) for lane in doc["lanes"]]
    except (KeyError, TypeError) as e:
        raise FormatError(f"bad lane map JSON: {e}") from None


def load_trajectory_csv(path, map_path=None, obs_steps: int = OBS_STEPS,
                        pred_steps: int = PRED_STEPS) -> Scenario:
    """Load one tracked scenario from a forecasting CSV.

    Rows are snapped to a 10 Hz grid of obs_steps + pred_steps slots starting
    at the earliest timestamp; the track with OBJECT_TYPE == "AGENT" becomes
    the focal agent. Missing steps are masked invalid.
    """
    import csv

    total = obs_steps + pred_steps
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not _REQUIRED_COLUMNS.issubset(reader.fieldnames):
            missing = _REQUIRED_COLUMNS - set(reader.fieldnames or [])
            raise FormatError(f"CSV missing required columns: {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise FormatError("CSV has no data rows")

    stamps = np.array(sorted({float(r["TIMESTAMP"]) for r in rows}))
    t0 = stamps[0]
    slots = np.rint((stamps - t0) / DT).astype(int)
    covered = {s for s in slots if 0 <= s < total}
    if len(covered) < total:
        raise FormatError(
            f"fewer than {total} aligned timestamps ({len(covered)} covered)")

    # deterministic track order: focal AGENT first, then by track id
    by_track = {}
    for r in rows:
        by_track.setdefault(r["TRACK_ID"], []).append(r)
    agents = [tid for tid in by_track if any(r["OBJECT_TYPE"] == "AGENT" for r in by_track[tid])]
    if len(agents) != 1:
        raise FormatError(f"expected exactly one AGENT track, found {len(agents)}")
    order = agents + sorted(tid for tid in by_track if tid not in agents)

    n = len(order)
    pos = np.zeros((n, total, 2))
    valid = np.zeros((n, total), dtype=bool)
    for i, tid in enumerate(order):
        for r in sorted(by_track[tid], key=lambda r: float(r["TIMESTAMP"])):
            slot = int(round((float(r["TIMESTAMP"]) - t0) / DT))
            if 0 <= slot < total and not valid[i, slot]:
                pos[i, slot] = (float(r["X"]), float(r["Y"]))
                valid[i, slot] = True

    if not valid[0, :obs_steps].all():
        raise FormatError("AGENT track does not cover the full observation window")

    lanes = load_lane_map(map_path) if map_path else []
    sc = Scenario(
        pos[:, :obs_steps], valid[:, :obs_steps],
        pos[:, obs_steps:], valid[:, obs_steps:],
        lanes, focal_agent=0,
        scenario_id=str(path),
    )
    sc.validate()
    return sc
