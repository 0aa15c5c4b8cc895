"""Trajectory prediction backbone.

Agents are embedded from per-step displacement vectors in a translated
(agent-centric) frame, lanes from segment direction vectors; absolute
positions only ever enter through differences, so the model is translation
invariant by construction and predictions become world-frame by adding each
agent's frame origin (its last observed position).

Encoding runs four attention stages in order: agent-agent per observed
timestep within a radius, temporal per agent with a causal mask (last-step
token is the agent summary), agent-lane cross attention against lane
segments within the radius, and global agent-agent attention without a
radius mask. Every stage uses pre-norm blocks with the configured
normalization (DynamicTanh or LayerNorm) at all sites, including the
decoder head norm.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import Scenario
from .layers import Linear, Module, TransformerBlock, BlockConfig, gelu, make_norm
from .tensor import Rng, Tensor

SCALE_FLOOR = 1e-6  # keeps softplus output strictly positive after underflow


@dataclass
class ModelConfig:
    width: int = 32
    heads: int = 4
    blocks_per_stage: int = 1
    modes: int = 3
    obs_steps: int = 20
    pred_steps: int = 30
    radius: float = 50.0
    norm_kind: str = "dyt"
    ff_ratio: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if self.modes < 1:
            raise ValueError("modes must be >= 1")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.norm_kind not in ("dyt", "layernorm"):
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()

    def block_config(self) -> BlockConfig:
        return BlockConfig(norm_kind=self.norm_kind, width=self.width,
                           heads=self.heads, ff_ratio=self.ff_ratio,
                           dropout=self.dropout)


@dataclass
class EncodedScene:
    embeddings: Tensor      # [N, D]
    origins: np.ndarray     # [N, 2] frame origin per agent (last observed position)


@dataclass
class PredictionSet:
    locations: Tensor   # [K, F, 2] world frame, meters
    scales: Tensor      # [K, F, 2] strictly positive
    mode_probs: Tensor  # [K] simplex

    def __post_init__(self):
        if np.any(self.scales.data <= 0.0):
            raise ValueError("scales must be strictly positive")
        if abs(float(self.mode_probs.data.sum()) - 1.0) > 1e-9:
            raise ValueError("mode probabilities must sum to 1")

    @property
    def num_modes(self) -> int:
        return self.locations.data.shape[0]


def frame_origins(scenario: Scenario) -> np.ndarray:
    """Last valid observed position per agent; zeros if never observed."""
    hist, valid = scenario.agent_histories, scenario.agent_valid
    n, t = valid.shape
    origins = np.zeros((n, 2))
    has = valid.any(axis=1)
    last = t - 1 - np.argmax(valid[:, ::-1], axis=1)
    origins[has] = hist[np.arange(n)[has], last[has]]
    return origins


def agent_step_features(scenario: Scenario) -> np.ndarray:
    """[N, T, 3] per-step displacement (dx, dy) plus a validity flag."""
    hist, valid = scenario.agent_histories, scenario.agent_valid
    n, t, _ = hist.shape
    feats = np.zeros((n, t, 3))
    disp = hist[:, 1:] - hist[:, :-1]
    pair_ok = valid[:, 1:] & valid[:, :-1]
    feats[:, 1:, :2] = disp * pair_ok[:, :, None]
    feats[:, :, 2] = valid
    return feats


def lane_segments(lanes) -> tuple[np.ndarray, np.ndarray]:
    """Split polylines into segments: ([S, 3] unit direction + length, [S, 2] midpoints)."""
    feats, mids = [], []
    for poly in lanes:
        poly = np.asarray(poly, dtype=np.float64)
        if poly.shape[0] < 2:
            continue
        d = np.diff(poly, axis=0)
        length = np.linalg.norm(d, axis=1)
        keep = length > 0
        if not keep.any():
            continue
        u = d[keep] / length[keep, None]
        feats.append(np.concatenate([u, length[keep, None]], axis=1))
        mids.append(0.5 * (poly[:-1] + poly[1:])[keep])
    if not feats:
        return np.zeros((0, 3)), np.zeros((0, 2))
    return np.concatenate(feats), np.concatenate(mids)


class TrajectoryPredictor(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        d = cfg.width
        self.cfg = cfg
        self.input_proj = Linear(3, d, rng)
        self.pos_embed = Tensor(rng.normal((cfg.obs_steps, d), std=0.02), requires_grad=True)
        self.lane_proj = Linear(3, d, rng)
        self.rel_proj = Linear(2, d, rng)
        bc = cfg.block_config()
        self.social_blocks = [TransformerBlock(bc, rng) for _ in range(cfg.blocks_per_stage)]
        self.temporal_blocks = [TransformerBlock(bc, rng) for _ in range(cfg.blocks_per_stage)]
        self.lane_blocks = [TransformerBlock(bc, rng, cross=True) for _ in range(cfg.blocks_per_stage)]
        self.global_blocks = [TransformerBlock(bc, rng) for _ in range(cfg.blocks_per_stage)]
        self.head_norm = make_norm(cfg.norm_kind, d)
        self.head_hidden = Linear(d, 2 * d, rng)
        k, f = cfg.modes, cfg.pred_steps
        self.head_out = Linear(2 * d, k * (4 * f + 1), rng)

    # ----- embedding -----

    def embed_inputs(self, s: Scenario):
        """(agent tokens [N, T, D], lane segment tokens [S, D])."""
        feats = agent_step_features(s)
        tokens = T.add(self.input_proj(Tensor(feats)), self.pos_embed)
        seg_feats, _ = lane_segments(s.lanes)
        if seg_feats.shape[0] == 0:
            lane_tokens = Tensor(np.zeros((0, self.cfg.width)))
        else:
            lane_tokens = self.lane_proj(Tensor(seg_feats))
        return tokens, lane_tokens

    # ----- encoder stages -----

    def stage_agent_agent(self, tokens: Tensor, s: Scenario, rng=None, training=False) -> Tensor:
        n, t, _ = tokens.shape
        pos_t = np.transpose(s.agent_histories, (1, 0, 2))      # [T, N, 2]
        vt = s.agent_valid.T                                     # [T, N]
        diff = pos_t[:, :, None, :] - pos_t[:, None, :, :]
        near = (diff ** 2).sum(-1) <= self.cfg.radius ** 2
        mask = vt[:, :, None] & vt[:, None, :] & near
        mask |= np.eye(n, dtype=bool)[None]
        x = T.transpose(tokens, (1, 0, 2))
        for block in self.social_blocks:
            x = block(x, mask=mask, rng=rng, training=training)
        return T.transpose(x, (1, 0, 2))

    def stage_temporal(self, tokens: Tensor, s: Scenario, rng=None, training=False) -> Tensor:
        n, t, _ = tokens.shape
        causal = np.tril(np.ones((t, t), dtype=bool))
        keys_ok = s.agent_valid[:, None, :] | np.eye(t, dtype=bool)[None]
        mask = causal[None] & keys_ok
        x = tokens
        for block in self.temporal_blocks:
            x = block(x, mask=mask, rng=rng, training=training)
        return x

    def stage_agent_lane(self, summary: Tensor, s: Scenario, lane_tokens: Tensor,
                         origins: np.ndarray, rng=None, training=False) -> Tensor:
        _, mids = lane_segments(s.lanes)
        n_seg = mids.shape[0]
        if n_seg == 0:
            return summary
        n = summary.shape[0]
        rel = mids[None, :, :] - origins[:, None, :]             # [N, S, 2]
        near = (rel ** 2).sum(-1) <= self.cfg.radius ** 2        # [N, S]
        has_key = near.any(axis=1)
        if not has_key.any():
            return summary
        mask = near[:, None, :].copy()
        mask[~has_key, 0, 0] = True  # placeholder key; its update is discarded below
        keys = T.add(T.reshape(lane_tokens, (1, n_seg, -1)), self.rel_proj(Tensor(rel)))
        x = T.reshape(summary, (n, 1, -1))
        for block in self.lane_blocks:
            x = block(x, kv=keys, mask=mask, rng=rng, training=training)
        updated = T.reshape(x, (n, -1))
        ind = has_key.astype(np.float64)[:, None]
        return T.add(T.mul(updated, ind), T.mul(summary, 1.0 - ind))

    def stage_global(self, summary: Tensor, rng=None, training=False) -> Tensor:
        n = summary.shape[0]
        x = T.reshape(summary, (1, n, -1))
        for block in self.global_blocks:
            x = block(x, rng=rng, training=training)
        return T.reshape(x, (n, -1))

    def encode(self, s: Scenario, rng=None, training=False) -> EncodedScene:
        tokens, lane_tokens = self.embed_inputs(s)
        origins = frame_origins(s)
        x = self.stage_agent_agent(tokens, s, rng, training)
        x = self.stage_temporal(x, s, rng, training)
        summary = T.getitem(x, (slice(None), x.shape[1] - 1))    # last-step token
        summary = self.stage_agent_lane(summary, s, lane_tokens, origins, rng, training)
        summary = self.stage_global(summary, rng, training)
        return EncodedScene(embeddings=summary, origins=origins)

    # ----- decoder -----

    def decode(self, enc: EncodedScene, rng=None, training=False) -> list:
        n = enc.embeddings.shape[0]
        k, f = self.cfg.modes, self.cfg.pred_steps
        h = gelu(self.head_hidden(self.head_norm(enc.embeddings)))
        raw = T.reshape(self.head_out(h), (n, k, 4 * f + 1))
        offsets = T.reshape(T.getitem(raw, (slice(None), slice(None), slice(0, 2 * f))), (n, k, f, 2))
        locations = T.add(offsets, enc.origins[:, None, None, :])
        scale_raw = T.reshape(T.getitem(raw, (slice(None), slice(None), slice(2 * f, 4 * f))), (n, k, f, 2))
        scales = T.add(T.softplus(scale_raw), SCALE_FLOOR)
        probs = T.softmax(T.getitem(raw, (slice(None), slice(None), 4 * f)), axis=-1)
        return [
            PredictionSet(
                locations=T.getitem(locations, i),
                scales=T.getitem(scales, i),
                mode_probs=T.getitem(probs, i),
            )
            for i in range(n)
        ]

    def forward(self, s: Scenario, rng=None, training=False) -> list:
        return self.decode(self.encode(s, rng, training), rng, training)

    def predict(self, s: Scenario) -> list:
        """Inference without gradient tracking (no active tape)."""
        return self.forward(s)
