#!/usr/bin/env python3
"""DynamicTanh next to LayerNorm: same interface, no reductions, less work.

DynamicTanh squashes each element through gamma * tanh(alpha * x) + beta.
There is no mean or variance to compute, which is where its latency edge
over LayerNorm comes from; this script measures both on the same shape.
"""

import numpy as np

from dyttp.evaluation import norm_layer_latency
from dyttp.layers import DynamicTanh, LayerNorm
from dyttp.tensor import Rng, Tensor

rng = Rng(1)
x = Tensor(rng.normal((2, 4, 8), std=3.0))

dyt = DynamicTanh(8)
ln = LayerNorm(8)

print("input row        :", np.round(x.data[0, 0], 3))
print("DynamicTanh row  :", np.round(dyt(x).data[0, 0], 3))
print("LayerNorm row    :", np.round(ln(x).data[0, 0], 3))

print("\nboundedness: |DyT(x)| <= |gamma| + |beta| even at x = 1e6")
big = Tensor(np.full((1, 8), 1e6))
print("DyT(1e6) =", np.round(dyt(big).data[0], 3))

print("\nDyT(0) equals beta exactly:")
dyt.beta.data = rng.normal((8,))
zero = Tensor(np.zeros((1, 8)))
print("beta     =", np.round(dyt.beta.data, 3))
print("DyT(0)   =", np.round(dyt(zero).data[0], 3))

print("\nper-layer forward latency on shape (32, 50, 64), 1000 iterations:")
dyt_ms = norm_layer_latency("dyt", (32, 50, 64), iterations=1000)
ln_ms = norm_layer_latency("layernorm", (32, 50, 64), iterations=1000)
print(f"  DynamicTanh: {dyt_ms:.3f} ms")
print(f"  LayerNorm  : {ln_ms:.3f} ms")
print(f"  DyT / LN   : {dyt_ms / ln_ms:.2f}x")
