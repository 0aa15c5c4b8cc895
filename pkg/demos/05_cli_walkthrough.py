#!/usr/bin/env python3
"""Drive the command line end to end inside a temporary directory.

gen-data -> train -> evaluate -> bench -> ablate, all with tiny settings so
the whole tour takes a couple of minutes. Each command is also available as
`dyttp <subcommand>` once the package is installed.
"""

import json
import tempfile
from pathlib import Path

from dyttp.cli import main

tmp = Path(tempfile.mkdtemp(prefix="dyttp-demo-"))
data = tmp / "data.bin"
run = tmp / "run"

small = ["--width", "16", "--heads", "2", "--modes", "2", "--dropout", "0.05",
         "--cycles", "2", "--epochs-per-cycle", "2", "--batch-size", "8"]

steps = [
    ["gen-data", "--count", "120", "--seed", "3", "--out", str(data)],
    ["train", "--data", str(data), "--out", str(run), "--seed", "3", *small],
    ["evaluate", "--data", str(data),
     "--checkpoints", str(run / "snapshot_0.ckpt"), str(run / "snapshot_1.ckpt"),
     "--ensemble", "prediction_average", "--out-json", str(tmp / "metrics.json")],
    ["bench", "--data", str(data), "--checkpoints", str(run / "snapshot_1.ckpt"),
     "--iterations", "200", "--warmup", "20", "--scenarios", "4",
     "--out-json", str(tmp / "latency.json")],
    ["ablate", "--data", str(data), "--out-dir", str(tmp / "ablation"),
     "--seed", "3", *small, "--bench-iterations", "100", "--bench-warmup", "10"],
]

for argv in steps:
    print(f"\n$ dyttp {' '.join(argv)}")
    code = main(argv)
    if code != 0:
        raise SystemExit(f"command failed with exit code {code}")

print("\nartifacts under", tmp)
for p in sorted(tmp.rglob("*")):
    if p.is_file():
        print(" ", p.relative_to(tmp))

metrics = json.loads((tmp / "metrics.json").read_text())
print("\nensemble metrics:", metrics["metrics"])
