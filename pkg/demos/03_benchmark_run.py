"""
The maze benchmark end to end
=============================

Runs the same stages as ``trajstitch run-all`` followed by a ratio sweep,
using the small smoke configuration so it finishes in a few minutes. Use
``configs/maze.json`` for the full benchmark.
"""

import json
import sys
import tempfile
from pathlib import Path

from trajstitch.cli import cmd_run_all, cmd_sweep
from trajstitch.config import RunConfig

root = Path(__file__).resolve().parents[1]
path = Path(sys.argv[1]) if len(sys.argv) > 1 else root / "configs" / "smoke.json"
out = tempfile.mkdtemp(prefix="trajstitch-")
config = RunConfig.load(path).with_overrides([f"out={out}"])

###############################################################################
# Generate, train, stitch, evaluate
# ---------------------------------

report = cmd_run_all(config)

###############################################################################
# Behavior cloning needs demonstrations that reach the goal from the start.
# Raw data has none, so the raw arm should fail and the augmented arm should
# mostly succeed.

for name, arm in report["arms"].items():
    print(name, arm["ratio"], "success per seed", arm["success"])

###############################################################################
# Mixing ratio
# ------------
# Training only on stitched data (0:1) throws away the real family-B
# demonstrations.

rows = cmd_sweep(config, "ratio")
print(json.dumps({r["ratio"]: r["success_mean"] for r in rows}))
print("outputs in", out)
