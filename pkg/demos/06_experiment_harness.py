"""
Configs, artifacts and sweeps
=============================

The same calls the command line makes, on a shortened horizon.
"""

import json
import tempfile
from pathlib import Path

from kdpdfl.experiment import config_from_dict, run_experiment, summarize, sweep

out = Path(tempfile.mkdtemp(prefix="kdpdfl-demo-"))
base = {"T": 200, "n_repeats": 2}

for method in ("kd_pdfl", "fedavg", "local_only"):
    cfg = config_from_dict({**base, "method": method})
    run_experiment(cfg, out / "compare" / method)

summary = summarize(out / "compare")
print((out / "compare" / "summary.txt").read_text())

print("files of one repeat:", sorted(p.name for p in (out / "compare" / "kd_pdfl" / "repeat_0").iterdir()))

# the effective config reproduces the run on its own
echo = json.loads((out / "compare" / "kd_pdfl" / "effective_config.json").read_text())
print("echoed keys:", ", ".join(sorted(echo)[:8]), "...")

sweep(config_from_dict({**base, "n_repeats": 1}), "mu_grid", ["0:0", "10:0.1"], out / "mu")
print("heatmaps:", sorted(p.name for p in (out / "mu" / "heatmaps").iterdir()))
print("artifacts in", out)
