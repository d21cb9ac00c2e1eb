"""
The ``tarnn`` command line
==========================

Each subcommand is one pipeline stage.  Stages read earlier outputs from a
shared run directory and write ``<run_dir>/<stage>/`` with a manifest of
inputs, digests and timings.  This script drives the same commands you would
type in a shell, on a deliberately tiny configuration.
"""

# %%
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

TINY = {
    "ontology": {"n_systems": 3, "n_categories": 3, "leaves_per_category": 4},
    "cohort": {"n_patients": 150},
    "embedding": {"text_dim": 8, "graph": {"d_g": 8, "epochs": 3}},
    "preprocess": {"t_s": 3, "k_max": 8},
    "model": {"h": 8, "heads": 2},
    "train": {"max_epochs": 4, "patience": 2},
}


def tarnn(*args):
    """Equivalent to typing ``tarnn ARGS`` in a shell."""
    cmd = [sys.executable, "-m", "tarnn_hybrid.cli", *args]
    done = subprocess.run(cmd, capture_output=True, text=True)
    print("$ tarnn", " ".join(args), "->", done.returncode)
    if done.stderr.strip():
        print("  stderr:", done.stderr.strip().splitlines()[-1])
    return done.returncode


run = Path(tempfile.mkdtemp(prefix="tarnn_"))
(run / "config.json").write_text(json.dumps(TINY))
common = ["--run-dir", str(run), "--config", str(run / "config.json")]

# %%
# The full pipeline, one stage at a time.  A config this small only checks
# the plumbing, so expect near-chance scores.
for stage in ("gen-ontology", "gen-cohort", "build-embeddings", "preprocess", "train", "evaluate"):
    tarnn(stage, *common)
print((run / "evaluate" / "metrics.tsv").read_text())

# %%
# Every stage leaves a manifest behind.
manifest = json.loads((run / "train" / "manifest.json").read_text())
print(sorted(manifest))
print("artifacts:", sorted(manifest["artifacts"]))

# %%
# Flags override the config file; existing outputs need --overwrite.
tarnn("train", *common, "--set", "train.max_epochs=2")
tarnn("train", *common, "--set", "train.max_epochs=2", "--overwrite")

# %%
# Failures print one JSON line on stderr and exit with a category code:
# 2 usage, 3 config, 4 data, 5 numeric or training, 1 anything else.
tarnn("evaluate", *common, "--checkpoint", str(run / "missing.bin"))

# %%
# Explain the latest window of one test patient.
pid = str(np.load(run / "preprocess" / "test.npz")["patient_ids"][0])
tarnn("explain", *common, "--patient-id", pid, "--plots")
report = json.loads(next((run / "explain").glob("report_*.json")).read_text())
print(report["risk_category"], [d["code"] for d in report["diseases"]][:3])

# %%
# Seed studies and ablations write per-seed and summary tables.
tarnn("multiseed", *common, "--seeds", "3")
print((run / "multiseed" / "summary.tsv").read_text())
tarnn("ablate", *common, "--seeds", "0,1")
print((run / "ablate" / "summary.tsv").read_text())
print("run directory:", run)
