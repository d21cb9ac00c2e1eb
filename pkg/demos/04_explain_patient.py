"""
Explaining one patient's risk
=============================

The visit attention weights say which visits mattered.  Spreading each
visit's weight over its codes, in proportion to the code embedding norms,
gives per-disease contribution trajectories.  From those we read off
severity, chronicity and whether a condition is trending up or down.
"""

# %%
import tempfile
from pathlib import Path

import torch

from tarnn_hybrid.interpret import AttributionReport, generate_report, plot_report
from tarnn_hybrid.model import forward
from tarnn_hybrid.pipeline import PipelineConfig, prepare_synthetic
from tarnn_hybrid.train import train_model

torch.set_num_threads(1)

config = PipelineConfig.from_dict({
    "cohort": {"n_patients": 400},
    "embedding": {"text_dim": 32, "graph": {"d_g": 32, "epochs": 20}},
    "train": {"max_epochs": 8, "patience": 3},
})
prepared = prepare_synthetic(config)
model, history = train_model(prepared.train, config.train, prepared.model_config, prepared.matrix)

# %%
# Pick the test window the model is most worried about.
test = prepared.test_samples
risks = forward(model, prepared.test).risk.detach().numpy()
sample = test[int(risks.argmax())]
output = forward(model, sample).sample(0)
print(f"patient {sample.patient_id}, window starting at visit {sample.window_start}")
for t, codes in enumerate(sample.codes):
    print(f"  visit {t}: alpha {output['alpha'][t]:.3f}  codes {list(codes)}")

# %%
report = generate_report(sample, output, prepared.matrix, {"threshold": history.chosen_threshold})
print(f"risk {report.risk:.3f} -> {report.risk_category}; top disease {report.top_disease}")
print(f"{'code':>8} {'norm':>6} {'severity':>9} {'chronic':>7} {'trend':>10} t_peak")
for d in report.diseases:
    print(f"{d.code:>8} {d.normalized:6.3f} {d.severity:>9} {str(d.chronic):>7} {d.trend:>10} {d.t_peak}")

# %%
# Reports are plain JSON checked against a schema, and they round-trip.
assert AttributionReport.from_json(report.to_json()) == report

# %%
# Three figures: the attention timeline, the top diseases and their trajectories.
with tempfile.TemporaryDirectory() as tmp:
    for path in plot_report(report, Path(tmp)):
        print("wrote", path.name, path.stat().st_size, "bytes")
