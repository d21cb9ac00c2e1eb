"""
Training the hybrid model and scoring it
========================================

This walks through one full run on a small synthetic cohort: windowing,
training with class-weighted cross-entropy and early stopping, choosing the
decision threshold on validation F2, then scoring the held-out patients.
"""

# %%
import torch

from tarnn_hybrid.evaluate import evaluate_model
from tarnn_hybrid.metrics import auc
from tarnn_hybrid.model import build_model, forward
from tarnn_hybrid.pipeline import PipelineConfig, prepare_synthetic
from tarnn_hybrid.train import predict, train_model

torch.set_num_threads(1)

config = PipelineConfig.from_dict({
    "cohort": {"n_patients": 600},
    "embedding": {"text_dim": 32, "graph": {"d_g": 32, "epochs": 20}},
    "train": {"max_epochs": 15, "patience": 4},
})
prepared = prepare_synthetic(config)
train, test = prepared.train, prepared.test
print(f"{len(train)} training windows, {len(test)} test windows, positive rate {train.targets.mean():.3f}")
print("model config:", prepared.model_config)

# %%
# Training keeps the weights from the epoch with the lowest validation loss.
model, history = train_model(train, config.train, prepared.model_config, prepared.matrix)
print(history.to_tsv())
print(f"best epoch {history.best_epoch}, threshold {history.chosen_threshold:.3f}")

# %%
# Held-out metrics at the validation-chosen threshold.
report = evaluate_model(model, test, history.chosen_threshold)
for name in ("accuracy", "auc", "precision", "recall", "f1", "f2"):
    print(f"{name:>9}: {getattr(report, name):.4f}")

# %%
# The attention weights come out of the same forward pass as the risk.
out = forward(model, test.take(range(4)))
print("risk", out.risk.detach().numpy().round(3))
print("alpha rows sum to one:", out.alpha.sum(dim=1).detach().numpy().round(6))

# %%
# The same architecture before training, as a reference point.
untrained = build_model(prepared.model_config, prepared.matrix, seed=0)
print(f"untrained test AUC {auc(predict(untrained, test), test.targets):.4f}")
