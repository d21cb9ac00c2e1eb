"""Test-set evaluation, the multi-seed protocol and the component-ablation harness."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, TarnnError, UndefinedMetricError
from .metrics import MetricReport, auc, cohens_d, confusion, fbeta, metric_report, paired_t_test
from .model import ModelConfig, TarnnHybrid
from .ontology import EmbeddingMatrix, random_embedding_matrix
from .preprocess import WindowBatch
from .train import TrainConfig, TrainHistory, predict, train_model

__all__ = [
    "AblationResult", "AblationVariant", "DEFAULT_VARIANTS", "MetricReport", "SeedStudy", "auc",
    "cohens_d", "confusion", "evaluate_model", "fbeta", "metric_report", "paired_t_test",
    "run_ablation", "run_multiseed", "run_shuffled_control", "shuffle_labels", "train_and_evaluate",
]

log = logging.getLogger(__name__)

TABLE_METRICS = ("accuracy", "auc", "f2")
STUDY_METRICS = ("accuracy", "auc", "precision", "recall", "f1", "f2")


def evaluate_model(model: TarnnHybrid, test: WindowBatch, threshold: float) -> MetricReport:
    """Confusion counts at ``score >= threshold`` plus AUC on the test windows."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold {threshold} outside [0, 1]")
    if len(test) == 0:
        raise UndefinedMetricError("empty test set")
    return metric_report(predict(model, test), test.targets, threshold)


@dataclass
class RunResult:
    seed: int
    report: MetricReport
    history: TrainHistory
    seconds: float
    model: Optional[TarnnHybrid] = field(default=None, repr=False)


def train_and_evaluate(train: WindowBatch, test: WindowBatch, train_config: TrainConfig,
                       model_config: ModelConfig, matrix: EmbeddingMatrix, keep_model: bool = False) -> RunResult:
    start = time.perf_counter()
    model, history = train_model(train, train_config, model_config, matrix)
    report = evaluate_model(model, test, history.chosen_threshold)
    return RunResult(train_config.seed, report, history, time.perf_counter() - start, model if keep_model else None)


def shuffle_labels(batch: WindowBatch, seed: int) -> WindowBatch:
    """Permute window labels across the batch, destroying any input/label association."""
    perm = np.random.default_rng([seed, 0x5FF1E]).permutation(len(batch))
    return dataclasses.replace(batch, labels=batch.labels[perm], targets=batch.targets[perm])


def run_shuffled_control(train: WindowBatch, test: WindowBatch, train_config: TrainConfig,
                         model_config: ModelConfig, matrix: EmbeddingMatrix, seed: int = 0) -> RunResult:
    """Permutation control: labels shuffled in both splits, so the expected test AUC is 0.5.

    Shuffling only the training labels is not a null: a network that
    learned nothing still scores a random function of informative inputs,
    which can sit far from 0.5 against the true labels.
    """
    return train_and_evaluate(shuffle_labels(train, seed), shuffle_labels(test, seed + 1),
                              dataclasses.replace(train_config, seed=seed), model_config, matrix)


# --------------------------------------------------------------------------
# multi-seed protocol


@dataclass
class SeedStudy:
    seeds: List[int]
    reports: List[MetricReport]
    seconds: List[float] = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.reports], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self.values(metric).mean())

    def std(self, metric: str) -> float:
        """Sample standard deviation across seeds (n - 1 denominator)."""
        v = self.values(metric)
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0

    def to_tsv(self) -> str:
        """Per-seed rows followed by ``mean`` and ``std`` rows."""
        lines = ["seed\t" + "\t".join(STUDY_METRICS)]
        for seed, r in zip(self.seeds, self.reports):
            lines.append(f"{seed}\t" + "\t".join(f"{getattr(r, m):.6f}" for m in STUDY_METRICS))
        lines.append("mean\t" + "\t".join(f"{self.mean(m):.6f}" for m in STUDY_METRICS))
        lines.append("std\t" + "\t".join(f"{self.std(m):.6f}" for m in STUDY_METRICS))
        return "\n".join(lines) + "\n"

    def summary_tsv(self) -> str:
        """One row per metric with ``mean ± std``."""
        lines = ["metric\tmean\tstd\tmean_pm_std"]
        for m in STUDY_METRICS:
            lines.append(f"{m}\t{self.mean(m):.6f}\t{self.std(m):.6f}\t{self.mean(m):.4f} ± {self.std(m):.4f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict:
        return {
            "seeds": list(self.seeds),
            "reports": [r.to_dict() for r in self.reports],
            "seconds": list(self.seconds),
            "mean": {m: self.mean(m) for m in STUDY_METRICS},
            "std": {m: self.std(m) for m in STUDY_METRICS},
        }


def run_multiseed(train: WindowBatch, test: WindowBatch, train_config: TrainConfig, model_config: ModelConfig,
                  matrix: EmbeddingMatrix, seeds: Sequence[int]) -> SeedStudy:
    """Independent train/evaluate per seed on fixed data.

    The seed drives parameter initialization, the validation split and
    batch order.  Failures are re-raised naming the seed.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ConfigError("a seed study needs at least two seeds")
    reports, seconds = [], []
    for i, seed in enumerate(seeds):
        try:
            run = train_and_evaluate(train, test, dataclasses.replace(train_config, seed=seed), model_config, matrix)
        except TarnnError as exc:
            raise type(exc)(f"seed index {i} (seed {seed}): {exc}") from exc
        log.info("seed %d auc %.4f f2 %.4f (%.1fs)", seed, run.report.auc, run.report.f2, run.seconds)
        reports.append(run.report)
        seconds.append(run.seconds)
    return SeedStudy(seeds, reports, seconds)


# --------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationVariant:
    name: str
    use_knowledge_embeddings: bool = True
    use_visit_attention: bool = True
    use_feature_attention: bool = True
    use_time_encoding: bool = True

    @property
    def is_full(self) -> bool:
        return (self.use_knowledge_embeddings and self.use_visit_attention
                and self.use_feature_attention and self.use_time_encoding)

    def model_config(self, base: ModelConfig) -> ModelConfig:
        return dataclasses.replace(base, use_visit_attention=self.use_visit_attention,
                                   use_feature_attention=self.use_feature_attention,
                                   use_time_encoding=self.use_time_encoding)

    def matrix(self, base: EmbeddingMatrix, seed: int) -> EmbeddingMatrix:
        return base if self.use_knowledge_embeddings else random_embedding_matrix(base, seed)


DEFAULT_VARIANTS = (
    AblationVariant("full"),
    AblationVariant("random_code_embeddings", use_knowledge_embeddings=False),
    AblationVariant("uniform_visit_attention", use_visit_attention=False),
    AblationVariant("no_feature_attention", use_feature_attention=False),
    AblationVariant("no_time_encoding", use_time_encoding=False),
)


@dataclass
class AblationResult:
    variants: List[AblationVariant]
    seeds: List[int]
    reports: Dict[Tuple[str, int], MetricReport]
    seconds: Dict[Tuple[str, int], float] = field(default_factory=dict)

    def values(self, variant: str, metric: str = "auc") -> np.ndarray:
        return np.array([getattr(self.reports[(variant, s)], metric) for s in self.seeds])

    def to_tsv(self) -> str:
        """Long format: one row per (variant, seed)."""
        lines = ["variant\tseed\t" + "\t".join(STUDY_METRICS)]
        for v in self.variants:
            for s in self.seeds:
                r = self.reports[(v.name, s)]
                lines.append(f"{v.name}\t{s}\t" + "\t".join(f"{getattr(r, m):.6f}" for m in STUDY_METRICS))
        return "\n".join(lines) + "\n"

    def summary_tsv(self) -> str:
        """One row per variant with seed-mean Accuracy, AUC and F2."""
        lines = ["variant\t" + "\t".join(TABLE_METRICS)]
        for v in self.variants:
            lines.append(f"{v.name}\t" + "\t".join(f"{self.values(v.name, m).mean():.6f}" for m in TABLE_METRICS))
        return "\n".join(lines) + "\n"

    def wins(self, reference: str = "full", metric: str = "auc") -> Dict[str, int]:
        """Seeds on which ``reference`` scores at least as high as each other variant."""
        ref = self.values(reference, metric)
        return {v.name: int(np.sum(ref >= self.values(v.name, metric)))
                for v in self.variants if v.name != reference}

    def to_dict(self) -> Dict:
        return {
            "variants": [dataclasses.asdict(v) for v in self.variants],
            "seeds": list(self.seeds),
            "reports": [{"variant": k[0], "seed": k[1], **r.to_dict()} for k, r in sorted(self.reports.items())],
        }


def run_ablation(train: WindowBatch, test: WindowBatch, train_config: TrainConfig, model_config: ModelConfig,
                 matrix: EmbeddingMatrix, variants: Sequence[AblationVariant] = DEFAULT_VARIANTS,
                 seeds: Sequence[int] = (0,)) -> AblationResult:
    """Train every variant on every seed with otherwise identical settings.

    A shape-matched random matrix keeps the row layout, so the windowed
    data is shared by all variants.
    """
    variants = list(variants)
    if not variants:
        raise ConfigError("no ablation variants given")
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate variant names: {names}")
    seeds = [int(s) for s in seeds]
    reports, seconds = {}, {}
    for seed in seeds:
        cfg = dataclasses.replace(train_config, seed=seed)
        for v in variants:
            run = train_and_evaluate(train, test, cfg, v.model_config(model_config), v.matrix(matrix, seed))
            log.info("%s seed %d auc %.4f (%.1fs)", v.name, seed, run.report.auc, run.seconds)
            reports[(v.name, seed)] = run.report
            seconds[(v.name, seed)] = run.seconds
    return AblationResult(variants, seeds, reports, seconds)
