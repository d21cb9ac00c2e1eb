"""End-to-end wiring shared by the command line and the demos.

A :class:`PipelineConfig` groups every stage's settings and round-trips
through JSON; :func:`prepare` turns an ontology and a cohort into the
embedding matrix and windowed train/test batches.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .cohort import CohortTable, SyntheticConfig, generate_synthetic_cohort, split_patients
from .errors import ConfigError
from .ontology import (EmbeddingMatrix, GraphEmbedConfig, HashingTextEmbedder, OntologyBundle, build_from_bundle,
                       generate_synthetic_ontology)
from .preprocess import NormStats, PreprocessConfig, WindowBatch, WindowSample, assemble_dataset, fit_preprocessing, stack_samples
from .model import ModelConfig
from .train import TrainConfig

# ModelConfig fields that follow from the data rather than from the user.
_DERIVED_MODEL_FIELDS = ("d", "t_s", "k_max", "demo_dim")


@dataclass
class OntologyConfig:
    n_systems: int = 10
    n_categories: int = 6
    leaves_per_category: int = 6
    shared_code_fraction: float = 0.05
    assoc_fraction: float = 0.5
    seed: int = 0


@dataclass
class EmbeddingConfig:
    text_dim: int = 64
    text_seed: int = 0
    graph: GraphEmbedConfig = field(default_factory=GraphEmbedConfig)


@dataclass
class PipelineConfig:
    ontology: OntologyConfig = field(default_factory=OntologyConfig)
    cohort: SyntheticConfig = field(default_factory=SyntheticConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: Dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        bad = set(self.model) & set(_DERIVED_MODEL_FIELDS)
        if bad:
            raise ConfigError(f"model settings {sorted(bad)} are derived from the data and cannot be set")
        unknown = set(self.model) - set(ModelConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")

    def to_dict(self) -> Dict:
        out = dataclasses.asdict(self)
        out["cohort"] = self.cohort.as_dict()
        return json.loads(json.dumps(out))

    @classmethod
    def from_dict(cls, data: Dict) -> "PipelineConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        emb = dict(data.get("embedding", {}))
        emb_graph = _build(GraphEmbedConfig, emb.pop("graph", {}), "embedding.graph")
        return cls(
            ontology=_build(OntologyConfig, data.get("ontology", {}), "ontology"),
            cohort=_build(SyntheticConfig, data.get("cohort", {}), "cohort"),
            embedding=dataclasses.replace(_build(EmbeddingConfig, emb, "embedding"), graph=emb_graph),
            preprocess=_build(PreprocessConfig, data.get("preprocess", {}), "preprocess"),
            model=dict(data.get("model", {})),
            train=_build(TrainConfig, data.get("train", {}), "train"),
        )

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def with_overrides(self, overrides: Dict[str, object]) -> "PipelineConfig":
        """Apply dotted-path overrides such as ``{"train.max_epochs": 5}``."""
        data = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            node = data
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[0] != "model" and parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return PipelineConfig.from_dict(data)


def _build(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {section!r} settings: {exc}") from None


def make_ontology(config: PipelineConfig) -> OntologyBundle:
    return generate_synthetic_ontology(**dataclasses.asdict(config.ontology))


def make_cohort(config: PipelineConfig, bundle: OntologyBundle) -> CohortTable:
    return generate_synthetic_cohort(config.cohort, bundle)


def make_matrix(config: PipelineConfig, cohort: CohortTable, bundle: OntologyBundle) -> EmbeddingMatrix:
    embedder = HashingTextEmbedder(dim=config.embedding.text_dim, seed=config.embedding.text_seed)
    return build_from_bundle(cohort.code_vocabulary, bundle, embedder, config.embedding.graph)


@dataclass
class Prepared:
    matrix: EmbeddingMatrix
    stats: NormStats
    train_cohort: CohortTable
    test_cohort: CohortTable
    train_samples: List[WindowSample]
    test_samples: List[WindowSample]
    model_config: ModelConfig

    @property
    def train(self) -> WindowBatch:
        return stack_samples(self.train_samples)

    @property
    def test(self) -> WindowBatch:
        return stack_samples(self.test_samples)


def model_config_for(config: PipelineConfig, matrix: EmbeddingMatrix, stats: NormStats) -> ModelConfig:
    return ModelConfig(d=matrix.dim, t_s=config.preprocess.t_s, k_max=config.preprocess.k_max,
                       demo_dim=stats.dim, **config.model)


def prepare(config: PipelineConfig, cohort: CohortTable, matrix: EmbeddingMatrix,
            stats: Optional[NormStats] = None) -> Prepared:
    """Split at the patient level, fit preprocessing on train only and window both halves."""
    pc = config.preprocess
    train, test = split_patients(cohort, pc.test_fraction, pc.seed)
    stats = stats or fit_preprocessing(train, pc)
    train_samples = assemble_dataset(train, pc, stats, matrix)
    test_samples = assemble_dataset(test, pc, stats, matrix)
    if not train_samples or not test_samples:
        raise ConfigError("split leaves no windows in train or test; lower t_s + f_ts or add patients")
    return Prepared(matrix, stats, train, test, train_samples, test_samples, model_config_for(config, matrix, stats))


def prepare_synthetic(config: PipelineConfig) -> Prepared:
    bundle = make_ontology(config)
    cohort = make_cohort(config, bundle)
    return prepare(config, cohort, make_matrix(config, cohort, bundle))
