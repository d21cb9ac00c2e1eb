"""Windowed, model-ready samples from a cohort.

Training-split statistics (demographic z-scores, category inventory, the
global elapsed-time normalizer) are fitted once and applied unchanged to
any other split.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .cohort import NUMERIC, CohortTable, Demographics, VisitRecord
from .errors import ConfigError, DataError, FormatError


@dataclass
class PreprocessConfig:
    t_s: int = 4
    f_ts: int = 1
    k_max: int = 32
    epsilon: float = 1e-8
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.t_s < 1 or self.f_ts < 1 or self.k_max < 1:
            raise ConfigError("t_s, f_ts and k_max must all be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")

    @classmethod
    def from_file(cls, path) -> "PreprocessConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown preprocess keys: {sorted(unknown)}")
        return cls(**data)


def reindex_visits(visits: Sequence[VisitRecord]) -> List[int]:
    """Six-month reference grid: ``VISCODE_t = 6 t``. Real dates stay on the records."""
    if not visits:
        raise DataError("cannot reindex an empty visit list")
    return [6 * t for t in range(len(visits))]


def filter_patients(cohort: CohortTable, t_s: int, f_ts: int) -> CohortTable:
    """Keep patients with at least ``t_s + f_ts`` visits."""
    if t_s < 1 or f_ts < 1:
        raise ConfigError("t_s and f_ts must be >= 1")
    keep = [pid for pid, p in cohort.patients.items() if len(p.visits) >= t_s + f_ts]
    return cohort.subset(keep)


def max_gap(cohort: CohortTable) -> float:
    """Largest inter-visit gap (days) over every patient in ``cohort``."""
    best = 0
    for p in cohort.patients.values():
        dates = [v.visit_date for v in p.visits]
        if len(dates) > 1:
            best = max(best, int(np.max(np.diff(dates))))
    if best <= 0:
        raise DataError("no inter-visit gaps to fit the elapsed-time normalizer")
    return float(best)


def compute_elapsed(visit_dates: Sequence[int], delta_max: float) -> np.ndarray:
    """``e_0 = 0`` and ``e_t = (date_t - date_{t-1}) / delta_max`` clipped to [0, 1]."""
    if delta_max <= 0:
        raise ConfigError("delta_max must be positive")
    dates = np.asarray(visit_dates, dtype=np.int64)
    gaps = np.diff(dates)
    if np.any(gaps <= 0):
        raise DataError(f"visit dates must be strictly increasing: {dates.tolist()}")
    return np.clip(np.concatenate([[0.0], gaps / float(delta_max)]), 0.0, 1.0)


@dataclass
class NormStats:
    """Training-split demographic statistics."""

    mean: Dict[str, float]
    std: Dict[str, float]
    categories: Dict[str, List[str]]
    epsilon: float = 1e-8
    delta_max: Optional[float] = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if any(s < 0 for s in self.std.values()):
            raise ConfigError("standard deviations must be non-negative")

    @property
    def numeric_fields(self) -> List[str]:
        return sorted(self.mean)

    @property
    def categorical_fields(self) -> List[str]:
        return sorted(self.categories)

    @property
    def dim(self) -> int:
        return len(self.mean) + sum(len(v) for v in self.categories.values())

    def feature_names(self) -> List[str]:
        names = [f"{f}={c}" for f in self.categorical_fields for c in self.categories[f]]
        return names + self.numeric_fields

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "NormStats":
        return cls(**data)


def fit_normalizer(demographics: Iterable[Demographics], schema: Dict[str, str], epsilon: float = 1e-8) -> NormStats:
    """Mean/std (population) per numeric field and sorted category inventory per categorical field."""
    demographics = list(demographics)
    if not demographics:
        raise DataError("need at least one training patient to fit the normalizer")
    mean, std, categories = {}, {}, {}
    for name, kind in sorted(schema.items()):
        if kind == NUMERIC:
            values = np.array([d.numeric[name] for d in demographics if name in d.numeric], dtype=float)
            if values.size and not np.all(np.isfinite(values)):
                raise DataError(f"non-finite values in numeric field {name!r}")
            mean[name] = float(values.mean()) if values.size else 0.0
            std[name] = float(values.std()) if values.size else 0.0
        else:
            categories[name] = sorted({d.categorical[name] for d in demographics if name in d.categorical})
    return NormStats(mean, std, categories, epsilon)


def apply_normalizer(stats: NormStats, name: str, value: float) -> float:
    """z-score one numeric value with training statistics."""
    if not math.isfinite(value):
        raise DataError(f"non-finite value for {name!r}")
    return (value - stats.mean[name]) / (stats.std[name] + stats.epsilon)


def demographic_vector(stats: NormStats, demo: Demographics) -> np.ndarray:
    """One-hot categoricals (unseen category -> zeros) followed by z-scored numerics (missing -> 0)."""
    parts = []
    for name in stats.categorical_fields:
        block = np.zeros(len(stats.categories[name]))
        value = demo.categorical.get(name)
        if value in stats.categories[name]:
            block[stats.categories[name].index(value)] = 1.0
        parts.append(block)
    nums = [apply_normalizer(stats, n, demo.numeric[n]) if n in demo.numeric else 0.0 for n in stats.numeric_fields]
    parts.append(np.array(nums, dtype=float))
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class WindowSample:
    """One supervised window: ``t_s`` visits in, ``f_ts`` future labels out."""

    code_ids: np.ndarray
    elapsed: np.ndarray
    demo_vec: np.ndarray
    labels: np.ndarray
    patient_id: str
    window_start: int
    codes: List[List[str]] = field(default_factory=list)

    @property
    def target(self) -> int:
        """Single window label: any event over the horizon."""
        return int(self.labels.max())


def make_windows(visits: Sequence[VisitRecord], t_s: int, f_ts: int):
    """Yield ``(k, input_visits, label_visits)`` for every window start ``k``."""
    for k in range(len(visits) - t_s - f_ts + 1):
        yield k, visits[k : k + t_s], visits[k + t_s : k + t_s + f_ts]


def _encode_codes(codes: Sequence[str], k_max: int, lookup) -> np.ndarray:
    row = np.zeros(k_max, dtype=np.int64)
    ids = [lookup(c) for c in list(codes)[:k_max]]
    row[: len(ids)] = ids
    return row


def assemble_dataset(cohort: CohortTable, config: PreprocessConfig, stats: NormStats, code_index) -> List[WindowSample]:
    """Window every eligible patient.

    ``code_index`` is anything mapping a raw code to an embedding row
    (an :class:`~tarnn_hybrid.ontology.EmbeddingMatrix` works via its
    ``lookup`` method).  ``stats.delta_max`` must already be fitted.
    """
    if stats.delta_max is None:
        raise ConfigError("NormStats.delta_max is not fitted")
    lookup = code_index.lookup if hasattr(code_index, "lookup") else code_index
    samples = []
    eligible = filter_patients(cohort, config.t_s, config.f_ts)
    for pid in eligible.patient_ids:
        patient = eligible.patients[pid]
        demo = demographic_vector(stats, patient.demographics)
        for k, inputs, future in make_windows(patient.visits, config.t_s, config.f_ts):
            samples.append(WindowSample(
                code_ids=np.stack([_encode_codes(v.codes, config.k_max, lookup) for v in inputs]),
                elapsed=compute_elapsed([v.visit_date for v in inputs], stats.delta_max),
                demo_vec=demo.copy(),
                labels=np.array([v.mortality_label for v in future], dtype=np.int64),
                patient_id=pid,
                window_start=k,
                codes=[list(v.codes[: config.k_max]) for v in inputs],
            ))
    return samples


def fit_preprocessing(train: CohortTable, config: PreprocessConfig) -> NormStats:
    """Fit demographic statistics and the elapsed-time normalizer on the training split only."""
    eligible = filter_patients(train, config.t_s, config.f_ts)
    if not len(eligible):
        raise DataError(f"no training patient has >= {config.t_s + config.f_ts} visits")
    stats = fit_normalizer((p.demographics for p in eligible.patients.values()), train.schema, config.epsilon)
    stats.delta_max = max_gap(eligible)
    return stats


@dataclass
class WindowBatch:
    """Column-stacked samples, the array form consumed by the model."""

    code_ids: np.ndarray
    elapsed: np.ndarray
    demo: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    patient_ids: List[str]
    window_starts: List[int]

    def __len__(self):
        return len(self.targets)

    def take(self, idx) -> "WindowBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowBatch(self.code_ids[idx], self.elapsed[idx], self.demo[idx], self.labels[idx],
                           self.targets[idx], [self.patient_ids[i] for i in idx],
                           [self.window_starts[i] for i in idx])


def stack_samples(samples: Sequence[WindowSample]) -> WindowBatch:
    if not samples:
        raise DataError("no samples to stack")
    return WindowBatch(
        code_ids=np.stack([s.code_ids for s in samples]),
        elapsed=np.stack([s.elapsed for s in samples]).astype(np.float64),
        demo=np.stack([s.demo_vec for s in samples]).astype(np.float64),
        labels=np.stack([s.labels for s in samples]),
        targets=np.array([s.target for s in samples], dtype=np.int64),
        patient_ids=[s.patient_id for s in samples],
        window_starts=[s.window_start for s in samples],
    )


def dataset_manifest(samples: Sequence[WindowSample]) -> Dict:
    targets = np.array([s.target for s in samples]) if samples else np.zeros(0)
    return {
        "n_samples": int(len(samples)),
        "n_patients": len({s.patient_id for s in samples}),
        "label_prevalence": float(targets.mean()) if len(targets) else 0.0,
    }


def save_samples(samples: Sequence[WindowSample], path) -> Path:
    """Store windows as an ``.npz`` archive; raw visit codes ride along as JSON text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            code_ids=np.stack([s.code_ids for s in samples]),
            elapsed=np.stack([s.elapsed for s in samples]),
            demo=np.stack([s.demo_vec for s in samples]),
            labels=np.stack([s.labels for s in samples]),
            patient_ids=np.array([s.patient_id for s in samples]),
            window_starts=np.array([s.window_start for s in samples], dtype=np.int64),
            codes=np.array(json.dumps([s.codes for s in samples])),
        )
    return path


def load_samples(path) -> List[WindowSample]:
    try:
        with np.load(path, allow_pickle=False) as z:
            codes = json.loads(str(z["codes"]))
            return [
                WindowSample(z["code_ids"][i], z["elapsed"][i], z["demo"][i], z["labels"][i],
                             str(z["patient_ids"][i]), int(z["window_starts"][i]), codes[i])
                for i in range(len(z["window_starts"]))
            ]
    except FileNotFoundError:
        raise ConfigError(f"sample file not found: {path}") from None
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"{path} is not a sample archive: {exc}") from None
