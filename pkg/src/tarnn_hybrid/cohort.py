"""Longitudinal cohorts: synthetic generation, file IO and patient-level splits."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .ontology import IS_A, OntologyBundle, dotted_icd

CATEGORICAL = "categorical"
NUMERIC = "numeric"


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    visit_date: int
    codes: Tuple[str, ...]
    mortality_label: int

    def __post_init__(self):
        if self.mortality_label not in (0, 1):
            raise DataError(f"patient {self.patient_id}: label must be 0 or 1, got {self.mortality_label!r}")
        object.__setattr__(self, "codes", tuple(self.codes))
        object.__setattr__(self, "visit_date", int(self.visit_date))


@dataclass
class Demographics:
    categorical: Dict[str, str] = field(default_factory=dict)
    numeric: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.numeric.items():
            if not math.isfinite(value):
                raise DataError(f"numeric demographic {name!r} is not finite")


@dataclass
class Patient:
    demographics: Demographics
    visits: List[VisitRecord]


@dataclass
class CohortTable:
    """Per-patient visit sequences plus the declared demographic schema.

    ``metadata`` holds generator ground truth (severe codes, hazard
    probabilities); it is never consumed by the model.
    """

    patients: Dict[str, Patient]
    schema: Dict[str, str]
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        for kind in self.schema.values():
            if kind not in (CATEGORICAL, NUMERIC):
                raise ConfigError(f"unknown demographic field kind {kind!r}")
        for pid, patient in self.patients.items():
            dates = [v.visit_date for v in patient.visits]
            if any(b <= a for a, b in zip(dates, dates[1:])):
                raise DataError(f"patient {pid}: visit dates are not strictly increasing")
            extra = (set(patient.demographics.categorical) | set(patient.demographics.numeric)) - set(self.schema)
            if extra:
                raise DataError(f"patient {pid}: demographic fields {sorted(extra)} not in schema")

    @property
    def code_vocabulary(self) -> List[str]:
        return sorted({c for p in self.patients.values() for v in p.visits for c in v.codes})

    @property
    def patient_ids(self) -> List[str]:
        return sorted(self.patients)

    def __len__(self):
        return len(self.patients)

    def subset(self, ids) -> "CohortTable":
        return CohortTable({pid: self.patients[pid] for pid in sorted(ids)}, dict(self.schema), dict(self.metadata))

    def all_codes(self):
        for p in self.patients.values():
            for v in p.visits:
                yield from v.codes

    def __eq__(self, other):
        if not isinstance(other, CohortTable):
            return NotImplemented
        return self.patients == other.patients and self.schema == other.schema

    # -- serialization -----------------------------------------------------

    def visits_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["patient_id", "visit_date", "codes", "mortality_label"])
        for pid in self.patient_ids:
            for v in self.patients[pid].visits:
                writer.writerow([pid, v.visit_date, ";".join(v.codes), v.mortality_label])
        return buf.getvalue()

    def demographics_text(self) -> str:
        buf = io.StringIO()
        buf.write("#schema " + ";".join(f"{k}={self.schema[k]}" for k in sorted(self.schema)) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["patient_id", "fields"])
        for pid in self.patient_ids:
            demo = self.patients[pid].demographics
            pairs = [f"{k}={demo.categorical[k]}" for k in sorted(demo.categorical)]
            pairs += [f"{k}={demo.numeric[k]!r}" for k in sorted(demo.numeric)]
            writer.writerow([pid, ";".join(sorted(pairs))])
        return buf.getvalue()

    def write(self, path) -> Dict[str, Path]:
        """Write ``path`` (visits), ``<stem>.demographics.csv`` and, if present, ``<stem>.meta.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        paths = {"visits": path, "demographics": _demographics_path(path)}
        path.write_text(self.visits_text(), encoding="utf-8")
        paths["demographics"].write_text(self.demographics_text(), encoding="utf-8")
        if self.metadata:
            paths["metadata"] = _metadata_path(path)
            paths["metadata"].write_text(json.dumps(self.metadata, sort_keys=True) + "\n", encoding="utf-8")
        return paths


def _demographics_path(path: Path) -> Path:
    return path.with_name(path.stem + ".demographics.csv")


def _metadata_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def _parse_int(text, what, row):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not an integer", row=row) from None


def load_cohort(path, demographics_path=None) -> CohortTable:
    """Read a cohort visits file (and its demographics file) into a :class:`CohortTable`.

    Visits are sorted by date per patient; duplicated (patient, date) pairs
    raise :class:`DataError`, malformed rows raise :class:`ParseError`.
    """
    path = Path(path)
    demographics_path = Path(demographics_path) if demographics_path else _demographics_path(path)
    visits: Dict[str, List[VisitRecord]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "patient_id":
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 columns, got {len(row)}", row=lineno)
            pid, date, codes, label = (c.strip() for c in row)
            if not pid:
                raise ParseError("empty patient_id", row=lineno)
            code_list = tuple(c.strip() for c in codes.split(";") if c.strip())
            label = _parse_int(label, "mortality_label", lineno)
            if label not in (0, 1):
                raise ParseError(f"mortality_label must be 0 or 1, got {label}", row=lineno)
            visits.setdefault(pid, []).append(
                VisitRecord(pid, _parse_int(date, "visit_date", lineno), code_list, label))

    schema: Dict[str, str] = {}
    demographics: Dict[str, Demographics] = {}
    if demographics_path.exists():
        schema, demographics = _load_demographics(demographics_path)

    patients = {}
    for pid, vs in visits.items():
        vs.sort(key=lambda v: v.visit_date)
        for a, b in zip(vs, vs[1:]):
            if a.visit_date == b.visit_date:
                raise DataError(f"patient {pid}: duplicated visit date {a.visit_date}")
        patients[pid] = Patient(demographics.get(pid, Demographics()), vs)
    orphans = set(demographics) - set(patients)
    if orphans:
        raise DataError(f"demographics for patients without visits: {sorted(orphans)[:5]}")

    metadata = {}
    meta_path = _metadata_path(path)
    if meta_path.exists():
        metadata = json.loads(meta_path.read_text(encoding="utf-8"))
    return CohortTable(patients, schema, metadata)


def _load_demographics(path):
    schema: Dict[str, str] = {}
    demographics: Dict[str, Demographics] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body_start = 0
    if lines and lines[0].startswith("#schema"):
        for item in lines[0][len("#schema"):].strip().split(";"):
            if item:
                name, _, kind = item.partition("=")
                schema[name.strip()] = kind.strip()
        body_start = 1
    for offset, row in enumerate(csv.reader(lines[body_start:]), start=body_start + 1):
        if not row or (row[0].strip() == "patient_id"):
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 columns, got {len(row)}", row=offset)
        pid, fields = row[0].strip(), row[1]
        cat, num = {}, {}
        for pair in filter(None, (p.strip() for p in fields.split(";"))):
            name, sep, value = pair.partition("=")
            if not sep:
                raise ParseError(f"field {pair!r} is not name=value", row=offset)
            kind = schema.get(name)
            if kind is None:
                try:
                    float(value)
                    kind = NUMERIC
                except ValueError:
                    kind = CATEGORICAL
                schema[name] = kind
            if kind == NUMERIC:
                try:
                    num[name] = float(value)
                except ValueError:
                    raise ParseError(f"numeric field {name!r} has value {value!r}", row=offset) from None
            else:
                cat[name] = value
        try:
            demographics[pid] = Demographics(cat, num)
        except DataError as exc:
            raise ParseError(str(exc), row=offset) from None
    return schema, demographics


def split_patients(cohort: CohortTable, test_fraction: float, seed: int) -> Tuple[CohortTable, CohortTable]:
    """Deterministic patient-level train/test partition."""
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    ids = cohort.patient_ids
    if len(ids) < 2:
        raise ConfigError("need at least two patients to split")
    n_test = int(round(test_fraction * len(ids)))
    n_test = min(max(n_test, 1), len(ids) - 1)
    order = np.random.default_rng([seed, 0x5B11]).permutation(len(ids))
    test_ids = {ids[i] for i in order[:n_test]}
    return cohort.subset(set(ids) - test_ids), cohort.subset(test_ids)


# --------------------------------------------------------------------------
# synthetic generation


@dataclass
class SyntheticConfig:
    """Knobs of the synthetic cohort generator.

    ``signal_strength`` scales every hazard coefficient; 0 makes labels pure
    noise at the base rate.
    """

    n_patients: int = 2000
    visit_count_range: Tuple[int, int] = (5, 10)
    gap_days_range: Tuple[int, int] = (7, 240)
    signal_strength: float = 1.0
    severe_concept_fraction: float = 0.25
    seed: int = 0
    base_rate: float = 0.1
    codes_per_visit_range: Tuple[int, int] = (1, 6)
    unmapped_code_fraction: float = 0.03
    recency_days: float = 120.0
    severe_weight: float = 10.0
    gap_weight: float = 1.2
    frailty_weight: float = 0.3

    def __post_init__(self):
        self.visit_count_range = tuple(self.visit_count_range)
        self.gap_days_range = tuple(self.gap_days_range)
        self.codes_per_visit_range = tuple(self.codes_per_visit_range)
        for name in ("visit_count_range", "gap_days_range", "codes_per_visit_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: min {lo} > max {hi}")
        if self.n_patients < 1:
            raise ConfigError("n_patients must be positive")
        if self.visit_count_range[0] < 1 or self.gap_days_range[0] < 1 or self.codes_per_visit_range[0] < 0:
            raise ConfigError("visit counts and gaps must be >= 1")
        if not math.isfinite(self.signal_strength) or self.signal_strength < 0:
            raise ConfigError("signal_strength must be finite and >= 0")
        if not 0 <= self.severe_concept_fraction <= 1:
            raise ConfigError("severe_concept_fraction must lie in [0, 1]")
        if not 0 < self.base_rate < 1:
            raise ConfigError("base_rate must lie in (0, 1)")

    def as_dict(self) -> Dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


SCHEMA = {"age": NUMERIC, "bmi": NUMERIC, "sex": CATEGORICAL, "admission_type": CATEGORICAL}


def designate_severe_concepts(bundle: OntologyBundle, fraction: float, rng) -> List[str]:
    """Pick whole is-a sibling groups of mapped concepts until ``fraction`` of them are severe.

    Designating groups rather than single concepts is what makes severity
    ontology-correlated: severe concepts share parents and description words.
    """
    mapped = bundle.mapped_concepts
    parent: Dict[str, str] = {}
    for src, dst, rel in bundle.relations:
        if rel == IS_A and src not in parent:
            parent[src] = dst
    groups: Dict[str, List[str]] = {}
    for concept in mapped:
        groups.setdefault(parent.get(concept, concept), []).append(concept)
    keys = sorted(groups)
    target = fraction * len(mapped)
    chosen: List[str] = []
    for i in rng.permutation(len(keys)):
        if len(chosen) >= target:
            break
        chosen.extend(groups[keys[i]])
    return sorted(chosen)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def generate_synthetic_cohort(config: SyntheticConfig, ontology: OntologyBundle) -> CohortTable:
    """Simulate patients whose mortality hazard depends on severe codes, visit gaps and frailty.

    For the label of visit ``t`` the logit is::

        base + s * (severe_weight * (R_t - mean_R)
                    + gap_weight * (mean_gap - gap_t) / gap_scale
                    + frailty_weight * frailty)

    where ``R_t`` sums the severe-designated share of codes over earlier
    visits, each discounted by ``exp(-(date_{t-1} - date_u) / recency_days)``, and
    ``gap_t`` is the most recent observed gap ``date_{t-1} - date_{t-2}``.
    Every patient draws from its own ``(seed, index)`` substream; the label
    uniforms are drawn independently of ``signal_strength`` so cohorts at
    different strengths share visits and are coupled for comparison.
    """
    if len(ontology.icd_mapping) < 20 or len(ontology.mapped_concepts) < 20:
        raise ConfigError("ontology needs at least 20 mapped concepts")
    rng = np.random.default_rng([config.seed, 0xC0DE])
    severe_concepts = set(designate_severe_concepts(ontology, config.severe_concept_fraction, rng))

    mapped_codes = sorted(ontology.icd_mapping)
    n_unmapped = int(round(config.unmapped_code_fraction * len(mapped_codes)))
    unmapped_codes = [f"{999 - i:03d}.9" if i < 100 else f"E9{i:02d}.9" for i in range(n_unmapped)]
    unmapped_codes = [c for c in unmapped_codes if c.replace(".", "") not in ontology.icd_mapping]
    severe_codes = sorted(dotted_icd(c) for c in mapped_codes if ontology.icd_mapping[c] & severe_concepts)
    severe_set = set(severe_codes)
    pool = [dotted_icd(c) for c in mapped_codes] + unmapped_codes
    mild_pool = [c for c in pool if c not in severe_set]
    severe_pool = severe_codes
    if not mild_pool:
        raise ConfigError("every code is severe; lower severe_concept_fraction")

    # Zipf-like popularity over a seeded ordering of codes
    def popularity(codes):
        order = rng.permutation(len(codes))
        w = 1.0 / (1.0 + order) ** 0.7
        return np.asarray(w / w.sum())

    mild_p = popularity(mild_pool)
    severe_p = popularity(severe_pool) if severe_pool else None

    lo_g, hi_g = config.gap_days_range
    mean_gap = (lo_g + hi_g) / 2.0
    gap_scale = max((hi_g - lo_g) / math.sqrt(12.0), 1.0)
    s = config.signal_strength
    base = math.log(config.base_rate / (1 - config.base_rate))

    patients: Dict[str, Patient] = {}
    hazards: Dict[str, List[float]] = {}
    width = max(4, len(str(config.n_patients - 1)))
    raw = []
    for idx in range(config.n_patients):
        prng = np.random.default_rng([config.seed, idx, 0x9A71])
        frailty = float(prng.standard_normal())
        age = float(np.clip(65 + 9 * (0.75 * frailty + 0.66 * prng.standard_normal()), 18, 100))
        bmi = float(np.clip(27 + 5 * prng.standard_normal(), 14, 60))
        sex = "F" if prng.random() < 0.48 else "M"
        admission = ["elective", "emergency", "urgent"][int(prng.choice(3, p=[0.3, 0.55, 0.15]))]
        n_visits = int(prng.integers(config.visit_count_range[0], config.visit_count_range[1] + 1))
        gaps = prng.integers(lo_g, hi_g + 1, size=max(n_visits - 1, 0))
        start = int(prng.integers(0, 3650))
        dates = np.concatenate([[start], start + np.cumsum(gaps)]).astype(int)
        chronic = list(prng.choice(len(mild_pool), size=min(2, len(mild_pool)), replace=False, p=mild_p))
        acuity = -1.2 + 0.7 * frailty
        visit_codes = []
        for t in range(n_visits):
            acuity += 0.25 * prng.standard_normal()
            lo_k, hi_k = config.codes_per_visit_range
            k = int(prng.integers(lo_k, hi_k + 1))
            codes: List[str] = []
            for _ in range(k):
                u = prng.random()
                if u < 0.25:
                    code = mild_pool[chronic[int(prng.integers(len(chronic)))]]
                elif severe_pool and prng.random() < _sigmoid(acuity):
                    code = severe_pool[int(prng.choice(len(severe_pool), p=severe_p))]
                else:
                    code = mild_pool[int(prng.choice(len(mild_pool), p=mild_p))]
                if code not in codes:
                    codes.append(code)
            visit_codes.append(codes)
        label_u = prng.random(n_visits)
        raw.append((f"P{idx:0{width}d}", frailty, age, bmi, sex, admission, dates, visit_codes, label_u))

    # recency-weighted severe burden and most recent gap, per visit
    burdens = []
    for _, _, _, _, _, _, dates, visit_codes, _ in raw:
        sev_counts = np.array([sum(c in severe_set for c in codes) / len(codes) if codes else 0.0
                               for codes in visit_codes], dtype=float)
        r = np.zeros(len(dates))
        g = np.full(len(dates), mean_gap)
        for t in range(1, len(dates)):
            decay = np.exp(-(dates[t - 1] - dates[:t]) / config.recency_days)
            r[t] = float(decay @ sev_counts[:t])
            if t >= 2:
                g[t] = dates[t - 1] - dates[t - 2]
        burdens.append((r, g))
    mean_r = float(np.mean(np.concatenate([b[0] for b in burdens]))) if burdens else 0.0

    for (pid, frailty, age, bmi, sex, admission, dates, visit_codes, label_u), (r, g) in zip(raw, burdens):
        logit = base + s * (config.severe_weight * (r - mean_r)
                            + config.gap_weight * (mean_gap - g) / gap_scale
                            + config.frailty_weight * frailty)
        p = 1.0 / (1.0 + np.exp(-logit))
        labels = (label_u < p).astype(int)
        visits = [VisitRecord(pid, int(d), tuple(c), int(y)) for d, c, y in zip(dates, visit_codes, labels)]
        demo = Demographics({"sex": sex, "admission_type": admission},
                            {"age": round(age, 2), "bmi": round(bmi, 2)})
        patients[pid] = Patient(demo, visits)
        hazards[pid] = [round(float(x), 12) for x in p]

    metadata = {
        "generator": "synthetic",
        "config": config.as_dict(),
        "severe_codes": severe_codes,
        "severe_concepts": sorted(severe_concepts),
        "unmapped_codes": sorted(unmapped_codes),
        "hazard": hazards,
    }
    return CohortTable(patients, dict(SCHEMA), metadata)


def oracle_scores(cohort: CohortTable, skip_first: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Generator hazard probabilities and labels for every visit index >= ``skip_first``."""
    hazard = cohort.metadata.get("hazard")
    if hazard is None:
        raise DataError("cohort carries no generator hazard metadata")
    scores, labels = [], []
    for pid in cohort.patient_ids:
        for t, visit in enumerate(cohort.patients[pid].visits):
            if t >= skip_first:
                scores.append(hazard[pid][t])
                labels.append(visit.mortality_label)
    return np.asarray(scores), np.asarray(labels)
