"""Closed-form attributions from visit attention and the frozen code embeddings.

A disease ``d`` present in visit ``t`` contributes ``alpha_t * ||e_d||_2``;
summing over visits gives its cumulative importance, which is max-normalized
and bucketed into severity levels.  Chronicity, linear progression trend and
peak visit come from the same per-visit contribution table.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from .errors import DomainError, SchemaError
from .ontology import EmbeddingMatrix

RISK_THRESHOLDS = (0.20, 0.40, 0.70)
SEVERE_ABOVE = 0.70
MODERATE_ABOVE = 0.40
TREND_TOLERANCE = 0.01


class RiskCategory(str, Enum):
    LOW = "Low"
    MODERATE = "Moderate"
    HIGH = "High"
    CRITICAL = "Critical"


def risk_category(r: float) -> RiskCategory:
    if not 0.0 <= r <= 1.0:
        raise DomainError(f"risk score {r} outside [0, 1]")
    low, mid, high = RISK_THRESHOLDS
    if r < low:
        return RiskCategory.LOW
    if r < mid:
        return RiskCategory.MODERATE
    if r < high:
        return RiskCategory.HIGH
    return RiskCategory.CRITICAL


def severity(s_hat: float) -> str:
    if s_hat > SEVERE_ABOVE:
        return "Severe"
    if s_hat > MODERATE_ABOVE:
        return "Moderate"
    return "Mild"


@dataclass
class ContributionTable:
    """Per-disease, per-visit contributions ``C_d(t)`` (rows follow ``codes``)."""

    codes: List[str]
    values: np.ndarray
    present: np.ndarray
    unknown: List[str] = field(default_factory=list)

    def trajectory(self, code: str) -> np.ndarray:
        return self.values[self.codes.index(code)]


def disease_contribution(alpha, visits: Sequence[Sequence[str]], matrix: EmbeddingMatrix) -> ContributionTable:
    """``C_d(t) = alpha_t * ||E[d]||_2`` where ``d`` occurs in visit ``t``, else 0.

    Repeated codes inside one visit count once.  Codes that resolve to the
    shared unknown row are attributed through it and listed in ``unknown``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(visits) != len(alpha):
        raise DomainError(f"{len(visits)} visits but {len(alpha)} attention weights")
    codes = sorted({c for visit in visits for c in visit})
    index = {c: i for i, c in enumerate(codes)}
    present = np.zeros((len(codes), len(alpha)), dtype=bool)
    for t, visit in enumerate(visits):
        for c in set(visit):
            present[index[c], t] = True
    rows = [matrix.lookup(c) for c in codes]
    norms = np.linalg.norm(matrix.rows[rows].astype(np.float64), axis=1) if codes else np.zeros(0)
    values = present * alpha[None, :] * norms[:, None]
    unknown = [c for c, r in zip(codes, rows) if r == matrix.unknown_row]
    return ContributionTable(codes, values, present, unknown)


def cumulative_importance(table: ContributionTable) -> Dict[str, Tuple[float, float]]:
    """``{code: (S_d, S_d / max_k S_k)}``; all normalized scores are 0 when every ``S_d`` is 0."""
    totals = table.values.sum(axis=1)
    top = totals.max() if len(totals) else 0.0
    normalized = totals / top if top > 0 else np.zeros_like(totals)
    return {c: (float(s), float(n)) for c, s, n in zip(table.codes, totals, normalized)}


def chronicity(table: ContributionTable) -> Dict[str, bool]:
    """Chronic when a disease occurs in two or more distinct visits of the window."""
    counts = table.present.sum(axis=1)
    return {c: bool(k >= 2) for c, k in zip(table.codes, counts)}


def progression_trend(trajectory, tolerance: float = TREND_TOLERANCE) -> Tuple[str, int]:
    """OLS slope of ``C_d(t)`` against ``t`` classified with ``tau = tolerance * max C_d``.

    Returns ``(trend, t_peak)``; ``t_peak`` is the earliest argmax.
    """
    p = np.asarray(trajectory, dtype=np.float64)
    if p.size == 0:
        raise DomainError("empty trajectory")
    t_peak = int(np.argmax(p))
    if p.size == 1:
        return "stable", t_peak
    t = np.arange(p.size, dtype=np.float64)
    tc = t - t.mean()
    slope = float(tc @ (p - p.mean()) / (tc @ tc))
    tau = tolerance * float(p.max())
    if slope > tau:
        return "increasing", t_peak
    if slope < -tau:
        return "decreasing", t_peak
    return "stable", t_peak


@dataclass
class DiseaseAttribution:
    code: str
    contributions: List[float]
    cumulative: float
    normalized: float
    severity: str
    chronic: bool
    trend: str
    t_peak: int
    unknown: bool = False


@dataclass
class AttributionReport:
    patient_id: str
    window_start: int
    risk: float
    risk_category: str
    alpha: List[float]
    diseases: List[DiseaseAttribution]
    uninformative: bool = False
    metadata: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "AttributionReport":
        data = dict(data)
        data["diseases"] = [DiseaseAttribution(**d) for d in data["diseases"]]
        return cls(**data)

    def to_json(self) -> str:
        doc = self.to_dict()
        validate_report(doc)
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AttributionReport":
        doc = json.loads(text)
        validate_report(doc)
        return cls.from_dict(doc)

    @property
    def top_disease(self) -> Optional[str]:
        return self.diseases[0].code if self.diseases else None


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["patient_id", "window_start", "risk", "risk_category", "alpha", "diseases",
                 "uninformative", "metadata"],
    "additionalProperties": False,
    "properties": {
        "patient_id": {"type": "string"},
        "window_start": {"type": "integer", "minimum": 0},
        "risk": {"type": "number", "minimum": 0, "maximum": 1},
        "risk_category": {"enum": [c.value for c in RiskCategory]},
        "alpha": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 1},
        "uninformative": {"type": "boolean"},
        "metadata": {"type": "object"},
        "diseases": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["code", "contributions", "cumulative", "normalized", "severity", "chronic",
                             "trend", "t_peak", "unknown"],
                "properties": {
                    "code": {"type": "string"},
                    "contributions": {"type": "array", "items": {"type": "number", "minimum": 0}},
                    "cumulative": {"type": "number", "minimum": 0},
                    "normalized": {"type": "number", "minimum": 0, "maximum": 1},
                    "severity": {"enum": ["Severe", "Moderate", "Mild"]},
                    "chronic": {"type": "boolean"},
                    "trend": {"enum": ["increasing", "decreasing", "stable"]},
                    "t_peak": {"type": "integer", "minimum": 0},
                    "unknown": {"type": "boolean"},
                },
            },
        },
    },
}


def validate_report(doc: Dict) -> None:
    try:
        jsonschema.validate(doc, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"attribution report failed validation: {exc.message}") from None


def generate_report(sample, output, matrix: EmbeddingMatrix, metadata: Optional[Dict] = None,
                    tolerance: float = TREND_TOLERANCE) -> AttributionReport:
    """Assemble the patient-level report for one window.

    ``output`` is a mapping with ``risk`` and ``alpha`` (e.g.
    ``ForwardOutput.sample(0)``); alpha is used as-is.
    """
    risk = float(output["risk"])
    alpha = np.asarray(output["alpha"], dtype=np.float64)
    table = disease_contribution(alpha, sample.codes, matrix)
    scores = cumulative_importance(table)
    chronic = chronicity(table)
    diseases = []
    for i, code in enumerate(table.codes):
        s, s_hat = scores[code]
        trend, t_peak = progression_trend(table.values[i], tolerance)
        diseases.append(DiseaseAttribution(
            code=code,
            contributions=[float(x) for x in table.values[i]],
            cumulative=s,
            normalized=s_hat,
            severity=severity(s_hat),
            chronic=chronic[code],
            trend=trend,
            t_peak=t_peak,
            unknown=code in table.unknown,
        ))
    diseases.sort(key=lambda d: (-d.normalized, d.code))
    report = AttributionReport(
        patient_id=str(sample.patient_id),
        window_start=int(sample.window_start),
        risk=risk,
        risk_category=risk_category(risk).value,
        alpha=[float(a) for a in alpha],
        diseases=diseases,
        uninformative=not any(d.cumulative > 0 for d in diseases),
        metadata=dict(metadata or {}),
    )
    validate_report(report.to_dict())
    return report


def plot_report(report: AttributionReport, directory, top_k: int = 8) -> List[Path]:
    """Risk gauge, visit-attention bars and per-disease trajectories as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"{report.patient_id}_w{report.window_start}"
    paths = []

    fig, ax = plt.subplots(figsize=(5, 1.2))
    edges = (0.0,) + RISK_THRESHOLDS + (1.0,)
    colors = ["#4caf50", "#ffc107", "#ff7043", "#c62828"]
    for lo, hi, color in zip(edges[:-1], edges[1:], colors):
        ax.barh(0, hi - lo, left=lo, color=color, height=0.5)
    ax.axvline(report.risk, color="black", linewidth=2)
    ax.set_xlim(0, 1)
    ax.set_yticks([])
    ax.set_title(f"risk {report.risk:.2f} ({report.risk_category})")
    paths.append(directory / f"{stem}_risk.png")
    fig.savefig(paths[-1], bbox_inches="tight")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(range(len(report.alpha)), report.alpha)
    ax.set_xlabel("visit")
    ax.set_ylabel("attention")
    paths.append(directory / f"{stem}_attention.png")
    fig.savefig(paths[-1], bbox_inches="tight")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for d in report.diseases[:top_k]:
        ax.plot(d.contributions, marker="o", label=f"{d.code} ({d.trend})")
    ax.set_xlabel("visit")
    ax.set_ylabel("contribution")
    if report.diseases:
        ax.legend(fontsize=7)
    paths.append(directory / f"{stem}_trajectories.png")
    fig.savefig(paths[-1], bbox_inches="tight")
    plt.close(fig)
    return paths
