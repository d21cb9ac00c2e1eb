"""ICD to SNOMED knowledge embeddings.

Builds the frozen code-embedding table used by the sequence model: ICD codes
are normalized, mapped to ontology concepts, each concept gets a text vector
and a structural (GraphSAGE) vector, and every ICD row is the mean of its
concepts' concatenated vectors.  Row 0 is padding; all unmapped codes share
one unknown row.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, FormatError, ParseError

_PREFIX_RE = re.compile(r"^(?:ICD[-_ ]?(?:9|10)(?:[-_ ]?CM)?|ICD)\s*[:_\-]\s*", re.IGNORECASE)
_PUNCT_RE = re.compile(r"[^0-9A-Z]")
_TOKEN_RE = re.compile(r"[a-z0-9]+")

IS_A = "is_a"
SYNONYM_ASSOC = "synonym_assoc"
OTHER = "other"

RELATION_WEIGHTS: Dict[str, float] = {IS_A: 1.0, SYNONYM_ASSOC: 0.8, OTHER: 0.5}

_RELATION_ALIASES = {
    "is_a": IS_A,
    "isa": IS_A,
    "is-a": IS_A,
    "hierarchical": IS_A,
    "synonym": SYNONYM_ASSOC,
    "associative": SYNONYM_ASSOC,
    "association": SYNONYM_ASSOC,
    "synonym_assoc": SYNONYM_ASSOC,
    "other": OTHER,
}


def normalize_icd(code: str) -> str:
    """Strip, uppercase, drop an ``ICD9:``/``ICD10:`` style prefix and punctuation.

    >>> normalize_icd(" icd9:250.00 ")
    '25000'
    """
    if not isinstance(code, str):
        raise DataError(f"ICD code must be a string, got {type(code).__name__}")
    text = code.strip().upper()
    text = _PREFIX_RE.sub("", text)
    text = _PUNCT_RE.sub("", text)
    if not text:
        raise DataError(f"ICD code {code!r} is empty after normalization")
    return text


def canonical_relation(name: str) -> str:
    return _RELATION_ALIASES.get(name.strip().lower(), OTHER)


@dataclass
class OntologyBundle:
    """Concepts, their descriptions, typed relations and the ICD mapping."""

    concepts: Tuple[str, ...]
    descriptions: Dict[str, str]
    relations: List[Tuple[str, str, str]]
    icd_mapping: Dict[str, frozenset]

    def __post_init__(self):
        self.concepts = tuple(sorted(set(self.concepts)))
        known = set(self.concepts)
        for src, dst, _ in self.relations:
            if src not in known or dst not in known:
                raise DataError(f"relation endpoint not a known concept: {src!r} -> {dst!r}")
        for icd, targets in self.icd_mapping.items():
            missing = set(targets) - known
            if missing:
                raise DataError(f"ICD {icd!r} maps to unknown concepts {sorted(missing)}")
        self.icd_mapping = {k: frozenset(v) for k, v in self.icd_mapping.items()}

    @property
    def mapped_concepts(self) -> List[str]:
        return sorted(set().union(*self.icd_mapping.values())) if self.icd_mapping else []

    def save(self, directory) -> Dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "mapping": directory / "mapping.csv",
            "descriptions": directory / "descriptions.csv",
            "relations": directory / "relations.csv",
        }
        with open(paths["mapping"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["icd_norm", "concept_id"])
            for icd in sorted(self.icd_mapping):
                for concept in sorted(self.icd_mapping[icd]):
                    writer.writerow([icd, concept])
        with open(paths["descriptions"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["concept_id", "text"])
            for concept in self.concepts:
                writer.writerow([concept, self.descriptions.get(concept, "")])
        with open(paths["relations"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["src", "dst", "relation_type"])
            for row in self.relations:
                writer.writerow(row)
        return paths


def _read_rows(path, n_cols, header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or (lineno == 1 and [c.strip() for c in row] == header):
                continue
            if len(row) != n_cols:
                raise ParseError(f"{Path(path).name}: expected {n_cols} columns, got {len(row)}", row=lineno)
            yield lineno, [c.strip() for c in row]


def load_bundle(mapping_path, descriptions_path, relations_path) -> OntologyBundle:
    """Read the three delimited ontology files into an :class:`OntologyBundle`."""
    descriptions: Dict[str, str] = {}
    for lineno, (concept, text) in _read_rows(descriptions_path, 2, ["concept_id", "text"]):
        if not concept:
            raise ParseError("empty concept id", row=lineno)
        descriptions[concept] = text
    relations = []
    for lineno, (src, dst, rel) in _read_rows(relations_path, 3, ["src", "dst", "relation_type"]):
        relations.append((src, dst, canonical_relation(rel)))
    mapping: Dict[str, set] = {}
    for lineno, (icd, concept) in _read_rows(mapping_path, 2, ["icd_norm", "concept_id"]):
        try:
            key = normalize_icd(icd)
        except DataError as exc:
            raise ParseError(str(exc), row=lineno) from None
        mapping.setdefault(key, set()).add(concept)
    concepts = set(descriptions)
    for src, dst, _ in relations:
        concepts.update((src, dst))
    for targets in mapping.values():
        concepts.update(targets)
    return OntologyBundle(tuple(concepts), descriptions, relations, mapping)


def load_bundle_dir(directory) -> OntologyBundle:
    directory = Path(directory)
    return load_bundle(directory / "mapping.csv", directory / "descriptions.csv", directory / "relations.csv")


def map_icd_to_snomed(icd_norm: str, bundle: OntologyBundle) -> frozenset:
    return bundle.icd_mapping.get(icd_norm, frozenset())


# --------------------------------------------------------------------------
# text embedding


@lru_cache(maxsize=65536)
def _ngram_vector(ngram: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x1f{ngram}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(dim)
    vec.setflags(write=False)
    return vec


class HashingTextEmbedder:
    """Offline text embedder: word n-grams hashed through a seeded Gaussian projection.

    Every n-gram owns a deterministic random direction; a text is the
    L2-normalized sum of its n-gram directions, so texts sharing words are
    close and texts with disjoint vocabularies are nearly orthogonal.
    """

    def __init__(self, dim: int = 64, ngram_range: Tuple[int, int] = (1, 2), seed: int = 0):
        if dim < 1:
            raise ConfigError("text embedding dimension must be >= 1")
        self.dim = dim
        self.ngram_range = ngram_range
        self.seed = seed

    def ngrams(self, text: str) -> List[str]:
        tokens = _TOKEN_RE.findall(text.lower())
        lo, hi = self.ngram_range
        grams = []
        for n in range(lo, hi + 1):
            grams.extend(" ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
        return grams

    def embed(self, text: str) -> np.ndarray:
        grams = self.ngrams(text)
        if not grams:
            raise DataError(f"cannot embed empty description {text!r}")
        total = np.zeros(self.dim)
        for gram in grams:
            total += _ngram_vector(gram, self.dim, self.seed)
        return total / np.linalg.norm(total)

    __call__ = embed

    def embed_concepts(self, bundle: OntologyBundle, concepts: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
        concepts = bundle.concepts if concepts is None else concepts
        out = {}
        for concept in concepts:
            text = bundle.descriptions.get(concept) or concept
            out[concept] = self.embed(text)
        return out


class ExternalTextVectors:
    """Adapter for description vectors computed elsewhere, keyed by concept id.

    Use this to plug in a pretrained clinical language model (for instance
    768-dimensional vectors) without bundling the model.
    """

    def __init__(self, vectors: Mapping[str, Sequence[float]], dim: Optional[int] = None):
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        dims = {a.shape for a in arrays.values()}
        if dim is None:
            if len(dims) != 1:
                raise ConfigError(f"external vectors have inconsistent shapes {sorted(dims)}")
            dim = next(iter(dims))[0]
        for key, arr in arrays.items():
            if arr.shape != (dim,):
                raise ConfigError(f"external vector for {key!r} has shape {arr.shape}, expected ({dim},)")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"external vector for {key!r} is not finite")
        self.dim = dim
        self.vectors = arrays

    @classmethod
    def from_file(cls, path, dim: Optional[int] = None) -> "ExternalTextVectors":
        """Read ``concept_id,v1,v2,...`` rows."""
        vectors = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                try:
                    vectors[row[0].strip()] = [float(x) for x in row[1:]]
                except ValueError:
                    if lineno == 1:
                        continue
                    raise ParseError("non-numeric vector component", row=lineno) from None
        return cls(vectors, dim)

    def embed_concepts(self, bundle: OntologyBundle, concepts: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
        concepts = bundle.concepts if concepts is None else concepts
        missing = [c for c in concepts if c not in self.vectors]
        if missing:
            raise ConfigError(f"no external text vector for {len(missing)} concepts, e.g. {missing[:3]}")
        return {c: self.vectors[c] for c in concepts}


# --------------------------------------------------------------------------
# relation graph and GraphSAGE


@dataclass
class RelationGraph:
    """Undirected weighted concept graph; ``edges`` keys are sorted pairs."""

    nodes: Tuple[str, ...]
    edges: Dict[Tuple[str, str], float]

    def neighbors(self, node: str) -> Dict[str, float]:
        out = {}
        for (a, b), w in self.edges.items():
            if a == node:
                out[b] = w
            elif b == node:
                out[a] = w
        return out

    def relabel(self, mapping: Mapping[str, str]) -> "RelationGraph":
        edges = {}
        for (a, b), w in self.edges.items():
            key = tuple(sorted((mapping[a], mapping[b])))
            edges[key] = max(w, edges.get(key, 0.0))
        return RelationGraph(tuple(sorted(mapping[n] for n in self.nodes)), edges)


def build_relation_graph(bundle: OntologyBundle, weights: Optional[Mapping[str, float]] = None) -> RelationGraph:
    weights = dict(RELATION_WEIGHTS if weights is None else weights)
    edges: Dict[Tuple[str, str], float] = {}
    for src, dst, rel in bundle.relations:
        if src == dst:
            warnings.warn(f"dropping self-loop on concept {src!r}", stacklevel=2)
            continue
        w = float(weights.get(canonical_relation(rel), weights[OTHER]))
        key = (src, dst) if src < dst else (dst, src)
        edges[key] = max(w, edges.get(key, 0.0))
    return RelationGraph(tuple(bundle.concepts), edges)


@dataclass
class GraphEmbedConfig:
    d_g: int = 64
    layers: int = 2
    neighbor_sample_size: int = 10
    negative_samples: int = 5
    epochs: int = 60
    learning_rate: float = 0.01
    temperature: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.d_g < 1 or self.layers < 1:
            raise ConfigError("GraphSAGE needs d_g >= 1 and layers >= 1")
        if self.neighbor_sample_size < 1 or self.negative_samples < 0 or self.epochs < 0:
            raise ConfigError("invalid GraphSAGE sampling/epoch settings")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


class _SageEncoder(torch.nn.Module):
    def __init__(self, dim, layers):
        super().__init__()
        self.layers = torch.nn.ModuleList(torch.nn.Linear(2 * dim, dim) for _ in range(layers))

    def forward(self, x0, src, dst, w, has_neighbors):
        # src -> dst directed edge list; weighted mean of neighbors at dst
        n = x0.shape[0]
        h = x0
        denom = torch.zeros(n, dtype=x0.dtype).index_add_(0, dst, w)
        denom = denom.clamp_min(1e-12).unsqueeze(1)
        mask = has_neighbors.unsqueeze(1)
        for layer in self.layers:
            agg = torch.zeros_like(h).index_add_(0, dst, w.unsqueeze(1) * h[src]) / denom
            out = F.normalize(torch.tanh(layer(torch.cat([h, agg], dim=1))), dim=1, eps=1e-12)
            h = torch.where(mask, out, h)
        return h


def _directed_edges(graph: RelationGraph, index: Mapping[str, int]):
    src, dst, w = [], [], []
    for (a, b), weight in sorted(graph.edges.items()):
        ia, ib = index[a], index[b]
        src += [ia, ib]
        dst += [ib, ia]
        w += [weight, weight]
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), np.array(w, dtype=np.float64)


def _sample_neighbors(rng, src, dst, k):
    """Keep at most ``k`` incoming edges per destination node, chosen uniformly."""
    if len(dst) == 0:
        return np.zeros(0, dtype=bool)
    keys = rng.random(len(dst))
    order = np.lexsort((keys, dst))
    sorted_dst = dst[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_dst)) + 1]
    group_start = np.repeat(starts, np.diff(np.r_[starts, len(sorted_dst)]))
    rank = np.arange(len(sorted_dst)) - group_start
    keep = np.zeros(len(dst), dtype=bool)
    keep[order[rank < k]] = True
    return keep


def graphsage_embed(
    graph: RelationGraph,
    node_features: Mapping[str, np.ndarray],
    config: Optional[GraphEmbedConfig] = None,
) -> Dict[str, np.ndarray]:
    """Unsupervised GraphSAGE (mean aggregator) over the weighted concept graph.

    Node inputs are the text vectors projected to ``d_g`` by a seeded random
    map.  Training samples positive pairs along edges in proportion to edge
    weight and ``negative_samples`` uniform negatives per positive.  The final
    embeddings aggregate over full neighborhoods, so isolated nodes keep
    their normalized projected text feature.  Nodes are processed in sorted
    id order, which makes the output independent of input ordering.
    """
    config = config or GraphEmbedConfig()
    if not graph.nodes:
        raise ConfigError("cannot embed an empty graph")
    nodes = sorted(graph.nodes)
    index = {n: i for i, n in enumerate(nodes)}
    feats = np.stack([np.asarray(node_features[n], dtype=np.float64) for n in nodes])
    d_in = feats.shape[1]

    proj_rng = np.random.default_rng([config.seed, 1])
    projection = proj_rng.standard_normal((d_in, config.d_g)) / np.sqrt(config.d_g)
    x0 = torch.from_numpy(feats @ projection)
    x0 = F.normalize(x0, dim=1, eps=1e-12)

    src, dst, w = _directed_edges(graph, index)
    has_nb = np.zeros(len(nodes), dtype=bool)
    has_nb[dst] = True
    t_src, t_dst, t_w = torch.from_numpy(src), torch.from_numpy(dst), torch.from_numpy(w)
    t_has = torch.from_numpy(has_nb)

    gen = torch.Generator().manual_seed(config.seed)
    encoder = _SageEncoder(config.d_g, config.layers).double()
    with torch.no_grad():
        for p in encoder.parameters():
            bound = 1.0 / np.sqrt(p.shape[-1])
            p.uniform_(-bound, bound, generator=gen)

    n_edges = len(graph.edges)
    if n_edges and config.epochs:
        rng = np.random.default_rng([config.seed, 2])
        pairs = np.array([(index[a], index[b]) for a, b in sorted(graph.edges)], dtype=np.int64)
        probs = np.array([graph.edges[k] for k in sorted(graph.edges)])
        probs = probs / probs.sum()
        opt = torch.optim.Adam(encoder.parameters(), lr=config.learning_rate)
        n_pos = max(n_edges, 64)
        for _ in range(config.epochs):
            keep = torch.from_numpy(_sample_neighbors(rng, src, dst, config.neighbor_sample_size))
            pick = pairs[rng.choice(n_edges, size=n_pos, p=probs)]
            flip = rng.random(n_pos) < 0.5
            u = np.where(flip, pick[:, 1], pick[:, 0])
            v = np.where(flip, pick[:, 0], pick[:, 1])
            neg = rng.integers(0, len(nodes), size=(n_pos, config.negative_samples))
            z = encoder(x0, t_src[keep], t_dst[keep], t_w[keep], t_has)
            zu = z[torch.from_numpy(u)]
            pos_logit = (zu * z[torch.from_numpy(v)]).sum(1) / config.temperature
            loss = F.softplus(-pos_logit).mean()
            if config.negative_samples:
                neg_logit = torch.einsum("pd,pkd->pk", zu, z[torch.from_numpy(neg)]) / config.temperature
                loss = loss + F.softplus(neg_logit).sum(1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()

    with torch.no_grad():
        z = encoder(x0, t_src, t_dst, t_w, t_has).numpy()
    return {n: z[i].copy() for i, n in enumerate(nodes)}


# --------------------------------------------------------------------------
# embedding matrix


@dataclass
class EmbeddingMatrix:
    """Frozen (N+1) x (d_t + d_g) code-embedding table.

    ``row_index`` maps normalized ICD codes to rows; every unmapped code
    points at ``unknown_row``.  Row 0 is padding and is exactly zero.
    """

    rows: np.ndarray
    row_index: Dict[str, int]
    unknown_row: int
    d_t: int
    d_g: int
    unmapped_codes: Tuple[str, ...] = ()
    frozen: bool = True

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[1] != self.d_t + self.d_g:
            raise ConfigError(f"matrix shape {rows.shape} inconsistent with d_t={self.d_t}, d_g={self.d_g}")
        if rows.shape[0] < 2:
            raise ConfigError("embedding matrix needs a padding row and at least one code row")
        if np.any(rows[0] != 0):
            raise DataError("row 0 (padding) must be all zeros")
        if not np.all(np.isfinite(rows)):
            raise DataError("embedding matrix contains non-finite values")
        n = rows.shape[0] - 1
        if not 1 <= self.unknown_row <= n:
            raise DataError(f"unknown_row {self.unknown_row} outside [1, {n}]")
        bad = {k: v for k, v in self.row_index.items() if not 1 <= v <= n}
        if bad:
            raise DataError(f"row_index values outside [1, {n}]: {sorted(bad)[:5]}")
        if self.frozen:
            rows = rows.copy() if rows.flags.writeable and rows is self.rows else rows
            rows.setflags(write=False)
        self.rows = rows
        self.unmapped_codes = tuple(self.unmapped_codes)

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def unmapped_fraction(self) -> float:
        """Fraction of vocabulary codes with no ontology concept."""
        return len(self.unmapped_codes) / len(self.row_index) if self.row_index else 0.0

    def lookup(self, code: str) -> int:
        try:
            key = normalize_icd(code)
        except DataError:
            return self.unknown_row
        return self.row_index.get(key, self.unknown_row)

    def is_mapped(self, code: str) -> bool:
        return self.lookup(code) != self.unknown_row

    def record_unmapped_fraction(self, codes: Iterable[str]) -> float:
        """Fraction of diagnosis records (code occurrences) resolving to the unknown row."""
        total = unknown = 0
        for code in codes:
            total += 1
            unknown += self.lookup(code) == self.unknown_row
        return unknown / total if total else 0.0

    def scaled(self, factor: float) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.rows * np.float32(factor), dict(self.row_index), self.unknown_row,
                               self.d_t, self.d_g, self.unmapped_codes)


def build_embedding_matrix(
    icd_vocab: Iterable[str],
    bundle: OntologyBundle,
    text_vectors: Mapping[str, np.ndarray],
    graph_vectors: Mapping[str, np.ndarray],
) -> EmbeddingMatrix:
    """Assemble the frozen matrix: mapped rows are means of ``[text; graph]`` concept vectors."""
    codes = sorted({normalize_icd(c) for c in icd_vocab})
    d_t = {np.asarray(v).shape for v in text_vectors.values()}
    d_g = {np.asarray(v).shape for v in graph_vectors.values()}
    if len(d_t) > 1 or len(d_g) > 1:
        raise ConfigError(f"inconsistent vector dimensions: text {d_t}, graph {d_g}")
    if not d_t or not d_g:
        raise ConfigError("text and graph vectors must be non-empty")
    d_t, d_g = next(iter(d_t))[0], next(iter(d_g))[0]

    mapped_rows = []
    row_index: Dict[str, int] = {}
    unmapped = []
    for code in codes:
        concepts = sorted(map_icd_to_snomed(code, bundle))
        if not concepts:
            unmapped.append(code)
            continue
        missing = [c for c in concepts if c not in text_vectors or c not in graph_vectors]
        if missing:
            raise ConfigError(f"concepts without vectors for ICD {code}: {missing}")
        stacked = np.stack([np.concatenate([text_vectors[c], graph_vectors[c]]) for c in concepts])
        mapped_rows.append(stacked.mean(axis=0))
        row_index[code] = len(mapped_rows)
    if not mapped_rows:
        raise ConfigError("no vocabulary code maps to the ontology")
    unknown_row = len(mapped_rows) + 1
    for code in unmapped:
        row_index[code] = unknown_row
    body = np.stack(mapped_rows)
    rows = np.vstack([np.zeros((1, d_t + d_g)), body, body.mean(axis=0, keepdims=True)]).astype(np.float32)
    return EmbeddingMatrix(rows, row_index, unknown_row, d_t, d_g, tuple(unmapped))


def random_embedding_matrix(like: EmbeddingMatrix, seed: int) -> EmbeddingMatrix:
    """Shape- and norm-matched random stand-in used when knowledge embeddings are ablated."""
    rng = np.random.default_rng([seed, 0xAB1A7E])
    rows = rng.standard_normal(like.rows.shape)
    norms = np.linalg.norm(like.rows.astype(np.float64), axis=1, keepdims=True)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True) * norms
    rows[0] = 0.0
    return EmbeddingMatrix(rows.astype(np.float32), dict(like.row_index), like.unknown_row,
                           like.d_t, like.d_g, like.unmapped_codes)


_MATRIX_FORMAT = "tarnn-embedding-matrix/1"


def save_matrix(matrix: EmbeddingMatrix, path) -> Tuple[Path, Path]:
    """Write ``path`` (little-endian float32, row-major) and ``path.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(matrix.rows, dtype="<f4").tobytes()
    path.write_bytes(payload)
    sidecar = {
        "format": _MATRIX_FORMAT,
        "shape": list(matrix.rows.shape),
        "dtype": "<f4",
        "d_t": matrix.d_t,
        "d_g": matrix.d_g,
        "unknown_row": matrix.unknown_row,
        "row_index": dict(sorted(matrix.row_index.items())),
        "unmapped_codes": list(matrix.unmapped_codes),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path, side


def load_matrix(path) -> EmbeddingMatrix:
    path = Path(path)
    side = path.with_name(path.name + ".json")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
        payload = path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing embedding file: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"sidecar {side.name} is not valid JSON: {exc}") from None
    if meta.get("format") != _MATRIX_FORMAT:
        raise FormatError(f"unexpected matrix format {meta.get('format')!r}")
    shape = tuple(meta["shape"])
    if len(payload) != int(np.prod(shape)) * 4:
        raise FormatError(f"binary holds {len(payload)} bytes but sidecar shape {shape} needs {int(np.prod(shape)) * 4}")
    if hashlib.sha256(payload).hexdigest() != meta["sha256"]:
        raise FormatError("embedding matrix checksum mismatch")
    rows = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return EmbeddingMatrix(rows, {k: int(v) for k, v in meta["row_index"].items()}, int(meta["unknown_row"]),
                           int(meta["d_t"]), int(meta["d_g"]), tuple(meta.get("unmapped_codes", ())))


def build_from_bundle(
    icd_vocab: Iterable[str],
    bundle: OntologyBundle,
    text_embedder=None,
    graph_config: Optional[GraphEmbedConfig] = None,
) -> EmbeddingMatrix:
    """Text vectors, GraphSAGE vectors and matrix assembly in one call."""
    text_embedder = text_embedder or HashingTextEmbedder()
    text_vectors = text_embedder.embed_concepts(bundle)
    graph = build_relation_graph(bundle)
    graph_vectors = graphsage_embed(graph, text_vectors, graph_config)
    return build_embedding_matrix(icd_vocab, bundle, text_vectors, graph_vectors)


# --------------------------------------------------------------------------
# synthetic ontology

_SYSTEMS = [
    ("cardiac", "heart"), ("renal", "kidney"), ("respiratory", "lung"), ("hepatic", "liver"),
    ("neurologic", "brain"), ("endocrine", "gland"), ("hematologic", "blood"),
    ("gastrointestinal", "bowel"), ("vascular", "artery"), ("musculoskeletal", "bone"),
]
_CATEGORIES = [
    ("failure", "organ failure decompensation"), ("infection", "bacterial infection sepsis"),
    ("neoplasm", "malignant neoplasm tumor"), ("injury", "traumatic injury"),
    ("inflammation", "inflammatory disorder"), ("obstruction", "obstruction stenosis"),
    ("hemorrhage", "hemorrhage bleeding"), ("degeneration", "degenerative disease"),
]
_MODIFIERS = ["acute", "chronic", "recurrent", "unspecified", "secondary", "congenital",
              "postoperative", "primary", "mild", "complicated"]


def generate_synthetic_ontology(
    n_systems: int = 10,
    n_categories: int = 6,
    leaves_per_category: int = 6,
    shared_code_fraction: float = 0.05,
    assoc_fraction: float = 0.5,
    seed: int = 0,
) -> OntologyBundle:
    """Hierarchical toy ontology: root > organ system > disorder category > leaf.

    Leaves carry one ICD9-style code each (a few codes map to two sibling
    leaves); categories of the same kind are linked associatively across
    systems and some random leaf pairs get weak ``other`` edges.
    Descriptions share the category and system words, so concepts in one
    subtree have similar text vectors.
    """
    if not 1 <= n_systems <= len(_SYSTEMS) or not 1 <= n_categories <= len(_CATEGORIES):
        raise ConfigError("system/category counts exceed the built-in vocabulary")
    if not 1 <= leaves_per_category <= len(_MODIFIERS):
        raise ConfigError(f"leaves_per_category must be in [1, {len(_MODIFIERS)}]")
    rng = np.random.default_rng([seed, 0x0E7])
    counter = iter(range(100000, 10**9))

    def new_id():
        return str(next(counter))

    descriptions: Dict[str, str] = {}
    relations: List[Tuple[str, str, str]] = []
    root = new_id()
    descriptions[root] = "clinical finding"
    leaves: List[Tuple[str, int, int]] = []
    category_nodes: Dict[Tuple[int, int], str] = {}
    for s in range(n_systems):
        adj, organ = _SYSTEMS[s]
        sys_id = new_id()
        descriptions[sys_id] = f"disorder of {organ} {adj} system"
        relations.append((sys_id, root, IS_A))
        for c in range(n_categories):
            word, gloss = _CATEGORIES[c]
            cat_id = new_id()
            category_nodes[(s, c)] = cat_id
            descriptions[cat_id] = f"{adj} {gloss} of {organ}"
            relations.append((cat_id, sys_id, IS_A))
            mods = rng.permutation(len(_MODIFIERS))[:leaves_per_category]
            for m in mods:
                leaf = new_id()
                descriptions[leaf] = f"{_MODIFIERS[m]} {adj} {word} {gloss} of {organ}"
                relations.append((leaf, cat_id, IS_A))
                leaves.append((leaf, s, c))

    for c in range(n_categories):
        for s in range(n_systems):
            if rng.random() < assoc_fraction:
                t = int(rng.integers(n_systems))
                if t != s:
                    relations.append((category_nodes[(s, c)], category_nodes[(t, c)], "associative"))
    n_other = len(leaves) // 10
    for _ in range(n_other):
        a, b = rng.choice(len(leaves), size=2, replace=False)
        relations.append((leaves[a][0], leaves[b][0], OTHER))

    mapping: Dict[str, set] = {}
    numbers = rng.permutation(np.arange(1, 1000))[: len(leaves)]
    for i, (leaf, s, c) in enumerate(leaves):
        n = int(numbers[i])
        code = f"V{n % 90 + 10:02d}{n // 90}" if n % 7 == 0 else f"{n:03d}{i % 10}"
        mapping.setdefault(code, set()).add(leaf)
    by_category: Dict[Tuple[int, int], List[str]] = {}
    for leaf, s, c in leaves:
        by_category.setdefault((s, c), []).append(leaf)
    codes = sorted(mapping)
    for code in codes:
        if rng.random() < shared_code_fraction:
            leaf = next(iter(mapping[code]))
            _, s, c = next(x for x in leaves if x[0] == leaf)
            siblings = [x for x in by_category[(s, c)] if x != leaf]
            if siblings:
                sib = siblings[int(rng.integers(len(siblings)))]
                mapping[code].add(sib)
                relations.append((leaf, sib, "synonym"))
    return OntologyBundle(tuple(descriptions), descriptions, relations, mapping)


def dotted_icd(code_norm: str) -> str:
    """Render a normalized ICD9-style code with its conventional dot (``4282`` -> ``428.2``)."""
    head = 4 if code_norm.startswith("E") else 3
    return code_norm if len(code_norm) <= head else f"{code_norm[:head]}.{code_norm[head:]}"
