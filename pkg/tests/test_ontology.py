import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tarnn_hybrid.errors import ConfigError, DataError, FormatError
from tarnn_hybrid.ontology import (
    EmbeddingMatrix, ExternalTextVectors, GraphEmbedConfig, HashingTextEmbedder, OntologyBundle,
    RelationGraph, build_embedding_matrix, build_relation_graph, graphsage_embed, load_bundle_dir,
    load_matrix, map_icd_to_snomed, normalize_icd, random_embedding_matrix, save_matrix,
)


# -- normalize_icd --------------------------------------------------------

@pytest.mark.parametrize("raw, expected", [
    (" icd9:250.00 ", "25000"),
    ("E8889", "E8889"),
    ("v45.1", "V451"),
    ("ICD10-CM: I50.9", "I509"),
    ("icd10_J18.9", "J189"),
])
def test_normalize_icd_examples(raw, expected):
    assert normalize_icd(raw) == expected


@pytest.mark.parametrize("raw", ["", "   ", "...", "ICD9:", 42])
def test_normalize_icd_rejects_empty(raw):
    with pytest.raises(DataError):
        normalize_icd(raw)


@given(st.text(alphabet="0123456789.VEabc :-", min_size=1, max_size=12))
def test_normalize_icd_idempotent(raw):
    try:
        once = normalize_icd(raw)
    except DataError:
        return
    assert normalize_icd(once) == once


# -- bundle files and mapping ------------------------------------------------

def _fixture_bundle():
    concepts = ("c1", "c2", "c3", "c4")
    return OntologyBundle(
        concepts,
        {"c1": "acute heart failure", "c2": "chronic heart failure", "c3": "kidney stone", "c4": "lung"},
        [("c1", "c4", "is_a"), ("c2", "c4", "is_a"), ("c3", "c4", "associative")],
        {"4281": {"c1", "c2"}, "5920": {"c3"}},
    )


def test_map_icd_two_concepts_and_miss():
    b = _fixture_bundle()
    assert map_icd_to_snomed("4281", b) == {"c1", "c2"}
    assert map_icd_to_snomed("9999", b) == frozenset()


def test_bundle_file_round_trip(tmp_path):
    b = _fixture_bundle()
    b.save(tmp_path)
    loaded = load_bundle_dir(tmp_path)
    assert loaded.concepts == b.concepts
    assert loaded.icd_mapping == b.icd_mapping
    assert map_icd_to_snomed("4281", loaded) == {"c1", "c2"}
    assert sorted(loaded.relations) == [("c1", "c4", "is_a"), ("c2", "c4", "is_a"), ("c3", "c4", "synonym_assoc")]


def test_bundle_rejects_unknown_endpoint():
    with pytest.raises(DataError):
        OntologyBundle(("a",), {}, [("a", "b", "is_a")], {})


# -- text embedding ---------------------------------------------------------

def test_hashing_embedder_deterministic_and_unit_norm():
    e = HashingTextEmbedder(dim=64)
    a = e.embed("acute renal failure")
    assert np.array_equal(a, HashingTextEmbedder(dim=64).embed("acute renal failure"))
    assert abs(np.linalg.norm(a) - 1.0) < 1e-6


def test_hashing_embedder_disjoint_texts_nearly_orthogonal():
    # |cos| of two independent random unit vectors in 64 dims has sd ~ 1/8;
    # over many disjoint pairs the bulk sits well under 0.2
    words = [f"w{i}" for i in range(400)]
    e = HashingTextEmbedder(dim=64)
    cos = []
    for i in range(0, 400, 8):
        a = e.embed(" ".join(words[i : i + 4]))
        b = e.embed(" ".join(words[i + 4 : i + 8]))
        cos.append(abs(a @ b))
    cos = np.array(cos)
    assert cos.mean() < 0.12
    assert np.mean(cos < 0.2) >= 0.85


def test_shared_words_raise_similarity():
    e = HashingTextEmbedder(dim=64)
    assert e.embed("chronic kidney disease") @ e.embed("chronic kidney failure") > 0.3


def test_external_vectors_dimension_mismatch():
    with pytest.raises(ConfigError):
        ExternalTextVectors({"a": [1.0, 2.0], "b": [1.0]})
    with pytest.raises(ConfigError):
        ExternalTextVectors({"a": [1.0, 2.0]}, dim=3)


def test_external_vectors_from_file(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("concept_id,x,y\nc1,1,0\nc2,0,1\n")
    ext = ExternalTextVectors.from_file(p)
    assert ext.dim == 2
    assert np.array_equal(ext.vectors["c2"], [0.0, 1.0])


# -- relation graph -----------------------------------------------------------

def _graph_bundle(relations):
    nodes = sorted({x for r in relations for x in r[:2]})
    return OntologyBundle(tuple(nodes), {n: n for n in nodes}, relations, {})


def test_relation_weights():
    g = build_relation_graph(_graph_bundle([("a", "b", "is_a"), ("b", "c", "associative"),
                                            ("c", "d", "synonym"), ("d", "e", "finding_site")]))
    assert g.edges[("a", "b")] == 1.0
    assert g.edges[("b", "c")] == 0.8
    assert g.edges[("c", "d")] == 0.8
    assert g.edges[("d", "e")] == 0.5


def test_duplicate_edge_keeps_max():
    g = build_relation_graph(_graph_bundle([("a", "b", "other"), ("b", "a", "is_a")]))
    assert g.edges == {("a", "b"): 1.0}


def test_self_loop_dropped_with_warning():
    with pytest.warns(UserWarning, match="self-loop"):
        g = build_relation_graph(_graph_bundle([("a", "a", "is_a"), ("a", "b", "is_a")]))
    assert g.edges == {("a", "b"): 1.0}


# -- GraphSAGE ----------------------------------------------------------------

def test_single_node_keeps_projected_feature():
    cfg = GraphEmbedConfig(d_g=6, epochs=3)
    feat = np.arange(1.0, 5.0)
    out = graphsage_embed(RelationGraph(("x",), {}), {"x": feat}, cfg)
    proj = np.random.default_rng([cfg.seed, 1]).standard_normal((4, 6)) / np.sqrt(6)
    expected = feat @ proj
    np.testing.assert_allclose(out["x"], expected / np.linalg.norm(expected), atol=1e-12)


def test_twin_nodes_identical():
    feats = {"hub": np.array([1.0, 0, 0, 0]), "t1": np.array([0, 1.0, 0, 0]), "t2": np.array([0, 1.0, 0, 0]),
             "z": np.array([0, 0, 1.0, 0])}
    g = RelationGraph(("hub", "t1", "t2", "z"), {("hub", "t1"): 1.0, ("hub", "t2"): 1.0, ("hub", "z"): 0.5})
    out = graphsage_embed(g, feats, GraphEmbedConfig(d_g=8, epochs=20))
    np.testing.assert_allclose(out["t1"], out["t2"], atol=1e-12)


def _two_cliques(rng):
    a = [f"a{i}" for i in range(6)]
    b = [f"b{i}" for i in range(6)]
    edges = {tuple(sorted(p)): 1.0 for grp in (a, b) for p in itertools.combinations(grp, 2)}
    edges[("a0", "b0")] = 0.5
    feats = {n: rng.standard_normal(16) for n in a + b}
    return a, b, RelationGraph(tuple(sorted(a + b)), edges), feats


def test_two_clique_structural_separation():
    a, b, g, feats = _two_cliques(np.random.default_rng(0))
    out = graphsage_embed(g, feats, GraphEmbedConfig(d_g=16, epochs=80))

    def cos(u, v):
        return out[u] @ out[v] / np.linalg.norm(out[u]) / np.linalg.norm(out[v])

    intra = np.mean([cos(u, v) for grp in (a, b) for u, v in itertools.combinations(grp, 2)])
    inter = np.mean([cos(u, v) for u in a for v in b])
    assert intra > inter


def test_graphsage_equivariance_under_relabel():
    a, b, g, feats = _two_cliques(np.random.default_rng(1))
    cfg = GraphEmbedConfig(d_g=8, epochs=10)
    base = graphsage_embed(g, feats, cfg)
    # order-preserving relabel: identical outputs under the new names
    mapping = {n: "n_" + n for n in g.nodes}
    out = graphsage_embed(g.relabel(mapping), {mapping[k]: v for k, v in feats.items()}, cfg)
    for n in g.nodes:
        np.testing.assert_array_equal(out[mapping[n]], base[n])
    # arbitrary relabel: aggregation alone (no training) is exactly equivariant
    perm = dict(zip(g.nodes, reversed(g.nodes)))
    cfg0 = GraphEmbedConfig(d_g=8, epochs=0)
    base0 = graphsage_embed(g, feats, cfg0)
    out0 = graphsage_embed(g.relabel(perm), {perm[k]: v for k, v in feats.items()}, cfg0)
    for n in g.nodes:
        np.testing.assert_allclose(out0[perm[n]], base0[n], atol=1e-12)


def test_graphsage_deterministic():
    _, _, g, feats = _two_cliques(np.random.default_rng(2))
    cfg = GraphEmbedConfig(d_g=8, epochs=10, seed=4)
    x, y = graphsage_embed(g, feats, cfg), graphsage_embed(g, feats, cfg)
    assert all(np.array_equal(x[n], y[n]) for n in g.nodes)


def test_graphsage_empty_graph():
    with pytest.raises(ConfigError):
        graphsage_embed(RelationGraph((), {}), {})


# -- embedding matrix ---------------------------------------------------------

def _vectors():
    text = {"c1": np.array([1.0, 0.0]), "c2": np.array([0.0, 1.0]), "c3": np.array([1.0, 1.0]),
            "c4": np.array([2.0, 0.0])}
    graph = {"c1": np.array([2.0, 4.0, 0.0]), "c2": np.array([0.0, 2.0, 2.0]), "c3": np.array([1.0, 1.0, 1.0]),
             "c4": np.array([0.0, 0.0, 0.0])}
    return text, graph


def test_matrix_rows():
    b = _fixture_bundle()
    text, graph = _vectors()
    m = build_embedding_matrix(["428.1", "592.0", "999.1", "E888"], b, text, graph)
    # two concepts: hand-averaged [0.5, 0.5, 1, 3, 1]
    np.testing.assert_allclose(m.rows[m.lookup("428.1")], [0.5, 0.5, 1.0, 3.0, 1.0])
    # one concept: equals its concatenated vector
    np.testing.assert_allclose(m.rows[m.lookup("5920")], [1.0, 1.0, 1.0, 1.0, 1.0])
    # two unmapped codes share the unknown row = mean of mapped rows
    assert m.lookup("999.1") == m.lookup("E888") == m.unknown_row
    np.testing.assert_allclose(m.rows[m.unknown_row], [0.75, 0.75, 1.0, 2.0, 1.0])
    assert np.all(m.rows[0] == 0)
    assert m.unmapped_fraction == 0.5
    assert m.record_unmapped_fraction(["428.1", "428.1", "999.1", "5920"]) == 0.25


def test_matrix_is_frozen():
    b = _fixture_bundle()
    m = build_embedding_matrix(["4281"], b, *_vectors())
    with pytest.raises(ValueError):
        m.rows[1, 0] = 3.0


def test_matrix_dimension_inconsistency():
    b = _fixture_bundle()
    text, graph = _vectors()
    text["c2"] = np.zeros(3)
    with pytest.raises(ConfigError):
        build_embedding_matrix(["4281"], b, text, graph)


def test_matrix_every_row_is_mean_of_concepts(small_bundle, small_cohort, small_matrix):
    # brute-force recomputation against the fitted matrix
    from tarnn_hybrid.ontology import build_relation_graph, graphsage_embed, normalize_icd
    text = HashingTextEmbedder(dim=8).embed_concepts(small_bundle)
    graph = graphsage_embed(build_relation_graph(small_bundle), text, GraphEmbedConfig(d_g=8, epochs=5))
    for code in small_cohort.code_vocabulary:
        concepts = small_bundle.icd_mapping.get(normalize_icd(code))
        if not concepts:
            assert small_matrix.lookup(code) == small_matrix.unknown_row
            continue
        expected = np.mean([np.concatenate([text[c], graph[c]]) for c in sorted(concepts)], axis=0)
        np.testing.assert_allclose(small_matrix.rows[small_matrix.lookup(code)], expected, atol=1e-6)


def test_save_load_round_trip(tmp_path, small_matrix):
    path, side = save_matrix(small_matrix, tmp_path / "m.f32")
    loaded = load_matrix(path)
    assert loaded.rows.tobytes() == small_matrix.rows.tobytes()
    assert loaded.row_index == small_matrix.row_index
    assert loaded.unknown_row == small_matrix.unknown_row
    assert (loaded.d_t, loaded.d_g) == (small_matrix.d_t, small_matrix.d_g)


def test_load_rejects_shape_mismatch(tmp_path, small_matrix):
    path, side = save_matrix(small_matrix, tmp_path / "m.f32")
    meta = json.loads(side.read_text())
    meta["shape"][0] += 1
    side.write_text(json.dumps(meta))
    with pytest.raises(FormatError):
        load_matrix(path)


def test_load_rejects_checksum_mismatch(tmp_path, small_matrix):
    path, _ = save_matrix(small_matrix, tmp_path / "m.f32")
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_matrix(path)


def test_random_matrix_matches_shape_and_norms(small_matrix):
    r = random_embedding_matrix(small_matrix, seed=1)
    assert r.rows.shape == small_matrix.rows.shape
    assert r.row_index == small_matrix.row_index
    np.testing.assert_allclose(np.linalg.norm(r.rows, axis=1), np.linalg.norm(small_matrix.rows, axis=1), rtol=1e-5)
    assert not np.allclose(r.rows, small_matrix.rows)
    assert np.array_equal(r.rows, random_embedding_matrix(small_matrix, seed=1).rows)


def test_matrix_validation():
    with pytest.raises(DataError):
        EmbeddingMatrix(np.ones((3, 2), dtype=np.float32), {}, 1, 1, 1)
    rows = np.zeros((3, 2), dtype=np.float32)
    rows[1, 0] = np.nan
    with pytest.raises(DataError):
        EmbeddingMatrix(rows, {}, 1, 1, 1)
