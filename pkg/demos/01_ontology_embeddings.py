"""
From ICD codes to frozen hybrid embeddings
==========================================

Every diagnosis code gets one row in a frozen matrix.  A row is the mean over
the code's mapped concepts of ``[text vector ; graph vector]``.  Codes with no
mapping share one unknown row, and row 0 is padding.
"""

# %%
# A small synthetic ontology: is-a trees plus some associative links.
import numpy as np

from tarnn_hybrid.ontology import (GraphEmbedConfig, HashingTextEmbedder, build_from_bundle, build_relation_graph,
                                   generate_synthetic_ontology, normalize_icd)

bundle = generate_synthetic_ontology(n_systems=4, n_categories=3, leaves_per_category=5, seed=0)
print(len(bundle.concepts), "concepts,", len(bundle.relations), "relations,", len(bundle.icd_mapping), "ICD codes")

# %%
# Code normalization strips the prefix, punctuation and case.
for raw in (" icd9:250.00 ", "v45.1", "E8889"):
    print(repr(raw), "->", normalize_icd(raw))

# %%
# Relation weights: is-a 1.0, synonym/associative 0.8, anything else 0.5.
graph = build_relation_graph(bundle)
weights = sorted(set(graph.edges.values()))
print("edge weights in use:", weights)

# %%
# The text half hashes word n-grams, so shared words mean nearby vectors.
text = HashingTextEmbedder(dim=64)
a, b, c = (text.embed(s) for s in ("chronic kidney disease", "chronic kidney failure", "fracture of femur"))
print(f"cos(kidney, kidney) = {a @ b:.3f}   cos(kidney, femur) = {a @ c:.3f}")

# %%
# Build the matrix for a vocabulary that includes one unmapped code.
vocab = sorted(bundle.icd_mapping)[:30] + ["999.99"]
matrix = build_from_bundle(vocab, bundle, text, GraphEmbedConfig(d_g=32, epochs=20))
print("matrix shape", matrix.rows.shape, "unknown row", matrix.unknown_row,
      f"unmapped fraction {matrix.unmapped_fraction:.3f}")
print("padding row is zero:", not matrix.rows[0].any())
print("row norms (first five codes):", np.round(np.linalg.norm(matrix.rows[1:6], axis=1), 3))
