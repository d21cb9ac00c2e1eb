"""Independent reference computations used by the tests.

Each oracle is deliberately naive (loops, brute force) and shares no code
with the library beyond the object under test.
"""

import itertools

import numpy as np
import torch

from tarnn_hybrid.model import ModelConfig, build_model, weighted_bce_logits
from tarnn_hybrid.ontology import EmbeddingMatrix


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def f_beta_at(scores, labels, threshold, beta=2.0):
    tp = fp = fn = 0
    for s, y in zip(scores, labels):
        pred = s >= threshold
        tp += pred and y
        fp += pred and not y
        fn += (not pred) and y
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    b2 = beta * beta
    return (1 + b2) * p * r / (b2 * p + r) if (b2 * p + r) else 0.0


def exhaustive_threshold(scores, labels, beta=2.0):
    """Best (threshold, F) over {0, 1} and every midpoint, lowest threshold on ties."""
    u = sorted(set(scores))
    cands = sorted({0.0, 1.0} | {(a + b) / 2.0 for a, b in zip(u, u[1:])})
    best_t, best_f = None, -1.0
    for t in cands:
        f = f_beta_at(scores, labels, t, beta)
        if f > best_f:
            best_t, best_f = t, f
    return best_t, best_f


def random_matrix(rng, n_codes, d):
    rows = rng.standard_normal((n_codes + 2, d)).astype(np.float32)
    rows[0] = 0
    index = {f"C{i}": i + 1 for i in range(n_codes)}
    return EmbeddingMatrix(rows, index, n_codes + 1, d // 2, d - d // 2)


def random_inputs(rng, batch, t_s, k_max, n_rows, demo_dim, dtype=torch.float64):
    code_ids = torch.from_numpy(rng.integers(0, n_rows, size=(batch, t_s, k_max)))
    elapsed = torch.from_numpy(rng.random((batch, t_s))).to(dtype)
    elapsed[:, 0] = 0
    demo = torch.from_numpy(rng.standard_normal((batch, demo_dim))).to(dtype)
    targets = torch.from_numpy(rng.integers(0, 2, size=batch)).to(dtype)
    return code_ids, elapsed, demo, targets


def finite_difference_check(seed=0, eps=1e-6, delta=0.7, floor=1e-6):
    """Max per-tensor relative error ``||g_a - g_fd|| / max(||g_a||, ||g_fd||, floor)`` on the small config.

    The floor (1e-6) only matters for tensors whose exact gradient is zero,
    such as the visit-attention bias (softmax is shift invariant); there the
    finite difference is pure rounding noise.

    Returns ``(max_error, errors_by_name)``.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d=8, h=4, heads=2, layers=2, t_s=4, k_max=3, demo_dim=3, dropout=0.2)
    matrix = random_matrix(rng, 10, 8)
    model = build_model(cfg, matrix, seed=seed, dtype=torch.float64)
    model.eval()
    code_ids, elapsed, demo, targets = random_inputs(rng, 6, 4, 3, matrix.n_rows, 3)

    def loss():
        return weighted_bce_logits(model(code_ids, elapsed, demo).logit, targets, delta)

    model.zero_grad()
    loss().backward()
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            numeric = torch.zeros_like(analytic)
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                numeric[i] = (up - down) / (2 * eps)
            scale = max(analytic.norm().item(), numeric.norm().item(), floor)
            errors[name] = (analytic - numeric).norm().item() / scale
    return max(errors.values()), errors


def brute_force_contributions(alpha, visits, matrix):
    """``{code: [C_d(t) for t]}`` by explicit loops."""
    out = {}
    codes = sorted({c for v in visits for c in v})
    for code in codes:
        norm = float(np.sqrt(sum(float(x) ** 2 for x in matrix.rows[matrix.lookup(code)])))
        out[code] = [float(alpha[t]) * norm if code in visits[t] else 0.0 for t in range(len(visits))]
    return out
