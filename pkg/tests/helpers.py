"""Independent oracles and probes shared across the test suite.

Everything here is deliberately written as the dumbest possible
implementation (explicit loops, no vectorization) so the production code
is checked against a separate computational path.
"""

import math

import numpy as np
import torch


def oracle_cmc(distmat, q_ids, g_ids, max_rank):
    """Brute-force rank-k curve: walk each query's sorted gallery."""
    distmat = np.asarray(distmat)
    curve = np.zeros(max_rank)
    for qi in range(len(q_ids)):
        order = sorted(range(len(g_ids)), key=lambda j: (distmat[qi, j], j))
        rank = None
        for pos, j in enumerate(order):
            if g_ids[j] == q_ids[qi]:
                rank = pos
                break
        for k in range(max_rank):
            if rank is not None and rank <= k:
                curve[k] += 1
    return curve / len(q_ids)


def oracle_map(distmat, q_ids, g_ids):
    """Brute-force mean average precision."""
    distmat = np.asarray(distmat)
    aps = []
    for qi in range(len(q_ids)):
        order = sorted(range(len(g_ids)), key=lambda j: (distmat[qi, j], j))
        hits = 0
        precisions = []
        for pos, j in enumerate(order, start=1):
            if g_ids[j] == q_ids[qi]:
                hits += 1
                precisions.append(hits / pos)
        aps.append(sum(precisions) / len(precisions))
    return float(np.mean(aps))


def oracle_mmd(a, b, bw):
    """Double-loop unbiased squared-MMD estimate with a Gaussian kernel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = len(a), len(b)

    def k(x, y):
        return math.exp(-float(np.sum((x - y) ** 2)) / (2.0 * bw * bw))

    if m == n:
        total = 0.0
        for i in range(m):
            for j in range(m):
                if i == j:
                    continue
                total += (k(a[i], a[j]) + k(b[i], b[j])
                          - k(a[i], b[j]) - k(a[j], b[i]))
        return total / (m * (m - 1))

    if m < n:
        a, b = b, a
        m, n = n, m
    term_a = sum(k(a[i], a[j]) for i in range(m) for j in range(m) if i != j)
    term_b = sum(k(b[i], b[j]) for i in range(n) for j in range(n) if i != j)
    cross = sum(k(a[i], b[j]) for i in range(m) for j in range(n))
    return term_a / (m * (m - 1)) + term_b / (n * (n - 1)) - 2 * cross / (m * n)


def oracle_dual_triplet(f_v, f_z, f_i, labels, m2, soft=True):
    """Exhaustive-mining reference for the two directed triplet terms."""

    def act(x):
        if soft:
            return math.log1p(math.exp(x)) if x < 30 else x
        return max(0.0, x)

    def term(anchors, a_labels, positives, p_labels, negatives, n_labels):
        per = []
        for i in range(len(anchors)):
            d_ap = max(float(torch.norm(anchors[i] - positives[j]))
                       for j in range(len(positives))
                       if p_labels[j] == a_labels[i])
            d_an = min(float(torch.norm(anchors[i] - negatives[j]))
                       for j in range(len(negatives))
                       if n_labels[j] != a_labels[i])
            per.append(act(m2 + d_ap - d_an))
        return sum(per) / len(per)

    return (term(f_v, labels, f_i, labels, f_z, labels)
            + term(f_i, labels, f_z, labels, f_v, labels))


def finite_difference_grad(fn, tensor, indices, step=1e-3):
    """Central finite differences of a scalar fn at chosen flat indices."""
    grads = []
    flat = tensor.reshape(-1)
    for idx in indices:
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + step
            hi = float(fn())
            flat[idx] = orig - step
            lo = float(fn())
            flat[idx] = orig
        grads.append((hi - lo) / (2 * step))
    return grads


def check_gradients(fn, tensor, num_probes=5, step=1e-3, rtol=1e-3, seed=0):
    """Compare autodiff against central finite differences at random probes.

    Returns the worst relative error across probes.
    """
    rng = np.random.default_rng(seed)
    n = tensor.numel()
    indices = rng.choice(n, size=min(num_probes, n), replace=False)
    if tensor.grad is not None:
        tensor.grad = None
    value = fn()
    value.backward()
    auto = tensor.grad.reshape(-1)
    fd = finite_difference_grad(fn, tensor.detach(), indices, step=step)
    worst = 0.0
    for idx, fd_val in zip(indices, fd):
        a = float(auto[idx])
        denom = max(abs(a), abs(fd_val), 1e-4)
        worst = max(worst, abs(a - fd_val) / denom)
    assert worst < rtol, f"gradient mismatch: worst relative error {worst}"
    return worst


def unit_rows(n, d, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    return torch.tensor(x / np.linalg.norm(x, axis=1, keepdims=True),
                        dtype=torch.float64)
