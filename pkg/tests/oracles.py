"""Independent naive-loop reference implementations.

These stay deliberately dumb (explicit Python loops, float64, no shared code
with the package) so they can serve as oracles for the fast implementations.
"""

import itertools
import math

import numpy as np


def nt_xent_oracle(embeddings, temperature):
    """Double-loop softmax over the full similarity matrix; pairs are (2i, 2i+1)."""
    z = np.asarray(embeddings, dtype=float)
    m = len(z)

    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    total = 0.0
    for i in range(m):
        pos = i ^ 1
        numerator = math.exp(cos(z[i], z[pos]) / temperature)
        denominator = 0.0
        for j in range(m):
            if j != i:
                denominator += math.exp(cos(z[i], z[j]) / temperature)
        total += -math.log(numerator / denominator)
    return total / m


def hinge_d_oracle(real_scores, fake_scores):
    real_terms = [max(0.0, 1.0 - float(v)) for v in real_scores]
    fake_terms = [max(0.0, 1.0 + float(v)) for v in fake_scores]
    return sum(real_terms) / len(real_terms) + sum(fake_terms) / len(fake_terms)


def hinge_g_oracle(fake_scores):
    return -sum(float(v) for v in fake_scores) / len(fake_scores)


def mean_abs_oracle(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    total = 0.0
    for x, y in zip(a, b):
        total += abs(x - y)
    return total / a.size


def cross_entropy_oracle(logits, labels):
    logits = np.asarray(logits, dtype=float)
    total = 0.0
    for row, label in zip(logits, labels):
        exps = [math.exp(v) for v in row]
        total += -math.log(exps[int(label)] / sum(exps))
    return total / len(labels)


def weighted_sum_oracle(base, terms_and_weights):
    total = float(base)
    for term, weight in terms_and_weights:
        total += float(weight) * float(term)
    return total


def spherical_kmeans_exhaustive(points, k):
    """Best objective over every assignment with no empty cluster.

    For a fixed assignment the optimal centroid of a cluster is its normalized
    member sum s/||s||, and the cluster's cosine objective is then ||s||.
    """
    pts = np.asarray(points, dtype=float)
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    n = len(pts)
    best_objective = -np.inf
    best_assignment = None
    for assignment in itertools.product(range(k), repeat=n):
        if len(set(assignment)) < k:
            continue
        objective = 0.0
        for c in range(k):
            members = pts[[i for i in range(n) if assignment[i] == c]]
            objective += float(np.linalg.norm(members.sum(axis=0)))
        if objective > best_objective:
            best_objective = objective
            best_assignment = assignment
    return best_objective, best_assignment


def finite_diff_grad(f, x, eps=1e-4):
    """Central finite differences of a scalar function of a numpy array."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat, grad_flat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x)
        flat[i] = orig - eps
        f_minus = f(x)
        flat[i] = orig
        grad_flat[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def fid_1d_oracle(mu1, var1, mu2, var2):
    return (mu1 - mu2) ** 2 + var1 + var2 - 2.0 * math.sqrt(var1 * var2)


def relative_error(computed, reference):
    reference = np.asarray(reference, dtype=float)
    computed = np.asarray(computed, dtype=float)
    scale = max(float(np.abs(reference).max()), 1e-12)
    return float(np.abs(computed - reference).max()) / scale
