"""Straight-line numpy re-implementations of the fusion and loss formulas.

Deliberately independent of the library code paths: everything here is
written directly from the formula definitions with no shared helpers, so
the test suite can compare the production implementations against these.
"""

import numpy as np

EPS = 1e-8
U_FLOOR = 1e-6
PSEUDO_FLOOR = 1e-30


def softmax(z, tau=1.0):
    e = np.exp((np.asarray(z, dtype=float) - np.max(z)) / tau)
    return e / e.sum()


def uncertainty_raw(p, label):
    p = np.asarray(p, dtype=float)
    q = np.zeros_like(p)
    q[label] = 1.0
    return float(-np.sum(q * np.log(p + EPS)) - np.sum(p * np.log(p + EPS)))


def uncertainty_clamped(p, label):
    return max(uncertainty_raw(p, label), U_FLOOR)


def inverse_weights(us):
    inv = 1.0 / np.asarray(us, dtype=float)
    return inv / inv.sum()


def fuse(dists, weights):
    out = np.zeros_like(np.asarray(dists[0], dtype=float))
    for w, p in zip(weights, dists):
        out = out + w * np.asarray(p, dtype=float)
    return out


def kl(p, q):
    p = np.asarray(p, dtype=float)
    qf = np.maximum(np.asarray(q, dtype=float), EPS)
    qn = qf / qf.sum()
    mask = p > 0
    return float(np.sum(np.where(mask, p * (np.log(np.where(mask, p, 1.0)) - np.log(qn)), 0.0)))


def kd(teacher_logits, student_logits, tau):
    return kl(softmax(teacher_logits, tau), softmax(student_logits, tau))


def edge_schedule(t, tau_base, lambda_base, adaptive):
    if adaptive:
        return tau_base / np.sqrt(t), lambda_base * t ** 1.2
    return tau_base, lambda_base


def hmd(node_logits, edges, tau_base, lambda_base, adaptive):
    """node_logits: {cardinality: logit vector}; edges: [(a, b), ...]."""
    total = 0.0
    for a, b in edges:
        t = min(a, b)
        tau, lam = edge_schedule(t, tau_base, lambda_base, adaptive)
        pair = kd(node_logits[a], node_logits[b], tau) + kd(node_logits[b], node_logits[a], tau)
        total += lam * 0.5 * tau * tau * pair
    return total


def topology_edges(variant, n):
    if n == 1:
        return []
    if variant == "a":
        return [(k, k + 1) for k in range(1, n)]
    if variant == "b":
        return [(k, n) for k in range(1, n)]
    if variant == "c":
        return [(1, k) for k in range(2, n + 1)]
    return [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]


def cross_entropy(p, label):
    return float(-np.log(max(p[label], EPS)))


def total(logits_by_k, label, variant, tau_base, lambda_base,
          adaptive=True, use_uw=True, use_partial=True):
    """Eq.-by-eq evaluation of the whole objective for one sample.

    logits_by_k: {k: [logit vectors]} for k = 1..n (k=n holds one entry).
    """
    n = max(logits_by_k)
    dists_by_k = {k: [softmax(l) for l in logits_by_k[k]] for k in logits_by_k}

    loss_s = float(np.mean([cross_entropy(p, label) for p in dists_by_k[1]]))
    if n == 1:
        return {"loss_s": loss_s, "loss_p": 0.0, "loss_f": loss_s,
                "loss_hmd": 0.0, "loss_total": loss_s}

    loss_p = 0.0
    if use_partial:
        for k in range(2, n):
            loss_p += float(np.mean([cross_entropy(p, label) for p in dists_by_k[k]]))
    loss_f = cross_entropy(dists_by_k[n][0], label)

    node_logits = {n: np.asarray(logits_by_k[n][0], dtype=float)}
    ks = range(1, n) if use_partial else [1]
    for k in ks:
        dists = dists_by_k[k]
        if use_uw:
            us = [uncertainty_clamped(p, label) for p in dists]
            w = inverse_weights(us)
        else:
            w = np.full(len(dists), 1.0 / len(dists))
        node_logits[k] = np.log(np.maximum(fuse(dists, w), PSEUDO_FLOOR))

    edges = topology_edges(variant, n) if use_partial else [(1, n)]
    loss_hmd = hmd(node_logits, edges, tau_base, lambda_base, adaptive)
    return {
        "loss_s": loss_s,
        "loss_p": loss_p,
        "loss_f": loss_f,
        "loss_hmd": loss_hmd,
        "loss_total": loss_s + loss_p + loss_f + loss_hmd,
    }
