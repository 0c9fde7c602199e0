"""Bipartite assignment between predicted slots and padded ground-truth slots."""

from __future__ import annotations

import math
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .csi import PaddedLabelVector

EPS_LOG = 1e-8

Labels = Union[PaddedLabelVector, Sequence[int], np.ndarray]


class MatchingInputError(ValueError):
    pass


def _slots(labels: Labels) -> np.ndarray:
    if isinstance(labels, PaddedLabelVector):
        return labels.as_array()
    return np.asarray(labels, dtype=np.int64)


def build_cost_matrix(slot_probs, labels: Labels, eps: float = EPS_LOG) -> np.ndarray:
    """Q[i, j] = -log(p[i, label_j] + eps) for predicted slot i and truth slot j."""
    p = np.asarray(slot_probs, dtype=np.float64)
    y = _slots(labels)
    if p.ndim != 2 or p.shape[0] != len(y):
        raise MatchingInputError(f"slot_probs {p.shape} incompatible with {len(y)} labels")
    if not np.all(np.isfinite(p)):
        raise MatchingInputError("slot probabilities must be finite")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise MatchingInputError("each slot probability row must sum to 1")
    if np.any((y < 0) | (y >= p.shape[1])):
        raise MatchingInputError("label index outside the class range")
    return -np.log(p[:, y] + eps)


def _solve(cost: list[list[float]], n: int):
    """Shortest-augmenting-path Hungarian method. Returns (row->col, u, v)."""
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)      # p[j]: row matched to column j (1-based, 0 = none)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cost[i0 - 1]
            ui0 = u[i0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = [0] * n
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign, u[1:], v[1:]


def _has_perfect_matching(adj: list[list[int]], rows: list[int], free_cols: set) -> bool:
    match: dict[int, int] = {}

    def augment(r, seen):
        for c in adj[r]:
            if c in free_cols and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def _lexicographic_tight(cost, u, v, n, tol):
    # every optimal assignment uses only zero-reduced-cost edges of an optimal dual
    adj = [[j for j in range(n) if cost[i][j] - u[i] - v[j] <= tol] for i in range(n)]
    free = set(range(n))
    out = []
    for i in range(n):
        for j in adj[i]:
            if j not in free:
                continue
            free.discard(j)
            if _has_perfect_matching(adj, list(range(i + 1, n)), free):
                out.append(j)
                break
            free.add(j)
        else:
            return None
    return out


def _row_sum(cost, perm) -> float:
    total = 0.0
    for i, j in enumerate(perm):
        total += cost[i][j]
    return total


def hungarian(Q) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment of rows to columns of a square matrix.

    Returns ``(mapping, total_cost)`` with ``mapping[i]`` the column given to
    row i. Among equal-cost optima the lexicographically smallest mapping is
    returned.
    """
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise MatchingInputError(f"cost matrix must be square, got {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise MatchingInputError("cost matrix must be finite")
    n = Q.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    cost = Q.tolist()
    assign, u, v = _solve(cost, n)
    best = _row_sum(cost, assign)
    tol = 1e-12 * max(1.0, float(np.abs(Q).max()))
    lex = _lexicographic_tight(cost, u, v, n, tol)
    if lex is not None and lex != assign:
        lex_cost = _row_sum(cost, lex)
        if lex_cost <= best:
            assign, best = lex, lex_cost
    return np.asarray(assign, dtype=np.int64), best


def match_batch(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample Hungarian permutations for probs (N, M, C) and labels (N, M)."""
    perms = np.empty(labels.shape, dtype=np.int64)
    for n in range(len(labels)):
        perms[n], _ = hungarian(build_cost_matrix(probs[n], labels[n]))
    return perms


def matched_cross_entropy(slot_logits: torch.Tensor, labels, smoothing: float = 0.0,
                          return_perm: bool = False):
    """Mean label-smoothed cross-entropy after optimal slot matching.

    Accepts one sample (M, C) with labels (M,) or a batch (N, M, C) with labels
    (N, M). Matching uses the un-smoothed softmax and is held constant for
    differentiation.
    """
    if not 0.0 <= smoothing < 1.0:
        raise MatchingInputError("smoothing must lie in [0, 1)")
    single = slot_logits.dim() == 2
    logits = slot_logits.unsqueeze(0) if single else slot_logits
    y = _slots(labels) if single else np.asarray(
        [_slots(l) for l in labels] if isinstance(labels, (list, tuple)) else labels, dtype=np.int64)
    if single:
        y = y[None]
    if logits.dim() != 3 or tuple(logits.shape[:2]) != y.shape:
        raise MatchingInputError(f"logits {tuple(slot_logits.shape)} do not match labels {y.shape}")
    with torch.no_grad():
        probs = torch.softmax(logits.detach().double(), dim=-1).cpu().numpy()
    perms = match_batch(probs, y)
    targets = np.take_along_axis(y, perms, axis=1)
    tgt = torch.as_tensor(targets, device=logits.device)
    C = logits.shape[-1]
    loss = F.cross_entropy(logits.reshape(-1, C), tgt.reshape(-1), label_smoothing=smoothing)
    if return_perm:
        return loss, (perms[0] if single else perms)
    return loss
