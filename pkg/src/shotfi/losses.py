"""Adaptation objectives: entropy terms, information maximization, rotation SSL,
InfoNCE and nearest-centroid pseudo-labels.

Probability tensors are laid out (N, M, K+1) for multi-user slots, class K
being "no person", or (N, K) for single-user predictions.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

EPS_ENT = 1e-5
EPS_Z = 1e-8


def shannon_entropy(p: torch.Tensor, eps: float = EPS_ENT, dim: int = -1) -> torch.Tensor:
    return -(p * torch.log(p + eps)).sum(dim=dim)


def conditional_entropy_loss(P: torch.Tensor, eps: float = EPS_ENT) -> torch.Tensor:
    """Mean per-slot (or per-sample) entropy."""
    return shannon_entropy(P, eps).mean()


def _marginal(P: torch.Tensor) -> torch.Tensor:
    return P.reshape(-1, P.shape[-1]).mean(dim=0)


def standard_gent(P: torch.Tensor, eps: float = EPS_ENT) -> torch.Tensor:
    """Negative entropy of the batch marginal over every class, no-person included."""
    return -shannon_entropy(_marginal(P), eps)


def occupancy_probability(P: torch.Tensor) -> torch.Tensor:
    return 1.0 - P[..., -1]


def occupancy_weighted_gent(P: torch.Tensor, eps: float = EPS_ENT, eps_z: float = EPS_Z) -> torch.Tensor:
    """Negative entropy of the activity marginal with slots weighted by occupancy.

    When the batch is (almost) entirely predicted empty there is nothing to
    diversify; the result is then a constant 0 carrying an exactly-zero gradient.
    """
    weighted = P[..., :-1] * occupancy_probability(P).unsqueeze(-1)
    u = _marginal(weighted)
    Z = u.sum()
    if Z.item() < eps_z:
        return P.sum() * 0.0
    return -shannon_entropy(u / Z, eps)


def im_multi(P: torch.Tensor) -> torch.Tensor:
    """L_ent - L_gent_occ, the reported multi-user IM value."""
    return conditional_entropy_loss(P) - occupancy_weighted_gent(P)


def im_standard(class_probs: torch.Tensor) -> torch.Tensor:
    """L_ent - L_gent_std."""
    return conditional_entropy_loss(class_probs) - standard_gent(class_probs)


# Descent objectives. L_gent is itself a negative entropy, so the quantity to
# minimize for confident yet diverse predictions is L_ent + L_gent, i.e. the
# negative mutual information H(y|x) - H(y). Minimizing the IM values above
# would instead shrink the marginal entropy and reward collapse.

def im_multi_objective(P: torch.Tensor) -> torch.Tensor:
    return conditional_entropy_loss(P) + occupancy_weighted_gent(P)


def im_standard_objective(P: torch.Tensor) -> torch.Tensor:
    """Works for (N, K) single-user probabilities and for (N, M, K+1) slots."""
    return conditional_entropy_loss(P) + standard_gent(P)


def rotate180(x: torch.Tensor) -> torch.Tensor:
    """Reverse both the feature and time axes of (..., F, T) grids."""
    return torch.flip(x, dims=(-2, -1))


def rotation_loss(x: torch.Tensor, encode: Callable[[torch.Tensor], torch.Tensor],
                  head: torch.nn.Module, base: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Binary 0 vs 180 degree rotation loss over both rotations of every sample.

    ``encode`` maps inputs to bottleneck features b(x). The head sees
    ``[stop_grad(b(x)); b(rot(x, r))]``. Pass ``base = encode(x)`` to reuse an
    already computed forward pass for the r = 0 branch.
    """
    if base is None:
        base = encode(x)
    return rotation_ce(head, base.detach(), base, encode(rotate180(x)))


def rotation_ce(head: torch.nn.Module, anchor: torch.Tensor, upright: torch.Tensor,
                turned: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the rotation head on [anchor; upright] (label 0) and
    [anchor; turned] (label 1)."""
    z = torch.cat([torch.cat([anchor, upright], dim=1),
                   torch.cat([anchor, turned], dim=1)], dim=0)
    n = anchor.shape[0]
    target = torch.cat([torch.zeros(n, dtype=torch.long), torch.ones(n, dtype=torch.long)]).to(z.device)
    return F.cross_entropy(head(z), target)


def cpc_loss(pred_z: torch.Tensor, true_z: torch.Tensor, tau: float = 0.07,
             similarity: str = "cosine") -> torch.Tensor:
    """InfoNCE over in-batch negatives, averaged across the prediction horizon.

    pred_z, true_z: (K_p, N, D). Positive pairs share the batch index.
    """
    if pred_z.shape != true_z.shape or pred_z.dim() != 3:
        raise ValueError(f"expected matching (K_p, N, D) tensors, got {tuple(pred_z.shape)} and {tuple(true_z.shape)}")
    if similarity == "cosine":
        pred_z = F.normalize(pred_z, dim=-1)
        true_z = F.normalize(true_z, dim=-1)
    elif similarity != "dot":
        raise ValueError(f"unknown similarity {similarity!r}")
    Kp, N, _ = pred_z.shape
    s = torch.bmm(pred_z, true_z.transpose(1, 2)) / tau          # (K_p, N, N)
    target = torch.arange(N, device=s.device).repeat(Kp)
    return F.cross_entropy(s.reshape(Kp * N, N), target)


def pseudo_label_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, labels)


def _augment(z: np.ndarray) -> np.ndarray:
    za = np.concatenate([z, np.ones((len(z), 1))], axis=1)
    return za / np.linalg.norm(za, axis=1, keepdims=True)


def _nearest(zt: np.ndarray, c: np.ndarray) -> np.ndarray:
    cn = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
    dist = 1.0 - zt @ cn.T
    return np.argmin(dist, axis=1)       # first minimum: lowest class index wins ties


def pseudo_label_round(features, probs) -> tuple[np.ndarray, np.ndarray]:
    """One round of nearest-centroid pseudo-labelling.

    features (n, d), probs (n, K). Returns labels (n,) and centroids (K, d+1)
    over the augmented, normalized features.
    """
    z = np.asarray(features, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if len(z) == 0:
        raise ValueError("pseudo-labelling needs at least one sample")
    if p.shape[0] != z.shape[0]:
        raise ValueError(f"{len(z)} features but {len(p)} probability rows")
    zt = _augment(z)
    init = (p.T @ zt) / np.maximum(p.sum(axis=0), 1e-12)[:, None]
    labels = _nearest(zt, init)
    cent = init.copy()
    for k in range(p.shape[1]):
        members = labels == k
        if members.any():
            cent[k] = zt[members].mean(axis=0)
    return _nearest(zt, cent), cent
