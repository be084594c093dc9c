"""Contrastive and distillation losses, plus the combined objective.

The central loss scores one positive relation pair against ``N``
negatives per anchor relation,

    mean over positives of [ -log h+  -  sum_k log(1 - h-_k) ],

whose minimization maximizes a lower bound ``log N + I(h)`` on the
mutual information between the teacher-space and cross-space relation
distributions.  The sum over the sampled negatives is the Monte-Carlo
estimate of ``N * E[log(1 - h)]``; set ``literal_n=True`` to
additionally multiply the sampled sum by ``N`` (an alternative reading
kept for ablations).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NumericalError, UsageError

# 1 - h is clamped here before the log; scores at 1 would otherwise produce -inf
SATURATION_EPS = 1e-12

BASELINE_KINDS = ("triplet_margin", "logistic", "info_nce")


def relation_contrastive_loss(
    positive_scores: torch.Tensor,
    negative_scores: torch.Tensor,
    literal_n: bool = False,
) -> torch.Tensor:
    """Contrastive loss over critic scores.

    ``positive_scores`` is (P,), one score per positive pair;
    ``negative_scores`` is (P, N).  Scores must lie in (0, 1].  Negative
    scores equal to 1 are clamped (see ``saturation_count``).  Returns a
    scalar, the mean over positives; always >= 0.
    """
    if positive_scores.ndim != 1:
        raise UsageError("positive_scores must be 1-d")
    if negative_scores.ndim != 2 or negative_scores.shape[0] != positive_scores.shape[0]:
        raise UsageError("negative_scores must be (positives, N)")
    pos_term = -torch.log(positive_scores)
    one_minus = torch.clamp(1.0 - negative_scores, min=SATURATION_EPS)
    neg_term = -torch.log(one_minus).sum(dim=1)
    if literal_n:
        neg_term = neg_term * negative_scores.shape[1]
    return (pos_term + neg_term).mean()


def saturation_count(negative_scores: torch.Tensor) -> int:
    """Number of negative scores whose log(1 - h) hit the clamp guard."""
    return int((negative_scores.detach() >= 1.0 - SATURATION_EPS).sum())


def baseline_contrastive_loss(
    kind: str,
    u: torch.Tensor,
    v_pos: torch.Tensor,
    v_negs: torch.Tensor,
    margin: float = 0.4,
    tau: float = 0.05,
) -> torch.Tensor:
    """Reference contrastive losses over l2-normalized vectors.

    ``u`` and ``v_pos`` are (P, d); ``v_negs`` is (P, N, d).  Margin and
    logistic losses average over negatives; info_nce applies log-sum-exp
    over the negatives.  Returns the mean over the P anchors.
    """
    if kind not in BASELINE_KINDS:
        raise UsageError(f"unknown contrastive loss kind {kind!r}")
    pos_sim = (u * v_pos).sum(dim=-1)                       # (P,)
    neg_sim = torch.einsum("pd,pnd->pn", u, v_negs)          # (P, N)
    if kind == "triplet_margin":
        if margin <= 0:
            raise UsageError("margin must be positive")
        per_neg = torch.clamp(neg_sim - pos_sim.unsqueeze(1) + margin, min=0.0)
        return per_neg.mean(dim=1).mean()
    if tau <= 0:
        raise UsageError("tau must be positive")
    if kind == "logistic":
        pos_term = -F.logsigmoid(pos_sim / tau)
        # log(1 - sigmoid(x)) == logsigmoid(-x)
        neg_term = -F.logsigmoid(-neg_sim / tau).mean(dim=1)
        return (pos_term + neg_term).mean()
    # info_nce
    return (-pos_sim / tau + torch.logsumexp(neg_sim / tau, dim=1)).mean()


def kd_loss(z_t: torch.Tensor, z_s: torch.Tensor, rho: float) -> torch.Tensor:
    """Soft-label distillation loss.

    Cross-entropy between the temperature-softened teacher and student
    distributions, scaled by rho^2 so gradients keep their magnitude as
    rho grows; averaged over the batch.  Teacher logits are detached.
    """
    if z_t.shape != z_s.shape:
        raise UsageError(f"logit shape mismatch: {tuple(z_t.shape)} vs {tuple(z_s.shape)}")
    if rho <= 0:
        raise UsageError("rho must be positive")
    p_t = F.softmax(z_t.detach() / rho, dim=1)
    log_p_s = F.log_softmax(z_s / rho, dim=1)
    return rho * rho * (-(p_t * log_p_s).sum(dim=1)).mean()


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step loss decomposition. ``total`` keeps the live graph."""

    l_cls: torch.Tensor
    l_kd: torch.Tensor
    l_rc_feature: torch.Tensor
    l_rc_gradient: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "l_cls": float(self.l_cls.detach()),
            "l_kd": float(self.l_kd.detach()),
            "l_rc_feature": float(self.l_rc_feature.detach()),
            "l_rc_gradient": float(self.l_rc_gradient.detach()),
            "total": float(self.total.detach()),
        }


def total_objective(
    l_cls: torch.Tensor,
    l_kd: torch.Tensor,
    l_rc_f: torch.Tensor,
    l_rc_g: torch.Tensor,
    alpha: float,
    beta1: float,
    beta2: float,
) -> LossBreakdown:
    """Weighted training objective: l_cls + alpha*l_kd + beta1*l_rc_f + beta2*l_rc_g."""
    components = {
        "l_cls": l_cls, "l_kd": l_kd, "l_rc_feature": l_rc_f, "l_rc_gradient": l_rc_g,
    }
    for name, value in components.items():
        if not torch.isfinite(value.detach()).all():
            raise NumericalError(f"non-finite loss component {name}")
    total = l_cls + alpha * l_kd + beta1 * l_rc_f + beta2 * l_rc_g
    return LossBreakdown(l_cls, l_kd, l_rc_f, l_rc_g, total)
