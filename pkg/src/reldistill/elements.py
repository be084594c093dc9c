"""Extraction of the two representation elements from a backbone.

Every model in the zoo splits into ``backbone`` (inputs -> penultimate
feature) and ``head`` (feature -> logits).  Two per-sample elements are
derived from that split:

* the *feature element*: the l2-normalized penultimate feature, and
* the *gradient element*: the gradient of the per-sample classification
  loss with respect to the (raw, pre-normalization) feature.

The gradient element encodes the direction of steepest loss descent in
feature space; together the two give complementary views of a
representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DegenerateInputError, NumericalError, UsageError

NORM_TOL = 1e-6


@dataclass(frozen=True)
class RepresentationBatch:
    """A batch of per-sample representation vectors.

    ``vectors`` is (batch, dim).  ``space`` is "teacher" or "student",
    ``element`` is "feature" or "gradient".  ``differentiable`` records
    whether gradients may still flow back into model parameters.
    """

    vectors: torch.Tensor
    space: str
    element: str
    sample_ids: tuple[int, ...]
    differentiable: bool

    def __post_init__(self):
        if self.space not in ("teacher", "student"):
            raise UsageError(f"unknown space {self.space!r}")
        if self.element not in ("feature", "gradient"):
            raise UsageError(f"unknown element {self.element!r}")
        if self.vectors.ndim != 2:
            raise UsageError("vectors must be (batch, dim)")
        if len(self.sample_ids) != self.vectors.shape[0]:
            raise UsageError("sample_ids length must match batch size")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise UsageError("duplicate sample_ids within one batch")
        if self.space == "teacher" and self.differentiable:
            raise UsageError("teacher-space batches must be detached")
        if self.element == "feature":
            norms = self.vectors.detach().norm(dim=1)
            if not torch.all((norms - 1.0).abs() < NORM_TOL):
                raise UsageError("feature rows must be l2-normalized")

    @property
    def batch_size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def l2_normalize_rows(vectors: torch.Tensor) -> torch.Tensor:
    """Normalize each row to unit l2 norm; raise on (near-)zero rows."""
    norms = vectors.norm(dim=1, keepdim=True)
    if torch.any(norms.detach() < 1e-12):
        bad = torch.nonzero(norms.detach().flatten() < 1e-12).flatten().tolist()
        raise DegenerateInputError(f"zero-norm rows at batch positions {bad}")
    return vectors / norms


def feature_element(
    model,
    batch_inputs: torch.Tensor,
    space: str,
    sample_ids: Sequence[int],
) -> RepresentationBatch:
    """l2-normalized penultimate backbone output for each sample.

    Teacher-space batches are detached; student-space batches keep their
    graph so the distillation loss can optimize the student.
    """
    if batch_inputs.shape[0] == 0:
        raise UsageError("batch must be nonempty")
    if space == "teacher":
        with torch.no_grad():
            feat = model.backbone(batch_inputs)
    else:
        feat = model.backbone(batch_inputs)
    if feat.shape[1] != model.feature_dim:
        raise ConfigurationError(
            f"backbone produced dim {feat.shape[1]}, model declares {model.feature_dim}"
        )
    return RepresentationBatch(
        vectors=l2_normalize_rows(feat),
        space=space,
        element="feature",
        sample_ids=tuple(sample_ids),
        differentiable=(space == "student"),
    )


def gradient_from_logits(
    feature: torch.Tensor,
    logits: torch.Tensor,
    labels: torch.Tensor,
    create_graph: bool,
) -> torch.Tensor:
    """Per-sample gradient of the classification loss w.r.t. ``feature``.

    The loss is the per-sample cross-entropy (not scaled by 1/batch), so
    each row depends only on its own sample.  ``logits`` must have been
    computed from ``feature`` in the live graph.  With ``create_graph``
    the returned rows remain differentiable w.r.t. model parameters,
    enabling second-order optimization of losses built on them.
    """
    per_sample_ce = F.cross_entropy(logits, labels, reduction="none")
    (grad,) = torch.autograd.grad(
        per_sample_ce.sum(), feature, create_graph=create_graph, retain_graph=True
    )
    return grad


def gradient_element(
    model,
    batch_inputs: torch.Tensor,
    labels: torch.Tensor,
    space: str,
    sample_ids: Sequence[int],
    higher_order: bool = True,
) -> RepresentationBatch:
    """Gradient of the task loss w.r.t. the penultimate feature, per sample.

    For the teacher the gradient flows through the (frozen) head only and
    the result is detached.  For the student, ``higher_order=True`` keeps
    the rows differentiable w.r.t. student parameters.
    """
    if not hasattr(model, "head"):
        raise ConfigurationError("model exposes no classification head")
    if space == "teacher":
        with torch.no_grad():
            feat = model.backbone(batch_inputs)
        feat = feat.detach().requires_grad_(True)
        with torch.enable_grad():
            logits = model.head(feat)
            grad = gradient_from_logits(feat, logits, labels, create_graph=False)
        grad = grad.detach()
        differentiable = False
    else:
        feat = model.backbone(batch_inputs)
        if not feat.requires_grad:
            # no trainable parameters upstream; differentiate from the feature
            feat = feat.detach().requires_grad_(True)
        logits = model.head(feat)
        create_graph = higher_order
        grad = gradient_from_logits(feat, logits, labels, create_graph=create_graph)
        if not create_graph:
            grad = grad.detach()
        differentiable = create_graph
    if not torch.isfinite(grad.detach()).all():
        bad_rows = torch.nonzero(~torch.isfinite(grad.detach()).all(dim=1)).flatten()
        bad_ids = [sample_ids[i] for i in bad_rows.tolist()]
        raise NumericalError(f"non-finite gradient for sample ids {bad_ids}")
    return RepresentationBatch(
        vectors=grad,
        space=space,
        element="gradient",
        sample_ids=tuple(sample_ids),
        differentiable=differentiable,
    )
