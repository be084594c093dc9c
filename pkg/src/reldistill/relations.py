"""Learnable relation sub-networks and the pair-scoring critic.

A relation between two samples is not a scalar similarity but a learned
high-dimensional vector: each side is linearly mapped into a shared
relation space, the difference is passed through a ReLU, and a final
linear map produces the relation vector.  Two kinds exist:

* ``teacher_space``: both inputs are teacher representations.  This
  relation acts as the fixed supervision target.
* ``cross_space``: the first input (the anchor) is a teacher
  representation, the second a student representation.  Gradients flow
  into the student through this path.

The critic scores a (teacher-relation, cross-relation) pair with
``exp(cos(h1(r_a), h2(r_b)) / tau) / exp(1 / tau)``, an estimate of the
posterior probability that the pair was built from the same sample pair
rather than assembled independently.  Scores therefore live in
``[exp(-2/tau), 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import DegenerateInputError, UsageError
from .elements import RepresentationBatch

KINDS = ("teacher_space", "cross_space")
ELEMENTS = ("feature", "gradient")
CRITIC_MODES = ("linear", "identity", "nonlinear")


@dataclass(frozen=True)
class RelationVector:
    """Batched relation vectors with provenance tags.

    ``values`` is (pairs, relation_dim); ``pairs`` lists the
    (anchor_id, other_id) sample ids the rows were built from.
    """

    values: torch.Tensor
    kind: str
    element: str
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown relation kind {self.kind!r}")
        if self.element not in ELEMENTS:
            raise UsageError(f"unknown element {self.element!r}")
        if not torch.isfinite(self.values.detach()).all():
            raise UsageError("relation vectors must be finite")


class RelationNet(nn.Module):
    """Maps a pair of representations to a relation vector.

    ``w_left`` and ``w_right`` are independent bias-free linear maps into
    relation space (they also absorb any dimension mismatch between the
    two sides); ``w_out`` transforms the rectified difference.
    """

    def __init__(self, left_dim: int, right_dim: int, relation_dim: int,
                 kind: str, element: str):
        super().__init__()
        if kind not in KINDS:
            raise UsageError(f"unknown relation kind {kind!r}")
        if element not in ELEMENTS:
            raise UsageError(f"unknown element {element!r}")
        self.kind = kind
        self.element = element
        self.relation_dim = relation_dim
        self.w_left = nn.Linear(left_dim, relation_dim, bias=False)
        self.w_right = nn.Linear(right_dim, relation_dim, bias=False)
        self.w_out = nn.Linear(relation_dim, relation_dim, bias=False)

    def forward(self, anchor: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
        return self.w_out(torch.relu(self.w_left(anchor) - self.w_right(other)))


def teacher_relation(net: RelationNet, phi_t_i: RepresentationBatch,
                     phi_t_j: RepresentationBatch) -> RelationVector:
    """Relation between two teacher-space representations (the anchor first)."""
    if net.kind != "teacher_space":
        raise UsageError("net is not a teacher-space relation net")
    if phi_t_i.space != "teacher" or phi_t_j.space != "teacher":
        raise UsageError("both inputs must be teacher-space")
    if phi_t_i.element != phi_t_j.element or phi_t_i.element != net.element:
        raise UsageError("element kind mismatch between inputs and net")
    values = net(phi_t_i.vectors, phi_t_j.vectors)
    pairs = tuple(zip(phi_t_i.sample_ids, phi_t_j.sample_ids))
    return RelationVector(values, "teacher_space", net.element, pairs)


def cross_relation(net: RelationNet, phi_t_i: RepresentationBatch,
                   phi_s_j: RepresentationBatch) -> RelationVector:
    """Cross-space relation: teacher anchor first, student representation second.

    The relation is directional; swapping spaces is a usage error.
    """
    if net.kind != "cross_space":
        raise UsageError("net is not a cross-space relation net")
    if phi_t_i.space != "teacher":
        raise UsageError("anchor (first argument) must be teacher-space")
    if phi_s_j.space != "student":
        raise UsageError("second argument must be student-space")
    if phi_t_i.element != phi_s_j.element or phi_t_i.element != net.element:
        raise UsageError("element kind mismatch between inputs and net")
    values = net(phi_t_i.vectors, phi_s_j.vectors)
    pairs = tuple(zip(phi_t_i.sample_ids, phi_s_j.sample_ids))
    return RelationVector(values, "cross_space", net.element, pairs)


class Critic(nn.Module):
    """Scores relation pairs as joint-vs-independent posterior estimates.

    ``mode`` selects the transformation applied to each side before the
    cosine: "linear" (default, bias-free projection), "identity" (no
    parameters, degrades the score to a temperature-scaled cosine
    similarity), or "nonlinear" (one-hidden-layer MLP).
    """

    def __init__(self, relation_dim: int, proj_dim: int = 128, tau: float = 0.05,
                 mode: str = "linear", right_dim: int | None = None,
                 hidden_dim: int | None = None):
        super().__init__()
        if mode not in CRITIC_MODES:
            raise UsageError(f"unknown critic mode {mode!r}")
        if tau <= 0:
            raise UsageError("tau must be positive")
        if proj_dim <= 0:
            raise UsageError("proj_dim must be positive")
        right_dim = relation_dim if right_dim is None else right_dim
        self.tau = tau
        self.mode = mode
        self.proj_dim = proj_dim
        if mode == "linear":
            self.h1_proj = nn.Linear(relation_dim, proj_dim, bias=False)
            self.h2_proj = nn.Linear(right_dim, proj_dim, bias=False)
        elif mode == "nonlinear":
            # one-hidden-layer map W2 relu(W1 r); hidden width defaults to
            # the input width
            def mlp(in_dim):
                hidden = hidden_dim if hidden_dim is not None else in_dim
                return nn.Sequential(
                    nn.Linear(in_dim, hidden, bias=False),
                    nn.ReLU(),
                    nn.Linear(hidden, proj_dim, bias=False),
                )
            self.h1_proj = mlp(relation_dim)
            self.h2_proj = mlp(right_dim)
        else:
            self.h1_proj = nn.Identity()
            self.h2_proj = nn.Identity()

    def _project(self, proj, relations: torch.Tensor, side: str) -> torch.Tensor:
        out = proj(relations)
        norms = out.norm(dim=-1, keepdim=True)
        if torch.any(norms.detach() < 1e-12):
            bad = torch.nonzero(norms.detach().flatten() < 1e-12).flatten().tolist()
            raise DegenerateRelationError(side, bad)
        return out / norms

    def project_anchor(self, relations: torch.Tensor) -> torch.Tensor:
        """Transform + l2-normalize teacher-space relations."""
        return self._project(self.h1_proj, relations, "anchor")

    def project_cross(self, relations: torch.Tensor) -> torch.Tensor:
        """Transform + l2-normalize cross-space relations."""
        return self._project(self.h2_proj, relations, "cross")

    def score_from_projections(self, p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
        """Score already-projected unit vectors: exp((<p1,p2> - 1)/tau)."""
        dot = (p1 * p2).sum(dim=-1)
        return torch.exp((dot - 1.0) / self.tau)

    def forward(self, r_anchor: torch.Tensor, r_cross: torch.Tensor) -> torch.Tensor:
        return self.score_from_projections(
            self.project_anchor(r_anchor), self.project_cross(r_cross)
        )


class DegenerateRelationError(DegenerateInputError):
    """A projected relation has (near-)zero norm and cannot be scored."""

    def __init__(self, side: str, positions: list):
        super().__init__(f"zero-norm projected {side} relation at rows {positions}")
        self.side = side
        self.positions = positions


def critic_score(critic: Critic, r_t: RelationVector, r_ts: RelationVector) -> torch.Tensor:
    """Score aligned (teacher-relation, cross-relation) rows pairwise."""
    if r_t.values.shape != r_ts.values.shape:
        raise UsageError("relation batches must have matching shape")
    try:
        return critic(r_t.values, r_ts.values)
    except DegenerateRelationError as err:
        bad_pairs = [
            (r_t if err.side == "anchor" else r_ts).pairs[i] for i in err.positions
        ]
        raise DegenerateRelationError(err.side, bad_pairs) from None
