"""FIFO replay buffer of detached student-side representations.

Negative cross-space relations are built against entries from this
buffer, so that each anchor can be contrasted with many representations
beyond the current mini-batch.  The queue policy keeps exactly the most
recent ``capacity`` insertions (oldest evicted first), which keeps the
negatives close to the current student state; a seeded random policy is
available as the baseline.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InsufficientNegatives, UsageError

POLICIES = ("queue", "random")


@dataclass(frozen=True)
class QueueEntry:
    """One stored sample: detached feature (l2-normalized) and gradient vectors."""

    sample_id: int
    feature: torch.Tensor
    gradient: torch.Tensor
    age: int

    def vector(self, element: str) -> torch.Tensor:
        if element == "feature":
            return self.feature
        if element == "gradient":
            return self.gradient
        raise UsageError(f"unknown element {element!r}")


class ReplayQueue:
    """Bounded FIFO of ``QueueEntry`` items with anchor-exclusion sampling."""

    def __init__(self, capacity: int, policy: str = "queue"):
        if capacity < 1:
            raise UsageError("capacity must be >= 1")
        if policy not in POLICIES:
            raise UsageError(f"unknown sampling policy {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self._entries: deque[QueueEntry] = deque()
        self._insertions = 0
        self._dim: int | None = None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def fill(self) -> int:
        return len(self._entries)

    def push_batch(self, sample_ids, features: torch.Tensor, gradients: torch.Tensor) -> None:
        """Append one detached mini-batch, evicting the oldest entries on overflow."""
        if features.requires_grad or gradients.requires_grad:
            raise UsageError("stored vectors must be detached")
        if features.shape != gradients.shape or features.shape[0] != len(sample_ids):
            raise UsageError("batch shape mismatch")
        if len(sample_ids) > self.capacity:
            raise UsageError("batch larger than queue capacity")
        if self._dim is None:
            self._dim = features.shape[1]
        elif features.shape[1] != self._dim:
            raise UsageError(f"entry dim {features.shape[1]} != queue dim {self._dim}")
        for i, sid in enumerate(sample_ids):
            self._entries.append(
                QueueEntry(int(sid), features[i].clone(), gradients[i].clone(),
                           age=self._insertions)
            )
            self._insertions += 1
            if len(self._entries) > self.capacity:
                self._entries.popleft()

    def sample_negatives(
        self,
        anchor_sample_id: int,
        count: int,
        rng: np.random.Generator | None = None,
    ) -> list[QueueEntry]:
        """Draw ``count`` entries, never returning the anchor's own sample.

        Queue policy returns the most recent eligible entries (in
        insertion order); random policy draws uniformly without
        replacement from the eligible set using ``rng``.  Raises
        ``InsufficientNegatives`` when fewer than ``count`` entries are
        eligible -- callers treat that as a warm-up signal.
        """
        eligible = [e for e in self._entries if e.sample_id != anchor_sample_id]
        if len(eligible) < count:
            raise InsufficientNegatives(needed=count, eligible=len(eligible))
        if self.policy == "queue":
            return eligible[-count:]
        if rng is None:
            raise UsageError("random policy requires a seeded generator")
        idx = rng.choice(len(eligible), size=count, replace=False)
        return [eligible[i] for i in idx]

    def snapshot(self) -> list[QueueEntry]:
        """Copy of the current contents, oldest first (for diagnostics)."""
        return [
            QueueEntry(e.sample_id, e.feature.clone(), e.gradient.clone(), e.age)
            for e in self._entries
        ]
