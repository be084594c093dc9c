"""Distillation step and training loop.

One step, per element (feature / gradient):

1. extract teacher and student elements for the mini-batch;
2. for every pair (i, j) in the pair index build the teacher-space
   relation (anchor i, other j) and the matching cross-space relation
   (teacher anchor i, student j) -- the positive;
3. for every distinct anchor i draw N replay-buffer entries and build
   negative cross-space relations against them (built once per anchor,
   shared by all positives with that anchor);
4. score positives and negatives with the element's critic and
   accumulate the contrastive loss.

The step then adds the classification and soft-label losses, applies one
optimizer update over student + relation nets + critics, and pushes the
detached student elements into the replay buffer (so negatives always
come from preceding steps).
"""

from __future__ import annotations

import json
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import DistillConfig, config_hash, config_to_dict
from .data import ArrayDataset, DatasetHandle, Loader, load_dataset
from .elements import gradient_from_logits, l2_normalize_rows
from .errors import InsufficientNegatives, NumericalError, UsageError
from .losses import (LossBreakdown, kd_loss, relation_contrastive_loss,
                     saturation_count, total_objective)
from .models import ModelSpec, SplitModel, build_model, freeze
from .relations import Critic, RelationNet
from .replay import ReplayQueue

ELEMENTS = ("feature", "gradient")


def build_pair_index(batch_size: int, pairs_per_batch, seed: int = 0) -> list[tuple[int, int]]:
    """Ordered sample pairs for one batch.

    "all" enumerates every ordered pair including the diagonal
    (batch_size^2 of them, row-major); "diagonal" keeps only (i, i); an
    integer draws that many distinct pairs uniformly via
    ``np.random.default_rng(seed).choice`` over the row-major
    enumeration.
    """
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    if pairs_per_batch == "all":
        return [(i, j) for i in range(batch_size) for j in range(batch_size)]
    if pairs_per_batch == "diagonal":
        return [(i, i) for i in range(batch_size)]
    count = int(pairs_per_batch)
    if count > batch_size ** 2:
        raise UsageError(f"pairs_per_batch {count} exceeds batch_size^2")
    rng = np.random.default_rng(seed)
    flat = rng.choice(batch_size ** 2, size=count, replace=False)
    return [(int(k) // batch_size, int(k) % batch_size) for k in flat]


@dataclass
class StepMetrics:
    losses: dict
    positive_pair_count: int
    distinct_anchors: int
    negative_saturation_count: int
    queue_fill: int
    grad_norm: float
    skipped: dict              # element -> True when warm-up skipped the term
    positives_used: dict       # element -> positives that contributed
    negatives_evaluated: dict  # element -> negative relations built


@dataclass
class RunResult:
    """Everything needed to report (and re-launch) one training run."""

    run_id: str
    config: dict
    history: list = field(default_factory=list)
    final_top1: float = 0.0
    best_top1: float = 0.0
    teacher_top1: float = 0.0
    wall_clock_s: float = 0.0
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=list)

    @staticmethod
    def from_json(text: str) -> "RunResult":
        return RunResult(**json.loads(text))


def _safe_normalize(rows: torch.Tensor) -> torch.Tensor:
    # gradients can be legitimately ~zero; map those to zero vectors
    return rows / (rows.norm(dim=1, keepdim=True) + 1e-8)


class AuxiliaryNets(nn.Module):
    """The four relation sub-networks plus the two per-element critics.

    Initialization is seeded from the run seed so two engines built from
    the same config are parameter-identical.
    """

    def __init__(self, teacher_dim: int, student_dim: int, config: DistillConfig):
        super().__init__()
        r = config.relation_dim
        rng_state = torch.get_rng_state()
        torch.manual_seed(config.seed + 0x5EED)
        try:
            self.relation = nn.ModuleDict({
                "teacher_feature": RelationNet(teacher_dim, teacher_dim, r,
                                               "teacher_space", "feature"),
                "teacher_gradient": RelationNet(teacher_dim, teacher_dim, r,
                                                "teacher_space", "gradient"),
                "cross_feature": RelationNet(teacher_dim, student_dim, r,
                                             "cross_space", "feature"),
                "cross_gradient": RelationNet(teacher_dim, student_dim, r,
                                              "cross_space", "gradient"),
            })
            proj = r if config.critic_mode == "identity" else config.proj_dim
            self.critics = nn.ModuleDict({
                e: Critic(r, proj, tau=config.tau, mode=config.critic_mode)
                for e in ELEMENTS
            })
        finally:
            torch.set_rng_state(rng_state)


class Distiller:
    """Owns the models, auxiliary nets, replay buffer, and optimizer state."""

    def __init__(self, teacher: SplitModel, student: SplitModel, config: DistillConfig):
        config.validate()
        self.config = config
        self.teacher = freeze(teacher)
        self.student = student
        self.aux = AuxiliaryNets(teacher.feature_dim, student.feature_dim, config)
        self.queue = ReplayQueue(config.effective_queue_capacity, config.sampling_policy)
        self.np_rng = np.random.default_rng(config.seed)
        opt_cfg = config.optimizer
        if opt_cfg.kind != "sgd":
            raise UsageError(f"unsupported optimizer {opt_cfg.kind!r}")
        self.optimizer = torch.optim.SGD(
            list(self.student.parameters()) + list(self.aux.parameters()),
            lr=opt_cfg.lr, momentum=opt_cfg.momentum,
            weight_decay=opt_cfg.weight_decay,
        )
        milestones = sorted({max(1, int(config.epochs * m)) for m in config.lr_milestones})
        self.scheduler = torch.optim.lr_scheduler.MultiStepLR(
            self.optimizer, milestones=milestones, gamma=config.lr_decay
        )
        self.epoch = 0

    # -- element extraction over one forward pass --------------------------

    def _teacher_elements(self, inputs, labels, need_gradient: bool):
        with torch.no_grad():
            feat = self.teacher.backbone(inputs)
            logits = self.teacher.head(feat)
        grad = None
        if need_gradient:
            leaf = feat.detach().requires_grad_(True)
            with torch.enable_grad():
                leaf_logits = self.teacher.head(leaf)
                grad = gradient_from_logits(leaf, leaf_logits, labels,
                                            create_graph=False).detach()
        return feat, logits, grad

    def _student_elements(self, inputs, labels, need_gradient: bool):
        feat = self.student.backbone(inputs)
        logits = self.student.head(feat)
        grad = None
        if need_gradient:
            grad = gradient_from_logits(feat, logits, labels,
                                        create_graph=self.config.higher_order)
            if not self.config.higher_order:
                grad = grad.detach()
        return feat, logits, grad

    # -- one optimization step ----------------------------------------------

    def step(self, sample_ids, inputs, labels) -> StepMetrics:
        cfg = self.config
        batch = len(sample_ids)
        use_feature = cfg.beta1 > 0
        use_gradient = cfg.beta2 > 0
        use_contrastive = use_feature or use_gradient

        feat_t, z_t, grad_t = self._teacher_elements(inputs, labels, use_gradient)
        feat_s, z_s, grad_s = self._student_elements(inputs, labels, use_gradient)
        l_cls = F.cross_entropy(z_s, labels)

        f_t = l2_normalize_rows(feat_t)
        f_s = l2_normalize_rows(feat_s)
        if use_gradient and cfg.normalize_gradients:
            g_t = _safe_normalize(grad_t)
            g_s = _safe_normalize(grad_s)
        else:
            g_t, g_s = grad_t, grad_s

        teacher_reps = {"feature": f_t, "gradient": g_t}
        student_reps = {"feature": f_s, "gradient": g_s}

        zero = torch.zeros((), dtype=l_cls.dtype)
        l_rc = {"feature": zero, "gradient": zero}
        skipped = {e: False for e in ELEMENTS}
        positives_used = {e: 0 for e in ELEMENTS}
        negatives_evaluated = {e: 0 for e in ELEMENTS}
        sat_count = 0

        pairs = None
        if use_contrastive:
            pair_seed = (int(self.np_rng.integers(2 ** 31))
                         if isinstance(cfg.pairs_per_batch, int) else 0)
            pairs = build_pair_index(batch, cfg.pairs_per_batch, pair_seed)
            anchor_rows, neg_vectors = self._sample_anchor_negatives(sample_ids)
            for element in ELEMENTS:
                weight = cfg.beta1 if element == "feature" else cfg.beta2
                if weight <= 0:
                    continue
                if not anchor_rows:
                    skipped[element] = True
                    continue
                loss_e, used, sat = self._element_contrastive_loss(
                    element, pairs, anchor_rows, neg_vectors[element],
                    teacher_reps[element], student_reps[element],
                )
                if used == 0:
                    skipped[element] = True
                else:
                    l_rc[element] = loss_e
                    positives_used[element] = used
                    negatives_evaluated[element] = len(anchor_rows) * cfg.negatives
                    sat_count += sat

        l_kd = kd_loss(z_t, z_s, cfg.rho) if cfg.alpha > 0 else zero
        breakdown = total_objective(l_cls, l_kd, l_rc["feature"], l_rc["gradient"],
                                    cfg.alpha, cfg.beta1, cfg.beta2)

        self.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        grad_norm = torch.sqrt(sum(
            (p.grad ** 2).sum() for p in self.student.parameters()
            if p.grad is not None
        )).item() if any(p.grad is not None for p in self.student.parameters()) else 0.0
        self.optimizer.step()

        if use_contrastive:
            push_grad = (g_s.detach() if use_gradient
                         else torch.zeros_like(f_s.detach()))
            self.queue.push_batch(sample_ids, f_s.detach(), push_grad)

        return StepMetrics(
            losses=breakdown.as_floats(),
            positive_pair_count=len(pairs) if pairs is not None else 0,
            distinct_anchors=len({i for i, _ in pairs}) if pairs is not None else 0,
            negative_saturation_count=sat_count,
            queue_fill=self.queue.fill,
            grad_norm=grad_norm,
            skipped=skipped,
            positives_used=positives_used,
            negatives_evaluated=negatives_evaluated,
        )

    def _sample_anchor_negatives(self, sample_ids):
        """Per-anchor buffer draws; anchors without enough entries drop out.

        Returns the surviving batch rows plus, per element, a list of
        (N, dim) stacks aligned with those rows.
        """
        cfg = self.config
        anchor_rows = []
        neg_vectors = {e: [] for e in ELEMENTS}
        for row, sid in enumerate(sample_ids):
            try:
                entries = self.queue.sample_negatives(int(sid), cfg.negatives,
                                                      rng=self.np_rng)
            except InsufficientNegatives:
                continue
            anchor_rows.append(row)
            neg_vectors["feature"].append(torch.stack([e.feature for e in entries]))
            neg_vectors["gradient"].append(torch.stack([e.gradient for e in entries]))
        return anchor_rows, neg_vectors

    def _element_contrastive_loss(self, element, pairs, anchor_rows, neg_stacks,
                                  rep_t, rep_s):
        cfg = self.config
        eligible = set(anchor_rows)
        live_pairs = [(i, j) for i, j in pairs if i in eligible]
        if not live_pairs:
            return None, 0, 0
        idx_i = torch.tensor([i for i, _ in live_pairs])
        idx_j = torch.tensor([j for _, j in live_pairs])

        rel_t_net = self.aux.relation[f"teacher_{element}"]
        rel_x_net = self.aux.relation[f"cross_{element}"]
        critic = self.aux.critics[element]

        r_t = rel_t_net(rep_t[idx_i], rep_t[idx_j])
        r_pos = rel_x_net(rep_t[idx_i], rep_s[idx_j])
        p1 = critic.project_anchor(r_t)
        p2_pos = critic.project_cross(r_pos)
        pos_scores = critic.score_from_projections(p1, p2_pos)

        # negatives: one (N, dim) block per anchor, relations built once
        # per anchor and shared across that anchor's positives
        neg_dots = []
        order = []
        for a_pos, row in enumerate(anchor_rows):
            vecs = neg_stacks[a_pos]
            if element == "gradient" and cfg.normalize_gradients:
                vecs = _safe_normalize(vecs)
            anchor_rep = rep_t[row].unsqueeze(0).expand(vecs.shape[0], -1)
            r_neg = rel_x_net(anchor_rep, vecs)
            p2_neg = critic.project_cross(r_neg)                  # (N, proj)
            pair_rows = torch.nonzero(idx_i == row).flatten()
            order.append(pair_rows)
            neg_dots.append(p1[pair_rows] @ p2_neg.T)             # (m, N)
        neg_scores = torch.exp((torch.cat(neg_dots) - 1.0) / critic.tau)
        pos_scores = pos_scores[torch.cat(order)]

        loss = relation_contrastive_loss(pos_scores, neg_scores,
                                         literal_n=cfg.literal_negative_scale)
        return loss, len(live_pairs), saturation_count(neg_scores)


def evaluate(model: nn.Module, loader) -> dict:
    """Deterministic top-1 (and top-5 when classes allow) accuracy."""
    model.eval()
    correct1 = correct5 = total = 0
    num_classes = None
    with torch.no_grad():
        for _ids, inputs, labels in loader:
            logits = model(inputs)
            num_classes = logits.shape[1]
            top1 = logits.argmax(dim=1)
            correct1 += int((top1 == labels).sum())
            if num_classes >= 5:
                top5 = logits.topk(5, dim=1).indices
                correct5 += int((top5 == labels.unsqueeze(1)).any(dim=1).sum())
            total += len(labels)
    if total == 0:
        raise UsageError("empty evaluation split")
    report = {"top1": correct1 / total, "count": total}
    if num_classes is not None and num_classes >= 5:
        report["top5"] = correct5 / total
    return report


# -- full training loop -----------------------------------------------------


def model_spec_from_config(model_cfg, num_classes: int,
                           dataset: ArrayDataset | None = None) -> ModelSpec:
    """Build a ModelSpec, inferring the mlp input size from the data if unset."""
    in_dim = getattr(model_cfg, "in_dim", 0)
    if model_cfg.arch == "mlp" and in_dim == 0 and dataset is not None:
        in_dim = int(np.prod(dataset.images.shape[1:]))
    return ModelSpec(
        arch=model_cfg.arch, num_classes=num_classes, depth=model_cfg.depth,
        base_channels=model_cfg.base_channels,
        hidden_dims=tuple(model_cfg.hidden_dims),
        feature_dim=model_cfg.feature_dim, in_dim=in_dim,
    )


def save_checkpoint(path: str | Path, distiller: Distiller, epoch: int):
    torch.save({
        "student": distiller.student.state_dict(),
        "aux": distiller.aux.state_dict(),
        "optimizer": distiller.optimizer.state_dict(),
        "scheduler": distiller.scheduler.state_dict(),
        "epoch": epoch,
        "config_hash": config_hash(distiller.config),
        "seed": distiller.config.seed,
    }, path)


def restore_checkpoint(path: str | Path, distiller: Distiller) -> int:
    """Load state into ``distiller``; returns the next epoch to run.

    The replay buffer is intentionally not serialized; it refills during
    a short warm-up after resume.
    """
    state = torch.load(path, weights_only=False)
    if state["config_hash"] != config_hash(distiller.config):
        raise UsageError("checkpoint was produced by a different config")
    distiller.student.load_state_dict(state["student"])
    distiller.aux.load_state_dict(state["aux"])
    distiller.optimizer.load_state_dict(state["optimizer"])
    distiller.scheduler.load_state_dict(state["scheduler"])
    distiller.epoch = state["epoch"] + 1
    return distiller.epoch


def train(
    config: DistillConfig,
    teacher: SplitModel,
    out_dir: str | Path | None = None,
    train_set: ArrayDataset | None = None,
    test_set: ArrayDataset | None = None,
    resume_from: str | Path | None = None,
    log_every: int = 0,
) -> RunResult:
    """Run the full distillation schedule and return the result record."""
    config.validate()
    torch.manual_seed(config.seed)
    if train_set is None or test_set is None:
        handle = DatasetHandle(
            name=config.data.name, root=config.data.root,
            num_classes=config.data.num_classes,
            subset_fraction=config.data.subset_fraction,
            augment=config.data.augment, seed=config.data.seed,
            image_size=config.data.image_size,
            train_per_class=config.data.train_per_class,
            test_per_class=config.data.test_per_class,
            noise=config.data.noise,
        )
        train_set, test_set = load_dataset(handle)

    student_spec = model_spec_from_config(config.student, config.data.num_classes,
                                          train_set)
    student = build_model(student_spec, seed=config.seed)
    distiller = Distiller(teacher, student, config)

    train_loader = Loader(train_set, config.batch_size, shuffle=True,
                          seed=config.seed, augment=config.data.augment,
                          drop_last=True)
    test_loader = Loader(test_set, 256, shuffle=False)

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "checkpoints").mkdir(exist_ok=True)
        metrics_fh = open(out_path / "metrics.jsonl", "a")

    start_epoch = 0
    if resume_from is not None:
        start_epoch = restore_checkpoint(resume_from, distiller)
        train_loader.epoch = start_epoch

    result = RunResult(
        run_id=uuid.uuid4().hex[:12],
        config=config_to_dict(config),
        teacher_top1=evaluate(distiller.teacher, test_loader)["top1"],
        seed=config.seed,
    )
    started = time.monotonic()
    best = 0.0
    try:
        for epoch in range(start_epoch, config.epochs):
            distiller.student.train()
            distiller.aux.train()
            epoch_losses: list[dict] = []
            for step_idx, (ids, inputs, labels) in enumerate(train_loader):
                metrics = distiller.step(ids, inputs, labels)
                epoch_losses.append(metrics.losses)
                if metrics_fh is not None:
                    record = {"epoch": epoch, "step": step_idx,
                              **metrics.losses,
                              "queue_fill": metrics.queue_fill,
                              "saturated": metrics.negative_saturation_count,
                              "grad_norm": metrics.grad_norm}
                    metrics_fh.write(json.dumps(record) + "\n")
            distiller.scheduler.step()
            report = evaluate(distiller.student, test_loader)
            best = max(best, report["top1"])
            mean_losses = {
                key: float(np.mean([rec[key] for rec in epoch_losses]))
                for key in epoch_losses[0]
            } if epoch_losses else {}
            entry = {"epoch": epoch, "test_top1": report["top1"], **mean_losses}
            result.history.append(entry)
            if log_every and (epoch + 1) % log_every == 0:
                print(f"epoch {epoch + 1}/{config.epochs}: "
                      f"top1 {report['top1']:.4f} total {mean_losses.get('total', 0):.4f}")
            if metrics_fh is not None:
                metrics_fh.write(json.dumps({"epoch_summary": entry}) + "\n")
                metrics_fh.flush()
            if out_path is not None:
                save_checkpoint(out_path / "checkpoints" / "last.pt", distiller, epoch)
            distiller.epoch = epoch + 1
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final = evaluate(distiller.student, test_loader)
    result.final_top1 = final["top1"]
    result.best_top1 = max(best, final["top1"])
    result.wall_clock_s = time.monotonic() - started
    if out_path is not None:
        (out_path / "result.json").write_text(result.to_json() + "\n")
        (out_path / "config.json").write_text(
            json.dumps(config_to_dict(config), indent=2, default=list) + "\n")
    return result
