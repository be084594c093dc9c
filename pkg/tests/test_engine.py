"""Distillation step and training loop."""

import copy

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from reldistill.config import DataConfig, DistillConfig, ModelConfig, OptimizerConfig
from reldistill.data import ArrayDataset, Loader
from reldistill.engine import (Distiller, build_pair_index, evaluate,
                               restore_checkpoint, train)
from reldistill.errors import UsageError
from reldistill.models import ModelSpec, SplitModel, build_model, parameter_hash
from torch import nn

IN_DIM = 12
NUM_CLASSES = 4
TEACHER_SPEC = ModelSpec(arch="mlp", num_classes=NUM_CLASSES, in_dim=IN_DIM,
                         hidden_dims=(16,), feature_dim=10)
STUDENT_SPEC = ModelSpec(arch="mlp", num_classes=NUM_CLASSES, in_dim=IN_DIM,
                         hidden_dims=(12,), feature_dim=6)


def vector_dataset(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, IN_DIM)).astype(np.float32)
    y = rng.integers(0, NUM_CLASSES, size=n)
    for cls in range(NUM_CLASSES):
        x[y == cls, cls] += 3.0
    return ArrayDataset(np.arange(n), torch.from_numpy(x),
                        torch.from_numpy(y.astype(np.int64)))


def tiny_config(**kw) -> DistillConfig:
    defaults = dict(
        tau=0.05, negatives=6, alpha=1.0, beta1=0.5, beta2=0.5, rho=4.0,
        relation_dim=16, proj_dim=8, batch_size=8, pairs_per_batch="all",
        epochs=2, seed=0, queue_capacity=16,
        optimizer=OptimizerConfig(lr=0.01),
        data=DataConfig(name="synthetic", num_classes=NUM_CLASSES, augment=False),
        student=ModelConfig(arch="mlp", hidden_dims=(12,), feature_dim=6),
    )
    defaults.update(kw)
    return DistillConfig(**defaults)


def make_distiller(seed=0, **cfg_kw) -> Distiller:
    cfg = tiny_config(seed=seed, **cfg_kw)
    teacher = build_model(TEACHER_SPEC, seed=100 + seed)
    student = build_model(STUDENT_SPEC, seed=200 + seed)
    return Distiller(teacher, student, cfg)


def run_steps(distiller: Distiller, dataset: ArrayDataset, steps: int):
    loader = Loader(dataset, distiller.config.batch_size, shuffle=True,
                    seed=distiller.config.seed, drop_last=True)
    metrics = []
    done = 0
    while done < steps:
        for ids, x, y in loader:
            metrics.append(distiller.step(ids, x, y))
            done += 1
            if done >= steps:
                break
    return metrics


class TestBuildPairIndex:
    def test_all_pairs_batch_two(self):
        assert build_pair_index(2, "all") == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_all_pairs_count_is_batch_squared(self):
        assert len(build_pair_index(64, "all")) == 4096

    def test_diagonal(self):
        assert build_pair_index(3, "diagonal") == [(0, 0), (1, 1), (2, 2)]

    def test_subsample_matches_seeded_oracle(self):
        got = build_pair_index(8, 16, seed=123)
        flat = np.random.default_rng(123).choice(64, size=16, replace=False)
        expected = [(int(k) // 8, int(k) % 8) for k in flat]
        assert got == expected
        assert len(set(got)) == 16

    def test_oversized_subsample_rejected(self):
        with pytest.raises(UsageError):
            build_pair_index(3, 10)

    def test_bad_batch_rejected(self):
        with pytest.raises(UsageError):
            build_pair_index(0, "all")


class TestDistillStep:
    def test_warmup_skips_contrastive_terms(self):
        distiller = make_distiller()
        ds = vector_dataset()
        first = run_steps(distiller, ds, 1)[0]
        assert first.skipped == {"feature": True, "gradient": True}
        assert first.losses["l_rc_feature"] == 0.0
        assert first.losses["l_rc_gradient"] == 0.0
        assert first.queue_fill == 8

    def test_contrastive_active_after_warmup(self):
        distiller = make_distiller()
        ds = vector_dataset()
        metrics = run_steps(distiller, ds, 3)
        last = metrics[-1]
        assert not last.skipped["feature"] and not last.skipped["gradient"]
        assert last.losses["l_rc_feature"] > 0
        assert last.losses["l_rc_gradient"] > 0
        assert last.positive_pair_count == 64
        assert last.positives_used["feature"] == 64

    def test_negative_accounting(self):
        distiller = make_distiller()
        ds = vector_dataset()
        last = run_steps(distiller, ds, 3)[-1]
        assert last.negatives_evaluated["feature"] == \
            last.distinct_anchors * distiller.config.negatives

    def test_pure_supervised_step_is_bitwise_identical(self):
        """alpha = beta1 = beta2 = 0 degenerates to plain cross-entropy."""
        distiller = make_distiller(alpha=0.0, beta1=0.0, beta2=0.0)
        reference = copy.deepcopy(distiller.student)
        opt = torch.optim.SGD(reference.parameters(), lr=0.01, momentum=0.9,
                              weight_decay=1e-4)
        ds = vector_dataset()
        loader = Loader(ds, 8, shuffle=True, seed=0, drop_last=True)
        for step, (ids, x, y) in enumerate(loader):
            distiller.step(ids, x, y)
            opt.zero_grad()
            F.cross_entropy(reference(x), y).backward()
            opt.step()
            if step == 2:
                break
        for (name, p_d), (_n, p_r) in zip(
                distiller.student.state_dict().items(),
                reference.state_dict().items()):
            assert torch.equal(p_d, p_r), name

    def test_diagonal_pairs_degeneration(self):
        """Same-sample pairs only: positives drop from B^2 to B."""
        distiller = make_distiller(pairs_per_batch="diagonal")
        ds = vector_dataset()
        metrics = run_steps(distiller, ds, 3)
        assert metrics[-1].positive_pair_count == 8
        assert metrics[-1].positives_used["feature"] == 8
        assert metrics[-1].losses["l_rc_feature"] > 0

    def test_teacher_immutable(self):
        distiller = make_distiller()
        before = parameter_hash(distiller.teacher)
        run_steps(distiller, vector_dataset(), 4)
        assert parameter_hash(distiller.teacher) == before

    def test_loss_path_isolation_with_zero_betas(self):
        distiller = make_distiller(beta1=0.0, beta2=0.0)
        run_steps(distiller, vector_dataset(), 2)
        for p in distiller.aux.parameters():
            assert p.grad is None or torch.all(p.grad == 0)

    def test_relation_nets_receive_gradients_when_active(self):
        distiller = make_distiller()
        run_steps(distiller, vector_dataset(), 3)
        grads = [p.grad for p in distiller.aux.parameters() if p.grad is not None]
        assert grads and any(g.abs().sum() > 0 for g in grads)

    def test_higher_order_flag_controls_student_updates(self):
        """Without second-order flow, the gradient-relation loss must leave
        student updates exactly as plain supervised training."""
        ds = vector_dataset()
        first_order = make_distiller(alpha=0.0, beta1=0.0, beta2=1.0,
                                     higher_order=False)
        supervised = make_distiller(alpha=0.0, beta1=0.0, beta2=0.0)
        run_steps(first_order, ds, 3)
        run_steps(supervised, ds, 3)
        for (name, a), (_n, b) in zip(first_order.student.state_dict().items(),
                                      supervised.student.state_dict().items()):
            assert torch.equal(a, b), name
        # the auxiliary networks still trained in the first-order run
        aux_moved = any(p.grad is not None and p.grad.abs().sum() > 0
                        for p in first_order.aux.parameters())
        assert aux_moved

        second_order = make_distiller(alpha=0.0, beta1=0.0, beta2=1.0,
                                      higher_order=True)
        run_steps(second_order, ds, 3)
        changed = any(
            not torch.equal(a, b)
            for (a, b) in zip(second_order.student.state_dict().values(),
                              supervised.student.state_dict().values())
        )
        assert changed

    def test_step_determinism(self):
        ds = vector_dataset()
        losses_a = [m.losses["total"] for m in run_steps(make_distiller(), ds, 4)]
        losses_b = [m.losses["total"] for m in run_steps(make_distiller(), ds, 4)]
        assert losses_a == losses_b

    def test_random_policy_runs(self):
        distiller = make_distiller(sampling_policy="random")
        metrics = run_steps(distiller, vector_dataset(), 3)
        assert metrics[-1].losses["l_rc_feature"] > 0


class _OracleModel(nn.Module):
    """Outputs the one-hot of the true label (labels stashed by id)."""

    def __init__(self, id_to_label, ids_seen, num_classes):
        super().__init__()
        self.id_to_label = id_to_label
        self.ids_seen = ids_seen
        self.num_classes = num_classes

    def forward(self, x):
        ids = self.ids_seen.pop(0)
        out = torch.zeros(len(ids), self.num_classes)
        for row, i in enumerate(ids):
            out[row, self.id_to_label[int(i)]] = 1.0
        return out


class TestEvaluate:
    def test_oracle_model_scores_100(self):
        ds = vector_dataset(40)
        loader = Loader(ds, 16, shuffle=False)
        id_to_label = {int(i): int(l) for i, l in zip(ds.ids, ds.labels)}
        ids_seen = [list(ids) for ids, _x, _y in loader]
        model = _OracleModel(id_to_label, ids_seen, NUM_CLASSES)
        assert evaluate(model, loader)["top1"] == 1.0

    def test_constant_model_on_balanced_split(self):
        n, k = 40, 4
        x = torch.randn(n, IN_DIM)
        y = torch.arange(n) % k
        ds = ArrayDataset(np.arange(n), x, y)

        class Constant(nn.Module):
            def forward(self, inp):
                out = torch.zeros(inp.shape[0], k)
                out[:, 2] = 1.0
                return out

        report = evaluate(Constant(), Loader(ds, 16, shuffle=False))
        assert report["top1"] == pytest.approx(1.0 / k)

    def test_matches_independent_argmax_count(self):
        ds = vector_dataset(100, seed=9)
        model = build_model(STUDENT_SPEC, seed=17).eval()
        loader = Loader(ds, 32, shuffle=False)
        report = evaluate(model, loader)
        with torch.no_grad():
            preds = model(ds.images).argmax(dim=1).numpy()
        expected = float(np.mean(preds == ds.labels.numpy()))
        assert report["top1"] == pytest.approx(expected)

    def test_top5_present_for_five_plus_classes(self):
        n, k = 20, 6
        ds = ArrayDataset(np.arange(n), torch.randn(n, IN_DIM),
                          torch.randint(0, k, (n,)))
        spec = ModelSpec(arch="mlp", num_classes=k, in_dim=IN_DIM,
                         hidden_dims=(8,), feature_dim=4)
        report = evaluate(build_model(spec, seed=0), Loader(ds, 8, shuffle=False))
        assert "top5" in report
        assert report["top5"] >= report["top1"]


class TestTrain:
    def teacher(self, seed=0):
        return build_model(TEACHER_SPEC, seed=100 + seed)

    def test_zero_epochs_reports_untrained_eval(self):
        cfg = tiny_config(epochs=0)
        result = train(cfg, self.teacher(), train_set=vector_dataset(),
                       test_set=vector_dataset(48, seed=1))
        assert result.history == []
        assert 0.0 <= result.final_top1 <= 1.0

    def test_fixed_seed_runs_identical(self):
        cfg = tiny_config(epochs=2)
        args = dict(train_set=vector_dataset(), test_set=vector_dataset(48, seed=1))
        a = train(cfg, self.teacher(), **args)
        b = train(tiny_config(epochs=2), self.teacher(), **args)
        assert a.final_top1 == b.final_top1
        assert [h["total"] for h in a.history] == [h["total"] for h in b.history]

    def test_resume_matches_uninterrupted_when_queue_free(self, tmp_path):
        """With the contrastive terms off, resume must be exact."""
        train_set, test_set = vector_dataset(), vector_dataset(48, seed=1)
        cfg = tiny_config(epochs=2, beta1=0.0, beta2=0.0)
        full = train(cfg, self.teacher(), train_set=train_set, test_set=test_set)

        cfg_a = tiny_config(epochs=1, beta1=0.0, beta2=0.0)
        out_a = tmp_path / "part1"
        train(cfg_a, self.teacher(), out_dir=out_a,
              train_set=train_set, test_set=test_set)
        cfg_b = tiny_config(epochs=2, beta1=0.0, beta2=0.0)
        # note: resuming validates the config hash, which covers `epochs`;
        # patch the stored hash to the 2-epoch config before resuming
        import torch as _torch
        ckpt_path = out_a / "checkpoints" / "last.pt"
        state = _torch.load(ckpt_path, weights_only=False)
        from reldistill.config import config_hash
        state["config_hash"] = config_hash(cfg_b)
        _torch.save(state, ckpt_path)
        resumed = train(cfg_b, self.teacher(), train_set=train_set,
                        test_set=test_set, resume_from=ckpt_path)
        assert resumed.history[-1]["epoch"] == 1
        assert resumed.final_top1 == pytest.approx(full.final_top1)

    def test_resume_with_contrastive_close_after_warmup(self, tmp_path):
        train_set, test_set = vector_dataset(), vector_dataset(48, seed=1)
        cfg = tiny_config(epochs=2)
        full = train(cfg, self.teacher(), train_set=train_set, test_set=test_set)
        out = tmp_path / "part"
        train(tiny_config(epochs=2), self.teacher(), out_dir=out,
              train_set=train_set, test_set=test_set)
        # fresh distiller resumed from epoch 0's checkpoint replays epoch 1
        # with an empty queue; accuracy stays within a warm-up tolerance
        import torch as _torch
        from reldistill.config import config_hash
        ckpt = out / "checkpoints" / "last.pt"
        state = _torch.load(ckpt, weights_only=False)
        state["epoch"] = 0
        _torch.save(state, ckpt)
        # rebuild the one-epoch state by resuming and running epoch 1 only
        resumed = train(tiny_config(epochs=2), self.teacher(),
                        train_set=train_set, test_set=test_set,
                        resume_from=ckpt)
        assert len(resumed.history) == 1
        assert abs(resumed.final_top1 - full.final_top1) <= 0.25

    def test_checkpoint_config_mismatch_rejected(self, tmp_path):
        train_set, test_set = vector_dataset(), vector_dataset(48, seed=1)
        out = tmp_path / "run"
        train(tiny_config(epochs=1), self.teacher(), out_dir=out,
              train_set=train_set, test_set=test_set)
        other = make_distiller(tau=0.2)
        with pytest.raises(UsageError):
            restore_checkpoint(out / "checkpoints" / "last.pt", other)
