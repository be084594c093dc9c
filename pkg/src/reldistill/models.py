"""Small teacher/student backbones for desk-scale experiments.

Every model splits into ``backbone`` (inputs -> penultimate feature
vector) and ``head`` (feature -> logits), so elements can be extracted
at a consistent tap point.  ``forward`` is always ``head(backbone(x))``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, NumericalError, UsageError


@dataclass(frozen=True)
class ModelSpec:
    """Architecture selector: "resnet" (depth 6n+2), "vgg", or "mlp"."""

    arch: str
    num_classes: int
    depth: int = 20
    base_channels: int = 16
    in_channels: int = 3
    in_dim: int = 0              # mlp only: flattened input size
    hidden_dims: tuple = (64,)   # mlp only
    feature_dim: int = 0         # mlp only; conv nets derive it


class SplitModel(nn.Module):
    """Common container: backbone -> feature, head -> logits."""

    def __init__(self, backbone: nn.Module, head: nn.Module,
                 feature_dim: int, num_classes: int):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.feature_dim = feature_dim
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def features_and_logits(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.backbone(x)
        return feat, self.head(feat)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetBackbone(nn.Module):
    """Three-stage residual stack with global average pooling."""

    def __init__(self, depth: int, base_channels: int, in_channels: int):
        super().__init__()
        if (depth - 2) % 6 != 0:
            raise ConfigurationError(f"resnet depth must be 6n+2, got {depth}")
        n = (depth - 2) // 6
        c = base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
        )
        self.stage1 = self._stage(c, c, n, stride=1)
        self.stage2 = self._stage(c, 2 * c, n, stride=2)
        self.stage3 = self._stage(2 * c, 4 * c, n, stride=2)
        self.out_dim = 4 * c

    @staticmethod
    def _stage(in_ch, out_ch, blocks, stride):
        layers = [BasicBlock(in_ch, out_ch, stride)]
        layers += [BasicBlock(out_ch, out_ch) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x):
        out = self.stage3(self.stage2(self.stage1(self.stem(x))))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


class VggBackbone(nn.Module):
    """Compact VGG-style conv stack (conv-bn-relu blocks with pooling)."""

    def __init__(self, base_channels: int, in_channels: int):
        super().__init__()
        c = base_channels
        def block(cin, cout):
            return [nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                    nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
        self.features = nn.Sequential(
            *block(in_channels, c), nn.MaxPool2d(2),
            *block(c, 2 * c), nn.MaxPool2d(2),
            *block(2 * c, 4 * c), *block(4 * c, 4 * c),
        )
        self.out_dim = 4 * c

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)


class MlpBackbone(nn.Module):
    def __init__(self, in_dim: int, hidden_dims, feature_dim: int):
        super().__init__()
        layers = []
        prev = in_dim
        for h in hidden_dims:
            layers += [nn.Linear(prev, h), nn.ReLU(inplace=True)]
            prev = h
        layers.append(nn.Linear(prev, feature_dim))
        self.net = nn.Sequential(*layers)
        self.out_dim = feature_dim

    def forward(self, x):
        return self.net(x.flatten(1))


def build_model(spec: ModelSpec, seed: int) -> SplitModel:
    """Construct a model with deterministic initialization under ``seed``."""
    gen_state = torch.get_rng_state()
    torch.manual_seed(seed)
    try:
        if spec.arch == "resnet":
            backbone = ResNetBackbone(spec.depth, spec.base_channels, spec.in_channels)
        elif spec.arch == "vgg":
            backbone = VggBackbone(spec.base_channels, spec.in_channels)
        elif spec.arch == "mlp":
            if spec.in_dim <= 0 or spec.feature_dim <= 0:
                raise ConfigurationError("mlp spec needs in_dim and feature_dim")
            backbone = MlpBackbone(spec.in_dim, spec.hidden_dims, spec.feature_dim)
        else:
            raise UsageError(f"unknown architecture {spec.arch!r}")
        head = nn.Linear(backbone.out_dim, spec.num_classes)
        model = SplitModel(backbone, head, backbone.out_dim, spec.num_classes)
    finally:
        torch.set_rng_state(gen_state)
    return model


def parameter_hash(model: nn.Module) -> str:
    """sha256 over all parameter and buffer bytes (order-stable)."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_model_checkpoint(path, spec: ModelSpec, model: SplitModel,
                          meta: dict | None = None) -> None:
    """Write a self-describing checkpoint (spec + weights + metadata)."""
    payload = {"spec": dataclasses.asdict(spec), "state_dict": model.state_dict()}
    payload.update(meta or {})
    torch.save(payload, path)


def load_model_checkpoint(path) -> tuple[SplitModel, dict]:
    """Rebuild a model from a self-describing checkpoint; returns (model, meta)."""
    payload = torch.load(path, weights_only=False)
    spec_dict = dict(payload["spec"])
    spec_dict["hidden_dims"] = tuple(spec_dict.get("hidden_dims", ()))
    spec = ModelSpec(**spec_dict)
    model = build_model(spec, seed=0)
    model.load_state_dict(payload["state_dict"])
    meta = {k: v for k, v in payload.items() if k not in ("spec", "state_dict")}
    meta["spec"] = spec
    return model, meta


def train_teacher(
    model: SplitModel,
    train_loader,
    test_loader,
    epochs: int,
    lr: float = 0.05,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    milestones: tuple = (0.6, 0.75, 0.9),
    lr_decay: float = 0.1,
    log_every: int = 0,
) -> dict:
    """Plain supervised training; returns a checkpoint dict with test accuracy."""
    from .engine import evaluate  # local import to avoid a cycle

    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum,
                          weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(
        opt, milestones=[max(1, int(epochs * m)) for m in milestones], gamma=lr_decay
    )
    for epoch in range(epochs):
        model.train()
        for _ids, inputs, labels in train_loader:
            opt.zero_grad()
            loss = F.cross_entropy(model(inputs), labels)
            if not math.isfinite(float(loss.detach())):
                raise NumericalError(
                    f"teacher loss diverged at epoch {epoch} (lr={sched.get_last_lr()[0]:g})"
                )
            loss.backward()
            opt.step()
        sched.step()
        if log_every and (epoch + 1) % log_every == 0:
            acc = evaluate(model, test_loader)["top1"]
            print(f"teacher epoch {epoch + 1}/{epochs}: test top1 {acc:.4f}")
    report = evaluate(model, test_loader)
    return {
        "state_dict": model.state_dict(),
        "test_top1": report["top1"],
        "epochs": epochs,
    }
