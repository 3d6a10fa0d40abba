"""Backbone + concat-pool head, split into three layer groups with freeze control."""

from __future__ import annotations

import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

import numpy as np
import torch
from torch import nn
from torchvision import models as tv_models

from .dataset import IMAGE_SIZE, N_CATEGORIES, ImageTensor
from .errors import AssemblyError, ConfigError, ContractViolation, NumericError, WeightsLoadError
from .schedule import N_GROUPS
from .seeding import torch_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneSpec:
    name: str = "resnet50"
    feature_channels: int = 2048
    pretrained_weights: str | None = None
    weights_sha256: str | None = None

    def __post_init__(self):
        if self.feature_channels <= 0:
            raise ValueError("feature_channels must be positive")


@dataclass(frozen=True)
class HeadSpec:
    hidden_widths: tuple[int, ...] = (512, 512)
    # after pooling, between the hidden layers, before the output layer
    dropout_ps: tuple[float, ...] = (0.25, 0.25, 0.5)
    n_outputs: int = N_CATEGORIES

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "dropout_ps", tuple(float(p) for p in self.dropout_ps))
        if len(self.hidden_widths) != 2 or any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"head needs exactly two positive hidden widths, got {self.hidden_widths}")
        if len(self.dropout_ps) != len(self.hidden_widths) + 1 or not all(0 <= p < 1 for p in self.dropout_ps):
            raise ValueError(f"need {len(self.hidden_widths) + 1} dropout probabilities in [0, 1), got {self.dropout_ps}")
        if self.n_outputs != N_CATEGORIES:
            raise ValueError(f"n_outputs must equal the taxonomy size {N_CATEGORIES}")


# --------------------------------------------------------------------------- backbones


class _BackboneEntry(NamedTuple):
    factory: Callable[[], nn.Sequential]
    feature_channels: int
    # layer group of each top-level child, bottom to top
    child_groups: tuple[int, ...]


def _resnet50() -> nn.Sequential:
    net = tv_models.resnet50(weights=None)
    return nn.Sequential(OrderedDict((n, m) for n, m in net.named_children() if n not in ("avgpool", "fc")))


def _toy_block(c_in: int, c_out: int, stride: int, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


TOY_CHANNELS = 8


def _toy() -> nn.Sequential:
    return nn.Sequential(OrderedDict(
        block0=_toy_block(3, TOY_CHANNELS, stride=4, kernel=7),
        block1=_toy_block(TOY_CHANNELS, TOY_CHANNELS, stride=2),
        block2=_toy_block(TOY_CHANNELS, TOY_CHANNELS, stride=2),
    ))


BACKBONES: dict[str, _BackboneEntry] = {
    # stem + layer1-2 | layer3-4 | head
    "resnet50": _BackboneEntry(_resnet50, 2048, (0, 0, 0, 0, 0, 0, 1, 1)),
    # one block per group; the head joins block2 in the top group
    "toy": _BackboneEntry(_toy, TOY_CHANNELS, (0, 1, 2)),
}


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_backbone_weights(backbone: nn.Sequential, spec: BackboneSpec) -> None:
    path = Path(spec.pretrained_weights)
    if not path.is_file():
        raise WeightsLoadError(f"pretrained weights not found: {path}")
    if spec.weights_sha256 and file_sha256(path) != spec.weights_sha256.lower():
        raise WeightsLoadError(f"{path}: sha256 does not match the configured weights_sha256")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for bad files
        raise WeightsLoadError(f"{path}: cannot read weights ({exc})") from None
    if isinstance(state, dict) and "state_dict" in state and isinstance(state["state_dict"], dict):
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise WeightsLoadError(f"{path}: expected a state dict")
    # drop the original classifier
    state = {k: v for k, v in state.items() if not k.startswith("fc.")}
    try:
        backbone.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise WeightsLoadError(f"{path}: weights do not fit backbone {spec.name!r}: {exc}") from None


# --------------------------------------------------------------------------- head


class AdaptiveConcatPool2d(nn.Module):
    """Global max pool and global average pool, concatenated on channels (max first)."""

    def __init__(self):
        super().__init__()
        self.max = nn.AdaptiveMaxPool2d(1)
        self.avg = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.cat([self.max(x), self.avg(x)], dim=1)


def build_head(in_channels: int, spec: HeadSpec) -> nn.Sequential:
    h1, h2 = spec.hidden_widths
    p0, p1, p2 = spec.dropout_ps
    width = 2 * in_channels
    head = nn.Sequential(OrderedDict(
        pool=AdaptiveConcatPool2d(),
        flatten=nn.Flatten(),
        bn0=nn.BatchNorm1d(width),
        drop0=nn.Dropout(p0),
        fc1=nn.Linear(width, h1),
        act1=nn.ReLU(inplace=True),
        bn1=nn.BatchNorm1d(h1),
        drop1=nn.Dropout(p1),
        fc2=nn.Linear(h1, h2),
        act2=nn.ReLU(inplace=True),
        bn2=nn.BatchNorm1d(h2),
        drop2=nn.Dropout(p2),
        out=nn.Linear(h2, spec.n_outputs),
    ))
    for m in head.modules():
        if isinstance(m, nn.Linear):
            nn.init.kaiming_uniform_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm1d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return head


def head_input_width(head: nn.Sequential) -> int:
    return head.bn0.num_features


# --------------------------------------------------------------------------- assembly


class ModelAssembly(nn.Module):
    def __init__(self, backbone: nn.Sequential, head: nn.Sequential, backbone_spec: BackboneSpec,
                 head_spec: HeadSpec, child_groups: tuple[int, ...]):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.backbone_spec = backbone_spec
        self.head_spec = head_spec
        self._child_groups = child_groups
        self.frozen = [False] * N_GROUPS

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def group_modules(self) -> list[list[nn.Module]]:
        groups: list[list[nn.Module]] = [[] for _ in range(N_GROUPS)]
        for g, child in zip(self._child_groups, self.backbone.children()):
            groups[g].append(child)
        groups[N_GROUPS - 1].append(self.head)
        return groups

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen groups also hold their batch-norm running statistics fixed
        for g, mods in enumerate(self.group_modules()):
            if self.frozen[g]:
                for m in mods:
                    m.eval()
        return self

    def group_checksum(self, group: int) -> str:
        """sha256 over every parameter and buffer (incl. BN statistics) in a group."""
        h = hashlib.sha256()
        for m in self.group_modules()[group]:
            for name, t in sorted(m.state_dict(keep_vars=False).items()):
                h.update(name.encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_model(backbone: BackboneSpec = BackboneSpec(), head: HeadSpec = HeadSpec(), seed: int = 0,
                load_pretrained: bool = True) -> ModelAssembly:
    """Assemble backbone (original classifier removed) and a freshly initialized head.

    ``load_pretrained=False`` skips reading the weight file; used when the
    parameters are about to be overwritten from a checkpoint.
    """
    try:
        entry = BACKBONES[backbone.name]
    except KeyError:
        raise ConfigError(f"unsupported backbone {backbone.name!r}; known: {sorted(BACKBONES)}") from None
    if backbone.feature_channels != entry.feature_channels:
        raise AssemblyError(
            f"backbone {backbone.name!r} outputs {entry.feature_channels} channels, "
            f"spec declares {backbone.feature_channels}"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed(seed, "init"))
        net = entry.factory()
        head_net = build_head(entry.feature_channels, head)
    if len(list(net.children())) != len(entry.child_groups):
        raise AssemblyError(f"split table for {backbone.name!r} does not match its children")
    if load_pretrained:
        if backbone.pretrained_weights:
            _load_backbone_weights(net, backbone)
        else:
            log.warning("no pretrained weights configured for %s; backbone is randomly initialized", backbone.name)
    if head_input_width(head_net) != 2 * entry.feature_channels:
        raise AssemblyError("head input width does not match concat-pooled backbone features")
    return ModelAssembly(net, head_net, backbone, head, entry.child_groups)


def split_layer_groups(model: ModelAssembly) -> list[list[nn.Parameter]]:
    """Three disjoint, exhaustive parameter groups ordered bottom to top."""
    return [[p for m in mods for p in m.parameters()] for mods in model.group_modules()]


def set_frozen(model: ModelAssembly, group_indices: Iterable[int], frozen: bool) -> None:
    indices = set(group_indices)
    if not indices <= set(range(N_GROUPS)):
        raise ValueError(f"group indices must be a subset of {{0, 1, 2}}, got {sorted(indices)}")
    groups = split_layer_groups(model)
    for g in indices:
        model.frozen[g] = frozen
        for p in groups[g]:
            p.requires_grad_(not frozen)
    # re-apply the BN mode rule for the current train/eval state
    model.train(model.training)


def forward(model: ModelAssembly, batch: ImageTensor, side: int = IMAGE_SIZE) -> torch.Tensor:
    if not batch.normalized:
        raise ContractViolation("forward expects normalized images")
    if batch.size != (side, side):
        raise ContractViolation(f"forward expects {side}x{side} images, got {batch.size}")
    data = batch.data if batch.data.ndim == 4 else batch.data[None]
    return model(torch.from_numpy(np.ascontiguousarray(data)))


def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax over the last axis, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
