"""Backbones with tap points, the projection head and a small registry.

Every backbone is wrapped as a :class:`TapNet`: a convolutional body that
produces the last-block feature maps, global average pooling to the
embedding, and one fully connected layer to the logits. Toy backbones are
always available; torchvision architectures are built on demand.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .relations import ChannelAdapter

__all__ = [
    "BackboneSpec",
    "BackboneNotFoundError",
    "PretrainedUnavailableError",
    "ModelTaps",
    "ProjectionHead",
    "TapNet",
    "REGISTRY",
    "backbone_spec",
    "build_backbone",
    "attach_adapter",
    "forward_with_taps",
    "projection_head_forward",
]


class BackboneNotFoundError(KeyError):
    pass


class PretrainedUnavailableError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    input_size: Tuple[int, int, int]  # (H, W, channels)
    class_count: int
    embedding_width: int
    last_conv_channels: int
    pretrained_source: Optional[str] = None
    projection_dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.last_conv_channels < 1 or self.embedding_width < 1:
            raise ValueError("channel and embedding widths must be positive")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ValueError(f"input_size must be three positive ints, got {self.input_size}")
        if self.projection_dim < 1:
            raise ValueError(f"projection_dim must be positive, got {self.projection_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**d)


class ModelTaps(NamedTuple):
    features: torch.Tensor  # (B, K, H_f, W_f)
    embedding: torch.Tensor  # (B, D)
    logits: torch.Tensor  # (B, C)


class ProjectionHead(nn.Module):
    """Linear -> ReLU -> Linear, hidden width 2 * out_dim."""

    def __init__(self, in_dim: int, out_dim: int = 128):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, 2 * out_dim)
        self.fc2 = nn.Linear(2 * out_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class TapNet(nn.Module):
    """Body -> global average pool -> FC, exposing all three taps."""

    def __init__(self, spec: BackboneSpec, body: nn.Module, input_norm: Optional[Tuple[tuple, tuple]] = None):
        super().__init__()
        self.spec = spec
        self.body = body
        self.fc = nn.Linear(spec.embedding_width, spec.class_count)
        self.head = ProjectionHead(spec.embedding_width, spec.projection_dim)
        self.adapter: Optional[ChannelAdapter] = None
        if input_norm is not None:
            mean, std = input_norm
            self.register_buffer("norm_mean", torch.tensor(mean).view(1, -1, 1, 1))
            self.register_buffer("norm_std", torch.tensor(std).view(1, -1, 1, 1))
        else:
            self.norm_mean = None
            self.norm_std = None

    def taps(self, images: torch.Tensor) -> ModelTaps:
        x = images
        if self.norm_mean is not None:
            x = (x - self.norm_mean) / self.norm_std
        features = self.body(x)
        embedding = features.mean(dim=(2, 3))
        return ModelTaps(features, embedding, self.fc(embedding))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.taps(images).logits


def conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=False),
    )


def _tiny_teacher(spec: BackboneSpec) -> TapNet:
    c = spec.input_size[2]
    body = nn.Sequential(conv_block(c, 16, 2), conv_block(16, 32, 2), conv_block(32, 16, 1))
    return TapNet(spec, body)


def _tiny_student(spec: BackboneSpec) -> TapNet:
    c = spec.input_size[2]
    body = nn.Sequential(conv_block(c, 8, 2), conv_block(8, 8, 2))
    return TapNet(spec, body)


_IMAGENET_NORM = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


def _torchvision_weights(name: str, source: Optional[str]):
    if source is None:
        return None
    if source != "imagenet":
        raise PretrainedUnavailableError(f"unknown pretrained source {source!r} for {name}")
    import torchvision.models as tvm

    enum = {
        "resnet18": tvm.ResNet18_Weights.IMAGENET1K_V1,
        "resnet50": tvm.ResNet50_Weights.IMAGENET1K_V1,
        "mobilenet_v2": tvm.MobileNet_V2_Weights.IMAGENET1K_V1,
    }[name]
    try:
        return enum.get_state_dict(progress=False)
    except Exception as exc:  # network, cache or hash failure
        raise PretrainedUnavailableError(
            f"pretrained weights {source!r} for {name} could not be loaded: {exc}"
        ) from exc


def _resnet(name: str) -> Callable[[BackboneSpec], TapNet]:
    def build(spec: BackboneSpec) -> TapNet:
        import torchvision.models as tvm

        net = getattr(tvm, name)(weights=None)
        state = _torchvision_weights(name, spec.pretrained_source)
        if state is not None:
            net.load_state_dict(state)
        body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )
        return TapNet(spec, body, input_norm=_IMAGENET_NORM)

    return build


def _mobilenet_v2(spec: BackboneSpec) -> TapNet:
    import torchvision.models as tvm

    net = tvm.mobilenet_v2(weights=None)
    state = _torchvision_weights("mobilenet_v2", spec.pretrained_source)
    if state is not None:
        net.load_state_dict(state)
    return TapNet(spec, net.features, input_norm=_IMAGENET_NORM)


class _Entry(NamedTuple):
    builder: Callable[[BackboneSpec], TapNet]
    channels: int
    input_size: Tuple[int, int, int]


REGISTRY: Dict[str, _Entry] = {
    "tiny-teacher": _Entry(_tiny_teacher, 16, (32, 32, 3)),
    "tiny-student": _Entry(_tiny_student, 8, (32, 32, 3)),
    "resnet18": _Entry(_resnet("resnet18"), 512, (224, 224, 3)),
    "resnet50": _Entry(_resnet("resnet50"), 2048, (224, 224, 3)),
    "mobilenet_v2": _Entry(_mobilenet_v2, 1280, (224, 224, 3)),
}


def _entry(name: str) -> _Entry:
    try:
        return REGISTRY[name]
    except KeyError:
        raise BackboneNotFoundError(
            f"unknown backbone {name!r}; registered: {', '.join(sorted(REGISTRY))}"
        ) from None


def backbone_spec(
    name: str,
    class_count: int,
    input_size: Optional[Tuple[int, int, int]] = None,
    pretrained_source: Optional[str] = None,
    projection_dim: int = 128,
) -> BackboneSpec:
    """Spec for a registered backbone with K and D filled in from the registry."""
    entry = _entry(name)
    return BackboneSpec(
        name=name,
        input_size=tuple(input_size) if input_size is not None else entry.input_size,
        class_count=class_count,
        embedding_width=entry.channels,
        last_conv_channels=entry.channels,
        pretrained_source=pretrained_source,
        projection_dim=projection_dim,
    )


def build_backbone(spec: BackboneSpec, seed: int = 0) -> TapNet:
    """Instantiate ``spec`` with parameters drawn deterministically from ``seed``.

    Raises:
        BackboneNotFoundError: unregistered name.
        PretrainedUnavailableError: ``pretrained_source`` set but not loadable.
    """
    entry = _entry(spec.name)
    if spec.last_conv_channels != entry.channels or spec.embedding_width != entry.channels:
        raise ValueError(
            f"{spec.name} has {entry.channels} final channels, spec says "
            f"K={spec.last_conv_channels}, D={spec.embedding_width}"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = entry.builder(spec)
    return model


def attach_adapter(model: TapNet, out_channels: int, seed: int = 0) -> ChannelAdapter:
    """Give ``model`` a channel adapter so its parameters train with the model."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        adapter = ChannelAdapter(model.spec.last_conv_channels, out_channels)
    model.adapter = adapter.to(next(model.parameters()).dtype)
    return model.adapter


def forward_with_taps(model: TapNet, images: torch.Tensor) -> ModelTaps:
    """All three taps from a single forward pass."""
    h, w, c = model.spec.input_size
    if images.dim() != 4 or tuple(images.shape[1:]) != (c, h, w):
        raise ValueError(
            f"{model.spec.name} expects images of shape (B, {c}, {h}, {w}), got {tuple(images.shape)}"
        )
    return model.taps(images)


def projection_head_forward(model: TapNet, embedding: torch.Tensor) -> torch.Tensor:
    if embedding.dim() != 2 or embedding.shape[1] != model.head.in_dim:
        raise ValueError(
            f"projection head expects width {model.head.in_dim}, got {tuple(embedding.shape)}"
        )
    return model.head(embedding)


def with_class_count(spec: BackboneSpec, class_count: int) -> BackboneSpec:
    return replace(spec, class_count=class_count)
