"""Classifier, appearance adapter and patch discriminator.

All three networks take and return NCHW tensors. Channel counts follow the
full-size layer tables and are scaled by a width multiplier for small runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

ENCODER_STRIDE = 32
ADAPTER_STRIDE = 4
DISC_RECEPTIVE_FIELD = 70
DISC_STRIDE = 8
LEAKY_SLOPE = 0.1
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
SN_WARMUP_ITERATIONS = 15


def scaled(channels: int, multiplier: float, minimum: int = 8) -> int:
    return max(minimum, int(round(channels * multiplier)))


@dataclass
class ClassifierSpec:
    input_channels: int
    class_count: int
    width_multiplier: float = 1.0
    middle_blocks: int = 10
    pretrained_backbone: str | None = None

    def __post_init__(self):
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ValueError("width_multiplier must be in (0, 1]")
        if self.middle_blocks < 1:
            raise ValueError("middle_blocks must be >= 1")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")


@dataclass
class AdapterSpec:
    input_channels: int
    residual_blocks: int = 16
    base_width: int = 256
    bottleneck_width: int = 64


@dataclass
class DiscriminatorSpec:
    input_channels: int
    width: int = 64


def he_init(module: nn.Module, generator: torch.Generator) -> None:
    """He-normal initialisation of all conv weights, zero biases, unit BN."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            weight = m.weight.data if not hasattr(m, "parametrizations") else m.parametrizations.weight.original.data
            fan_in = weight[0].numel() if isinstance(m, nn.Conv2d) else weight.shape[0] * weight[0, 0].numel()
            std = math.sqrt(2.0 / fan_in)
            weight.copy_(torch.randn(weight.shape, generator=generator) * std)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()


def _bn(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


class SeparableConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.depthwise = nn.Conv2d(in_ch, in_ch, 3, padding=1, groups=in_ch, bias=False)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class XceptionBlock(nn.Module):
    """Residual block of separable convolutions.

    Strided blocks use two separable convolutions, max-pooling and a strided
    1x1 shortcut; unstrided blocks use three separable convolutions and an
    identity shortcut.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, start_with_relu: bool = True):
        super().__init__()
        layers: list[nn.Module] = []
        reps = 2 if stride > 1 else 3
        ch = in_ch
        for i in range(reps):
            if i > 0 or start_with_relu:
                layers.append(nn.ReLU(inplace=False))
            layers.append(SeparableConv2d(ch, out_ch))
            layers.append(_bn(out_ch))
            ch = out_ch
        if stride > 1:
            layers.append(nn.MaxPool2d(3, stride=stride, padding=1))
        self.body = nn.Sequential(*layers)
        if stride > 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _bn(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        return self.body(x) + self.shortcut(x)


def _conv_relu(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=True))


class Classifier(nn.Module):
    """UNet-style encoder-decoder returning per-pixel class probabilities.

    The encoder halves the resolution five times (stem, three strided
    Xception blocks, and the exit block); the decoder upsamples with nearest
    neighbour interpolation and concatenates encoder features at 1/16, 1/8,
    1/4 and 1/2 resolution.
    """

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        w = lambda c: scaled(c, spec.width_multiplier)  # noqa: E731
        n = spec.input_channels

        self.stem = nn.Sequential(
            nn.Conv2d(n, w(32), 3, stride=2, padding=1, bias=False), _bn(w(32)), nn.ReLU(inplace=True)
        )
        self.conv2 = nn.Sequential(nn.Conv2d(w(32), w(64), 3, padding=1, bias=False), _bn(w(64)), nn.ReLU(inplace=True))
        self.block1 = XceptionBlock(w(64), w(128), stride=2, start_with_relu=False)
        self.block2 = XceptionBlock(w(128), w(256), stride=2)
        middle = [XceptionBlock(w(256), w(728), stride=2)]
        middle += [XceptionBlock(w(728), w(728)) for _ in range(spec.middle_blocks - 1)]
        self.middle = nn.Sequential(*middle)
        self.exit = nn.Sequential(
            XceptionBlock(w(728), w(1024), stride=2),
            SeparableConv2d(w(1024), w(1536)),
            _bn(w(1536)),
            nn.ReLU(inplace=True),
            SeparableConv2d(w(1536), w(2048)),
            _bn(w(2048)),
        )

        self.dec16 = nn.Sequential(_conv_relu(w(2048) + w(728), w(256)), _conv_relu(w(256), w(256)))
        self.dec8 = nn.Sequential(_conv_relu(w(256) + w(256), w(128)), _conv_relu(w(128), w(128)))
        self.dec4 = nn.Sequential(_conv_relu(w(128) + w(128), w(64)), _conv_relu(w(64), w(64)))
        self.dec2 = nn.Sequential(_conv_relu(w(64) + w(64), w(32)), _conv_relu(w(32), w(32)))
        self.dec1 = nn.Sequential(_conv_relu(w(32), w(16)), _conv_relu(w(16), w(16)))
        self.head = nn.Conv2d(w(16), spec.class_count, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        h, wd = x.shape[-2:]
        if h % ENCODER_STRIDE or wd % ENCODER_STRIDE:
            raise ValueError(f"input size {h}x{wd} is not divisible by {ENCODER_STRIDE}")
        s2 = self.conv2(self.stem(x))
        s4 = self.block1(s2)
        s8 = self.block2(s4)
        s16 = self.middle(s8)
        s32 = self.exit(s16)
        up = lambda t: F.interpolate(t, scale_factor=2, mode="nearest")  # noqa: E731
        d = self.dec16(torch.cat([up(s32), s16], 1))
        d = self.dec8(torch.cat([up(d), s8], 1))
        d = self.dec4(torch.cat([up(d), s4], 1))
        d = self.dec2(torch.cat([up(d), s2], 1))
        d = self.dec1(up(d))
        return self.head(d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, bottleneck: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, bottleneck, 3, padding=1)
        self.conv2 = nn.Conv2d(bottleneck, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Adapter(nn.Module):
    """Residual image-to-image network with a linear output layer."""

    def __init__(self, spec: AdapterSpec):
        super().__init__()
        self.spec = spec
        n, c = spec.input_channels, spec.base_width
        self.stem = nn.Sequential(nn.Conv2d(n, c, 6, stride=4, padding=1), nn.ReLU(inplace=True), _bn(c))
        self.blocks = nn.Sequential(*[ResidualBlock(c, spec.bottleneck_width) for _ in range(spec.residual_blocks)])
        self.up1 = nn.Sequential(nn.ConvTranspose2d(c, c // 2, 4, stride=2, padding=1), _bn(c // 2), nn.ReLU(inplace=True))
        self.up2 = nn.ConvTranspose2d(c // 2, n, 4, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % ADAPTER_STRIDE or w % ADAPTER_STRIDE:
            raise ValueError(f"input size {h}x{w} is not divisible by {ADAPTER_STRIDE}")
        return self.up2(self.up1(self.blocks(self.stem(x))))


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, n_iter: int = 1, eps: float = 1e-12
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    ``weight`` is viewed as (out_filters, rest). ``u`` is the running left
    singular vector estimate. Returns ``(normalized, u, v)``; the updated
    vectors are detached so callers can store them between calls. A zero
    matrix is returned unchanged.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        v = None
        for _ in range(max(1, n_iter)):
            v = F.normalize(mat.t() @ u, dim=0, eps=eps)
            u = F.normalize(mat @ v, dim=0, eps=eps)
    sigma = torch.dot(u, mat @ v)
    if sigma.abs().item() <= eps:
        return weight, u, v
    return weight / sigma, u, v


class SpectralNorm(nn.Module):
    """Weight parametrization with persistent singular-vector estimates."""

    def __init__(self, weight: torch.Tensor, n_iter: int = 1):
        super().__init__()
        rows = weight.shape[0]
        u = torch.randn(rows)
        self.register_buffer("u", F.normalize(u, dim=0))
        self.n_iter = n_iter

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        n_iter = self.n_iter if self.training else 0
        if n_iter == 0:
            mat = weight.reshape(weight.shape[0], -1)
            with torch.no_grad():
                v = F.normalize(mat.t() @ self.u, dim=0, eps=1e-12)
            sigma = torch.dot(self.u, mat @ v)
            return weight if sigma.abs().item() <= 1e-12 else weight / sigma
        normalized, u, _ = spectral_normalize(weight, self.u, n_iter)
        self.u.copy_(u)
        return normalized


def add_spectral_norm(conv: nn.Conv2d) -> nn.Conv2d:
    torch.nn.utils.parametrize.register_parametrization(conv, "weight", SpectralNorm(conv.weight))
    return conv


class Discriminator(nn.Module):
    """Patch discriminator; each output cell sees a 70x70 input window."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        n, c = spec.input_channels, spec.width
        self.layers = nn.Sequential(
            nn.Conv2d(n, c, 4, stride=2),
            nn.LeakyReLU(LEAKY_SLOPE),
            add_spectral_norm(nn.Conv2d(c, 2 * c, 4, stride=2)),
            nn.LeakyReLU(LEAKY_SLOPE),
            add_spectral_norm(nn.Conv2d(2 * c, 4 * c, 4, stride=2)),
            nn.LeakyReLU(LEAKY_SLOPE),
            add_spectral_norm(nn.Conv2d(4 * c, 8 * c, 4, stride=1)),
            nn.LeakyReLU(LEAKY_SLOPE),
            add_spectral_norm(nn.Conv2d(8 * c, 1, 4, stride=1)),
        )

    def spectral_layers(self) -> list[nn.Conv2d]:
        return [m for m in self.layers if isinstance(m, nn.Conv2d) and hasattr(m, "parametrizations")]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h < DISC_RECEPTIVE_FIELD or w < DISC_RECEPTIVE_FIELD:
            raise ValueError(f"input {h}x{w} smaller than the {DISC_RECEPTIVE_FIELD}px receptive field")
        p = torch.sigmoid(self.layers(x))
        # float sigmoid saturates to exactly 0 or 1 for large logits
        info = torch.finfo(p.dtype)
        return p.clamp(info.tiny, 1.0 - info.eps / 2)


def disc_output_size(size: int) -> int:
    for k, s in ((4, 2), (4, 2), (4, 2), (4, 1), (4, 1)):
        size = (size - k) // s + 1
    return size


def _generator(seed: int | torch.Generator | None) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed))
    return g


def build_classifier(spec: ClassifierSpec, seed: int | torch.Generator | None = None) -> Classifier:
    g = _generator(seed)
    model = Classifier(spec)
    he_init(model, g)
    if spec.pretrained_backbone:
        load_pretrained_backbone(model, spec.pretrained_backbone)
    return model


def load_pretrained_backbone(model: Classifier, path: str) -> None:
    """Load externally supplied encoder weights.

    Tensors whose shape disagrees with the model (typically the stem when the
    input has other than three channels) are skipped and keep their random
    initialisation.
    """
    state = torch.load(path, map_location="cpu")
    own = model.state_dict()
    compatible = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    model.load_state_dict(compatible, strict=False)


def build_adapter(spec: AdapterSpec, seed: int | torch.Generator | None = None) -> Adapter:
    g = _generator(seed)
    model = Adapter(spec)
    he_init(model, g)
    return model


def build_discriminator(spec: DiscriminatorSpec, seed: int | torch.Generator | None = None) -> Discriminator:
    g = _generator(seed)
    model = Discriminator(spec)
    he_init(model, g)
    for conv in model.spectral_layers():
        sn = conv.parametrizations.weight[0]
        u = F.normalize(torch.randn(conv.out_channels, generator=g), dim=0)
        # warm start so the first forward already sees a converged estimate
        _, u, _ = spectral_normalize(conv.parametrizations.weight.original.detach(), u, SN_WARMUP_ITERATIONS)
        sn.u.copy_(u)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@dataclass
class ModelBundle:
    """Classifier, adapter and discriminator plus their optimizer states."""

    classifier: Classifier
    adapter: Adapter | None = None
    discriminator: Discriminator | None = None
    optimizer_states: dict[str, Any] = field(default_factory=dict)
    epoch: int = 0

    def state(self) -> dict[str, Any]:
        out: dict[str, Any] = {"classifier": self.classifier.state_dict(), "epoch": self.epoch}
        if self.adapter is not None:
            out["adapter"] = self.adapter.state_dict()
        if self.discriminator is not None:
            out["discriminator"] = self.discriminator.state_dict()
        out["optimizers"] = self.optimizer_states
        return out
