"""Geometric matching network: shared feature extractor, correlation layer
and a small regression head that emits the raw transform parameters.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import DEFAULT_ALPHA, ThetaVector, theta_length


class StageMismatchError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture choices.

    The defaults describe the desk-scale network: a three-block strided
    extractor (stride 8) feeding a 15x15 correlation map at 120x120.  Use
    ``extractor="resnet101"`` with ``canvas=(240, 240)`` for the backbone
    truncated after its third residual stage (stride 16, 1024 features).
    """

    kind: str = "affine"
    alpha: float = DEFAULT_ALPHA
    canvas: tuple[int, int] = (120, 120)
    extractor: str = "small"
    extractor_channels: tuple[int, ...] = (32, 64, 64)
    normalize_features: bool = True
    head_channels: tuple[int, int] = (64, 32)
    head_kernels: tuple[int, int] = (7, 5)
    head_reduce: int = 0
    pretrained: bool = False

    def __post_init__(self):
        theta_length(self.kind)
        self.canvas = tuple(int(v) for v in self.canvas)
        self.extractor_channels = tuple(self.extractor_channels)
        self.head_channels = tuple(self.head_channels)
        self.head_kernels = tuple(self.head_kernels)

    @property
    def n_out(self) -> int:
        return theta_length(self.kind)

    @property
    def stride(self) -> int:
        if self.extractor == "resnet101":
            return 16
        return 2 ** len(self.extractor_channels)

    @property
    def feature_shape(self) -> tuple[int, int]:
        s = self.stride
        return (-(-self.canvas[0] // s), -(-self.canvas[1] // s))


class SmallExtractor(nn.Module):
    """Stack of stride-2 ``conv3x3 -> BN -> ReLU`` blocks."""

    def __init__(self, channels=(32, 64, 64), in_channels: int = 3):
        super().__init__()
        layers = []
        prev = in_channels
        for ch in channels:
            layers += [
                nn.Conv2d(prev, ch, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
            ]
            prev = ch
        self.body = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x):
        return self.body(x)


class ResNetExtractor(nn.Module):
    """ResNet-101 up to and including ``layer3``; kept frozen."""

    def __init__(self, pretrained: bool = True):
        super().__init__()
        import torchvision

        weights = torchvision.models.ResNet101_Weights.DEFAULT if pretrained else None
        net = torchvision.models.resnet101(weights=weights)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3
        )
        for p in self.body.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.out_channels = 1024

    def train(self, mode: bool = True):
        super().train(mode)
        self.body.eval()
        return self

    def forward(self, x):
        return self.body((x - self.mean) / self.std)


def build_extractor(cfg: ModelConfig) -> nn.Module:
    if cfg.extractor == "small":
        return SmallExtractor(cfg.extractor_channels)
    if cfg.extractor == "resnet101":
        return ResNetExtractor(cfg.pretrained)
    raise ValueError(f"unknown extractor {cfg.extractor!r}")


def correlate(f_a: torch.Tensor, f_b: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Dense correlation map of shape ``(B, h*w, h, w)``.

    ``out[:, k, i, j] = <f_b[:, :, i, j], f_a[:, :, i_k, j_k]>`` with the
    column-major index ``k = h * j_k + i_k``.  With ``normalize`` the map is
    passed through ReLU and L2-normalized along ``k``.
    """
    if f_a.shape != f_b.shape:
        raise ValueError(f"feature maps differ in shape: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    b, d, h, w = f_a.shape
    a = f_a.transpose(2, 3).reshape(b, d, h * w)
    bb = f_b.reshape(b, d, h * w).transpose(1, 2)
    corr = torch.bmm(bb, a).reshape(b, h, w, h * w).permute(0, 3, 1, 2)
    if normalize:
        corr = F.normalize(F.relu(corr), p=2, dim=1, eps=1e-12)
    return corr


class RegressionHead(nn.Module):
    """Two ``conv -> BN -> ReLU`` blocks and a zero-initialized linear layer."""

    def __init__(self, in_channels: int, feature_shape, n_out: int, channels=(64, 32), kernels=(7, 5),
                 reduce: int = 0):
        super().__init__()
        c1, c2 = channels
        k1, k2 = kernels
        # optional 1x1 projection of the correlation vector; keeps large maps affordable
        pre = [nn.Conv2d(in_channels, reduce, 1), nn.BatchNorm2d(reduce), nn.ReLU(inplace=True)] if reduce else []
        self.conv = nn.Sequential(
            *pre,
            nn.Conv2d(reduce or in_channels, c1, k1),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, k2),
            nn.BatchNorm2d(c2),
            nn.ReLU(inplace=True),
        )
        h = feature_shape[0] - k1 - k2 + 2
        w = feature_shape[1] - k1 - k2 + 2
        if h < 1 or w < 1:
            raise ValueError(f"feature map {feature_shape} too small for kernels {kernels}")
        self.fc = nn.Linear(c2 * h * w, n_out)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, corr):
        x = self.conv(corr)
        return self.fc(x.flatten(1))


def regress_theta(corr: torch.Tensor, head: RegressionHead) -> torch.Tensor:
    return head(corr)


class MatchNet(nn.Module):
    """Maps a (moving, fixed) pair to raw parameters ``theta``.

    ``forward_calls`` counts forward passes so callers can verify that
    inference is a fixed number of network evaluations.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.extractor = build_extractor(cfg)
        h, w = cfg.feature_shape
        self.head = RegressionHead(h * w, (h, w), cfg.n_out, cfg.head_channels, cfg.head_kernels, cfg.head_reduce)
        self.forward_calls = 0

    @property
    def kind(self) -> str:
        return self.cfg.kind

    @property
    def alpha(self) -> float:
        return self.cfg.alpha

    def features(self, image: torch.Tensor) -> torch.Tensor:
        if tuple(image.shape[-2:]) != self.cfg.canvas:
            raise ValueError(f"expected a {self.cfg.canvas} canvas, got {tuple(image.shape[-2:])}")
        if image.shape[1] == 1:
            image = image.expand(-1, 3, -1, -1)
        f = self.extractor(image)
        if self.cfg.normalize_features:
            f = F.normalize(f, p=2, dim=1, eps=1e-6)
        return f

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        self.forward_calls += 1
        corr = correlate(self.features(moving), self.features(fixed))
        return regress_theta(corr, self.head)


def as_batch(image, dtype=torch.float32) -> torch.Tensor:
    """``(H, W)``/``(H, W, C)`` array or tensor to ``(1, C, H, W)``."""
    t = torch.as_tensor(np.asarray(image), dtype=dtype)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t.permute(2, 0, 1)[None]
    return t


@torch.no_grad()
def predict_theta(model: MatchNet, moving, fixed) -> ThetaVector:
    model.eval()
    dtype = next(model.parameters()).dtype
    raw = model(as_batch(moving, dtype), as_batch(fixed, dtype))[0]
    return ThetaVector(raw.double().numpy(), model.kind, model.alpha)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict = field(repr=False)
    meta: dict = field(default_factory=dict)


def save_model(model: MatchNet, path, meta: dict | None = None):
    """Atomic write of parameters, stage kind, alpha and extractor identity."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": asdict(model.cfg),
        "kind": model.kind,
        "alpha": model.alpha,
        "extractor": model.cfg.extractor,
        "state": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "meta": meta or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_model(path, kind: str | None = None) -> MatchNet:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if kind is not None and payload["kind"] != kind:
        raise StageMismatchError(f"checkpoint {path} holds a {payload['kind']} model, expected {kind}")
    cfg_dict = dict(payload["config"])
    cfg_dict["pretrained"] = False
    model = MatchNet(ModelConfig(**cfg_dict))
    model.load_state_dict(payload["state"])
    model.eval()
    return model
