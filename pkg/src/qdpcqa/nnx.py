"""Differentiable substrate: staged feature extractor, heads, gradient reversal,
finite-difference gradient checking and checkpoint I/O.

Autodiff is delegated to torch; every module here works in float64 for
verification and float32 for training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
MIN_INPUT_SIZE = 32

Tap = Callable[[torch.Tensor], torch.Tensor]


def _he_uniform_(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class StagedBackbone(nn.Module):
    """Four conv stages, each halving the spatial size.

    Stage k is ``conv3x3(stride 2) -> BatchNorm -> ReLU``; the feature after stage k is
    exposed so callers can rewrite it before stage k+1 consumes it.
    """

    n_stages = 4

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (16, 32, 64, 128),
                 batch_norm: bool = True):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) != self.n_stages:
            raise ValueError(f"expected {self.n_stages} stage widths, got {len(widths)}")
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError(f"stage widths must be non-decreasing: {widths}")
        self.widths = widths
        chans = (in_channels,) + widths
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[k], chans[k + 1], 3, stride=2, padding=1, bias=not batch_norm),
                nn.BatchNorm2d(chans[k + 1]) if batch_norm else nn.Identity(),
                nn.ReLU(),
            )
            for k in range(self.n_stages)
        )
        _he_uniform_(self)

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages:
            x = stage(x)
        return x.mean(dim=(-2, -1))


class PredictorHead(nn.Module):
    """Two affine layers with a ReLU between them, squashed by a sigmoid."""

    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        _he_uniform_(self)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(F.relu(self.fc1(f)))).squeeze(-1)


class DiscriminatorHead(nn.Module):
    """Domain classifier: two affine+ReLU layers, then affine+sigmoid.

    Output is the probability that a feature came from the target domain.
    """

    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)
        _he_uniform_(self)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.fc2(F.relu(self.fc1(f))))
        return torch.sigmoid(self.fc3(h)).squeeze(-1)


def zero_parameters_(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


class QualityModel(nn.Module):
    """Backbone plus predictor and discriminator heads."""

    def __init__(
        self,
        in_channels: int = 3,
        widths: Sequence[int] = (16, 32, 64, 128),
        predictor_hidden: int = 64,
        discriminator_hidden: int = 64,
        batch_norm: bool = True,
    ):
        super().__init__()
        self.backbone = StagedBackbone(in_channels, widths, batch_norm)
        self.predictor = PredictorHead(self.backbone.out_dim, predictor_hidden)
        self.discriminator = DiscriminatorHead(self.backbone.out_dim, discriminator_hidden)

    def extractor_parameters(self):
        return self.backbone.parameters()


@dataclass
class StageOutputs:
    stages: list[torch.Tensor]
    pooled: torch.Tensor


def forward_stages(
    backbone: StagedBackbone,
    x: torch.Tensor,
    taps: Optional[Mapping[int, Tap] | Sequence[Optional[Tap]]] = None,
    check_finite: bool = True,
) -> StageOutputs:
    """Run the backbone stage by stage, applying ``taps[k]`` after stage k.

    ``taps`` is either a mapping keyed by stage id (1..4) or a length-4
    sequence; missing entries mean identity.  The returned stage list holds
    the post-tap features, and ``pooled`` is their global average.
    """
    if x.shape[-1] < MIN_INPUT_SIZE or x.shape[-2] < MIN_INPUT_SIZE:
        raise ValueError(f"input spatial size {tuple(x.shape[-2:])} below {MIN_INPUT_SIZE}")
    if taps is None:
        taps = {}
    elif not isinstance(taps, Mapping):
        taps = {k + 1: t for k, t in enumerate(taps) if t is not None}

    outputs = []
    h = x
    for k, stage in enumerate(backbone.stages, start=1):
        h = stage(h)
        tap = taps.get(k)
        if tap is not None:
            h = tap(h)
        if check_finite and not torch.isfinite(h).all():
            raise FloatingPointError(f"non-finite activation at stage {k}")
        outputs.append(h)
    return StageOutputs(outputs, h.mean(dim=(-2, -1)))


def predict(head: PredictorHead, f: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(f).all():
        raise FloatingPointError("non-finite feature passed to predictor")
    return head(f)


def discriminate(head: DiscriminatorHead, f: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(f).all():
        raise FloatingPointError("non-finite feature passed to discriminator")
    return head(f)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, f, scale):
        ctx.scale = scale
        return f.view_as(f)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output * (-ctx.scale), None


def reverse_gradient(f: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-scale``."""
    if scale < 0:
        raise ValueError(f"reversal scale must be non-negative, got {scale}")
    return _GradReverse.apply(f, float(scale))


def grl_ramp(progress: float, gamma: float = 10.0) -> float:
    """Standard DANN schedule 2/(1+exp(-gamma p)) - 1 for p in [0, 1]."""
    return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    The relative error is ``max|g_ad - g_fd| / max(max|g_ad|, max|g_fd|)``
    taken over all parameters jointly, so entries with tiny gradients do not
    dominate through cancellation noise.
    """
    params = list(params)
    with torch.no_grad():
        first = float(loss_fn())
        second = float(loss_fn())
    if first != second:
        raise ValueError("loss_fn is not deterministic; gradient check is invalid")

    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]

    numeric = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            numeric.append(g)

    abs_err = max(float((a - n).abs().max()) for a, n in zip(analytic, numeric))
    scale = max(max(float(a.abs().max()) for a in analytic), max(float(n.abs().max()) for n in numeric))
    rel_err = abs_err / scale if scale > 0 else abs_err
    return GradCheckReport(rel_err, abs_err, tolerance)


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    """Write named tensors with explicit shape headers; exact round trip."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "shapes": {k: list(v.shape) for k, v in tensors.items()},
        "tensors": {k: v.detach().cpu().clone() for k, v in tensors.items()},
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    tensors = payload["tensors"]
    for name, shape in payload["shapes"].items():
        if list(tensors[name].shape) != shape:
            raise ValueError(f"shape header mismatch for {name}: {shape} vs {list(tensors[name].shape)}")
    return tensors, payload["meta"]
