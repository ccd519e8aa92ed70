"""Quality-guided style mixup, quantile stratification with stage routing,
and unlabeled target-side style mixup."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .nnx import StagedBackbone, StageOutputs, forward_stages

STD_EPS = 1e-6
STAGE_POLICIES = ("multilayer", "stage1", "stage4", "stage23")


@dataclass
class StyleStats:
    """Per-channel mean and population std; leading dims are batch dims."""

    mean: torch.Tensor
    std: torch.Tensor

    def __getitem__(self, idx) -> "StyleStats":
        return StyleStats(self.mean[idx], self.std[idx])


def _safe_sqrt(v: torch.Tensor) -> torch.Tensor:
    # exact zero for constant channels, and a zero (not NaN) gradient there
    pos = v > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, v, torch.ones_like(v))), torch.zeros_like(v))


def channel_stats(f: torch.Tensor) -> StyleStats:
    """Mean and std over the last two (spatial) axes, dividing by H*W."""
    if f.shape[-1] * f.shape[-2] < 1:
        raise ValueError("feature map has no spatial extent")
    mean = f.mean(dim=(-2, -1))
    var = ((f - mean[..., None, None]) ** 2).mean(dim=(-2, -1))
    return StyleStats(mean, _safe_sqrt(var))


def partner_weights(i: int, labels, tau: float) -> np.ndarray:
    """Normalized Gaussian-kernel pairing probabilities for anchor ``i``.

    Entry ``i`` is zero; the anchor never pairs with itself.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.size < 2:
        raise ValueError("need at least two samples to pick a partner")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logw = -((y - y[i]) ** 2) / (2.0 * tau * tau)
    logw[i] = -np.inf
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def select_partner(i: int, labels, tau: float, rng: np.random.Generator) -> int:
    p = partner_weights(i, labels, tau)
    return int(rng.choice(p.size, p=p))


def select_uniform_partner(i: int, n: int, rng: np.random.Generator) -> int:
    if n < 2:
        raise ValueError("need at least two samples to pick a partner")
    j = int(rng.integers(n - 1))
    return j + 1 if j >= i else j


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        raise ValueError(f"Beta parameter must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def mix_styles(f_anchor: torch.Tensor, stats_partner: StyleStats, lam, y_anchor=None, y_partner=None,
               eps: float = STD_EPS):
    """Re-normalize ``f_anchor`` to the lambda-blend of its own and the
    partner's channel statistics.

    Works on a single C x H x W map or a batch N x C x H x W; for a batch,
    ``lam`` may be a length-N vector.  Returns ``(f_mix, y_mix)``; ``y_mix`` is
    None when no labels are given.
    """
    own = channel_stats(f_anchor)
    if own.mean.shape[-1] != stats_partner.mean.shape[-1]:
        raise ValueError(
            f"channel mismatch: anchor has {own.mean.shape[-1]}, partner {stats_partner.mean.shape[-1]}"
        )
    lam_t = torch.as_tensor(lam, dtype=f_anchor.dtype)
    lam_c = lam_t[..., None] if lam_t.ndim else lam_t
    mean_mix = lam_c * own.mean + (1 - lam_c) * stats_partner.mean
    std_mix = lam_c * own.std + (1 - lam_c) * stats_partner.std
    content = (f_anchor - own.mean[..., None, None]) / (own.std[..., None, None] + eps)
    f_mix = std_mix[..., None, None] * content + mean_mix[..., None, None]
    y_mix = None
    if y_anchor is not None:
        y_mix = lam_t * y_anchor + (1 - lam_t) * y_partner
    return f_mix, y_mix


class QualityStratum(enum.Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


@dataclass(frozen=True)
class Stratifier:
    q33: float
    q67: float

    def __call__(self, y: float) -> QualityStratum:
        return stratify(y, self.q33, self.q67)


def fit_stratifier(labels) -> Stratifier:
    y = np.asarray(labels, dtype=np.float64).ravel()
    if y.size < 3:
        raise ValueError(f"need at least 3 labels to fit quantiles, got {y.size}")
    q33, q67 = np.quantile(y, [0.33, 0.67], method="linear")
    return Stratifier(float(q33), float(q67))


def stratify(y: float, q33: float, q67: float) -> QualityStratum:
    if y >= q67:
        return QualityStratum.HIGH
    if y >= q33:
        return QualityStratum.MEDIUM
    return QualityStratum.LOW


def route_stage(stratum: QualityStratum, rng: np.random.Generator) -> int:
    """High -> stage 1, Low -> stage 4, Medium -> stage 2 or 3 by coin flip."""
    if stratum is QualityStratum.HIGH:
        return 1
    if stratum is QualityStratum.LOW:
        return 4
    return 2 + int(rng.integers(2))


@dataclass
class MixEvent:
    anchor: int
    partner: int
    lam: float
    stage: int
    y_mix: Optional[float] = None


def plan_source_mix(
    labels,
    stratifier: Optional[Stratifier],
    rng: np.random.Generator,
    alpha: float = 1.0,
    tau: float = 5e-2,
    pairing: str = "quality",
    stage_policy: str = "multilayer",
) -> list[MixEvent]:
    """Draw partner, lambda and stage for every anchor in a source batch.

    ``pairing`` is ``"quality"`` (Gaussian kernel on labels) or ``"uniform"``;
    ``stage_policy`` is one of ``STAGE_POLICIES``.  The draw order per anchor
    is partner, lambda, stage.
    """
    y = np.asarray(labels, dtype=np.float64)
    n = y.size
    if n < 2:
        raise ValueError("source batch needs at least two samples to mix")
    events = []
    for i in range(n):
        if pairing == "quality":
            j = select_partner(i, y, tau, rng)
        elif pairing == "uniform":
            j = select_uniform_partner(i, n, rng)
        else:
            raise ValueError(f"unknown pairing {pairing!r}")
        lam = sample_lambda(alpha, rng)
        if stage_policy == "multilayer":
            if stratifier is None:
                raise ValueError("multilayer routing needs a fitted stratifier")
            stage = route_stage(stratifier(y[i]), rng)
        elif stage_policy == "stage1":
            stage = 1
        elif stage_policy == "stage4":
            stage = 4
        elif stage_policy == "stage23":
            stage = 2 + int(rng.integers(2))
        else:
            raise ValueError(f"unknown stage policy {stage_policy!r}")
        events.append(MixEvent(i, j, lam, stage, lam * y[i] + (1 - lam) * y[j]))
    return events


@dataclass
class SourceMixResult(StageOutputs):
    labels: torch.Tensor = None
    events: list = None


def apply_source_qsm(
    backbone: StagedBackbone,
    x: torch.Tensor,
    labels: torch.Tensor,
    clean: StageOutputs,
    events: Sequence[MixEvent],
) -> SourceMixResult:
    """Forward ``x`` with each anchor's features re-styled at its routed stage.

    Partner statistics come from ``clean`` (the un-mixed forward pass of the
    same batch), so gradients reach both the anchor and the partner.
    """
    by_stage: dict[int, list[MixEvent]] = {}
    for ev in events:
        by_stage.setdefault(ev.stage, []).append(ev)

    def make_tap(stage: int, evs: list[MixEvent]):
        anchors = torch.tensor([e.anchor for e in evs])
        partners = torch.tensor([e.partner for e in evs])
        lam = torch.tensor([e.lam for e in evs], dtype=x.dtype)

        def tap(f: torch.Tensor) -> torch.Tensor:
            partner_stats = channel_stats(clean.stages[stage - 1][partners])
            mixed, _ = mix_styles(f[anchors], partner_stats, lam)
            out = f.clone()
            out[anchors] = mixed
            return out

        return tap

    taps = {k: make_tap(k, evs) for k, evs in by_stage.items()}
    out = forward_stages(backbone, x, taps)

    y_mix = labels.clone()
    if events:
        anchors = torch.tensor([e.anchor for e in events])
        partners = torch.tensor([e.partner for e in events])
        lam = torch.tensor([e.lam for e in events], dtype=labels.dtype)
        y_mix[anchors] = lam * labels[anchors] + (1 - lam) * labels[partners]
    return SourceMixResult(out.stages, out.pooled, y_mix, list(events))


def plan_target_mix(n: int, rng: np.random.Generator, alpha: float = 1.0) -> list[MixEvent]:
    if n < 2:
        return []
    events = []
    for i in range(n):
        j = select_uniform_partner(i, n, rng)
        events.append(MixEvent(i, j, sample_lambda(alpha, rng), 4))
    return events


def apply_target_sm(features: torch.Tensor, events: Sequence[MixEvent]) -> torch.Tensor:
    """Style-mix final-stage target features; no labels involved.

    With no events (batch of one) the input passes through unchanged.
    """
    if not events:
        return features
    anchors = torch.tensor([e.anchor for e in events])
    partners = torch.tensor([e.partner for e in events])
    lam = torch.tensor([e.lam for e in events], dtype=features.dtype)
    mixed, _ = mix_styles(features[anchors], channel_stats(features[partners]), lam)
    out = features.clone()
    out[anchors] = mixed
    return out


MIX_LOG_COLUMNS = ("iteration", "anchor", "partner", "lam", "stage", "y_mix")


def write_mix_log(path, rows: Iterable[tuple[int, MixEvent]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MIX_LOG_COLUMNS)
        for it, ev in rows:
            w.writerow([it, ev.anchor, ev.partner, repr(ev.lam), ev.stage,
                        "" if ev.y_mix is None else repr(float(ev.y_mix))])
