"""Two-stage adaptation loop: adversarial warm-up, then joint optimization
with stochastic style mixup and rank-weighted conditional alignment."""
from __future__ import annotations

import csv
import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from . import align, mixup
from .data import QualityDataset
from .metrics import MetricReport, evaluate
from .nnx import (
    QualityModel,
    forward_stages,
    grl_ramp,
    load_checkpoint,
    reverse_gradient,
    save_checkpoint,
)

log = logging.getLogger(__name__)

ALIGNMENTS = ("rca", "cod", "mmd", "none")
SOURCE_MIXES = ("quality", "uniform", "none")
METRIC_COLUMNS = ("iter", "phase", "L_P", "L_D", "L_R", "plcc", "srocc", "krocc", "rmse")
DIAG_COLUMNS = ("iter", "L_R", "L_D", "mean_W", "nonzero_W")


class Phase(enum.Enum):
    WARMUP = "warmup"
    JOINT = "joint"


@dataclass
class TrainConfig:
    batch_size: int = 36
    total_iters: int = 3000
    warmup_iters: int = 500
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_pred: float = 1.0
    lambda_adv: float = 1.0
    lambda_align: float = 1.0
    mix_probability: float = 0.5
    alpha: float = 1.0
    tau: float = 5e-2
    epsilon: float = 1e-3
    label_bandwidth: float = 0.1
    feature_bandwidth: Optional[float] = None
    rank_weight_scope: str = "all"
    alignment: str = "rca"
    adversarial: bool = True
    source_mix: str = "quality"
    stage_policy: str = "multilayer"
    target_mix: bool = True
    grl_scale: float = 1.0
    grl_ramp: bool = False
    hflip: bool = True
    widths: tuple = (16, 32, 64, 128)
    predictor_hidden: int = 64
    discriminator_hidden: int = 64
    batch_norm: bool = True
    dtype: str = "float32"
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ValueError("need 0 <= warmup_iters < total_iters")
        for name in ("lr", "tau", "epsilon", "alpha", "label_bandwidth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay be non-negative")
        if min(self.lambda_pred, self.lambda_adv, self.lambda_align) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.mix_probability <= 1:
            raise ValueError("mix_probability must lie in [0, 1]")
        if self.alignment not in ALIGNMENTS:
            raise ValueError(f"alignment must be one of {ALIGNMENTS}")
        if self.source_mix not in SOURCE_MIXES:
            raise ValueError(f"source_mix must be one of {SOURCE_MIXES}")
        if self.stage_policy not in mixup.STAGE_POLICIES:
            raise ValueError(f"stage_policy must be one of {mixup.STAGE_POLICIES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        align.GaussianKernelConfig(self.feature_bandwidth, self.label_bandwidth, self.rank_weight_scope)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def kernel_config(self) -> align.GaussianKernelConfig:
        scope = "none" if self.alignment == "cod" else self.rank_weight_scope
        return align.GaussianKernelConfig(self.feature_bandwidth, self.label_bandwidth, scope)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat YAML/JSON mapping of field names to values."""
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a flat key-value mapping")
        return cls.from_dict(d)


def phase(iteration: int, cfg: TrainConfig) -> Phase:
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    return Phase.WARMUP if iteration < cfg.warmup_iters else Phase.JOINT


def sgd_step(params, grads, velocities, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
    """In place: ``v <- m v + g + wd w``; ``w <- w - lr v``."""
    with torch.no_grad():
        for p, g, v in zip(params, grads, velocities):
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter of shape {tuple(p.shape)}")
            v.mul_(momentum).add_(g)
            if weight_decay:
                v.add_(p, alpha=weight_decay)
            p.sub_(lr * v)


def make_pseudo_labels(model: QualityModel, pooled_t: torch.Tensor) -> torch.Tensor:
    """Fresh, detached predictor outputs on the current target batch."""
    with torch.no_grad():
        return model.predictor(pooled_t.detach())


def alignment_labels(model: QualityModel, pooled_s: torch.Tensor, pooled_t: torch.Tensor):
    """Detached (target pseudo-labels, source predictions) for the rank weights."""
    pseudo = make_pseudo_labels(model, pooled_t)
    with torch.no_grad():
        pred_s = model.predictor(pooled_s.detach())
    return pseudo, pred_s


@dataclass
class StepLosses:
    total: torch.Tensor
    l_p: float
    l_d: float
    l_r: float
    mixed: bool
    mean_w: float = float("nan")
    nonzero_w: float = float("nan")
    events: list = field(default_factory=list)


def composite_loss(
    model: QualityModel,
    x_s: torch.Tensor,
    y_s: torch.Tensor,
    x_t: torch.Tensor,
    cfg: TrainConfig,
    current_phase: Phase,
    mixed: bool,
    stratifier: Optional[mixup.Stratifier],
    rng: np.random.Generator,
    grl_scale: float = 1.0,
) -> StepLosses:
    """Mixed-sample or original-sample objective for one batch.

    The alignment term always sees the un-mixed pooled features and is only
    evaluated in the joint phase with a positive weight.
    """
    bb = model.backbone
    use_adv = cfg.adversarial and cfg.lambda_adv > 0
    use_align = current_phase is Phase.JOINT and cfg.alignment != "none" and cfg.lambda_align > 0
    clean_s = forward_stages(bb, x_s)
    # target batch is only forwarded when some term consumes it
    clean_t = forward_stages(bb, x_t) if (use_adv or use_align) else None

    events = []
    f_s, target_y = clean_s.pooled, y_s
    f_t = None if clean_t is None else clean_t.pooled
    if mixed:
        if cfg.source_mix != "none":
            events = mixup.plan_source_mix(
                y_s.detach().cpu().numpy(), stratifier, rng, cfg.alpha, cfg.tau,
                pairing=cfg.source_mix, stage_policy=cfg.stage_policy,
            )
            src = mixup.apply_source_qsm(bb, x_s, y_s, clean_s, events)
            f_s, target_y = src.pooled, src.labels
        if cfg.target_mix:
            t_events = mixup.plan_target_mix(len(x_t), rng, cfg.alpha)
            if clean_t is not None:
                f_t = mixup.apply_target_sm(clean_t.stages[-1], t_events).mean(dim=(-2, -1))

    pred_s = model.predictor(f_s)
    l_p = ((pred_s - target_y) ** 2).mean()
    total = cfg.lambda_pred * l_p

    l_d = torch.zeros((), dtype=l_p.dtype)
    if use_adv:
        d_s = model.discriminator(reverse_gradient(f_s, grl_scale))
        d_t = model.discriminator(reverse_gradient(f_t, grl_scale))
        l_d = align.dann_loss(d_s, d_t)
        total = total + cfg.lambda_adv * l_d

    out = StepLosses(total, l_p.item(), l_d.item(), float("nan"), mixed, events=events)
    if use_align:
        if cfg.alignment == "mmd":
            l_r = align.mmd_loss(clean_s.pooled, clean_t.pooled, cfg.feature_bandwidth)
        else:
            pseudo, orig_pred_s = alignment_labels(model, clean_s.pooled, clean_t.pooled)
            batch = align.RcaBatch(clean_s.pooled, clean_t.pooled, y_s, pseudo, orig_pred_s, pseudo, cfg.epsilon)
            terms = align.rca_terms(batch, cfg.kernel_config())
            l_r = terms.loss
            out.mean_w, out.nonzero_w = terms.mean_weight, terms.nonzero_fraction
        out.total = out.total + cfg.lambda_align * l_r
        out.l_r = l_r.item()
    return out


@dataclass
class TrainState:
    """Everything needed to resume a run bit-exactly."""

    cfg: TrainConfig
    model: QualityModel
    velocities: list
    rng: np.random.Generator
    iteration: int = 0
    stratifier: Optional[mixup.Stratifier] = None
    loss_log: list = field(default_factory=list)  # (iter, phase, L_P, L_D, L_R, mixed)
    metric_log: list = field(default_factory=list)
    diag_log: list = field(default_factory=list)
    running: dict = field(default_factory=lambda: {"L_P": 0.0, "L_D": 0.0, "L_R": 0.0})
    label_range: Optional[tuple] = None  # raw source label range, for de-normalizing predictions

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        torch.manual_seed(cfg.seed)
        model = QualityModel(3, cfg.widths, cfg.predictor_hidden, cfg.discriminator_hidden, cfg.batch_norm)
        return cls.from_model(cfg, model)

    @classmethod
    def from_model(cls, cfg: TrainConfig, model: QualityModel) -> "TrainState":
        model = model.to(cfg.torch_dtype)
        vel = [torch.zeros_like(p) for p in model.parameters()]
        return cls(cfg, model, vel, np.random.default_rng(cfg.seed))

    def save(self, path) -> None:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"velocity.{i}": v for i, v in enumerate(self.velocities)})
        meta = {
            "config": self.cfg.to_dict(),
            "in_channels": self.model.backbone.stages[0][0].in_channels,
            "iteration": self.iteration,
            "rng_state": self.rng.bit_generator.state,
            "stratifier": None if self.stratifier is None else [self.stratifier.q33, self.stratifier.q67],
            "loss_log": self.loss_log,
            "metric_log": self.metric_log,
            "diag_log": self.diag_log,
            "running": self.running,
            "label_range": None if self.label_range is None else list(self.label_range),
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        tensors, meta = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta["config"])
        model = QualityModel(meta.get("in_channels", 3), cfg.widths, cfg.predictor_hidden,
                             cfg.discriminator_hidden, cfg.batch_norm).to(cfg.torch_dtype)
        model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
        n_vel = sum(1 for k in tensors if k.startswith("velocity."))
        vel = [tensors[f"velocity.{i}"].clone() for i in range(n_vel)]
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        strat = meta["stratifier"]
        return cls(
            cfg, model, vel, rng, meta["iteration"],
            None if strat is None else mixup.Stratifier(*strat),
            [tuple(r) for r in meta["loss_log"]],
            [tuple(r) for r in meta["metric_log"]],
            [tuple(r) for r in meta["diag_log"]],
            dict(meta["running"]),
            None if meta.get("label_range") is None else tuple(meta["label_range"]),
        )


def _batch(ds: QualityDataset, idx: np.ndarray, flip: Optional[np.ndarray], dtype) -> torch.Tensor:
    x = torch.as_tensor(ds.images[idx], dtype=dtype)
    if flip is not None and flip.any():
        x[flip] = x[flip].flip(-1)
    return x


def predict_dataset(model: QualityModel, ds: QualityDataset, dtype=torch.float32, chunk: int = 256) -> np.ndarray:
    """Normalized-scale predictions for every image (test mode: no flip)."""
    out = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(ds), chunk):
            x = torch.as_tensor(ds.images[start:start + chunk], dtype=dtype)
            out.append(model.predictor(model.backbone(x)).cpu().numpy())
    model.train(was_training)
    return np.concatenate(out).astype(np.float64)


def evaluate_model(model: QualityModel, ds: QualityDataset, dtype=torch.float32):
    pred = ds.denormalize(predict_dataset(model, ds, dtype))
    return evaluate(pred, ds.labels)


def train_step(state: TrainState, source: QualityDataset, target: QualityDataset) -> StepLosses:
    cfg, rng = state.cfg, state.rng
    it = state.iteration
    current = phase(it, cfg)
    b = cfg.batch_size
    si = rng.choice(len(source), size=min(b, len(source)), replace=False)
    ti = rng.choice(len(target), size=min(b, len(target)), replace=False)
    s_flip = rng.random(len(si)) < 0.5 if cfg.hflip else None
    t_flip = rng.random(len(ti)) < 0.5 if cfg.hflip else None
    coin = rng.random()
    mixed = current is Phase.JOINT and coin > 1.0 - cfg.mix_probability

    dtype = cfg.torch_dtype
    x_s = _batch(source, si, s_flip, dtype)
    x_t = _batch(target, ti, t_flip, dtype)
    y_s = torch.as_tensor(source.unit_labels[si], dtype=dtype)

    scale = cfg.grl_scale * (grl_ramp(it / cfg.total_iters) if cfg.grl_ramp else 1.0)
    losses = composite_loss(state.model, x_s, y_s, x_t, cfg, current, mixed, state.stratifier, rng, scale)

    params = list(state.model.parameters())
    grads = torch.autograd.grad(losses.total, params, allow_unused=True)
    sgd_step(params, grads, state.velocities, cfg.lr, cfg.momentum, cfg.weight_decay)

    state.loss_log.append((it, current.value, losses.l_p, losses.l_d, losses.l_r, losses.mixed))
    for k, v in (("L_P", losses.l_p), ("L_D", losses.l_d), ("L_R", losses.l_r)):
        if v == v:
            state.running[k] = 0.98 * state.running[k] + 0.02 * v
    if losses.mean_w == losses.mean_w:
        state.diag_log.append((it, losses.l_r, losses.l_d, losses.mean_w, losses.nonzero_w))
    state.iteration += 1
    return losses


def train_run(
    cfg: TrainConfig,
    source: QualityDataset,
    target: QualityDataset,
    state: Optional[TrainState] = None,
    stop_at: Optional[int] = None,
    checkpoint: Optional[Path] = None,
    mix_log: Optional[list] = None,
) -> TrainState:
    """Train from scratch (or resume ``state``) up to ``stop_at`` iterations.

    Target labels, if present, are used only for the periodic metric rows.
    ``mix_log`` collects ``(iteration, MixEvent)`` pairs when given.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("source and target datasets must be non-empty")
    if not source.has_labels:
        raise ValueError("source dataset needs labels")
    state = state or TrainState.fresh(cfg)
    if state.stratifier is None and cfg.stage_policy == "multilayer":
        state.stratifier = mixup.fit_stratifier(source.unit_labels)
    if state.label_range is None:
        state.label_range = tuple(source.label_range)
    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)

    while state.iteration < end:
        it = state.iteration
        losses = train_step(state, source, target)
        if mix_log is not None:
            mix_log.extend((it, ev) for ev in losses.events)
        if target.has_labels and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.total_iters):
            try:
                rep = evaluate_model(state.model, target, cfg.torch_dtype)
            except ValueError as exc:  # constant predictions: correlations undefined
                log.warning("iter %d: %s", it + 1, exc)
                nan = float("nan")
                rep = MetricReport(nan, nan, nan, nan)
            row = (it + 1, phase(it, cfg).value, state.running["L_P"], state.running["L_D"],
                   state.running["L_R"], rep.plcc, rep.srocc, rep.krocc, rep.rmse)
            state.metric_log.append(row)
            log.info("iter %d %s L_P=%.4f L_D=%.4f L_R=%.4f srocc=%.3f", *row[:5], rep.srocc)
    if checkpoint is not None:
        state.save(checkpoint)
    return state


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def write_metric_log(path, state: TrainState) -> None:
    write_csv(path, METRIC_COLUMNS, state.metric_log)


def write_diagnostics(path, state: TrainState) -> None:
    write_csv(path, DIAG_COLUMNS, state.diag_log)
