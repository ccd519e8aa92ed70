"""Ablation harness and embedding plots for the synthetic benchmark.

Variants are flag overrides on a shared desk-scale base config.  Runs whose
effective configs coincide (e.g. ``qsm`` and ``rca`` are both the full
method) are trained once per seed and shared.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .metrics import MetricReport
from .synthetic import SyntheticDomainSpec, make_synthetic_domains
from .train import TrainConfig, evaluate_model, train_run

log = logging.getLogger(__name__)

NO_ADAPT = dict(adversarial=False, alignment="none", mix_probability=0.0)
DANN_ONLY = dict(alignment="none", mix_probability=0.0)
FULL: dict = {}

VARIANTS: dict[str, dict] = {
    "no_adapt": NO_ADAPT,
    "dann_only": DANN_ONLY,
    "full": FULL,
    # style mixup (source side)
    "no_sm": dict(mix_probability=0.0),
    "plain_sm": dict(source_mix="uniform"),
    "qsm": FULL,
    # stage routing
    "stage1_only": dict(stage_policy="stage1"),
    "stage4_only": dict(stage_policy="stage4"),
    "stage23_only": dict(stage_policy="stage23"),
    "multilayer": FULL,
    # alignment
    "mmd": dict(alignment="mmd"),
    "cod": dict(alignment="cod"),
    "rca": FULL,
    # target-side augmentation
    "single_domain_aug": dict(target_mix=False),
    "dual_domain_aug": FULL,
}
ALPHAS = (0.2, 0.5, 1.0, 2.0)
for _a in ALPHAS:
    VARIANTS[f"alpha_{_a:g}"] = dict(alpha=_a)

SUITES: dict[str, tuple[str, ...]] = {
    "sm": ("no_sm", "plain_sm", "qsm"),
    "stage": ("stage1_only", "stage4_only", "stage23_only", "multilayer"),
    "align": ("mmd", "cod", "rca"),
    "da": ("single_domain_aug", "dual_domain_aug"),
    "alpha": tuple(f"alpha_{a:g}" for a in ALPHAS),
    "adapt": ("no_adapt", "dann_only", "full"),
}

RESULT_COLUMNS = ("variant", "seed", "plcc", "srocc", "krocc", "rmse")
SUMMARY_COLUMNS = ("variant", "n_seeds", "plcc", "srocc", "krocc", "rmse")


def desk_config(**overrides) -> TrainConfig:
    """Base config sized for minutes of CPU time on 32x32 synthetic images.

    The alignment weight is scaled down because the regularized label-kernel
    inverses amplify the loss by up to 1/(4 eps) relative to its features.
    """
    base = TrainConfig(
        total_iters=600, warmup_iters=100, lr=1e-2, lambda_align=1e-4,
        widths=(8, 16, 32, 32), predictor_hidden=32, discriminator_hidden=32,
        eval_every=10 ** 9,
    )
    return base.replace(**overrides)


def variant_config(name: str, base: TrainConfig) -> TrainConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return base.replace(**VARIANTS[name])


def suite_variants(suite: str) -> tuple[str, ...]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    return SUITES[suite]


@dataclass
class RunResult:
    variant: str
    seed: int
    report: MetricReport

    def row(self) -> tuple:
        r = self.report
        return (self.variant, self.seed, r.plcc, r.srocc, r.krocc, r.rmse)


def _config_key(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def _train_and_eval(cfg_dict: dict, spec_dict: dict, data_seed: int) -> dict:
    torch.set_num_threads(1)
    spec = SyntheticDomainSpec(**spec_dict)
    source, target = make_synthetic_domains(spec, np.random.default_rng(data_seed))
    cfg = TrainConfig.from_dict(cfg_dict)
    state = train_run(cfg, source, target)
    return evaluate_model(state.model, target, cfg.torch_dtype).as_dict()


def run_ablation(
    variants: Sequence[str],
    base: Optional[TrainConfig] = None,
    spec: Optional[SyntheticDomainSpec] = None,
    seeds: int | Iterable[int] = 5,
    data_seed: int = 0,
    workers: int = 1,
) -> list[RunResult]:
    """Train every variant on every seed; identical effective configs run once.

    The synthetic domains are drawn once from ``data_seed`` and shared by all
    runs so variants differ only in training flags and the training seed.
    """
    base = base or desk_config()
    spec = spec or SyntheticDomainSpec.shifted()
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    spec_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(spec).items()}

    jobs: dict[str, dict] = {}
    plan = []
    for name in variants:
        for seed in seeds:
            cfg = variant_config(name, base).replace(seed=seed)
            key = _config_key(cfg)
            jobs.setdefault(key, cfg.to_dict())
            plan.append((name, seed, key))

    results: dict[str, dict] = {}
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = {k: pool.submit(_train_and_eval, d, spec_dict, data_seed) for k, d in jobs.items()}
            results = {k: f.result() for k, f in futures.items()}
    else:
        for i, (k, d) in enumerate(jobs.items()):
            results[k] = _train_and_eval(d, spec_dict, data_seed)
            log.info("run %d/%d seed %d srocc %.3f", i + 1, len(jobs), d["seed"], results[k]["srocc"])
    return [RunResult(name, seed, MetricReport(**results[key])) for name, seed, key in plan]


def summarize(results: Sequence[RunResult]) -> dict[str, MetricReport]:
    """Median of each metric over seeds, per variant (insertion order kept)."""
    by_variant: dict[str, list[MetricReport]] = {}
    for r in results:
        by_variant.setdefault(r.variant, []).append(r.report)
    out = {}
    for name, reps in by_variant.items():
        out[name] = MetricReport(*(float(np.median([getattr(r, m) for r in reps]))
                                   for m in ("plcc", "srocc", "krocc", "rmse")))
    return out


def write_results(path, results: Sequence[RunResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        w.writerows(r.row() for r in results)


def write_summary(path, results: Sequence[RunResult]) -> None:
    counts: dict[str, int] = {}
    for r in results:
        counts[r.variant] = counts.get(r.variant, 0) + 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for name, rep in summarize(results).items():
            w.writerow((name, counts[name], rep.plcc, rep.srocc, rep.krocc, rep.rmse))


def pca_2d(*feature_sets: np.ndarray) -> list[np.ndarray]:
    """Project all sets onto the top-2 principal axes of their union."""
    sets = [np.asarray(f, dtype=np.float64) for f in feature_sets]
    stacked = np.concatenate(sets)
    if stacked.ndim != 2:
        raise ValueError("features must be 2-D (samples x dims)")
    if stacked.shape[0] < 2 or stacked.shape[1] < 2:
        raise ValueError(f"need at least 2 samples and 2 dims for a 2-D projection, got {stacked.shape}")
    mean = stacked.mean(0)
    _, _, vt = np.linalg.svd(stacked - mean, full_matrices=False)
    axes = vt[:2].T
    return [(f - mean) @ axes for f in sets]


def emit_embedding_plot(f_source, f_target, path, y_source=None, y_target=None, title: str = "") -> Path:
    """PCA scatter of both domains, written as SVG (or PDF by suffix)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    f_source, f_target = np.asarray(f_source), np.asarray(f_target)
    for name, f in (("source", f_source), ("target", f_target)):
        if len(f) < 10:
            raise ValueError(f"need at least 10 {name} samples, got {len(f)}")
    p_s, p_t = pca_2d(f_source, f_target)
    path = Path(path)
    if path.suffix.lower() not in (".svg", ".pdf"):
        raise ValueError("embedding plots are vector graphics: use .svg or .pdf")

    fig, ax = plt.subplots(figsize=(5, 4.5))
    kw = dict(cmap="viridis", vmin=0.0, vmax=1.0, s=14, edgecolors="none")
    cs = y_source if y_source is not None else "tab:blue"
    ct = y_target if y_target is not None else "tab:orange"
    sc = ax.scatter(p_s[:, 0], p_s[:, 1], c=cs, marker="o", label="source", **kw)
    ax.scatter(p_t[:, 0], p_t[:, 1], c=ct, marker="^", label="target", **kw)
    if y_source is not None or y_target is not None:
        fig.colorbar(sc, ax=ax, label="normalized quality")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(loc="best", frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def pooled_features(model, ds, dtype=torch.float32, limit: Optional[int] = None) -> np.ndarray:
    n = len(ds) if limit is None else min(limit, len(ds))
    was_training = model.training
    model.eval()
    with torch.no_grad():
        f = model.backbone(torch.as_tensor(ds.images[:n], dtype=dtype)).cpu().numpy()
    model.train(was_training)
    return f
