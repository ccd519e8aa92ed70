"""FastAPI application exposing projection, metrics, training, evaluation
and ablation.  Handlers are synchronous: a desk-scale run takes seconds to
minutes and owns its model exclusively, so there is no job queue.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from .. import evalcli, metrics, mixup, pcproj
from ..data import QualityDataset, load_target
from ..synthetic import SyntheticDomainSpec, make_synthetic_domains
from ..train import TrainConfig, TrainState, predict_dataset, train_run, write_diagnostics, write_metric_log
from .schemas import (
    AblateRequest,
    AblateResponse,
    EvalRequest,
    EvalResponse,
    HealthResponse,
    Metrics,
    MetricsRequest,
    ProjectRequest,
    ProjectResponse,
    TrainRequest,
    TrainResponse,
)

log = logging.getLogger(__name__)


def _bad_request(exc: Exception) -> HTTPException:
    if isinstance(exc, FileNotFoundError):
        return HTTPException(status_code=404, detail=str(exc))
    return HTTPException(status_code=400, detail=f"{type(exc).__name__}: {exc}")


def _metrics(rep) -> Metrics:
    return Metrics(**rep.as_dict())


def _synthetic_spec(overrides: dict) -> SyntheticDomainSpec:
    try:
        return SyntheticDomainSpec.shifted(**overrides)
    except TypeError as exc:
        raise ValueError(f"bad synthetic spec: {exc}") from None


def do_project(req: ProjectRequest) -> ProjectResponse:
    pc = pcproj.normalize_cloud(pcproj.load_ply(req.input))
    cfg = pcproj.ProjectionConfig(face_resolution=req.face_res, point_splat_radius=req.splat_radius)
    mv = pcproj.render_multiview(pc, cfg, source_id=Path(req.input).stem)
    pixels = mv.pixels
    if req.mode != "full":
        rng = np.random.default_rng(req.seed)
        pixels = pcproj.crop_pipeline(mv, req.mode, req.side, rng).transpose(1, 2, 0)
    Path(req.out).parent.mkdir(parents=True, exist_ok=True)
    pcproj.save_image(req.out, pixels)
    return ProjectResponse(out=req.out, height=pixels.shape[0], width=pixels.shape[1],
                           n_points=len(pc), face_boxes=mv.face_boxes)


def do_train(req: TrainRequest) -> TrainResponse:
    cfg = TrainConfig.from_dict(req.config)
    if req.source is not None:
        source, target = load_target(req.source), load_target(req.target)
    else:
        source, target = make_synthetic_domains(_synthetic_spec(req.synthetic), np.random.default_rng(req.data_seed))
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f for k, f in (("checkpoint", "checkpoint.pt"), ("metric_log", "metrics.csv"),
                                     ("diagnostics", "diagnostics.csv"), ("mix_log", "mix_log.csv"))}
    mix_log: list = []
    state = train_run(cfg, source, target, checkpoint=paths["checkpoint"], mix_log=mix_log)
    write_metric_log(paths["metric_log"], state)
    write_diagnostics(paths["diagnostics"], state)
    mixup.write_mix_log(paths["mix_log"], mix_log)

    resp = TrainResponse(iterations=state.iteration, **{k: str(v) for k, v in paths.items()})
    if target.has_labels:
        resp.target_metrics = _metrics(_state_metrics(state, target))
    if len(source) >= 10 and len(target) >= 10:
        n = 500
        plot = out / "embedding.svg"
        y_s = source.unit_labels[:n]
        y_t = target.unit_labels[:n] if target.has_labels else None
        evalcli.emit_embedding_plot(
            evalcli.pooled_features(state.model, source, cfg.torch_dtype, n),
            evalcli.pooled_features(state.model, target, cfg.torch_dtype, n),
            plot, y_s, y_t, title="pooled features (PCA)",
        )
        resp.embedding_plot = str(plot)
    return resp


def _state_metrics(state: TrainState, ds: QualityDataset):
    unit = predict_dataset(state.model, ds, state.cfg.torch_dtype)
    lo, hi = state.label_range or ds.label_range
    return metrics.evaluate(lo + unit * (hi - lo), ds.labels)


def do_eval(req: EvalRequest) -> EvalResponse:
    state = TrainState.load(req.checkpoint)
    ds = load_target(req.target, req.input_size)
    unit = predict_dataset(state.model, ds, state.cfg.torch_dtype)
    lo, hi = state.label_range or (0.0, 1.0)
    pred = lo + unit * (hi - lo)
    resp = EvalResponse(n=len(ds))
    if ds.has_labels:
        resp.metrics = _metrics(metrics.evaluate(pred, ds.labels))
    if req.out:
        Path(req.out).parent.mkdir(parents=True, exist_ok=True)
        with open(req.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("index", "prediction", "label"))
            for i, p in enumerate(pred):
                w.writerow((i, p, ds.labels[i] if ds.has_labels else ""))
        resp.predictions = req.out
    return resp


def do_ablate(req: AblateRequest) -> AblateResponse:
    base = evalcli.desk_config()
    if req.total_iters is not None:
        base = base.replace(total_iters=req.total_iters, warmup_iters=req.total_iters // 6)
    results = evalcli.run_ablation(evalcli.suite_variants(req.suite), base, _synthetic_spec(req.synthetic),
                                   req.seeds, workers=req.workers)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res_path, sum_path = out / f"{req.suite}_runs.csv", out / f"{req.suite}_summary.csv"
    evalcli.write_results(res_path, results)
    evalcli.write_summary(sum_path, results)
    medians = {k: _metrics(v) for k, v in evalcli.summarize(results).items()}
    return AblateResponse(results=str(res_path), summary=str(sum_path), medians=medians)


def create_app() -> FastAPI:
    app = FastAPI(title="qdpcqa", version=__version__)

    def guarded(fn, req):
        try:
            return fn(req)
        except HTTPException:
            raise
        except (ValueError, FileNotFoundError, FloatingPointError, KeyError) as exc:
            log.info("request failed: %s", exc)
            raise _bad_request(exc) from exc

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(version=__version__)

    @app.post("/metrics", response_model=Metrics)
    def compute_metrics(req: MetricsRequest):
        return guarded(lambda r: _metrics(metrics.evaluate(r.pred, r.target)), req)

    @app.post("/project", response_model=ProjectResponse)
    def project(req: ProjectRequest):
        return guarded(do_project, req)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest):
        return guarded(do_train, req)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest):
        return guarded(do_eval, req)

    @app.post("/ablate", response_model=AblateResponse)
    def ablate(req: AblateRequest):
        return guarded(do_ablate, req)

    return app


app = create_app()
