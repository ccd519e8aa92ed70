"""Request and response models for the service endpoints.

Paths are server-side filesystem paths; the service is meant to run next to
the data it reads.
"""
from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, Field, model_validator


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class Metrics(BaseModel):
    plcc: float
    srocc: float
    krocc: float
    rmse: float


class MetricsRequest(BaseModel):
    pred: list[float] = Field(min_length=2)
    target: list[float] = Field(min_length=2)

    @model_validator(mode="after")
    def _same_length(self):
        if len(self.pred) != len(self.target):
            raise ValueError(f"pred has {len(self.pred)} values, target {len(self.target)}")
        return self


class ProjectRequest(BaseModel):
    input: str
    out: str
    face_res: int = Field(256, ge=8)
    splat_radius: int = Field(1, ge=0)
    mode: Literal["full", "train", "test"] = "full"
    side: int = Field(224, ge=1)
    seed: int = 0


class ProjectResponse(BaseModel):
    out: str
    height: int
    width: int
    n_points: int
    face_boxes: dict[str, tuple[int, int, int, int]]


class TrainRequest(BaseModel):
    config: dict[str, Any] = Field(default_factory=dict)
    source: Optional[str] = None  # .npz dataset; synthetic domains when omitted
    target: Optional[str] = None
    synthetic: dict[str, Any] = Field(default_factory=dict)
    data_seed: int = 0
    out_dir: str = "runs/train"

    @model_validator(mode="after")
    def _both_or_neither(self):
        if (self.source is None) != (self.target is None):
            raise ValueError("give both source and target datasets, or neither")
        return self


class TrainResponse(BaseModel):
    iterations: int
    checkpoint: str
    metric_log: str
    diagnostics: str
    mix_log: str
    embedding_plot: Optional[str] = None
    target_metrics: Optional[Metrics] = None


class EvalRequest(BaseModel):
    checkpoint: str
    target: str
    out: Optional[str] = None  # per-sample prediction CSV
    input_size: int = Field(32, ge=32)


class EvalResponse(BaseModel):
    n: int
    metrics: Optional[Metrics] = None
    predictions: Optional[str] = None


class AblateRequest(BaseModel):
    suite: Literal["sm", "stage", "align", "da", "alpha", "adapt"]
    seeds: int = Field(5, ge=1)
    out_dir: str = "runs/ablate"
    total_iters: Optional[int] = Field(None, ge=2)
    workers: int = Field(1, ge=1)
    synthetic: dict[str, Any] = Field(default_factory=dict)


class AblateResponse(BaseModel):
    results: str
    summary: str
    medians: dict[str, Metrics]
