"""Quality-assessment fidelity metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    if p.size < 2:
        raise ValueError("need at least two samples")
    return p, t


def _require_varying(*vs: np.ndarray) -> None:
    for v in vs:
        if np.all(v == v[0]):
            raise ValueError("correlation is undefined for a constant vector")


def plcc(pred, target) -> float:
    p, t = _pair(pred, target)
    _require_varying(p, t)
    return float(np.clip(stats.pearsonr(p, t)[0], -1.0, 1.0))


def srocc(pred, target) -> float:
    p, t = _pair(pred, target)
    _require_varying(p, t)
    return float(stats.spearmanr(p, t)[0])


def krocc(pred, target) -> float:
    """Kendall tau-b."""
    p, t = _pair(pred, target)
    _require_varying(p, t)
    return float(stats.kendalltau(p, t, variant="b")[0])


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class MetricReport:
    plcc: float
    srocc: float
    krocc: float
    rmse: float

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, target) -> MetricReport:
    """All four metrics; pass de-normalized values so RMSE is on label scale."""
    return MetricReport(plcc(pred, target), srocc(pred, target), krocc(pred, target), rmse(pred, target))
