"""Domain alignment losses: adversarial BCE and rank-weighted conditional
kernel alignment (plus the COD and MMD baselines it reduces to)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

LOG_CLAMP = 1e-7
RANK_WEIGHT_SCOPES = ("all", "cross_only", "none")


def _as_rows(a: torch.Tensor) -> torch.Tensor:
    a = torch.as_tensor(a)
    if a.ndim == 1:
        return a[:, None]
    if a.ndim != 2:
        raise ValueError(f"expected scalars (n,) or vectors (n, d), got shape {tuple(a.shape)}")
    return a


def gaussian_kernel_matrix(a: torch.Tensor, b: torch.Tensor, bandwidth: float) -> torch.Tensor:
    """``K[i, j] = exp(-|a_i - b_j|^2 / (2 bandwidth^2))``."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    a, b = _as_rows(a), _as_rows(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return torch.exp(-sq / (2.0 * bandwidth ** 2))


def median_bandwidth(*feature_sets: torch.Tensor) -> float:
    """Median pairwise distance over the pooled sets; 1.0 if all coincide."""
    f = torch.cat([_as_rows(x).detach() for x in feature_sets])
    d = torch.cdist(f, f)
    iu = torch.triu_indices(len(f), len(f), offset=1)
    vals = d[iu[0], iu[1]]
    med = float(vals.median()) if vals.numel() else 0.0
    return med if med > 0 else 1.0


def rank_weights(pred_a, pred_b, y_a, y_b) -> torch.Tensor:
    """``W[i, j] = max(0, -(pred_a[i] - pred_b[j]) * sign(y_a[i] - y_b[j]))``.

    Zero for correctly ordered pairs and for tied labels; otherwise the size
    of the ordering violation.
    """
    pred_a, pred_b = torch.as_tensor(pred_a), torch.as_tensor(pred_b)
    y_a, y_b = torch.as_tensor(y_a), torch.as_tensor(y_b)
    gap = pred_a[:, None] - pred_b[None, :]
    order = torch.sign(y_a[:, None] - y_b[None, :])
    return torch.clamp(-gap * order, min=0)


def weighted_feature_kernel(f_a, f_b, weights: Optional[torch.Tensor], bandwidth: float) -> torch.Tensor:
    k = gaussian_kernel_matrix(f_a, f_b, bandwidth)
    if weights is None:
        return k
    if weights.shape != k.shape:
        raise ValueError(f"weight matrix {tuple(weights.shape)} does not match kernel {tuple(k.shape)}")
    return k * (1 + weights)


def regularized_inverse(k: torch.Tensor, eps: float) -> torch.Tensor:
    """``(K + eps I)^-1`` through a Cholesky factorization."""
    if eps <= 0:
        raise ValueError(f"regularization must be positive, got {eps}")
    reg = k + eps * torch.eye(k.shape[0], dtype=k.dtype)
    chol, info = torch.linalg.cholesky_ex(reg)
    if int(info) != 0:
        raise FloatingPointError("regularized kernel is not positive definite")
    return torch.cholesky_inverse(chol)


@dataclass
class GaussianKernelConfig:
    feature_bandwidth: Optional[float] = None  # None -> per-batch median distance
    label_bandwidth: float = 0.1
    rank_weight_scope: str = "all"

    def __post_init__(self):
        if self.rank_weight_scope not in RANK_WEIGHT_SCOPES:
            raise ValueError(f"rank_weight_scope must be one of {RANK_WEIGHT_SCOPES}")
        if self.label_bandwidth <= 0 or (self.feature_bandwidth is not None and self.feature_bandwidth <= 0):
            raise ValueError("kernel bandwidths must be positive")


@dataclass
class RcaBatch:
    f_s: torch.Tensor
    f_t: torch.Tensor
    y_s: torch.Tensor
    y_t: torch.Tensor  # pseudo-labels
    pred_s: torch.Tensor
    pred_t: torch.Tensor
    eps: float = 1e-3

    def __post_init__(self):
        if len(self.f_s) != len(self.y_s) or len(self.f_s) != len(self.pred_s):
            raise ValueError("source features, labels and predictions differ in length")
        if len(self.f_t) != len(self.y_t) or len(self.f_t) != len(self.pred_t):
            raise ValueError("target features, labels and predictions differ in length")
        if len(self.f_s) < 2 or len(self.f_t) < 2:
            raise ValueError("alignment needs at least two samples per domain")


@dataclass
class RcaTerms:
    loss: torch.Tensor
    target_term: torch.Tensor
    source_term: torch.Tensor
    cross_term: torch.Tensor
    w_st: torch.Tensor
    w_ss: Optional[torch.Tensor]
    w_tt: Optional[torch.Tensor]

    @property
    def mean_weight(self) -> float:
        return float(self.w_st.mean())

    @property
    def nonzero_fraction(self) -> float:
        return float((self.w_st > 0).double().mean())


def rca_terms(batch: RcaBatch, cfg: GaussianKernelConfig = GaussianKernelConfig()) -> RcaTerms:
    y_s = batch.y_s.detach()
    y_t = batch.y_t.detach()
    p_s = batch.pred_s.detach()
    p_t = batch.pred_t.detach()

    k_tt = gaussian_kernel_matrix(y_t, y_t, cfg.label_bandwidth)
    k_ss = gaussian_kernel_matrix(y_s, y_s, cfg.label_bandwidth)
    k_ts = gaussian_kernel_matrix(y_t, y_s, cfg.label_bandwidth)
    m_t = regularized_inverse(k_tt, batch.eps)
    m_s = regularized_inverse(k_ss, batch.eps)

    bw = cfg.feature_bandwidth or median_bandwidth(batch.f_s, batch.f_t)
    w_st = rank_weights(p_s, p_t, y_s, y_t)
    w_ss = w_tt = None
    if cfg.rank_weight_scope == "all":
        w_ss = rank_weights(p_s, p_s, y_s, y_s)
        w_tt = rank_weights(p_t, p_t, y_t, y_t)
    if cfg.rank_weight_scope == "none":
        w_st = torch.zeros_like(w_st)

    kx_tt = weighted_feature_kernel(batch.f_t, batch.f_t, w_tt, bw)
    kx_ss = weighted_feature_kernel(batch.f_s, batch.f_s, w_ss, bw)
    kx_st = weighted_feature_kernel(batch.f_s, batch.f_t, w_st, bw)

    t_term = torch.trace(k_tt @ m_t @ kx_tt @ m_t)
    s_term = torch.trace(k_ss @ m_s @ kx_ss @ m_s)
    c_term = torch.trace(k_ts @ m_s @ kx_st @ m_t)
    loss = t_term + s_term - 2 * c_term
    return RcaTerms(loss, t_term, s_term, c_term, w_st, w_ss, w_tt)


def rca_loss(batch: RcaBatch, cfg: GaussianKernelConfig = GaussianKernelConfig()) -> torch.Tensor:
    """Rank-weighted conditional alignment loss.

    Label kernels, pseudo-labels and rank weights are constants; gradients
    flow through the feature kernels only.  With ``rank_weight_scope="none"``
    this is the unweighted conditional operator discrepancy.
    """
    return rca_terms(batch, cfg).loss


def mmd_loss(f_s: torch.Tensor, f_t: torch.Tensor, bandwidth: Optional[float] = None) -> torch.Tensor:
    """Biased squared MMD between the two feature sets (mean-embedding distance)."""
    bw = bandwidth or median_bandwidth(f_s, f_t)
    return (gaussian_kernel_matrix(f_s, f_s, bw).mean()
            + gaussian_kernel_matrix(f_t, f_t, bw).mean()
            - 2 * gaussian_kernel_matrix(f_s, f_t, bw).mean())


def dann_loss(d_s: torch.Tensor, d_t: torch.Tensor) -> torch.Tensor:
    """BCE with source labeled 0 and target labeled 1."""
    d_s = d_s.clamp(LOG_CLAMP, 1 - LOG_CLAMP)
    d_t = d_t.clamp(LOG_CLAMP, 1 - LOG_CLAMP)
    return -torch.log1p(-d_s).mean() - torch.log(d_t).mean()
