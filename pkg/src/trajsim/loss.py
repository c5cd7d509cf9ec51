"""Ranking and regression losses over one batch of embeddings.

Predicted similarity between two embeddings is 1 - ||h_i - h_j||_2.
The ranking term walks every anchor's candidate list sorted by ground
truth (descending, ties by index) and, for each strictly-ordered pair,
pays

    -N * delta(i, j) * (G_i - G_j) * log2(sigmoid(x_i - x_j))

where N is the candidate-list length, G are normalized exponential
gains, and delta is the difference of log-position discounts of the
pair's ranks. The regression term is an MSE weighted by the ground
truth itself. The two combine as lam * mse + (1 - lam) * ranking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAXDCG_FLOOR = 1e-12


@dataclass
class LossConfig:
    lam: float = 0.2              # weight of the MSE term
    include_n_scale: bool = True  # keep the leading list-length factor
    exclude_self: bool = True     # drop anchor-to-self entries from rows

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")


@dataclass
class SimilarityRow:
    """One anchor's candidates sorted by ground truth, descending."""

    anchor: int
    cols: np.ndarray  # candidate column indices in rank order
    y: np.ndarray     # ground-truth similarities aligned with cols


@dataclass
class GainTable:
    gains: np.ndarray  # nonincreasing over rank positions
    max_dcg: float


def build_rows(y_matrix, exclude_self=True):
    """Sorted candidate rows for every anchor of a batch gt submatrix."""
    y_matrix = np.asarray(y_matrix, dtype=np.float64)
    n = len(y_matrix)
    rows = []
    for a in range(n):
        cols = np.arange(n)
        if exclude_self:
            cols = cols[cols != a]
        y = y_matrix[a, cols]
        order = np.argsort(-y, kind="stable")  # ties keep lower index first
        rows.append(SimilarityRow(anchor=a, cols=cols[order], y=y[order]))
    return rows


def compute_gains(row):
    """Exponential gains normalized by the ideal DCG of the sorted row."""
    num = np.exp2(row.y) - 1.0
    positions = np.arange(1, len(row.y) + 1)
    max_dcg = float(np.sum(num / np.log2(positions + 1)))
    max_dcg = max(max_dcg, MAXDCG_FLOOR)
    return GainTable(gains=num / max_dcg, max_dcg=max_dcg)


def _pair_indices(m):
    return np.triu_indices(m, k=1)


def knn_loss(x, rows, cfg=None):
    """Ranking loss over all anchors; ``x`` is the (N, N) predicted matrix.

    Gradient flows through ``x`` only; the sort order, gains and
    discounts come from the ground truth and are constants.
    """
    cfg = cfg or LossConfig()
    n = x.shape[0]
    flat_i, flat_j, weights = [], [], []
    for row in rows:
        m = len(row.y)
        if m < 2:
            continue
        iu, ju = _pair_indices(m)
        qual = row.y[iu] > row.y[ju]  # strict: tied pairs are skipped
        if not np.any(qual):
            continue
        iu, ju = iu[qual], ju[qual]
        gap = ju - iu
        delta = 1.0 / np.log2(gap + 1.0) - 1.0 / np.log2(gap + 2.0)
        gains = compute_gains(row).gains
        w = delta * (gains[iu] - gains[ju])
        if cfg.include_n_scale:
            w = w * m
        flat_i.append(row.anchor * n + row.cols[iu])
        flat_j.append(row.anchor * n + row.cols[ju])
        weights.append(w)
    x_flat = ad.reshape(x, (n * n,))
    if not flat_i:
        return ad.scale(ad.tsum(x_flat), 0.0)  # keeps the graph rooted
    idx_i = np.concatenate(flat_i)
    idx_j = np.concatenate(flat_j)
    w = Tensor(np.concatenate(weights).astype(x.dtype))
    margins = ad.sub(ad.gather(x_flat, idx_i), ad.gather(x_flat, idx_j))
    total = ad.tsum(ad.mul(w, ad.log2_sigmoid(margins)))
    return ad.scale(total, -1.0 / len(rows))


def weighted_mse(y_matrix, x, exclude_self=True):
    """Mean over ordered pairs of y_ij * (y_ij - x_ij)^2."""
    y_matrix = np.asarray(y_matrix)
    if y_matrix.shape != tuple(x.shape):
        raise ValueError(f"shape mismatch: y {y_matrix.shape} vs x {x.shape}")
    n = len(y_matrix)
    include = np.ones_like(y_matrix)
    count = n * n
    if exclude_self:
        np.fill_diagonal(include, 0.0)
        count = n * n - n
    w = Tensor((y_matrix * include).astype(x.dtype))
    diff = ad.sub(Tensor(y_matrix.astype(x.dtype)), x)
    return ad.scale(ad.tsum(ad.mul(w, ad.mul(diff, diff))), 1.0 / count)


def predicted_similarity_matrix(embeddings):
    """x_ij = 1 - ||h_i - h_j||_2, unit diagonal, differentiable."""
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    n, d = emb.shape
    diff = ad.sub(ad.reshape(emb, (n, 1, d)), ad.reshape(emb, (1, n, d)))
    sq = ad.tsum(ad.mul(diff, diff), axis=2)
    dist = ad.tsqrt(sq)
    return ad.sub(Tensor(np.asarray(1.0, dtype=dist.dtype)), dist)


def combined_loss(embeddings, y_matrix, cfg=None):
    """lam * weighted MSE + (1 - lam) * ranking loss, one batch."""
    cfg = cfg or LossConfig()
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    if emb.dtype != np.float64:
        emb = ad.cast(emb, np.float64)  # margins and gains in double precision
    y_matrix = np.asarray(y_matrix, dtype=np.float64)
    x = predicted_similarity_matrix(emb)
    l_mse = weighted_mse(y_matrix, x, exclude_self=cfg.exclude_self)
    rows = build_rows(y_matrix, exclude_self=cfg.exclude_self)
    l_knn = knn_loss(x, rows, cfg)
    return ad.add(ad.scale(l_mse, cfg.lam), ad.scale(l_knn, 1.0 - cfg.lam))
