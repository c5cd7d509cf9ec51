"""kNN retrieval evaluation: hit ratios, top-10 recall, and the full
test protocol, including the low-quality robustness variants."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, VersionError
from .geo import mask_points, shift_points
from .measures import build_gt_matrix
from .model import encode_batch

EMB_MAGIC = b"TEMB"
EMB_VERSION = 1


@dataclass
class MetricsReport:
    """Mean retrieval metrics over all test queries; None = not computable."""

    hr10: float | None
    hr50: float | None
    r10_50: float | None

    def lines(self, suffix=""):
        out = []
        for name, value in (("hr10", self.hr10), ("hr50", self.hr50), ("r10_50", self.r10_50)):
            if value is not None:
                out.append(f"{name}{suffix}\t{value:.6f}")
        return out


def ranking_from_scores(scores, self_index=None):
    """Candidate indices by descending score; ties broken by lower index."""
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")
    if self_index is not None:
        order = order[order != self_index]
    return order


def hr_at_k(gt_rank, pred_rank, k):
    """|top-k(gt) incl top-k(pred)| / k."""
    if k > len(gt_rank) or k > len(pred_rank):
        raise ValueError(f"k={k} exceeds candidate count")
    return len(np.intersect1d(gt_rank[:k], pred_rank[:k])) / k


def r10_at_50(gt_rank, pred_rank):
    """Recall of the ground-truth top-10 within the predicted top-50."""
    if len(gt_rank) < 50 or len(pred_rank) < 50:
        raise ValueError("r10_at_50 needs at least 50 candidates")
    return len(np.intersect1d(gt_rank[:10], pred_rank[:50])) / 10


def similarity_to_corpus(query_emb, corpus_emb):
    """Predicted similarity 1 - ||q - c||_2 against every corpus row."""
    diff = corpus_emb.astype(np.float64) - query_emb.astype(np.float64)
    return 1.0 - np.sqrt(np.einsum("nd,nd->n", diff, diff))


def knn_query(query_emb, corpus_emb, k):
    """Exhaustive top-k scan; ties broken by lower index."""
    if len(corpus_emb) == 0:
        raise ValueError("empty corpus")
    if k > len(corpus_emb):
        raise ValueError(f"k={k} exceeds corpus size {len(corpus_emb)}")
    return ranking_from_scores(similarity_to_corpus(query_emb, corpus_emb))[:k]


def metrics_from_rankings(gt_ranks, pred_ranks):
    """Average hr@10, hr@50 and r10@50; metrics without enough
    candidates are reported as None."""
    n_candidates = len(gt_ranks[0])
    hr10s, hr50s, recalls = [], [], []
    for g, p in zip(gt_ranks, pred_ranks):
        if n_candidates >= 10:
            hr10s.append(hr_at_k(g, p, 10))
        if n_candidates >= 50:
            hr50s.append(hr_at_k(g, p, 50))
            recalls.append(r10_at_50(g, p))
    mean = lambda v: float(np.mean(v)) if v else None
    return MetricsReport(hr10=mean(hr10s), hr50=mean(hr50s), r10_50=mean(recalls))


def rankings_from_matrix(sim_matrix):
    """Per-query rankings from a square similarity matrix, self excluded."""
    return [ranking_from_scores(row, self_index=q) for q, row in enumerate(sim_matrix)]


def rankings_from_embeddings(query_emb, corpus_emb):
    """Per-query predicted rankings, query index excluded from candidates."""
    ranks = []
    for q in range(len(query_emb)):
        scores = similarity_to_corpus(query_emb[q], corpus_emb)
        ranks.append(ranking_from_scores(scores, self_index=q))
    return ranks


def evaluate(model, test_trajs, kind, scale, gt=None, mask_ratio=None, shift_dist=None,
             seed=0, use_gt_as_pred=False, workers=1):
    """Embed the test set, rank, and average the retrieval metrics.

    ``mask_ratio`` / ``shift_dist`` apply the low-quality transforms to
    the queries only (ground truth stays on the originals). Masking is
    capped so every query keeps enough points to encode.
    ``use_gt_as_pred`` is the oracle self-test: predictions are replaced
    by the ground truth and every metric must come out 1.0.
    """
    if gt is None:
        gt = build_gt_matrix(test_trajs, kind, scale, workers=workers)
    gt_ranks = rankings_from_matrix(gt.values)
    if use_gt_as_pred:
        pred_ranks = gt_ranks
    else:
        corpus = encode_batch(test_trajs, model)
        queries = test_trajs
        if mask_ratio is not None:
            min_keep = model.config.min_points()
            capped = [min(mask_ratio, 1.0 - min_keep / t.n) for t in queries]
            queries = [mask_points(t, max(r, 0.0), seed=seed + i)
                       for i, (t, r) in enumerate(zip(queries, capped))]
        if shift_dist is not None:
            queries = [shift_points(t, shift_dist, seed=seed + 7919 + i)
                       for i, t in enumerate(queries)]
        query_emb = corpus if queries is test_trajs else encode_batch(queries, model)
        pred_ranks = rankings_from_embeddings(query_emb, corpus)
    return metrics_from_rankings(gt_ranks, pred_ranks)


# ---------------------------------------------------------------------------
# TEMB embedding dump: magic, u32 version, u32 count, u32 d, float32 rows.


def save_embeddings(emb, path):
    emb = np.ascontiguousarray(emb, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<III", EMB_VERSION, emb.shape[0], emb.shape[1]))
        fh.write(emb.tobytes())


def load_embeddings(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise FormatError(f"{path}: truncated header")
        magic = head[:4]
        version, count, d = struct.unpack("<III", head[4:16])
        if magic != EMB_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {EMB_MAGIC!r}")
        if version != EMB_VERSION:
            raise VersionError(f"{path}: unsupported version {version}, expected {EMB_VERSION}")
        payload = fh.read(4 * count * d + 1)
        if len(payload) != 4 * count * d:
            raise FormatError(f"{path}: expected {4 * count * d} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(count, d).copy()
