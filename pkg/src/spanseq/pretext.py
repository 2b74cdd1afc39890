"""Self-supervised objectives over encoded seller-month pairs.

Three losses share one mini-batch of sellers, each seller contributing two
adjacent-month views. The coarse task matches the two global vectors g of the
same seller against other sellers' views with an InfoNCE loss in both
directions. The fine task makes the transformer output at each masked span
position identify that position's own pre-mask span vector among the masked
span vectors of other sellers. The count task classifies the bucketized
number of failed login/verify/modify operations from g. The training loss is
the unweighted sum of whichever tasks are enabled.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import FAILURE_KINDS

# Additive score offset that removes a candidate from a softmax row: after
# subtracting the row maximum, exp(-1e9) underflows to exactly zero.
EXCLUDE_BIAS = -1e9

COUNT_BUCKET_LABELS = ("0", "1", "2", "3", "4", "5-9", "10-49", ">=50")


def count_bucket(n):
    """Bucket id for a failure count: 0-4 exact, then 5-9, 10-49, >=50."""
    if n < 0:
        raise ValueError(f"failure count must be >= 0, got {n}")
    if n <= 4:
        return int(n)
    if n <= 9:
        return 5
    if n <= 49:
        return 6
    return 7


def count_label(events):
    """Bucketized count of failed Login/Verify/Modify events in one month."""
    n = sum(1 for e in events if not e.success and e.behavior in FAILURE_KINDS)
    return count_bucket(n)


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.tensor(np.asarray(x, dtype=float))


def _pick(matrix, rows, cols, dtype):
    """Select matrix[rows, cols] by summing against a 0/1 indicator."""
    ind = np.zeros(matrix.shape, dtype=dtype)
    ind[rows, cols] = 1.0
    return ad.sum_(ad.mul(matrix, ind))


def info_nce(anchor, positive, negatives):
    """Contrastive loss -log softmax of the positive dot product.

    anchor and positive are vectors, negatives a [k, dim] stack; all scores
    are plain dot products, normalized with log-sum-exp stabilization.
    """
    a = _as_tensor(anchor)
    p = _as_tensor(positive)
    if isinstance(negatives, ad.Tensor):
        negs = negatives
    else:
        arr = np.asarray(negatives, dtype=float)
        if arr.size == 0:
            raise ValueError("info_nce: empty negative set")
        negs = _as_tensor(np.atleast_2d(arr))
    if a.ndim != 1 or p.shape != a.shape:
        raise ad.ShapeError(f"info_nce: anchor {a.shape} and positive {p.shape} must be equal-length vectors")
    if negs.ndim != 2 or negs.shape[1] != a.shape[0]:
        raise ad.ShapeError(f"info_nce: negatives {negs.shape} incompatible with anchor dim {a.shape[0]}")
    if negs.shape[0] == 0:
        raise ValueError("info_nce: empty negative set")
    dim = a.shape[0]
    pos_score = ad.reshape(ad.dot(a, p), (1, 1))
    neg_scores = ad.matmul(ad.reshape(a, (1, dim)), ad.transpose(negs, (1, 0)))
    scores = ad.concat([pos_score, neg_scores], axis=1)
    lsm = ad.log_softmax(scores, axis=1)
    return ad.neg(_pick(lsm, [0], [0], a.data.dtype))


def coarse_loss(g1, g2):
    """Symmetric two-view InfoNCE over global vectors, averaged over sellers.

    For seller k, anchor g1[k] scores against all of g2 (row softmax, own row
    is the positive) and anchor g2[k] against all of g1 (column softmax).
    """
    g1 = _as_tensor(g1)
    g2 = _as_tensor(g2)
    if g1.ndim != 2 or g1.shape != g2.shape:
        raise ad.ShapeError(f"coarse_loss: view shapes {g1.shape} and {g2.shape} must match as [batch, dim]")
    b = g1.shape[0]
    if b < 2:
        raise ValueError("coarse_loss: need at least 2 sellers for in-batch negatives")
    scores = ad.matmul(g1, ad.transpose(g2, (1, 0)))
    both = ad.add(ad.log_softmax(scores, axis=1), ad.log_softmax(scores, axis=0))
    rows = np.arange(b)
    return ad.mul(ad.neg(_pick(both, rows, rows, g1.data.dtype)), 1.0 / b)


def fine_loss(locals_mat, positives, owners, n_sellers=None):
    """InfoNCE of masked-position outputs against pre-mask span vectors.

    locals_mat[i] is the transformer output at masked position i (either
    view), positives[i] the span vector that stood there before masking, and
    owners[i] the seller the position belongs to. Candidates for position i
    are its own positive plus the positives of every position owned by a
    different seller; other positions of the same seller are excluded via an
    additive -1e9 bias. Per-position losses are summed and divided by
    n_sellers (sellers without masked positions contribute an empty sum).
    """
    l_mat = _as_tensor(locals_mat)
    s_mat = _as_tensor(positives)
    owners = np.asarray(owners, dtype=np.int64)
    if l_mat.ndim != 2 or l_mat.shape != s_mat.shape:
        raise ad.ShapeError(f"fine_loss: locals {l_mat.shape} and positives {s_mat.shape} must match as [masks, dim]")
    m = l_mat.shape[0]
    if owners.shape != (m,):
        raise ad.ShapeError(f"fine_loss: owners shape {owners.shape} != ({m},)")
    if m == 0:
        raise ValueError("fine_loss: no masked positions in the batch")
    if np.unique(owners).size < 2:
        raise ValueError("fine_loss: masked positions from a single seller leave an empty negative set")
    if n_sellers is None:
        n_sellers = int(np.unique(owners).size)
    scores = ad.matmul(l_mat, ad.transpose(s_mat, (1, 0)))
    same = owners[:, None] == owners[None, :]
    np.fill_diagonal(same, False)
    bias = np.where(same, EXCLUDE_BIAS, 0.0).astype(l_mat.data.dtype)
    lsm = ad.log_softmax(ad.add(scores, bias), axis=1)
    rows = np.arange(m)
    return ad.mul(ad.neg(_pick(lsm, rows, rows, l_mat.data.dtype)), 1.0 / n_sellers)


def count_loss(logits, labels):
    """Mean softmax cross-entropy of the count head against bucket labels."""
    t = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if t.ndim != 2:
        raise ad.ShapeError(f"count_loss: logits must be [batch, buckets], got {t.shape}")
    n, m = t.shape
    if labels.shape != (n,):
        raise ad.ShapeError(f"count_loss: labels shape {labels.shape} != ({n},)")
    if n == 0:
        raise ValueError("count_loss: empty batch")
    if labels.min() < 0 or labels.max() >= m:
        bad = labels[(labels < 0) | (labels >= m)][0]
        raise ValueError(f"count label {bad} out of range [0, {m})")
    lsm = ad.log_softmax(t, axis=1)
    return ad.mul(ad.neg(_pick(lsm, np.arange(n), labels, t.data.dtype)), 1.0 / n)


@dataclass
class BatchViews:
    """Stacked per-batch inputs for the combined loss.

    g1 and g2 hold the global vectors of the two month-views in matching
    seller order [n_sellers, dim]. locals_mat, positives and owners stack the
    masked positions of both views (None/empty when masking is disabled);
    count_logits and count_labels stack both views' head outputs and bucket
    labels (None when the count task is disabled).
    """

    g1: ad.Tensor
    g2: ad.Tensor
    locals_mat: "ad.Tensor | None"
    positives: "ad.Tensor | None"
    owners: np.ndarray
    count_logits: "ad.Tensor | None"
    count_labels: "np.ndarray | None"
    n_sellers: int


def total_loss(views, use_coarse=True, use_fine=True, use_count=True):
    """Unweighted sum of the enabled objectives.

    Returns (total, parts) where parts maps each component name to its float
    value; disabled components report exactly 0.0 and add nothing.
    """
    parts = {"coarse": 0.0, "fine": 0.0, "count": 0.0}
    terms = []
    if use_coarse:
        term = coarse_loss(views.g1, views.g2)
        parts["coarse"] = float(term.data)
        terms.append(term)
    if use_fine:
        if views.locals_mat is None or views.positives is None:
            raise ValueError("total_loss: fine task enabled but the batch has no masked positions")
        term = fine_loss(views.locals_mat, views.positives, views.owners, views.n_sellers)
        parts["fine"] = float(term.data)
        terms.append(term)
    if use_count:
        if views.count_logits is None or views.count_labels is None:
            raise ValueError("total_loss: count task enabled but the batch has no count labels")
        term = count_loss(views.count_logits, views.count_labels)
        parts["count"] = float(term.data)
        terms.append(term)
    if not terms:
        raise ValueError("total_loss: at least one objective must stay enabled")
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    parts["total"] = float(total.data)
    return total, parts
