"""Downstream evaluation of pre-trained behavior representations.

The encoder stays frozen throughout: sellers are embedded once per month view,
and every score is computed on those fixed vectors. The module provides the
clustering-quality protocol (undersample, k-means, normalized mutual
information), a rank-based AUC, logistic-regression and multi-layer-perceptron
probes trained with the package's own optimizer, a hand-crafted feature
baseline over the raw event logs, and the ablation grid runner that retrains
the encoder under reduced configurations and scores each one.
"""

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aggregate import tokenize_month
from .checkpoint import Checkpoint, file_sha256, load_checkpoint
from .corpus import BEHAVIORS, FAILURE_KINDS
from .encoder import SpanModel, assemble_batch, sequence_ids
from .optim import AdamWState, adamw_step
from .pretext import count_label
from .trainer import TrainConfig, train

BASELINE_FEATURE_NAMES = tuple(
    [f"count_{b}" for b in BEHAVIORS]
    + [f"fail_{b}" for b in FAILURE_KINDS]
    + ["distinct_geo", "active_minutes", "max_minute_burst", "night_fraction"]
)


def load_model(checkpoint):
    """Rebuild a frozen SpanModel from a checkpoint path or object.

    Returns (model, checkpoint, checkpoint_hash); the hash is "in-memory"
    when no file was involved.
    """
    if isinstance(checkpoint, Checkpoint):
        ckpt, chash = checkpoint, "in-memory"
    else:
        ckpt, chash = load_checkpoint(checkpoint), file_sha256(checkpoint)
    model = SpanModel(ckpt.encoder_config, {ch: len(v) for ch, v in ckpt.vocabs.items()}, seed=0)
    model.load_state(ckpt.params)
    return model, ckpt, chash


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingTable:
    """One fixed representation vector per seller for one month view."""

    seller_ids: list
    vectors: np.ndarray
    month: int
    checkpoint_hash: str
    cls_only: tuple = ()  # sellers with an empty month: encoded from the CLS slot alone

    def __post_init__(self):
        if len(self.seller_ids) != len(set(self.seller_ids)):
            raise ValueError("embedding table has duplicate seller ids")
        if self.vectors.shape[0] != len(self.seller_ids):
            raise ValueError(
                f"{self.vectors.shape[0]} vectors for {len(self.seller_ids)} sellers"
            )

    def row(self, seller_id):
        return self.vectors[self.seller_ids.index(seller_id)]

    def save(self, path):
        """Tab-separated: header comments, then seller_id and the vector."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                f"# embedding_table\tdim={self.vectors.shape[1]}\tmonth={self.month}"
                f"\tcheckpoint={self.checkpoint_hash}\n"
            )
            fh.write("# cls_only\t" + (",".join(self.cls_only) if self.cls_only else "-") + "\n")
            for sid, vec in zip(self.seller_ids, self.vectors):
                fh.write(sid + "\t" + "\t".join(f"{v:.17g}" for v in vec) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            head = fh.readline().rstrip("\n").split("\t")
            meta = dict(part.split("=", 1) for part in head[1:])
            flagged = fh.readline().rstrip("\n").split("\t")[1]
            ids, rows = [], []
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                ids.append(parts[0])
                rows.append([float(v) for v in parts[1:]])
        vectors = np.array(rows, dtype=np.float64)
        if vectors.shape[1] != int(meta["dim"]):
            raise ValueError(f"row width {vectors.shape[1]} != declared dim {meta['dim']}")
        return cls(
            seller_ids=ids,
            vectors=vectors,
            month=int(meta["month"]),
            checkpoint_hash=meta["checkpoint"],
            cls_only=() if flagged == "-" else tuple(flagged.split(",")),
        )


def embed(checkpoint, corpus, month, batch_size=64):
    """Encode every seller's given month into a fixed representation.

    Inference applies no masking; sellers with an empty month view fall back
    to the CLS-only encoding and are flagged in the table metadata.
    """
    model, ckpt, chash = load_model(checkpoint)
    enc = ckpt.encoder_config
    sellers = corpus.sellers
    start = corpus.month_bounds(month)[0]
    vectors = np.zeros((len(sellers), enc.model_dim), dtype=enc.np_dtype)
    flagged = []
    for lo in range(0, len(sellers), batch_size):
        chunk = sellers[lo : lo + batch_size]
        seqs = []
        for sid in chunk:
            spans = sequence_ids(tokenize_month(corpus.month_slice(sid, month), start), ckpt.vocabs, enc)
            if not spans:
                flagged.append(sid)
            seqs.append(spans)
        batch = assemble_batch(seqs, enc, None)
        if batch.mask_out_flat.size:
            raise AssertionError("inference batch must carry zero masked positions")
        g, _, _, _ = model.forward(batch, train=False)
        vectors[lo : lo + len(chunk)] = g.data
    return EmbeddingTable(list(sellers), vectors, month, chash, tuple(flagged))


# ---------------------------------------------------------------------------
# hand-crafted baseline


def baseline_features(corpus, seller_id, month):
    """Aggregate count features over one seller-month of raw events.

    Per-behavior counts, failure counts for the verification-style behaviors,
    distinct regions, distinct active minutes, the largest single-minute
    burst, and the fraction of events between 00:00 and 06:00 UTC.
    """
    events = corpus.month_slice(seller_id, month)
    v = np.zeros(len(BASELINE_FEATURE_NAMES), dtype=np.float64)
    if not events:
        return v
    b_index = {b: i for i, b in enumerate(BEHAVIORS)}
    f_index = {b: len(BEHAVIORS) + i for i, b in enumerate(FAILURE_KINDS)}
    geos = set()
    minutes = {}
    night = 0
    for e in events:
        v[b_index[e.behavior]] += 1
        if not e.success and e.behavior in f_index:
            v[f_index[e.behavior]] += 1
        geos.add(e.geo)
        m = e.timestamp // 60
        minutes[m] = minutes.get(m, 0) + 1
        if (e.timestamp % 86400) // 3600 < 6:
            night += 1
    base = len(BEHAVIORS) + len(FAILURE_KINDS)
    v[base] = len(geos)
    v[base + 1] = len(minutes)
    v[base + 2] = max(minutes.values())
    v[base + 3] = night / len(events)
    return v


def baseline_matrix(corpus, month):
    """Baseline feature rows for all sellers, aligned with corpus.sellers."""
    return np.stack([baseline_features(corpus, sid, month) for sid in corpus.sellers])


# ---------------------------------------------------------------------------
# metrics


def auc(scores, labels):
    """Probability that a random positive outranks a random negative; ties 0.5.

    Computed from midranks, which equals the exhaustive pairwise comparison.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"auc: {scores.shape[0]} scores vs {labels.shape[0]} labels")
    if not np.isfinite(scores).all():
        raise ValueError("auc: scores contain non-finite values")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc: needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    _, inverse, counts = np.unique(scores[order], return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    midranks = np.empty(scores.size, dtype=np.float64)
    midranks[order] = (starts + (counts + 1) / 2.0)[inverse]
    u = midranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def nmi_score(assignment, labels):
    """Normalized mutual information, arithmetic-mean-of-entropies normalization.

    A degenerate side (single cluster or single label) scores 0.
    """
    a = np.asarray(assignment).ravel()
    b = np.asarray(labels).ravel()
    if a.shape != b.shape or a.size == 0:
        raise ValueError("nmi_score: assignments and labels must be equal-length and non-empty")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.float64)
    np.add.at(table, (ai, bi), 1.0)
    p = table / a.size
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    ha = -np.sum(pa[pa > 0] * np.log(pa[pa > 0]))
    hb = -np.sum(pb[pb > 0] * np.log(pb[pb > 0]))
    denom = (ha + hb) / 2.0
    if denom <= 0.0:
        return 0.0
    nz = p > 0
    mi = np.sum(p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz]))
    return float(min(max(mi / denom, 0.0), 1.0))


def kmeans(x, k, seed, restarts=10, max_iter=100):
    """Lloyd's algorithm with k-means++ seeding; best of `restarts` by inertia.

    Returns (assignment, inertia). Deterministic given the seed; each restart
    draws from its own counter-derived stream.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValueError(f"kmeans: {n} points cannot form {k} clusters")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, 101, r])
        centers = _kmeanspp(x, k, rng)
        assign = None
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            closest = d2.argmin(axis=1)
            if assign is not None and np.array_equal(closest, assign):
                break
            assign = closest
            for c in range(k):
                members = assign == c
                if members.any():
                    centers[c] = x[members].mean(axis=0)
                else:
                    centers[c] = x[d2[np.arange(n), assign].argmax()]
        inertia = float(d2[np.arange(n), assign].sum())
        if best is None or inertia < best[1]:
            best = (assign.copy(), inertia)
    return best


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None, :, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    return np.array(centers, dtype=np.float64)


def undersample(labels, ratio, rng):
    """Keep all positives and at most ratio-times-as-many random negatives."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels != 1)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("undersample: needs both classes present")
    keep_neg = rng.permutation(neg)[: min(neg.size, ratio * pos.size)]
    return np.sort(np.concatenate([pos, keep_neg]))


@dataclass(frozen=True)
class NmiResult:
    mean: float
    std: float
    scores: tuple


def nmi(vectors, labels, k=2, ratio=20, sampling_seeds=(0, 1, 2, 3, 4), restarts=10):
    """Clustering-quality protocol on fixed vectors.

    For each sampling seed: undersample negatives to roughly ratio:1 against
    the positives, standardize the subsample, cluster with seeded k-means,
    and score the assignment against the true labels. Reports mean and
    standard deviation over the seeds.
    """
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ValueError("nmi: needs at least 2 distinct labels")
    x = np.asarray(vectors, dtype=np.float64)
    scores = []
    for s in sampling_seeds:
        keep = undersample(labels, ratio, np.random.default_rng([s, 100]))
        sub = x[keep]
        std = sub.std(axis=0)
        sub = (sub - sub.mean(axis=0)) / np.where(std < 1e-12, 1.0, std)
        assign, _ = kmeans(sub, k, seed=s, restarts=restarts)
        scores.append(nmi_score(assign, labels[keep]))
    arr = np.array(scores, dtype=np.float64)
    return NmiResult(float(arr.mean()), float(arr.std()), tuple(float(v) for v in arr))


# ---------------------------------------------------------------------------
# classifier probes


@dataclass(frozen=True)
class EvalSplit:
    """Stratified train/test index split; both labels appear on both sides."""

    train_idx: np.ndarray
    test_idx: np.ndarray


def make_split(labels, seed, test_fraction=0.2):
    """Seeded stratified split; every class needs at least 2 members."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 7])
    train, test = [], []
    values = np.unique(labels)
    if values.size < 2:
        raise ValueError("make_split: needs at least 2 distinct labels")
    for value in values:
        idx = rng.permutation(np.flatnonzero(labels == value))
        if idx.size < 2:
            raise ValueError(f"make_split: class {value!r} has {idx.size} member(s), needs >= 2")
        n_test = min(idx.size - 1, max(1, int(round(test_fraction * idx.size))))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return EvalSplit(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)))


def oversample_positives(indices, labels, factor=4):
    """Repeat positive rows so each appears `factor` times; negatives stay single."""
    indices = np.asarray(indices)
    labels = np.asarray(labels)
    pos = indices[labels[indices] == 1]
    neg = indices[labels[indices] != 1]
    return np.concatenate([neg, np.repeat(pos, factor)])


@dataclass
class FittedClassifier:
    """Trained probe: frozen inputs in, anomaly score out."""

    kind: str
    weights: dict
    feature_mean: np.ndarray
    feature_std: np.ndarray
    test_auc: float
    test_scores: np.ndarray
    test_idx: np.ndarray
    best_epoch: int

    def decision(self, vectors):
        """Raw logit per row; monotone in the predicted probability."""
        x = (np.asarray(vectors, dtype=np.float64) - self.feature_mean) / self.feature_std
        w = self.weights
        if self.kind == "MLP":
            x = np.maximum(x @ w["w1"] + w["b1"], 0.0)
            return (x @ w["w2"] + w["b2"]).ravel()
        return (x @ w["w"] + w["b"]).ravel()


def _bce_with_logits(z, y):
    # mean(softplus(z) - y*z): the numerically safe binary cross-entropy
    return ad.mean(ad.sub(ad.softplus(z), ad.mul(z, y)))


def train_classifier(kind, vectors, labels, split, seed=0, epochs=300, hidden_dim=32,
                     oversample_factor=4, lr=None, patience=50, weight_decay=None):
    """Fit a probe on frozen vectors and report its held-out ranking quality.

    kind "LR" is a single linear layer with sigmoid; "MLP" adds one hidden
    ReLU layer, decays weights, and keeps the epoch with the lowest
    positive-reweighted binary cross-entropy on a 10% validation cut of the
    training fold. Loss, not AUC, drives that selection (the cut holds only
    a couple of positives, so its AUC pins to 1.0 within a few epochs and
    would freeze an undertrained snapshot), and the reweighting mirrors the
    oversampled training objective (unweighted, the negatives dominate and
    "always negative" looks like progress). Positives are duplicated
    oversample_factor times in the training fold only. Full-batch AdamW
    throughout, deterministic per seed.
    """
    if kind not in ("LR", "MLP"):
        raise ValueError(f"train_classifier: unknown kind {kind!r}")
    x = np.asarray(vectors, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("train_classifier: vectors contain non-finite values")
    labels = np.asarray(labels)
    d = x.shape[1]
    lr = lr if lr is not None else (0.05 if kind == "LR" else 0.005)
    weight_decay = weight_decay if weight_decay is not None else (0.0 if kind == "LR" else 0.1)

    mean = x[split.train_idx].mean(axis=0)
    std = x[split.train_idx].std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)

    fit_idx = split.train_idx
    val_idx = None
    if kind == "MLP":
        inner = make_split(labels[split.train_idx], seed=seed * 1000 + 9, test_fraction=0.1)
        fit_idx = split.train_idx[inner.train_idx]
        val_idx = split.train_idx[inner.test_idx]

    rows = oversample_positives(fit_idx, labels, oversample_factor)
    xt = (x[rows] - mean) / std
    yt = labels[rows].astype(np.float64)[:, None]

    if kind == "LR":
        params = {
            "w": ad.tensor(np.zeros((d, 1)), requires_grad=True),
            "b": ad.tensor(np.zeros(1), requires_grad=True),
        }
    else:
        rng = np.random.default_rng([seed, 31])
        params = {
            "w1": ad.tensor(rng.normal(0.0, math.sqrt(2.0 / d), (d, hidden_dim)), requires_grad=True),
            "b1": ad.tensor(np.zeros(hidden_dim), requires_grad=True),
            "w2": ad.tensor(rng.normal(0.0, math.sqrt(1.0 / hidden_dim), (hidden_dim, 1)), requires_grad=True),
            "b2": ad.tensor(np.zeros(1), requires_grad=True),
        }

    def forward(xv):
        if kind == "MLP":
            h = ad.relu(ad.add(ad.matmul(xv, params["w1"]), params["b1"]))
            return ad.add(ad.matmul(h, params["w2"]), params["b2"])
        return ad.add(ad.matmul(xv, params["w"]), params["b"])

    def np_scores(idx, weights):
        xv = (x[idx] - mean) / std
        if kind == "MLP":
            h = np.maximum(xv @ weights["w1"] + weights["b1"], 0.0)
            return (h @ weights["w2"] + weights["b2"]).ravel()
        return (xv @ weights["w"] + weights["b"]).ravel()

    state = AdamWState()
    xt_t = ad.tensor(xt)
    yt_t = ad.tensor(yt)
    best = (np.inf, 0, {n: p.data.copy() for n, p in params.items()})
    for epoch in range(epochs):
        with ad.ComputationTape():
            loss = _bce_with_logits(forward(xt_t), yt_t)
            ad.backward(loss)
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        for p in params.values():
            p.grad = None
        adamw_step(params, grads, state, lr, weight_decay=weight_decay)
        if kind == "MLP":
            current = {n: p.data for n, p in params.items()}
            z = np_scores(val_idx, current)
            yv = labels[val_idx].astype(np.float64)
            wv = np.where(yv == 1.0, float(oversample_factor), 1.0)
            per_row = np.logaddexp(0.0, z) - yv * z
            val_loss = float((wv * per_row).sum() / wv.sum())
            if val_loss < best[0]:
                best = (val_loss, epoch, {n: v.copy() for n, v in current.items()})
            elif epoch - best[1] >= patience:
                break
    if kind == "MLP":
        weights = best[2]
        best_epoch = best[1]
    else:
        weights = {n: p.data.copy() for n, p in params.items()}
        best_epoch = epochs - 1

    test_scores = np_scores(split.test_idx, weights)
    return FittedClassifier(
        kind=kind,
        weights=weights,
        feature_mean=mean,
        feature_std=std,
        test_auc=auc(test_scores, labels[split.test_idx]),
        test_scores=test_scores,
        test_idx=np.asarray(split.test_idx).copy(),
        best_epoch=best_epoch,
    )


# ---------------------------------------------------------------------------
# failure-count head


def count_head_accuracy(checkpoint, corpus, month=1):
    """Fraction of sellers whose predicted failure-count bucket is exact."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    table = embed(checkpoint, corpus, month)
    logits = table.vectors.astype(np.float64) @ checkpoint.params["count_w"] + checkpoint.params["count_b"]
    truth = np.array([count_label(corpus.month_slice(sid, month)) for sid in table.seller_ids])
    return float(np.mean(logits.argmax(axis=1) == truth))


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class EvaluationReport:
    """Baseline-vs-embedding comparison on one corpus and month view."""

    rows: list  # dicts: features, model, auc
    fits: dict  # (features, model) -> FittedClassifier
    nmi_embedding: NmiResult
    nmi_baseline: NmiResult
    labels: np.ndarray
    split: EvalSplit
    month: int


def evaluation_report(corpus, table, split_seed=0, nmi_seeds=(0, 1, 2, 3, 4)):
    """Score baseline features and embeddings with both probes plus clustering."""
    if list(table.seller_ids) != list(corpus.sellers):
        raise ValueError("embedding table does not cover exactly this corpus's sellers")
    labels = np.array([corpus.labels[sid] for sid in table.seller_ids])
    base = baseline_matrix(corpus, table.month)
    split = make_split(labels, split_seed)
    rows, fits = [], {}
    for features_name, features in (("baseline", base), ("embedding", table.vectors)):
        for kind in ("LR", "MLP"):
            fit = train_classifier(kind, features, labels, split, seed=split_seed)
            fits[(features_name, kind)] = fit
            rows.append({"features": features_name, "model": kind, "auc": fit.test_auc})
    return EvaluationReport(
        rows=rows,
        fits=fits,
        nmi_embedding=nmi(table.vectors, labels, sampling_seeds=nmi_seeds),
        nmi_baseline=nmi(base, labels, sampling_seeds=nmi_seeds),
        labels=labels,
        split=split,
        month=table.month,
    )


# ---------------------------------------------------------------------------
# ablation grid


@dataclass(frozen=True)
class AblationEntry:
    name: str
    config: TrainConfig


def default_grid(base=None):
    """The standard comparison grid: span size, span overlap, and single-task ablations."""
    base = base if base is not None else TrainConfig()
    rows = (
        ("full", {"span_size": 360, "stride": 340}),
        ("span-180x160", {"span_size": 180, "stride": 160}),
        ("span-720x700", {"span_size": 720, "stride": 700}),
        ("no-overlap", {"span_size": 360, "stride": 360}),
        ("no-coarse", {"span_size": 360, "stride": 340, "use_coarse": False}),
        ("no-fine", {"span_size": 360, "stride": 340, "use_fine": False}),
        ("no-count", {"span_size": 360, "stride": 340, "use_domain": False}),
    )
    return tuple(AblationEntry(name, replace(base, **kw)) for name, kw in rows)


ABLATION_COLUMNS = ("config", "span_size", "stride", "tasks", "nmi_mean", "nmi_std", "auc_lr", "auc_mlp")


def ablate(corpus, grid, out_dir, month=1, split_seed=0, nmi_seeds=(0, 1, 2, 3, 4),
           encoder_overrides=None, progress=None):
    """Pretrain, embed, and score every grid entry; writes report files.

    Entries run sequentially (each holds a full model plus optimizer state).
    encoder_overrides, when given, is applied to every entry's encoder
    configuration, which keeps reduced-scale comparisons honest: every entry
    changes only what its name says.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in grid:
        enc = entry.config.encoder_config()
        if encoder_overrides:
            enc = replace(enc, **encoder_overrides)
        hook = None
        if progress is not None:
            hook = lambda step, parts, name=entry.name: progress(name, step, parts)
        result = train(corpus, entry.config, out / entry.name, encoder_config=enc, progress=hook)
        table = embed(result.checkpoint_path, corpus, month)
        labels = np.array([corpus.labels[sid] for sid in table.seller_ids])
        score = nmi(table.vectors, labels, sampling_seeds=nmi_seeds)
        split = make_split(labels, split_seed)
        fit_lr = train_classifier("LR", table.vectors, labels, split, seed=split_seed)
        fit_mlp = train_classifier("MLP", table.vectors, labels, split, seed=split_seed)
        tasks = "".join(
            flag
            for flag, on in (
                ("C", entry.config.use_coarse),
                ("F", entry.config.use_fine),
                ("N", entry.config.use_domain),
            )
            if on
        )
        rows.append({
            "config": entry.name,
            "span_size": entry.config.span_size,
            "stride": entry.config.stride,
            "tasks": tasks,
            "nmi_mean": score.mean,
            "nmi_std": score.std,
            "auc_lr": fit_lr.test_auc,
            "auc_mlp": fit_mlp.test_auc,
        })
    write_report(rows, ABLATION_COLUMNS, out, stem="ablation")
    return rows


# ---------------------------------------------------------------------------
# plain-text and delimited rendering


def _format_cell(value):
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_table(rows, columns):
    """Aligned plain-text table over a list of row dicts."""
    grid = [[_format_cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(g[i]) for g in grid)) if grid else len(c) for i, c in enumerate(columns)]
    lines = [
        "  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for g in grid:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(g, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_report(rows, columns, out_dir, stem="report"):
    """Write rows as aligned text plus a tab-separated machine-readable file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tsv = out / f"{stem}.tsv"
    txt = out / f"{stem}.txt"
    with open(tsv, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for r in rows:
            fh.write("\t".join(_format_cell(r[c]) for c in columns) + "\n")
    txt.write_text(render_table(rows, columns), encoding="utf-8")
    return tsv, txt
