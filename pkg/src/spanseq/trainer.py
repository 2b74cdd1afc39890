"""Pre-training loop: dynamic padding, dynamic masking, warmup schedule, checkpoints.

Each optimizer step draws a mini-batch of sellers, assembles both month-views
with per-batch padding, re-samples masked positions (fresh per step), runs the
combined objective, clips the global gradient norm, and applies AdamW at the
warmup/decay learning rate. All randomness is derived counter-style from
(seed, stream, index), so runs are reproducible and resumable without carrying
mutable generator state.
"""

import shutil
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aggregate import build_vocab, tokenize_month
from .autodiff import NumericError
from .checkpoint import Checkpoint, save_checkpoint
from .encoder import EncoderConfig, SpanModel, assemble_batch, sequence_ids
from .optim import AdamWState, adamw_step, clip_global_norm, schedule_lr
from .pretext import BatchViews, COUNT_BUCKET_LABELS, count_label, total_loss

METRICS_COLUMNS = (
    "step", "lr", "loss_total", "loss_coarse", "loss_fine", "loss_count",
    "grad_norm", "clipped", "d_batch", "pad_saving",
)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one pre-training run; validation reports every problem at once."""

    batch_size: int = 32
    total_steps: int = 2000
    peak_lr: float = 1e-4
    warmup_proportion: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 1.0
    mask_ratio: float = 0.15
    seed: int = 7
    span_size: int = 360
    stride: int = 340
    use_coarse: bool = True
    use_fine: bool = True
    use_domain: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        problems = []
        if self.batch_size < 2:
            problems.append(f"batch_size must be >= 2 (in-batch negatives), got {self.batch_size}")
        if self.total_steps < 1:
            problems.append(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 < self.warmup_proportion < 1:
            problems.append(f"warmup_proportion must be in (0, 1), got {self.warmup_proportion}")
        if self.peak_lr <= 0:
            problems.append(f"peak_lr must be positive, got {self.peak_lr}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                problems.append(f"{name} must be in [0, 1), got {b}")
        if self.clip_norm <= 0:
            problems.append(f"clip_norm must be positive, got {self.clip_norm}")
        if not 0 < self.mask_ratio <= 1:
            problems.append(f"mask_ratio must be in (0, 1], got {self.mask_ratio}")
        if self.stride < 1:
            problems.append(f"stride must be >= 1, got {self.stride}")
        elif self.span_size < self.stride:
            problems.append(f"span_size {self.span_size} smaller than stride {self.stride}")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not (self.use_coarse or self.use_fine or self.use_domain):
            problems.append("at least one pretext task must stay enabled")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def encoder_config(self):
        return EncoderConfig(span_size=self.span_size, stride=self.stride, dtype=self.dtype)


@dataclass
class SellerData:
    """Precomputed span ids and count labels for one seller's two month-views."""

    seller_id: str
    spans: tuple  # (month-0 spans, month-1 spans), each a list of (span_index, ids)
    counts: tuple  # count-bucket label per view
    lengths: tuple  # effective span count per view after position-table truncation


@dataclass
class PaddedBatch:
    """Two assembled month-views padded to this batch's own maximum length."""

    view1: object
    view2: object
    count_labels: np.ndarray  # [2B]: view-1 block then view-2 block
    seller_ids: list
    d_batch: int
    d_max: int
    pad_saving: int

    def __post_init__(self):
        if self.d_batch > self.d_max:
            raise ValueError(f"d_batch {self.d_batch} exceeds corpus d_max {self.d_max}")


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    checkpoint_paths: list
    n_sellers: int
    d_max: int
    steps: int
    epochs: int
    final_parts: dict
    pad_saving_total: int


def build_dataset(corpus, vocabs, enc_config):
    """Tokenize both months of every seller; sellers missing a view are skipped.

    Returns (dataset, d_max) where d_max is the longest effective span
    sequence in the corpus, the reference point for padding savings.
    """
    if corpus.n_months < 2:
        raise ValueError(
            f"corpus covers {corpus.n_months} month(s): the paired-view objective needs 2 calendar months"
        )
    max_spans = enc_config.max_positions - 1
    dataset = []
    d_max = 0
    for sid in corpus.sellers:
        views = []
        for m in (0, 1):
            events = corpus.month_slice(sid, m)
            start = corpus.month_bounds(m)[0]
            spans = sequence_ids(tokenize_month(events, start), vocabs, enc_config)
            if not spans:
                warnings.warn(f"seller {sid}: no events in month {m}; skipped from training")
                views = None
                break
            views.append((spans, count_label(events)))
        if views is None:
            continue
        lengths = tuple(min(len(v[0]), max_spans) for v in views)
        d_max = max(d_max, *lengths)
        dataset.append(
            SellerData(
                seller_id=sid,
                spans=(views[0][0], views[1][0]),
                counts=(views[0][1], views[1][1]),
                lengths=lengths,
            )
        )
    return dataset, d_max


def epoch_batches(dataset, batch_size, seed, epoch):
    """Length-bucketed shuffle: sellers of similar length land in one batch.

    Sellers are sorted by total span count, shuffled within coarse buckets of
    8 batches' worth, chunked, and the batch order is shuffled. A trailing
    batch of fewer than 2 sellers is dropped.
    """
    rng = np.random.default_rng([seed, 3, epoch])
    order = np.argsort([sum(d.lengths) for d in dataset], kind="stable")
    bucket = batch_size * 8
    mixed = np.concatenate([rng.permutation(order[i : i + bucket]) for i in range(0, len(order), bucket)])
    batches = [mixed[i : i + batch_size].tolist() for i in range(0, len(mixed), batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return [batches[i] for i in rng.permutation(len(batches))]


def make_batch(sellers, enc_config, mask_ratio, rng, d_max, masking=True):
    """Assemble both month-views of a seller batch with fresh mask positions.

    Masks cover about mask_ratio of each view's spans, at least one. With
    masking off (fine task ablated) the views carry no masked positions.
    """
    if len(sellers) < 2:
        raise ValueError(f"batch needs at least 2 sellers, got {len(sellers)}")
    views = []
    for m in (0, 1):
        mask_positions = None
        if masking:
            mask_positions = []
            for s in sellers:
                n_eff = s.lengths[m]
                n_mask = min(n_eff, max(1, int(round(mask_ratio * n_eff))))
                picks = rng.choice(n_eff, size=n_mask, replace=False)
                mask_positions.append(sorted(int(x) for x in picks))
        views.append(assemble_batch([s.spans[m] for s in sellers], enc_config, mask_positions))
    labels = np.array([s.counts[0] for s in sellers] + [s.counts[1] for s in sellers], dtype=np.int64)
    d1, d2 = views[0].d_batch, views[1].d_batch
    return PaddedBatch(
        view1=views[0],
        view2=views[1],
        count_labels=labels,
        seller_ids=[s.seller_id for s in sellers],
        d_batch=max(d1, d2),
        d_max=d_max,
        pad_saving=(d_max - d1) + (d_max - d2),
    )


def train_step(model, state, pb, config, step, dropout_rng=None):
    """One optimizer step; returns (parts, pre_clip_norm, lr)."""
    if dropout_rng is None:
        dropout_rng = np.random.default_rng([config.seed, 5, step])
    with ad.ComputationTape():
        g1, _, l1, s1 = model.forward(pb.view1, train=True, rng=dropout_rng)
        g2, _, l2, s2 = model.forward(pb.view2, train=True, rng=dropout_rng)
        locals_mat = positives = None
        owners = np.array([], dtype=np.int64)
        if config.use_fine:
            locals_mat = ad.concat([l1, l2], axis=0)
            positives = ad.concat([s1, s2], axis=0)
            owners = np.concatenate([pb.view1.mask_seq, pb.view2.mask_seq])
        logits = labels = None
        if config.use_domain:
            logits = model.count_logits(ad.concat([g1, g2], axis=0))
            labels = pb.count_labels
        views = BatchViews(
            g1=g1, g2=g2, locals_mat=locals_mat, positives=positives, owners=owners,
            count_logits=logits, count_labels=labels, n_sellers=len(pb.seller_ids),
        )
        total, parts = total_loss(
            views, use_coarse=config.use_coarse, use_fine=config.use_fine, use_count=config.use_domain
        )
        if not np.isfinite(parts["total"]):
            raise NumericError(f"non-finite loss at step {step}")
        ad.backward(total)
    grads = {n: p.grad for n, p in model.params.items() if p.grad is not None}
    for p in model.params.values():
        p.grad = None
    grads, pre_norm = clip_global_norm(grads, config.clip_norm)
    # evaluate the schedule at the step midpoint so every step's rate is
    # strictly positive while still warming from zero and decaying to zero
    lr = schedule_lr(step + 0.5, config.total_steps, config.peak_lr, config.warmup_proportion)
    adamw_step(model.params, grads, state, lr, config.weight_decay, config.beta1, config.beta2)
    return parts, pre_norm, lr


def train(corpus, config, out_dir, encoder_config=None, progress=None):
    """Run the full pre-training loop; writes metrics.tsv and checkpoints.

    Checkpoints land every 10% of total_steps plus a checkpoint_final.ckpt
    copy. A non-finite loss or gradient aborts with NumericError and leaves
    the last good checkpoint in place.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    enc = encoder_config if encoder_config is not None else config.encoder_config()
    if enc.count_buckets != len(COUNT_BUCKET_LABELS):
        raise ValueError(f"encoder count_buckets {enc.count_buckets} != {len(COUNT_BUCKET_LABELS)}")
    vocabs = build_vocab(corpus)
    dataset, d_max = build_dataset(corpus, vocabs, enc)
    if len(dataset) < 2:
        raise ValueError(f"need at least 2 sellers with both month views, got {len(dataset)}")
    model = SpanModel(enc, {ch: len(v) for ch, v in vocabs.items()}, seed=config.seed)
    state = AdamWState()
    metrics_path = out / "metrics.tsv"
    ckpt_every = max(1, config.total_steps // 10)
    ckpt_paths = []
    last_ckpt = None
    batches = iter(())
    epoch = -1
    parts = {}
    saving_total = 0

    def write_ckpt(step):
        path = out / f"checkpoint_{step:06d}.ckpt"
        save_checkpoint(path, Checkpoint(
            train_config=config, encoder_config=enc, vocabs=vocabs,
            params=model.state_arrays(), opt_state=state, step=step,
            rng_state={"scheme": "counter", "seed": config.seed, "next_step": step},
        ))
        ckpt_paths.append(path)
        return path

    with open(metrics_path, "w", encoding="utf-8") as mf:
        mf.write("\t".join(METRICS_COLUMNS) + "\n")
        for step in range(config.total_steps):
            batch_idx = next(batches, None)
            if batch_idx is None:
                epoch += 1
                batches = iter(epoch_batches(dataset, min(config.batch_size, len(dataset)), config.seed, epoch))
                batch_idx = next(batches)
            sellers = [dataset[i] for i in batch_idx]
            mask_rng = np.random.default_rng([config.seed, 4, step])
            pb = make_batch(sellers, enc, config.mask_ratio, mask_rng, d_max, masking=config.use_fine)
            try:
                parts, pre_norm, lr = train_step(model, state, pb, config, step)
            except NumericError as e:
                hint = f"; last checkpoint retained at {last_ckpt}" if last_ckpt else "; no checkpoint written yet"
                raise NumericError(f"{e}{hint}") from e
            clipped = int(pre_norm > config.clip_norm)
            saving_total += pb.pad_saving
            mf.write(
                f"{step}\t{lr:.10g}\t{parts['total']:.8f}\t{parts['coarse']:.8f}\t"
                f"{parts['fine']:.8f}\t{parts['count']:.8f}\t{pre_norm:.8f}\t{clipped}\t"
                f"{pb.d_batch}\t{pb.pad_saving}\n"
            )
            if (step + 1) % ckpt_every == 0 or step + 1 == config.total_steps:
                mf.flush()
                last_ckpt = write_ckpt(step + 1)
            if progress is not None and (step % max(1, config.total_steps // 20) == 0 or step + 1 == config.total_steps):
                progress(step, parts)
    final = out / "checkpoint_final.ckpt"
    shutil.copyfile(last_ckpt, final)
    return TrainResult(
        checkpoint_path=final,
        metrics_path=metrics_path,
        checkpoint_paths=ckpt_paths,
        n_sellers=len(dataset),
        d_max=d_max,
        steps=config.total_steps,
        epochs=epoch + 1,
        final_parts=parts,
        pad_saving_total=saving_total,
    )


def read_metrics(path):
    """Load a metrics.tsv into a dict of column name -> float array."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split("\t")
        rows = [line.strip().split("\t") for line in f if line.strip()]
    cols = {name: np.array([float(r[i]) for r in rows]) for i, name in enumerate(header)}
    return cols
