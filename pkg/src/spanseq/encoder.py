"""Span encoder: sliding-window grouping, multi-window CNN, bidirectional Transformer.

Minute tokens are grouped into fixed sliding windows over the 43,200-minute
month timeline; each non-empty window (a span) is encoded by a multi-window
convolution with max-pooling into a 192-dim vector, and the span sequence,
prefixed with a CLS row, runs through a pre-norm Transformer. The CLS output
is the global representation g; outputs at masked positions are the local
representations.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .aggregate import token_ids

NEG_BIAS = -1e9
POOL_MASK = -1e30


def window_count(minutes, span_size, stride):
    """Number of sliding windows tiling a timeline of the given length."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if span_size < stride:
        raise ValueError(f"span_size {span_size} smaller than stride {stride} (negative overlap)")
    if span_size > minutes:
        raise ValueError(f"span_size {span_size} exceeds timeline of {minutes} minutes")
    return (minutes - span_size) // stride + 1


def windows_for_minute(minute, span_size, stride, count):
    """Indices of every window covering a minute: k*stride <= m < k*stride+span."""
    lo = max(0, -(-(minute - span_size + 1) // stride))  # ceil division
    hi = min(count - 1, minute // stride)
    return range(lo, hi + 1)


def window_spans(minute_tokens, span_size=360, stride=340, minutes=43200):
    """Group minute tokens into (span_index, members) pairs, empty windows omitted."""
    count = window_count(minutes, span_size, stride)
    groups = {}
    for tok in minute_tokens:
        for k in windows_for_minute(tok.minute_index, span_size, stride, count):
            groups.setdefault(k, []).append(tok)
    return [(k, groups[k]) for k in sorted(groups)]


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    conv_widths: tuple = (3, 4, 5)
    feature_maps: int = 64
    layers: int = 4
    heads: int = 4
    head_dim: int = 48
    ffn_dim: int = 768
    dropout: float = 0.1
    span_size: int = 360
    stride: int = 340
    minutes: int = 43200
    count_buckets: int = 8
    dtype: str = "float64"

    @property
    def model_dim(self):
        return len(self.conv_widths) * self.feature_maps

    @property
    def max_positions(self):
        return window_count(self.minutes, self.span_size, self.stride) + 1

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def __post_init__(self):
        if self.model_dim != self.heads * self.head_dim:
            raise ValueError(
                f"dimensional mismatch: conv output {self.model_dim} "
                f"!= attention {self.heads} x {self.head_dim}"
            )
        window_count(self.minutes, self.span_size, self.stride)


def sequence_ids(tokens, vocabs, config):
    """Vocabulary ids per span: list of (span_index, int32 array [T, 4])."""
    out = []
    for k, members in window_spans(tokens, config.span_size, config.stride, config.minutes):
        ids = np.array([token_ids(t, vocabs) for t in members], dtype=np.int32)
        out.append((k, ids))
    return out


@dataclass
class InputBatch:
    """Padded, bucketed model input for a list of span sequences."""

    n_seq: int
    d_batch: int  # max span count in this batch
    buckets: list  # (ids [n, T, 4] int32, valid [n, T] float)
    gather: np.ndarray  # [n_seq, d_batch] -> row into sentinel+flat span matrix
    pos_ids: np.ndarray  # [n_seq, d_batch + 1] position-table ids, CLS first
    attn_valid: np.ndarray  # [n_seq, d_batch + 1] bool
    mask_out_flat: np.ndarray  # flattened transformer-output rows of masked slots
    mask_span_flat: np.ndarray  # flattened span-matrix rows of masked slots
    mask_seq: np.ndarray  # sequence index per masked slot
    seq_lengths: np.ndarray


def _bucket_length(t, span_size):
    n = 4
    while n < t:
        n *= 2
    return min(n, max(span_size, t))


def assemble_batch(sequences, config, mask_positions=None):
    """Bucket spans by padded length and build gather/attention indices.

    sequences: per sequence, a list of (span_index, ids [T, 4]). Sequences
    longer than the position table keep their most recent spans. Mask
    positions index into each sequence's span list.
    """
    max_spans = config.max_positions - 1
    seqs = []
    for spans in sequences:
        spans = sorted(spans, key=lambda p: p[0])
        if len(spans) > max_spans:
            spans = spans[-max_spans:]
        seqs.append(spans)
    n_seq = len(seqs)
    lengths = np.array([len(s) for s in seqs], dtype=np.int32)
    d_batch = int(lengths.max()) if n_seq else 0

    by_bucket = {}
    slot_of = {}
    for i, spans in enumerate(seqs):
        for slot, (k, ids) in enumerate(spans):
            b = _bucket_length(len(ids), config.span_size)
            by_bucket.setdefault(b, []).append((i, slot, ids))

    buckets = []
    gather = np.zeros((n_seq, d_batch), dtype=np.int64)
    flat_row = 1  # row 0 is the all-zero sentinel for padding slots
    for b in sorted(by_bucket):
        entries = by_bucket[b]
        ids = np.zeros((len(entries), b, 4), dtype=np.int32)
        valid = np.zeros((len(entries), b), dtype=config.np_dtype)
        for r, (i, slot, span_ids) in enumerate(entries):
            t = len(span_ids)
            ids[r, :t] = span_ids
            valid[r, :t] = 1.0
            gather[i, slot] = flat_row
            flat_row += 1
        buckets.append((ids, valid))

    pos_ids = np.zeros((n_seq, d_batch + 1), dtype=np.int64)
    attn_valid = np.zeros((n_seq, d_batch + 1), dtype=bool)
    attn_valid[:, 0] = True
    for i, spans in enumerate(seqs):
        for slot, (k, _) in enumerate(spans):
            pos_ids[i, slot + 1] = k + 1
            attn_valid[i, slot + 1] = True

    mask_out, mask_span, mask_seq = [], [], []
    if mask_positions is not None:
        for i, positions in enumerate(mask_positions):
            for p in positions:
                if not 0 <= p < len(seqs[i]):
                    raise IndexError(f"mask position {p} out of range for sequence {i}")
                mask_out.append(i * (d_batch + 1) + p + 1)
                mask_span.append(i * d_batch + p)
                mask_seq.append(i)
    return InputBatch(
        n_seq=n_seq,
        d_batch=d_batch,
        buckets=buckets,
        gather=gather,
        pos_ids=pos_ids,
        attn_valid=attn_valid,
        mask_out_flat=np.array(mask_out, dtype=np.int64),
        mask_span_flat=np.array(mask_span, dtype=np.int64),
        mask_seq=np.array(mask_seq, dtype=np.int64),
        seq_lengths=lengths,
    )


@dataclass
class BehaviorRepr:
    g: np.ndarray
    locals: dict


class SpanModel:
    """Parameter container plus the batched forward pass."""

    def __init__(self, config, vocab_sizes, seed=0):
        self.config = config
        self.vocab_sizes = dict(vocab_sizes)
        self.params = {}
        rng = np.random.default_rng([seed, 0x5EED])
        self._init_params(rng)

    def _add(self, name, array):
        self.params[name] = ad.tensor(array.astype(self.config.np_dtype), requires_grad=True)

    def _init_params(self, rng):
        c = self.config
        scale = 0.02
        for ch in ("behavior", "geo", "time_point", "time_lag"):
            self._add(f"emb_{ch}", rng.normal(0, scale, (self.vocab_sizes[ch], c.embed_dim)))
        for w in c.conv_widths:
            self._add(f"conv{w}_w", rng.normal(0, scale, (w * c.embed_dim, c.feature_maps)))
            self._add(f"conv{w}_b", np.zeros(c.feature_maps))
        self._add("pos", rng.normal(0, scale, (c.max_positions, c.model_dim)))
        self._add("cls", rng.normal(0, scale, (c.model_dim,)))
        self._add("mask", rng.normal(0, scale, (c.model_dim,)))
        for i in range(c.layers):
            p = f"layer{i}_"
            self._add(p + "ln1_g", np.ones(c.model_dim))
            self._add(p + "ln1_b", np.zeros(c.model_dim))
            for name in ("wq", "wk", "wv", "wo"):
                self._add(p + name, rng.normal(0, scale, (c.model_dim, c.model_dim)))
            for name in ("bq", "bk", "bv", "bo"):
                self._add(p + name, np.zeros(c.model_dim))
            self._add(p + "ln2_g", np.ones(c.model_dim))
            self._add(p + "ln2_b", np.zeros(c.model_dim))
            self._add(p + "w1", rng.normal(0, scale, (c.model_dim, c.ffn_dim)))
            self._add(p + "b1", np.zeros(c.ffn_dim))
            self._add(p + "w2", rng.normal(0, scale, (c.ffn_dim, c.model_dim)))
            self._add(p + "b2", np.zeros(c.model_dim))
        self._add("final_ln_g", np.ones(c.model_dim))
        self._add("final_ln_b", np.zeros(c.model_dim))
        self._add("count_w", rng.normal(0, scale, (c.model_dim, c.count_buckets)))
        self._add("count_b", np.zeros(c.count_buckets))

    # -- span CNN --------------------------------------------------------

    def _minute_embeddings(self, ids, valid):
        """ids [n, T, 4] -> summed channel embeddings, padded rows zeroed."""
        p = self.params
        emb = ad.add(
            ad.add(ad.embedding(p["emb_behavior"], ids[..., 0]), ad.embedding(p["emb_geo"], ids[..., 1])),
            ad.add(ad.embedding(p["emb_time_point"], ids[..., 2]), ad.embedding(p["emb_time_lag"], ids[..., 3])),
        )
        return ad.mul(emb, valid[..., None])

    def _conv_block(self, emb, valid, width, preact=False):
        """Same-padded width-w convolution over time, ReLU, max-pool over time."""
        c = self.config
        left = (width - 1) // 2
        right = width - 1 - left
        x = ad.pad_axis(emb, 1, left, right)
        x = ad.unfold(x, width, axis=1)  # [n, T, w, embed]
        n, t = emb.shape[0], emb.shape[1]
        x = ad.reshape(x, (n, t, width * c.embed_dim))
        x = ad.add(ad.matmul(x, self.params[f"conv{width}_w"]), self.params[f"conv{width}_b"])
        if preact:
            return x
        x = ad.relu(x)
        # exclude padded minutes from the pool
        x = ad.add(x, (valid[:, :, None] - 1.0) * -POOL_MASK)
        return ad.amax(x, axis=1)

    def _encode_bucket(self, ids, valid):
        emb = self._minute_embeddings(ids, valid)
        feats = [self._conv_block(emb, valid, w) for w in self.config.conv_widths]
        return ad.concat(feats, axis=1)

    def encode_span(self, minute_embeddings, preact_width=None):
        """Encode one span from raw minute embeddings [T, embed_dim].

        With preact_width set, returns that width's pre-activation conv
        output [T, feature_maps] instead of the pooled 192-dim vector.
        """
        arr = np.asarray(minute_embeddings, dtype=self.config.np_dtype)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("encode_span: needs at least one minute embedding")
        emb = ad.tensor(arr[None, :, :])
        valid = np.ones((1, arr.shape[0]), dtype=self.config.np_dtype)
        if preact_width is not None:
            out = self._conv_block(emb, valid, preact_width, preact=True)
            return out.data[0]
        feats = [self._conv_block(emb, valid, w) for w in self.config.conv_widths]
        return ad.concat(feats, axis=1).data[0]

    # -- transformer -----------------------------------------------------

    def forward(self, batch, train=False, rng=None, attn_sink=None):
        """Run the full encoder on an InputBatch.

        Returns (g, span_mat, locals_mat, positives_mat) as Tensors; the
        last two are None when the batch carries no masked positions.
        Passing a list as attn_sink collects per-layer attention arrays
        [n_seq*heads, rows, cols] for inspection.
        """
        c = self.config
        p = self.params
        dt = c.np_dtype
        if train and rng is None:
            raise ValueError("forward: training mode needs an rng for dropout")
        n, d_batch = batch.n_seq, batch.d_batch

        if batch.buckets:
            encoded = ad.concat([self._encode_bucket(ids, valid) for ids, valid in batch.buckets], axis=0)
            sentinel = ad.tensor(np.zeros((1, c.model_dim), dtype=dt))
            flat = ad.concat([sentinel, encoded], axis=0)
            span_mat = ad.reshape(ad.index_select(flat, batch.gather.ravel()), (n, d_batch, c.model_dim))
        else:
            span_mat = ad.tensor(np.zeros((n, d_batch, c.model_dim), dtype=dt))

        if batch.mask_out_flat.size:
            maskmat = np.zeros((n, d_batch, 1), dtype=dt)
            maskmat.reshape(-1)[batch.mask_span_flat] = 1.0
            x = ad.add(ad.mul(span_mat, 1.0 - maskmat), ad.mul(p["mask"], maskmat))
        else:
            x = span_mat

        cls_rows = ad.mul(p["cls"], np.ones((n, 1, 1), dtype=dt))
        x = ad.concat([cls_rows, x], axis=1)
        x = ad.add(x, ad.embedding(p["pos"], batch.pos_ids))
        if train:
            x = ad.dropout(x, c.dropout, rng, train=True)

        s1 = d_batch + 1
        bias = np.where(batch.attn_valid, 0.0, NEG_BIAS).astype(dt)
        bias = np.repeat(bias[:, None, None, :], c.heads, axis=1).reshape(n * c.heads, 1, s1)
        inv_scale = 1.0 / math.sqrt(c.head_dim)

        def split_heads(t):
            t = ad.reshape(t, (n, s1, c.heads, c.head_dim))
            t = ad.transpose(t, (0, 2, 1, 3))
            return ad.reshape(t, (n * c.heads, s1, c.head_dim))

        for i in range(c.layers):
            pre = f"layer{i}_"
            h = ad.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            flat = ad.reshape(h, (n * s1, c.model_dim))
            q = split_heads(ad.reshape(ad.add(ad.matmul(flat, p[pre + "wq"]), p[pre + "bq"]), (n, s1, c.model_dim)))
            k = split_heads(ad.reshape(ad.add(ad.matmul(flat, p[pre + "wk"]), p[pre + "bk"]), (n, s1, c.model_dim)))
            v = split_heads(ad.reshape(ad.add(ad.matmul(flat, p[pre + "wv"]), p[pre + "bv"]), (n, s1, c.model_dim)))
            scores = ad.add(ad.matmul(ad.mul(q, inv_scale), ad.transpose(k, (0, 2, 1))), bias)
            attn = ad.softmax(scores, axis=-1)
            if attn_sink is not None:
                attn_sink.append(attn.data.copy())
            if train:
                attn = ad.dropout(attn, c.dropout, rng, train=True)
            ctx = ad.matmul(attn, v)
            ctx = ad.reshape(ad.transpose(ad.reshape(ctx, (n, c.heads, s1, c.head_dim)), (0, 2, 1, 3)), (n * s1, c.model_dim))
            out = ad.add(ad.matmul(ctx, p[pre + "wo"]), p[pre + "bo"])
            if train:
                out = ad.dropout(out, c.dropout, rng, train=True)
            x = ad.add(x, ad.reshape(out, (n, s1, c.model_dim)))

            h2 = ad.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            ff = ad.add(ad.matmul(ad.reshape(h2, (n * s1, c.model_dim)), p[pre + "w1"]), p[pre + "b1"])
            ff = ad.gelu(ff)
            ff = ad.add(ad.matmul(ff, p[pre + "w2"]), p[pre + "b2"])
            if train:
                ff = ad.dropout(ff, c.dropout, rng, train=True)
            x = ad.add(x, ad.reshape(ff, (n, s1, c.model_dim)))

        x = ad.layer_norm(x, p["final_ln_g"], p["final_ln_b"])
        g = ad.slice_(x, (slice(None), 0, slice(None)))

        locals_mat = positives = None
        if batch.mask_out_flat.size:
            out_flat = ad.reshape(x, (n * s1, c.model_dim))
            locals_mat = ad.index_select(out_flat, batch.mask_out_flat)
            span_flat = ad.reshape(span_mat, (n * d_batch, c.model_dim))
            positives = ad.index_select(span_flat, batch.mask_span_flat)
        return g, span_mat, locals_mat, positives

    def count_logits(self, g):
        """Failure-count classifier head: logits over the count buckets."""
        return ad.add(ad.matmul(g, self.params["count_w"]), self.params["count_b"])

    def encode_sequence(self, spans, mask_positions=()):
        """Single-sequence forward returning a BehaviorRepr (no dropout).

        spans: list of (span_index, ids [T, 4]). Raises when the sequence
        exceeds the position table or a mask position is out of range.
        """
        if len(spans) > self.config.max_positions - 1:
            raise ValueError(
                f"sequence of {len(spans)} spans exceeds max_positions {self.config.max_positions}"
            )
        batch = assemble_batch([spans], self.config, [list(mask_positions)])
        g, _, locals_mat, _ = self.forward(batch, train=False)
        loc = {}
        for j, pos in enumerate(mask_positions):
            loc[pos] = locals_mat.data[j].copy()
        return BehaviorRepr(g=g.data[0].copy(), locals=loc)

    def state_arrays(self):
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, arrays):
        for name, arr in arrays.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if self.params[name].data.shape != arr.shape:
                raise ValueError(
                    f"parameter {name}: shape {arr.shape} != expected {self.params[name].data.shape}"
                )
            self.params[name].data = arr.astype(self.config.np_dtype)
