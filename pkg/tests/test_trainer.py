"""Trainer: sampler, dynamic masking, padding equivalence, determinism, abort path."""

import numpy as np
import pytest

from spanseq.autodiff import NumericError
from spanseq.checkpoint import load_checkpoint
from spanseq.corpus import GeneratorConfig, generate
from spanseq.encoder import EncoderConfig, InputBatch, SpanModel
from spanseq.optim import AdamWState
from spanseq.trainer import (
    METRICS_COLUMNS,
    PaddedBatch,
    SellerData,
    TrainConfig,
    build_dataset,
    epoch_batches,
    make_batch,
    read_metrics,
    train,
    train_step,
)
from spanseq.aggregate import build_vocab


def tiny_encoder(**kw):
    base = dict(
        embed_dim=6, conv_widths=(3, 4), feature_maps=4, layers=1, heads=2,
        head_dim=4, ffn_dim=16, dropout=0.1, span_size=2880, stride=2880,
        minutes=43200, dtype="float64",
    )
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return generate(GeneratorConfig(sellers=12, months=2, abnormal_fraction=0.25, seed=11))


@pytest.fixture(scope="module")
def prepared(corpus):
    enc = tiny_encoder()
    vocabs = build_vocab(corpus)
    dataset, d_max = build_dataset(corpus, vocabs, enc)
    return enc, vocabs, dataset, d_max


class TestTrainConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.peak_lr == 1e-4 and cfg.warmup_proportion == 0.1
        assert (cfg.span_size, cfg.stride) == (360, 340)

    def test_all_problems_reported_at_once(self):
        with pytest.raises(ValueError) as exc:
            TrainConfig(batch_size=1, warmup_proportion=1.5, mask_ratio=0.0, dtype="float16")
        msg = str(exc.value)
        for phrase in ("batch_size", "warmup_proportion", "mask_ratio", "dtype"):
            assert phrase in msg

    def test_all_tasks_off_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            TrainConfig(use_coarse=False, use_fine=False, use_domain=False)

    def test_negative_overlap_rejected(self):
        with pytest.raises(ValueError, match="smaller than stride"):
            TrainConfig(span_size=300, stride=340)


class TestDataset:
    def test_sellers_have_both_views(self, corpus, prepared):
        _, _, dataset, d_max = prepared
        assert len(dataset) > 0
        for s in dataset:
            assert len(s.spans) == 2 and len(s.counts) == 2
            assert all(n >= 1 for n in s.lengths)
            assert all(0 <= c < 8 for c in s.counts)
        assert d_max == max(max(s.lengths) for s in dataset)

    def test_seller_missing_view_skipped_with_warning(self, corpus):
        enc = tiny_encoder()
        vocabs = build_vocab(corpus)
        sid = corpus.sellers[0]
        start, end = corpus.month_bounds(1)
        events = dict(corpus.events)
        events[sid] = [e for e in events[sid] if not start <= e.timestamp < end]
        clipped = type(corpus)(events, corpus.labels, corpus.window)
        with pytest.warns(UserWarning, match=f"{sid}.*month 1"):
            dataset, _ = build_dataset(clipped, vocabs, enc)
        assert sid not in [s.seller_id for s in dataset]

    def test_single_month_corpus_rejected(self, corpus):
        enc = tiny_encoder()
        vocabs = build_vocab(corpus)
        one_month = type(corpus)(corpus.events, corpus.labels,
                                 (corpus.window[0], corpus.month_bounds(0)[1]))
        with pytest.raises(ValueError, match="2 calendar months"):
            build_dataset(one_month, vocabs, enc)


class TestSampler:
    def stub_dataset(self, lengths):
        return [SellerData(f"s{i}", ((), ()), (0, 0), (n, n)) for i, n in enumerate(lengths)]

    def test_every_epoch_is_a_partition(self):
        data = self.stub_dataset(list(range(1, 23)))
        batches = epoch_batches(data, 4, seed=1, epoch=0)
        flat = sorted(i for b in batches for i in b)
        assert flat == list(range(22))
        assert all(len(b) >= 2 for b in batches)

    def test_deterministic_per_epoch_and_fresh_across_epochs(self):
        data = self.stub_dataset(list(range(1, 13)))
        a = epoch_batches(data, 4, seed=9, epoch=0)
        b = epoch_batches(data, 4, seed=9, epoch=0)
        c = epoch_batches(data, 4, seed=9, epoch=1)
        assert a == b
        assert a != c

    def test_length_buckets_keep_similar_lengths_together(self):
        data = self.stub_dataset(list(range(1, 65)))
        for batch in epoch_batches(data, 4, seed=3, epoch=0):
            lens = [sum(data[i].lengths) for i in batch]
            assert max(lens) - min(lens) < 64  # one bucket spans 32 sellers

    def test_trailing_singleton_dropped(self):
        data = self.stub_dataset(list(range(1, 10)))  # 9 sellers, batch 4 -> 4+4+1
        batches = epoch_batches(data, 4, seed=2, epoch=0)
        assert sorted(len(b) for b in batches) == [4, 4]


class TestMakeBatch:
    def test_equal_length_batch_has_no_padding(self, prepared):
        enc, _, dataset, d_max = prepared
        lengths = [s.lengths for s in dataset]
        target = max(set(lengths), key=lengths.count)
        group = [s for s in dataset if s.lengths == target][:3]
        if len(group) < 2:
            pytest.skip("corpus lacks two sellers of equal length")
        pb = make_batch(group, enc, 0.15, np.random.default_rng(0), d_max)
        assert pb.view1.d_batch == target[0] and pb.view2.d_batch == target[1]
        assert np.all(pb.view1.gather[:, : pb.view1.d_batch] > 0)

    def test_mask_positions_deterministic_per_step(self, prepared):
        enc, _, dataset, d_max = prepared
        group = dataset[:4]
        a = make_batch(group, enc, 0.15, np.random.default_rng([7, 4, 3]), d_max)
        b = make_batch(group, enc, 0.15, np.random.default_rng([7, 4, 3]), d_max)
        assert np.array_equal(a.view1.mask_out_flat, b.view1.mask_out_flat)
        assert np.array_equal(a.view2.mask_out_flat, b.view2.mask_out_flat)

    def test_masks_change_across_steps(self, prepared):
        enc, _, dataset, d_max = prepared
        group = dataset[:4]
        base = make_batch(group, enc, 0.15, np.random.default_rng([7, 4, 0]), d_max)
        differs = False
        for step in range(1, 101):
            other = make_batch(group, enc, 0.15, np.random.default_rng([7, 4, step]), d_max)
            if not np.array_equal(base.view1.mask_out_flat, other.view1.mask_out_flat):
                differs = True
                break
        assert differs

    def test_at_least_one_mask_per_view(self, prepared):
        enc, _, dataset, d_max = prepared
        group = dataset[:4]
        pb = make_batch(group, enc, 0.01, np.random.default_rng(1), d_max)
        counts1 = np.bincount(pb.view1.mask_seq, minlength=len(group))
        counts2 = np.bincount(pb.view2.mask_seq, minlength=len(group))
        assert counts1.min() >= 1 and counts2.min() >= 1

    def test_mask_ratio_scales(self):
        spans = [(k, np.zeros((2, 4), dtype=np.int32)) for k in range(100)]
        sellers = [SellerData(f"s{i}", (spans, spans), (0, 0), (100, 100)) for i in range(2)]
        enc = tiny_encoder(span_size=360, stride=340)
        pb = make_batch(sellers, enc, 0.15, np.random.default_rng(0), 100)
        assert np.bincount(pb.view1.mask_seq).tolist() == [15, 15]

    def test_masking_disabled(self, prepared):
        enc, _, dataset, d_max = prepared
        pb = make_batch(dataset[:3], enc, 0.15, np.random.default_rng(0), d_max, masking=False)
        assert pb.view1.mask_out_flat.size == 0 and pb.view2.mask_out_flat.size == 0

    def test_count_labels_stack_both_views(self, prepared):
        enc, _, dataset, d_max = prepared
        group = dataset[:3]
        pb = make_batch(group, enc, 0.15, np.random.default_rng(0), d_max)
        expected = [s.counts[0] for s in group] + [s.counts[1] for s in group]
        assert pb.count_labels.tolist() == expected

    def test_single_seller_rejected(self, prepared):
        enc, _, dataset, d_max = prepared
        with pytest.raises(ValueError, match="at least 2"):
            make_batch(dataset[:1], enc, 0.15, np.random.default_rng(0), d_max)

    def test_d_batch_cannot_exceed_d_max(self, prepared):
        enc, _, dataset, _ = prepared
        with pytest.raises(ValueError, match="exceeds"):
            make_batch(dataset[:2], enc, 0.15, np.random.default_rng(0), d_max=0)


def widen_batch(batch, extra):
    """Re-pad an assembled view to d_batch + extra all-padding slots."""
    n, d = batch.n_seq, batch.d_batch
    d2 = d + extra
    gather = np.zeros((n, d2), dtype=np.int64)
    gather[:, :d] = batch.gather
    pos_ids = np.zeros((n, d2 + 1), dtype=np.int64)
    pos_ids[:, : d + 1] = batch.pos_ids
    attn_valid = np.zeros((n, d2 + 1), dtype=bool)
    attn_valid[:, : d + 1] = batch.attn_valid
    pos = batch.mask_span_flat - batch.mask_seq * d
    return InputBatch(
        n_seq=n, d_batch=d2, buckets=batch.buckets, gather=gather, pos_ids=pos_ids,
        attn_valid=attn_valid,
        mask_out_flat=batch.mask_seq * (d2 + 1) + pos + 1,
        mask_span_flat=batch.mask_seq * d2 + pos,
        mask_seq=batch.mask_seq, seq_lengths=batch.seq_lengths,
    )


class TestTrainStep:
    def test_padding_is_numerically_inert(self, corpus):
        enc = tiny_encoder(dropout=0.0)
        vocabs = build_vocab(corpus)
        dataset, d_max = build_dataset(corpus, vocabs, enc)
        sizes = {ch: len(v) for ch, v in vocabs.items()}
        cfg = TrainConfig(batch_size=4, total_steps=10, seed=1, dtype="float64")
        group = dataset[:4]
        pb = make_batch(group, enc, 0.15, np.random.default_rng([1, 4, 0]), d_max)
        wide = PaddedBatch(
            view1=widen_batch(pb.view1, 3),
            view2=widen_batch(pb.view2, 2),
            count_labels=pb.count_labels, seller_ids=pb.seller_ids,
            d_batch=pb.d_batch + 3, d_max=d_max + 3, pad_saving=0,
        )
        model_a = SpanModel(enc, sizes, seed=5)
        model_b = SpanModel(enc, sizes, seed=5)
        parts_a, norm_a, _ = train_step(model_a, AdamWState(), pb, cfg, step=0)
        parts_b, norm_b, _ = train_step(model_b, AdamWState(), wide, cfg, step=0)
        assert abs(parts_a["total"] - parts_b["total"]) < 1e-9
        assert abs(norm_a - norm_b) < 1e-7
        for name in model_a.params:
            diff = np.abs(model_a.params[name].data - model_b.params[name].data).max()
            assert diff < 1e-6, f"{name}: {diff}"

    def test_loss_finite_and_params_move(self, corpus, prepared):
        enc, vocabs, dataset, d_max = prepared
        sizes = {ch: len(v) for ch, v in vocabs.items()}
        cfg = TrainConfig(batch_size=4, total_steps=10, seed=2, dtype="float64")
        model = SpanModel(enc, sizes, seed=2)
        before = {n: p.data.copy() for n, p in model.params.items()}
        pb = make_batch(dataset[:4], enc, 0.15, np.random.default_rng([2, 4, 0]), d_max)
        parts, norm, lr = train_step(model, AdamWState(), pb, cfg, step=0)
        assert np.isfinite(parts["total"]) and norm > 0 and lr > 0
        moved = [n for n, p in model.params.items() if not np.array_equal(before[n], p.data)]
        assert "emb_behavior" in moved and "layer0_wq" in moved


class TestTrain:
    def run(self, corpus, tmp_path, name, **cfg_kw):
        base = dict(batch_size=4, total_steps=10, seed=13, dtype="float64")
        base.update(cfg_kw)
        cfg = TrainConfig(**base)
        return train(corpus, cfg, tmp_path / name, encoder_config=tiny_encoder())

    def test_smoke_run_outputs(self, corpus, tmp_path):
        res = self.run(corpus, tmp_path, "a")
        assert res.checkpoint_path.exists() and res.metrics_path.exists()
        cols = read_metrics(res.metrics_path)
        assert list(cols) == list(METRICS_COLUMNS)
        assert len(cols["step"]) == 10
        assert cols["lr"].max() <= 1e-4 + 1e-12 and cols["lr"].min() > 0
        assert np.isfinite(cols["loss_total"]).all()
        recomputed = (cols["grad_norm"] > 1.0).astype(float)
        assert np.array_equal(cols["clipped"], recomputed)
        ck = load_checkpoint(res.checkpoint_path)
        assert ck.step == 10
        assert ck.rng_state == {"scheme": "counter", "seed": 13, "next_step": 10}

    def test_same_seed_bitwise_identical(self, corpus, tmp_path):
        res1 = self.run(corpus, tmp_path, "r1")
        res2 = self.run(corpus, tmp_path, "r2")
        assert res1.checkpoint_path.read_bytes() == res2.checkpoint_path.read_bytes()
        assert res1.metrics_path.read_text() == res2.metrics_path.read_text()

    def test_fine_ablation_logs_zero_column(self, corpus, tmp_path):
        res = self.run(corpus, tmp_path, "nofine", use_fine=False)
        cols = read_metrics(res.metrics_path)
        assert np.all(cols["loss_fine"] == 0.0)
        assert np.all(cols["loss_coarse"] > 0.0)

    def test_domain_ablation_logs_zero_column(self, corpus, tmp_path):
        res = self.run(corpus, tmp_path, "nodomain", use_domain=False)
        cols = read_metrics(res.metrics_path)
        assert np.all(cols["loss_count"] == 0.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_and_keeps_last_checkpoint(self, corpus, tmp_path):
        out = tmp_path / "blowup"
        cfg = TrainConfig(batch_size=4, total_steps=12, seed=3, peak_lr=1e6, dtype="float32")
        with pytest.raises(NumericError, match="retained"):
            train(corpus, cfg, out, encoder_config=tiny_encoder(dtype="float32"))
        kept = sorted(out.glob("checkpoint_*.ckpt"))
        assert kept, "no checkpoint retained before the abort"
        assert not (out / "checkpoint_final.ckpt").exists()
        back = load_checkpoint(kept[-1])
        for arr in back.params.values():
            assert np.isfinite(arr).all()

    def test_checkpoint_cadence(self, corpus, tmp_path):
        res = self.run(corpus, tmp_path, "cadence", total_steps=20)
        steps = sorted(int(p.stem.split("_")[1]) for p in res.checkpoint_paths)
        assert steps == [2, 4, 6, 8, 10, 12, 14, 16, 18, 20]
