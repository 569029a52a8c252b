"""Pipeline tests: splits, checkpoint container, manifests, training loops
with early stopping, and seeded reproducibility."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiocap import numerics as nm
from audiocap import pipeline
from audiocap.checkpoint import Checkpoint
from audiocap.decoder import DecoderConfig
from audiocap.encoder import EncoderConfig, init_encoder_params
from audiocap.errors import (ArgumentError, DataError, FormatError,
                             InputError)
from audiocap.pretrain import TagHead, init_head_params, tag_forward_batch, \
    tag_loss
from audiocap.synth import SynthSpec, synth_generate

TINY_ENC = EncoderConfig(variant="cnn_mini", channels=(2, 2, 3, 3), embed_dim=6)
TINY_DEC = DecoderConfig(word_dim=4, hidden_dim=8, attn_dim=6)


@pytest.fixture(scope="session")
def corpus50(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus50")
    synth_generate(SynthSpec(), 50, seed=11, out_dir=out)
    return pipeline.load_manifest(out / "manifest.jsonl")


class TestSplitDev:
    def test_ninety_ten(self):
        records = list(range(100))
        train, val = pipeline.split_dev(records, 0.1, seed=0)
        assert len(train) == 90 and len(val) == 10

    def test_same_seed_same_split(self):
        records = list(range(37))
        a = pipeline.split_dev(records, 0.2, seed=5)
        b = pipeline.split_dev(records, 0.2, seed=5)
        assert a == b

    def test_exact_partition(self):
        records = list(range(41))
        train, val = pipeline.split_dev(records, 0.25, seed=3)
        assert len(val) == round(41 * 0.25)
        assert len(train) == 41 - len(val)
        assert sorted(train + val) == records

    def test_too_few_records(self):
        with pytest.raises(InputError):
            pipeline.split_dev([1], 0.5, seed=0)

    def test_bad_fraction(self):
        with pytest.raises(ArgumentError):
            pipeline.split_dev([1, 2], 1.5, seed=0)


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "enc.block1.conv1.w": rng.standard_normal((3, 1, 3, 3)),
            "scalar": np.array(4.25),
            "head.out.w": rng.standard_normal((4, 6)),
        }
        ckpt = Checkpoint(tensors)
        path = tmp_path / "model.ckpt"
        ckpt.save(path)
        back = Checkpoint.load(path)
        assert back.names() == list(tensors)
        for name, values in tensors.items():
            assert back[name].shape == np.asarray(values).shape
            assert back[name].tobytes() == np.asarray(
                values, dtype=np.float64).tobytes()

    @given(st.lists(
        st.tuples(
            st.text(st.characters(min_codepoint=33, max_codepoint=126),
                    min_size=1, max_size=20),
            st.lists(st.integers(min_value=1, max_value=4), min_size=0,
                     max_size=3)),
        min_size=1, max_size=5, unique_by=lambda nt: nt[0]))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_random_shapes(self, specs):
        rng = np.random.default_rng(1)
        ckpt = Checkpoint()
        for name, shape in specs:
            ckpt.add(name, rng.standard_normal(shape))
        back = Checkpoint.from_bytes(ckpt.to_bytes())
        assert back.names() == ckpt.names()
        for name in ckpt.names():
            assert back[name].tobytes() == ckpt[name].tobytes()

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            Checkpoint.from_bytes(b"NOPE!" + b"\x00" * 8)

    def test_truncated_payload(self):
        raw = Checkpoint({"w": np.ones(4)}).to_bytes()
        with pytest.raises(FormatError, match="declares"):
            Checkpoint.from_bytes(raw[:-8])

    def test_duplicate_name_rejected(self):
        ckpt = Checkpoint({"w": np.ones(2)})
        with pytest.raises(FormatError, match="duplicate"):
            ckpt.add("w", np.ones(2))


class TestManifest:
    def test_load_resolves_relative_paths(self, tmp_path):
        synth_generate(SynthSpec(), 3, seed=0, out_dir=tmp_path)
        records = pipeline.load_manifest(tmp_path / "manifest.jsonl")
        assert len(records) == 3
        for record in records:
            assert record.captions and len(record.captions) == 3

    def test_missing_audio_file(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text('{"id": "x", "audio": "gone.wav", "scene": "s"}\n')
        with pytest.raises(DataError, match="'x'"):
            pipeline.load_manifest(path)

    def test_record_without_any_labels(self, tmp_path):
        wav = tmp_path / "a.wav"
        wav.write_bytes(b"")
        path = tmp_path / "manifest.jsonl"
        path.write_text('{"id": "a", "audio": "a.wav"}\n')
        with pytest.raises(DataError, match="events/scene/captions"):
            pipeline.load_manifest(path)


class TestFeatures:
    def test_cache_round_trip(self, tmp_path, corpus50):
        records = corpus50[:4]
        fresh = pipeline.compute_features(records)
        cached_dir = tmp_path / "cache"
        first = pipeline.compute_features(records, cache_dir=cached_dir)
        second = pipeline.compute_features(records, cache_dir=cached_dir)
        for record in records:
            np.testing.assert_array_equal(fresh[record.id], first[record.id])
            np.testing.assert_array_equal(first[record.id], second[record.id])
            assert pipeline.feature_path(cached_dir, record.id).exists()


class TestPretrainLoop:
    def test_patience_zero_trains_exactly_one_epoch(self, corpus50):
        cfg = pipeline.TrainConfig(task="at", batch_size=16, patience=0,
                                   max_epochs=10, seed=0)
        result = pipeline.pretrain_loop(corpus50[:12], cfg, TINY_ENC)
        assert len(result.history) == 1
        assert result.best_epoch == 1

    def test_best_checkpoint_has_min_val_loss(self, corpus50):
        cfg = pipeline.TrainConfig(task="asc", batch_size=16, patience=3,
                                   max_epochs=6, seed=1)
        result = pipeline.pretrain_loop(corpus50[:16], cfg, TINY_ENC)
        assert result.best_val_loss == min(h.val_loss for h in result.history)
        assert result.labels == sorted({r.scene for r in corpus50[:16]})

    def test_missing_labels_name_record(self, corpus50):
        records = [pipeline.ManifestRecord(id="bad", audio=corpus50[0].audio,
                                           captions=["x"])]
        records += corpus50[:3]
        cfg = pipeline.TrainConfig(task="asc", batch_size=4, max_epochs=1)
        with pytest.raises(DataError, match="'bad'"):
            pipeline.pretrain_loop(records, cfg, TINY_ENC)

    def test_at_val_loss_improves_over_training(self, corpus50):
        cfg = pipeline.TrainConfig(task="at", batch_size=64, patience=30,
                                   max_epochs=30, seed=0)
        result = pipeline.pretrain_loop(corpus50, cfg, TINY_ENC)
        assert result.history[-1].val_loss < result.history[0].val_loss
        assert result.best_val_loss <= result.history[0].val_loss

    def test_two_hundred_adam_steps_halve_training_bce(self, corpus50):
        # full-batch steps over the 50-clip tagging set, fixed seed
        labels = pipeline.collect_labels(corpus50, "at")
        feats = pipeline.compute_features(corpus50)
        x, _ = pipeline._pad_batch([feats[r.id] for r in corpus50])
        targets = pipeline.encode_targets(corpus50, labels, "at")
        rng = np.random.default_rng((0, 0))
        params = init_encoder_params(TINY_ENC, rng)
        params.update(init_head_params(TagHead("at", len(labels)),
                                       TINY_ENC.embed_dim, rng))
        opt = nm.Adam(params, lr=1e-3)
        initial = None
        for _ in range(200):
            logits = tag_forward_batch(x, params, TINY_ENC, training=True)
            loss = tag_loss(logits, targets, "at")
            if initial is None:
                initial = loss.item()
            opt.zero_grad()
            nm.backward(loss)
            opt.step()
        final = tag_loss(tag_forward_batch(x, params, TINY_ENC, training=True),
                         targets, "at").item()
        assert final <= 0.5 * initial, (initial, final)


class TestFinetuneLoop:
    def test_transferred_encoder_matches_init_at_step_zero(self, corpus50):
        cfg = pipeline.TrainConfig(task="at", batch_size=16, patience=0,
                                   max_epochs=1, seed=2)
        stage1 = pipeline.pretrain_loop(corpus50[:12], cfg, TINY_ENC)
        vocab_size = 10
        params = pipeline.init_caption_model(vocab_size, TINY_ENC, TINY_DEC,
                                             stage1.checkpoint, seed=3)
        for name, p in params.items():
            if name.startswith("enc."):
                assert p.data.tobytes() == stage1.checkpoint[name].tobytes()
        assert not any(n.startswith("head.") for n in params)

    def test_runs_and_improves_on_small_corpus(self, corpus50):
        cfg = pipeline.finetune_config(batch_size=16, patience=10,
                                       max_epochs=8, seed=0)
        result = pipeline.finetune_loop(corpus50[:20], cfg, TINY_ENC, TINY_DEC)
        assert result.vocab is not None
        assert result.history[-1].train_loss < result.history[0].train_loss
        assert result.best_val_loss == min(h.val_loss for h in result.history)

    def test_records_without_captions_rejected(self, corpus50):
        records = [pipeline.ManifestRecord(id="nc", audio=corpus50[0].audio,
                                           scene="quiet_room")]
        records += corpus50[:3]
        cfg = pipeline.finetune_config(max_epochs=1)
        with pytest.raises(DataError, match="'nc'"):
            pipeline.finetune_loop(records, cfg, TINY_ENC, TINY_DEC)


class TestDeterminism:
    def test_pretrain_runs_reproduce_bitwise(self, corpus50):
        cfg = pipeline.TrainConfig(task="asc", batch_size=16, patience=5,
                                   max_epochs=3, seed=9)
        a = pipeline.pretrain_loop(corpus50[:14], cfg, TINY_ENC)
        b = pipeline.pretrain_loop(corpus50[:14], cfg, TINY_ENC)
        assert [(h.train_loss, h.val_loss) for h in a.history] == \
               [(h.train_loss, h.val_loss) for h in b.history]
        assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()

    def test_finetune_runs_reproduce_bitwise(self, corpus50):
        cfg = pipeline.finetune_config(batch_size=16, patience=5,
                                       max_epochs=2, seed=4)
        a = pipeline.finetune_loop(corpus50[:10], cfg, TINY_ENC, TINY_DEC)
        b = pipeline.finetune_loop(corpus50[:10], cfg, TINY_ENC, TINY_DEC)
        assert [(h.train_loss, h.val_loss) for h in a.history] == \
               [(h.train_loss, h.val_loss) for h in b.history]
        assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()


class TestHistoryCsv:
    def test_format(self, tmp_path):
        history = [pipeline.EpochStats(1, 0.5, 0.6),
                   pipeline.EpochStats(2, 0.4, 0.55)]
        path = tmp_path / "log.csv"
        pipeline.write_history_csv(history, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert lines[1].startswith("1,0.5,")
