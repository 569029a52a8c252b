"""Tagging-head and encoder-transfer tests."""

import numpy as np
import pytest

from audiocap import numerics as nm
from audiocap.checkpoint import Checkpoint
from audiocap.encoder import EncoderConfig, encode, init_encoder_params
from audiocap.errors import TransferError
from audiocap.pretrain import (TagHead, init_head_params, tag_forward,
                               tag_forward_batch, tag_loss, transfer_encoder)

SMALL = EncoderConfig(variant="cnn_mini", channels=(2, 3, 4, 5), embed_dim=6)


def model_params(cfg=SMALL, task="at", n_labels=4, seed=0):
    rng = np.random.default_rng(seed)
    params = init_encoder_params(cfg, rng)
    params.update(init_head_params(TagHead(task, n_labels), cfg.embed_dim, rng))
    return params


class TestTagForward:
    def test_pooling_is_identity_on_constant_sequence(self):
        params = model_params()
        x = np.zeros((16, 64))  # zero input -> constant embedding sequence
        logits = tag_forward(x, params, SMALL)
        seq = encode(x, params, SMALL)
        w = params["head.out.w"].data
        np.testing.assert_allclose(logits.data, w @ seq.values.data[0],
                                   atol=1e-12)

    def test_zero_head_weights_give_uniform_asc_distribution(self):
        params = model_params(task="asc")
        params["head.out.w"].data[...] = 0.0
        rng = np.random.default_rng(1)
        logits = tag_forward(rng.standard_normal((16, 64)), params, SMALL)
        np.testing.assert_array_equal(logits.data, np.zeros(4))
        probs = nm.softmax(logits, axis=0).data
        np.testing.assert_allclose(probs, 0.25, atol=1e-15)

    def test_losses_match_direct_formulas(self):
        rng = np.random.default_rng(2)
        logits = nm.Tensor(rng.standard_normal((3, 4)))
        multihot = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
        at = tag_loss(logits, multihot, "at")
        sig = 1.0 / (1.0 + np.exp(-logits.data))
        naive_at = np.mean(-(multihot * np.log(sig)
                             + (1 - multihot) * np.log(1 - sig)))
        assert abs(at.item() - naive_at) < 1e-12

        classes = np.array([0, 3, 1])
        asc = tag_loss(logits, classes, "asc")
        exp = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
        probs = exp / exp.sum(axis=1, keepdims=True)
        naive_asc = np.mean([-np.log(probs[i, c]) for i, c in enumerate(classes)])
        assert abs(asc.item() - naive_asc) < 1e-12

    def test_batch_matches_single(self):
        params = model_params(seed=3)
        rng = np.random.default_rng(4)
        xs = rng.standard_normal((2, 12, 64))
        batched = tag_forward_batch(nm.Tensor(xs[:, None]), params, SMALL)
        for i in range(2):
            single = tag_forward(xs[i], params, SMALL)
            np.testing.assert_allclose(batched.data[i], single.data, atol=1e-10)


class TestTransfer:
    def make_checkpoint(self, cfg=SMALL, seed=0, with_head=True):
        params = model_params(cfg, seed=seed) if with_head else \
            init_encoder_params(cfg, np.random.default_rng(seed))
        return Checkpoint({n: p.data for n, p in params.items()}), params

    def test_untrained_source_transfers_bitwise(self):
        ckpt, params = self.make_checkpoint(seed=5)
        out = transfer_encoder(ckpt, SMALL)
        for name, p in params.items():
            if not name.startswith("enc."):
                continue
            assert out[name].data.tobytes() == p.data.tobytes(), name

    def test_head_and_decoder_tensors_excluded(self):
        ckpt, _ = self.make_checkpoint()
        ckpt.add("dec.out.w", np.zeros((5, 6)))
        out = transfer_encoder(ckpt, SMALL)
        assert all(name.startswith("enc.") for name in out)

    def test_missing_tensor_named_in_error(self):
        ckpt, _ = self.make_checkpoint()
        del ckpt.tensors["enc.proj.b"]
        with pytest.raises(TransferError, match="enc.proj.b"):
            transfer_encoder(ckpt, SMALL)

    def test_shape_mismatch_reports_both_shapes(self):
        ckpt, _ = self.make_checkpoint()
        narrow_cfg = EncoderConfig(variant="cnn_mini", channels=(2, 3, 4, 5),
                                   embed_dim=3)
        with pytest.raises(TransferError) as exc:
            transfer_encoder(ckpt, narrow_cfg)
        assert "(6," in str(exc.value) and "(3," in str(exc.value)

    def test_unknown_source_tensor_rejected(self):
        crnn = EncoderConfig(variant="crnn_mini", channels=(2, 3), embed_dim=6,
                             recurrent_hidden=4)
        ckpt = Checkpoint({n: p.data for n, p in
                           init_encoder_params(crnn,
                                               np.random.default_rng(0)).items()})
        with pytest.raises(TransferError, match="enc.rnn"):
            transfer_encoder(ckpt, SMALL)

    def test_buffers_stay_buffers_and_weights_trainable(self):
        ckpt, _ = self.make_checkpoint()
        out = transfer_encoder(ckpt, SMALL)
        assert not out["enc.block1.bn1.running_mean"].requires_grad
        assert out["enc.block1.conv1.w"].requires_grad

    def test_finetune_step_changes_an_encoder_tensor(self):
        ckpt, _ = self.make_checkpoint(seed=6)
        params = transfer_encoder(ckpt, SMALL)
        rng = np.random.default_rng(7)
        params.update(init_head_params(TagHead("at", 4), SMALL.embed_dim, rng))
        x = nm.Tensor(rng.standard_normal((2, 1, 16, 64)))
        targets = np.array([[1.0, 0, 0, 1.0], [0, 1.0, 0, 0]])
        opt = nm.Adam(params, lr=1e-3)
        logits = tag_forward_batch(x, params, SMALL, training=True)
        loss = tag_loss(logits, targets, "at")
        opt.zero_grad()
        nm.backward(loss)
        opt.step()
        changed = any(
            params[name].data.tobytes() != ckpt[name].tobytes()
            for name in params if name.startswith("enc.")
            and params[name].requires_grad)
        assert changed
