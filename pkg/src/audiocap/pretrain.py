"""Tagging and scene-classification heads, and encoder parameter transfer.

Both source tasks share the encoder trunk: embeddings are mean-pooled over
time and mapped linearly to label logits. Audio tagging (at) is multi-label
with a binary cross-entropy loss; scene classification (asc) is single-label
with softmax cross-entropy. After pretraining, the "enc."-prefixed tensors
initialize the captioner's audio encoder; nothing is frozen afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .checkpoint import Checkpoint
from .dsp import LogMelSpectrogram
from .encoder import EncoderConfig, encode_batch, init_encoder_params, is_buffer
from .errors import ArgumentError, DimensionError, TransferError

TASKS = ("at", "asc")


@dataclass
class TagHead:
    task: str
    num_labels: int

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ArgumentError(f"unknown pretraining task {self.task!r}")
        if self.num_labels < 2:
            raise ArgumentError(
                f"need at least 2 labels, got {self.num_labels}")


def init_head_params(head: TagHead, embed_dim: int,
                     rng: np.random.Generator) -> dict[str, nm.Tensor]:
    head.validate()
    return {"head.out.w": nm.glorot_uniform(
        (head.num_labels, embed_dim), fan_in=embed_dim,
        fan_out=head.num_labels, rng=rng)}


def tag_forward_batch(x: nm.Tensor, params: dict, cfg: EncoderConfig,
                      training: bool = False) -> nm.Tensor:
    """Logits (N, E) for a batch (N, 1, T, D) of spectrograms."""
    emb = encode_batch(x, params, cfg, training=training)  # (N, T*, d)
    pooled = nm.mean(emb, axis=1)                          # (N, d)
    return nm.matmul(pooled, nm.transpose(params["head.out.w"]))


def tag_forward(x: LogMelSpectrogram | np.ndarray, params: dict,
                cfg: EncoderConfig, training: bool = False) -> nm.Tensor:
    """Logits (E,) for a single spectrogram."""
    values = x.values if isinstance(x, LogMelSpectrogram) else np.asarray(x)
    batched = nm.Tensor(values[None, None, :, :])
    out = tag_forward_batch(batched, params, cfg, training=training)
    return nm.reshape(out, (out.data.shape[1],))


def tag_loss(logits: nm.Tensor, targets, task: str) -> nm.Tensor:
    """Batch loss: BCE against multi-hot rows (at) or mean CE (asc)."""
    if task == "at":
        y = np.asarray(targets, dtype=np.float64)
        if y.shape != logits.data.shape:
            raise DimensionError(
                f"multi-hot targets {y.shape} do not match logits "
                f"{logits.data.shape}")
        return nm.binary_cross_entropy(logits, y)
    if task == "asc":
        return nm.mean(nm.cross_entropy_rows(logits, targets))
    raise ArgumentError(f"unknown pretraining task {task!r}")


def transfer_encoder(src: Checkpoint | dict, dst_cfg: EncoderConfig,
                     ) -> dict[str, nm.Tensor]:
    """Copy the "enc."-prefixed tensors of a pretrained checkpoint into a
    fresh parameter set for ``dst_cfg``.

    Head and decoder tensors are not carried over; the caller initializes
    those fresh. Values are copied bit-exactly and stay trainable (buffers
    keep their buffer status).
    """
    tensors = src.tensors if isinstance(src, Checkpoint) else dict(src)
    # fresh init determines the exact name/shape set the target requires
    template = init_encoder_params(dst_cfg, np.random.default_rng(0))
    required = {name: p for name, p in template.items()}
    src_enc = {n: v for n, v in tensors.items() if n.startswith("enc.")}
    for name in src_enc:
        if name not in required:
            raise TransferError(
                f"source tensor {name!r} has no place in the target encoder")
    out: dict[str, nm.Tensor] = {}
    for name, tpl in required.items():
        if name not in src_enc:
            raise TransferError(f"missing tensor {name!r} in source checkpoint")
        values = np.asarray(src_enc[name], dtype=np.float64)
        if values.shape != tpl.data.shape:
            raise TransferError(
                f"shape mismatch for {name!r}: source {values.shape} vs "
                f"target {tpl.data.shape}")
        out[name] = nm.Tensor(values.copy(), requires_grad=not is_buffer(name))
    return out
