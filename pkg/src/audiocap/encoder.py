"""Audio encoders mapping a log-mel spectrogram to an embedding sequence.

Two desk-scale variants: cnn_mini stacks convolution blocks only
(time-invariant, abstract features); crnn_mini follows a shorter
convolution stack with a bidirectional GRU (temporal modelling). Both
subsample time by a configurable factor and emit one embedding per
remaining step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .dsp import LogMelSpectrogram
from .errors import ArgumentError, DimensionError

N_BANDS = 64

VARIANTS = ("cnn_mini", "crnn_mini")


@dataclass
class EncoderConfig:
    variant: str = "cnn_mini"
    channels: tuple[int, ...] = (16, 32, 64, 128)
    time_subsample: int = 4
    embed_dim: int = 128
    recurrent_hidden: int = 64

    @property
    def n_blocks(self) -> int:
        return 4 if self.variant == "cnn_mini" else 2

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ArgumentError(f"unknown encoder variant {self.variant!r}")
        if self.embed_dim < 1:
            raise ArgumentError("embed_dim must be positive")
        if len(self.channels) < self.n_blocks:
            raise ArgumentError(
                f"{self.variant} needs {self.n_blocks} channel sizes, "
                f"got {len(self.channels)}")


@dataclass
class EmbeddingSequence:
    values: nm.Tensor  # (T*, d)
    source_frames: int

    @property
    def length(self) -> int:
        return self.values.data.shape[0]


def time_pool_factors(time_subsample: int, n_blocks: int) -> list[int]:
    """Split the total time subsampling into per-block pool sizes.

    The factor must be a power of two; its exponent is spread across the
    blocks front-loaded, e.g. 4 over 4 blocks -> [2, 2, 1, 1].
    """
    s = time_subsample
    if s < 1 or (s & (s - 1)) != 0:
        raise ArgumentError(f"time_subsample must be a power of two, got {s}")
    e = s.bit_length() - 1
    base, rem = divmod(e, n_blocks)
    return [2 ** (base + (1 if i < rem else 0)) for i in range(n_blocks)]


def output_length(frames: int, time_subsample: int) -> int:
    return -(-frames // time_subsample)


def is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def init_encoder_params(cfg: EncoderConfig,
                        rng: np.random.Generator) -> dict[str, nm.Tensor]:
    """Freshly initialized encoder parameters under the "enc." name prefix."""
    cfg.validate()
    params: dict[str, nm.Tensor] = {}
    in_ch = 1
    for i, ch in enumerate(cfg.channels[:cfg.n_blocks], start=1):
        for j in (1, 2):
            cin = in_ch if j == 1 else ch
            params[f"enc.block{i}.conv{j}.w"] = nm.glorot_uniform(
                (ch, cin, 3, 3), fan_in=cin * 9, fan_out=ch * 9, rng=rng)
            params[f"enc.block{i}.bn{j}.gamma"] = nm.Tensor(
                np.ones(ch), requires_grad=True)
            params[f"enc.block{i}.bn{j}.beta"] = nm.zeros_param((ch,))
            params[f"enc.block{i}.bn{j}.running_mean"] = nm.buffer(np.zeros(ch))
            params[f"enc.block{i}.bn{j}.running_var"] = nm.buffer(np.ones(ch))
        in_ch = ch
    if cfg.variant == "crnn_mini":
        conv_out = cfg.channels[cfg.n_blocks - 1]
        rh = cfg.recurrent_hidden
        for direction in ("fw", "bw"):
            for gate in ("r", "z", "n"):
                params[f"enc.rnn.{direction}.w_{gate}"] = nm.glorot_uniform(
                    (rh, conv_out), fan_in=conv_out, fan_out=rh, rng=rng)
                params[f"enc.rnn.{direction}.u_{gate}"] = nm.glorot_uniform(
                    (rh, rh), fan_in=rh, fan_out=rh, rng=rng)
                params[f"enc.rnn.{direction}.b_{gate}"] = nm.zeros_param((rh,))
        feat = 2 * rh
    else:
        feat = cfg.channels[cfg.n_blocks - 1]
    params["enc.proj.w"] = nm.glorot_uniform(
        (cfg.embed_dim, feat), fan_in=feat, fan_out=cfg.embed_dim, rng=rng)
    params["enc.proj.b"] = nm.zeros_param((cfg.embed_dim,))
    return params


def _gru_dir(params: dict, direction: str) -> dict:
    return {key: params[f"enc.rnn.{direction}.{key}"]
            for key in ("w_r", "u_r", "b_r", "w_z", "u_z", "b_z",
                        "w_n", "u_n", "b_n")}


def _conv_stack(x: nm.Tensor, params: dict, cfg: EncoderConfig,
                training: bool) -> nm.Tensor:
    pools = time_pool_factors(cfg.time_subsample, cfg.n_blocks)
    h = x
    for i in range(1, cfg.n_blocks + 1):
        for j in (1, 2):
            h = nm.conv2d(h, params[f"enc.block{i}.conv{j}.w"])
            h = nm.batchnorm(h,
                             params[f"enc.block{i}.bn{j}.gamma"],
                             params[f"enc.block{i}.bn{j}.beta"],
                             params[f"enc.block{i}.bn{j}.running_mean"],
                             params[f"enc.block{i}.bn{j}.running_var"],
                             training=training)
            h = nm.relu(h)
        h = nm.avgpool2d(h, pools[i - 1], 2)
    return h


def _bigru(seq: nm.Tensor, params: dict) -> nm.Tensor:
    """seq (N, T, C) -> (N, T, 2*rh), concatenated forward/backward states."""
    n, t, _ = seq.data.shape
    rh = params["enc.rnn.fw.w_r"].data.shape[0]
    steps = [nm.reshape(nm.narrow(seq, 1, k, 1), (n, seq.data.shape[2]))
             for k in range(t)]
    outputs = {}
    for direction, order in (("fw", range(t)), ("bw", range(t - 1, -1, -1))):
        p = _gru_dir(params, direction)
        h = nm.Tensor(np.zeros((n, rh)))
        states = {}
        for k in order:
            h = nm.gru_cell(steps[k], h, p)
            states[k] = h
        outputs[direction] = states
    both = [nm.reshape(nm.concat([outputs["fw"][k], outputs["bw"][k]], axis=1),
                       (n, 1, 2 * rh))
            for k in range(t)]
    return nm.concat(both, axis=1)


def encode_batch(x: nm.Tensor, params: dict, cfg: EncoderConfig,
                 training: bool = False) -> nm.Tensor:
    """Encode a batch (N, 1, T, D) of spectrograms into (N, T*, d)."""
    cfg.validate()
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise DimensionError(f"expected (N,1,T,D) input, got {x.data.shape}")
    if x.data.shape[3] != N_BANDS:
        raise DimensionError(
            f"expected {N_BANDS} mel bands, got {x.data.shape[3]}")
    h = _conv_stack(x, params, cfg, training)
    h = nm.mean(h, axis=3)            # (N, C, T*)
    h = nm.transpose(h, (0, 2, 1))    # (N, T*, C)
    if cfg.variant == "crnn_mini":
        h = _bigru(h, params)
    return nm.linear(h, params["enc.proj.w"], params["enc.proj.b"])


def encode(x: LogMelSpectrogram | np.ndarray, params: dict, cfg: EncoderConfig,
           training: bool = False) -> EmbeddingSequence:
    """Encode one spectrogram (T, D) into an embedding sequence (T*, d)."""
    values = x.values if isinstance(x, LogMelSpectrogram) else np.asarray(x)
    if values.ndim != 2:
        raise DimensionError(f"expected (T,D) spectrogram, got {values.shape}")
    t = values.shape[0]
    batched = nm.reshape(nm.Tensor(values), (1, 1, t, values.shape[1]))
    out = encode_batch(batched, params, cfg, training)
    return EmbeddingSequence(nm.reshape(out, out.data.shape[1:]), source_frames=t)


def config_from_params(tensors: dict[str, np.ndarray]) -> EncoderConfig:
    """Reconstruct an EncoderConfig from checkpoint tensor names and shapes."""
    variant = "crnn_mini" if "enc.rnn.fw.w_r" in tensors else "cnn_mini"
    channels = []
    i = 1
    while f"enc.block{i}.conv1.w" in tensors:
        channels.append(tensors[f"enc.block{i}.conv1.w"].shape[0])
        i += 1
    if not channels or "enc.proj.w" not in tensors:
        raise DimensionError("checkpoint does not contain an encoder")
    meta = tensors.get("meta.time_subsample")
    subsample = int(meta.reshape(-1)[0]) if meta is not None else 4
    rh = (tensors["enc.rnn.fw.w_r"].shape[0]
          if variant == "crnn_mini" else EncoderConfig.recurrent_hidden)
    return EncoderConfig(
        variant=variant,
        channels=tuple(channels),
        time_subsample=subsample,
        embed_dim=tensors["enc.proj.w"].shape[0],
        recurrent_hidden=rh,
    )
