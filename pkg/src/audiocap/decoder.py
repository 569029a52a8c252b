"""Attentional GRU text decoder with greedy and beam-search decoding.

At each step the previous hidden state is aligned with the embedding
sequence by a concat score v·tanh(W[h;e]); the softmax-normalized weights
form a context vector that is concatenated with the previous word's
embedding and fed to a GRU cell. A linear layer over the hidden state
yields next-token logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .encoder import EmbeddingSequence
from .errors import ArgumentError, ContractError, FormatError, RangeError

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

NEG_INF = -np.inf


class Vocabulary:
    """Token/id bijection with fixed reserved ids 0..3."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise FormatError(
                f"first four tokens must be {RESERVED}, got {tokens[:4]}")
        if len(tokens) < 5:
            raise FormatError("vocabulary needs at least one content token")
        if len(set(tokens)) != len(tokens):
            raise FormatError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_captions(cls, tokenized: list[list[str]]) -> "Vocabulary":
        """Build from tokenized captions; content tokens sorted for determinism."""
        content = sorted({tok for caption in tokenized for tok in caption})
        return cls(list(RESERVED) + content)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.index.get(tok, UNK_ID) for tok in tokens]

    def caption_ids(self, tokens: list[str]) -> list[int]:
        return [BOS_ID] + self.encode(tokens) + [EOS_ID]

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


@dataclass
class DecoderConfig:
    word_dim: int = 64
    hidden_dim: int = 128
    attn_dim: int = 128
    max_len: int = 22


@dataclass
class CaptionHypothesis:
    tokens: list[int]  # starts with <bos>
    log_prob: float
    finished: bool


def init_decoder_params(vocab_size: int, enc_dim: int, cfg: DecoderConfig,
                        rng: np.random.Generator) -> dict[str, nm.Tensor]:
    """Freshly initialized decoder parameters under the "dec." name prefix."""
    dw, dh, da = cfg.word_dim, cfg.hidden_dim, cfg.attn_dim
    d_in = dw + enc_dim
    params = {
        "dec.embed.w": nm.glorot_uniform((vocab_size, dw), fan_in=vocab_size,
                                         fan_out=dw, rng=rng),
    }
    for gate in ("r", "z", "n"):
        params[f"dec.gru.w_{gate}"] = nm.glorot_uniform(
            (dh, d_in), fan_in=d_in, fan_out=dh, rng=rng)
        params[f"dec.gru.u_{gate}"] = nm.glorot_uniform(
            (dh, dh), fan_in=dh, fan_out=dh, rng=rng)
        params[f"dec.gru.b_{gate}"] = nm.zeros_param((dh,))
    params["dec.att.w"] = nm.glorot_uniform(
        (da, dh + enc_dim), fan_in=dh + enc_dim, fan_out=da, rng=rng)
    params["dec.att.v"] = nm.glorot_uniform((da,), fan_in=da, fan_out=1, rng=rng)
    params["dec.out.w"] = nm.glorot_uniform(
        (vocab_size, dh), fan_in=dh, fan_out=vocab_size, rng=rng)
    return params


def _gru_params(params: dict) -> dict:
    return {key: params[f"dec.gru.{key}"]
            for key in ("w_r", "u_r", "b_r", "w_z", "u_z", "b_z",
                        "w_n", "u_n", "b_n")}


def hidden_dim(params: dict) -> int:
    return params["dec.gru.u_r"].data.shape[0]


def vocab_size(params: dict) -> int:
    return params["dec.out.w"].data.shape[0]


def attend_batch(h: nm.Tensor, emb: nm.Tensor, lengths, params: dict):
    """Attention over a batch: h (B,dh), emb (B,T,d) -> alpha (B,T), c (B,d).

    ``lengths`` (per-row valid step counts) masks padded encoder steps by
    setting their scores to -inf before the softmax.
    """
    b, t, d = emb.data.shape
    dh = h.data.shape[1]
    w = params["dec.att.w"]
    da = w.data.shape[0]
    wh = nm.narrow(w, 1, 0, dh)
    we = nm.narrow(w, 1, dh, d)
    hpart = nm.matmul(h, nm.transpose(wh))                       # (B, da)
    epart = nm.reshape(nm.matmul(nm.reshape(emb, (b * t, d)),
                                 nm.transpose(we)), (b, t, da))
    act = nm.tanh(nm.add(epart, nm.reshape(hpart, (b, 1, da))))
    scores = nm.reshape(nm.matmul(nm.reshape(act, (b * t, da)),
                                  nm.reshape(params["dec.att.v"], (da, 1))),
                        (b, t))
    if lengths is not None:
        mask = np.where(np.arange(t)[None, :] < np.asarray(lengths)[:, None],
                        0.0, NEG_INF)
        scores = nm.add(scores, nm.Tensor(mask))
    alpha = nm.softmax(scores, axis=1)
    context = nm.tsum(nm.mul(nm.reshape(alpha, (b, t, 1)), emb), axis=1)
    return alpha, context


def attend(h_prev: nm.Tensor, emb: EmbeddingSequence, params: dict):
    """Attention for one clip: h (dh,), emb (T*,d) -> alpha (T*,), c (d,)."""
    values = emb.values if isinstance(emb, EmbeddingSequence) else emb
    t, d = values.data.shape
    if t < 1:
        raise ContractError("cannot attend over an empty embedding sequence")
    alpha, context = attend_batch(
        nm.reshape(h_prev, (1, h_prev.data.shape[0])),
        nm.reshape(values, (1, t, d)), None, params)
    return nm.reshape(alpha, (t,)), nm.reshape(context, (d,))


def decode_step_batch(tokens, h: nm.Tensor, emb: nm.Tensor, lengths,
                      params: dict):
    """One decoder step over a batch of previous tokens (B,)."""
    ids = np.asarray(tokens, dtype=np.int64)
    v = vocab_size(params)
    if ids.min() < 0 or ids.max() >= v:
        raise RangeError(f"token id out of range for vocabulary of {v}")
    alpha, context = attend_batch(h, emb, lengths, params)
    word = nm.embedding(params["dec.embed.w"], ids)       # (B, dw)
    x = nm.concat([context, word], axis=1)
    h_new = nm.gru_cell(x, h, _gru_params(params))
    logits = nm.matmul(h_new, nm.transpose(params["dec.out.w"]))
    return h_new, logits, alpha


def decode_step(token: int, h_prev: nm.Tensor, emb: EmbeddingSequence,
                params: dict):
    """One decoder step for one clip; h0 is the zero vector by convention."""
    values = emb.values if isinstance(emb, EmbeddingSequence) else emb
    t, d = values.data.shape
    if t < 1:
        raise ContractError("cannot attend over an empty embedding sequence")
    h, logits, alpha = decode_step_batch(
        [int(token)], nm.reshape(h_prev, (1, h_prev.data.shape[0])),
        nm.reshape(values, (1, t, d)), None, params)
    return (nm.reshape(h, (h.data.shape[1],)),
            nm.reshape(logits, (logits.data.shape[1],)),
            nm.reshape(alpha, (t,)))


def initial_state(params: dict) -> nm.Tensor:
    return nm.Tensor(np.zeros(hidden_dim(params)))


def teacher_forced_loss(emb: EmbeddingSequence, caption: list[int],
                        params: dict) -> nm.Tensor:
    """Mean cross entropy over the steps of one teacher-forced caption.

    ``caption`` must be [<bos>, t1..tL, <eos>]; the input at each step is
    the gold previous token.
    """
    if not caption or len(caption) < 2:
        raise ContractError("caption must contain at least <bos> and <eos>")
    if caption[0] != BOS_ID or caption[-1] != EOS_ID:
        raise ContractError("caption must start with <bos> and end with <eos>")
    h = initial_state(params)
    per_step = []
    for n in range(1, len(caption)):
        h, logits, _ = decode_step(caption[n - 1], h, emb, params)
        per_step.append(nm.reshape(nm.cross_entropy(logits, caption[n]), (1,)))
    return nm.mean(nm.concat(per_step, axis=0))


def teacher_forced_loss_batch(emb: nm.Tensor, lengths, captions: np.ndarray,
                              params: dict) -> nm.Tensor:
    """Teacher-forced loss over a padded caption batch (B, L).

    Rows are [<bos>, ..., <eos>, <pad>...]; pad positions are excluded
    from the loss mean.
    """
    caps = np.asarray(captions, dtype=np.int64)
    b, l = caps.shape
    if l < 2:
        raise ContractError("caption batch must contain at least two columns")
    h = nm.Tensor(np.zeros((b, hidden_dim(params))))
    total = None
    valid = 0.0
    for n in range(1, l):
        targets = caps[:, n]
        mask = (targets != PAD_ID).astype(np.float64)
        if mask.sum() == 0:
            break
        h, logits, _ = decode_step_batch(caps[:, n - 1], h, emb, lengths, params)
        ce = nm.cross_entropy_rows(logits, targets)
        step_sum = nm.tsum(nm.mul(ce, nm.Tensor(mask)))
        total = step_sum if total is None else nm.add(total, step_sum)
        valid += mask.sum()
    return nm.mul(total, nm.Tensor(1.0 / valid))


def greedy_decode(emb: EmbeddingSequence, params: dict,
                  max_len: int = 22) -> CaptionHypothesis:
    """Pick the argmax token each step (ties break to the lowest id)."""
    if max_len < 1:
        raise ArgumentError(f"max_len must be >= 1, got {max_len}")
    with nm.no_grad():
        h = initial_state(params)
        tokens = [BOS_ID]
        log_prob = 0.0
        for _ in range(max_len):
            h, logits, _ = decode_step(tokens[-1], h, emb, params)
            lsm = nm.log_softmax(logits, axis=0).data
            nxt = int(np.argmax(lsm))
            tokens.append(nxt)
            log_prob += float(lsm[nxt])
            if nxt == EOS_ID:
                break
    return CaptionHypothesis(tokens, log_prob, True)


def beam_search(emb: EmbeddingSequence, params: dict, beam: int = 3,
                max_len: int = 22) -> CaptionHypothesis:
    """Beam search over summed log-probabilities, no length normalization.

    Finished hypotheses (eos, or generated length at max_len) leave the
    active beam and are kept; ties break by lexicographic token order.
    """
    if beam < 1:
        raise ArgumentError(f"beam must be >= 1, got {beam}")
    if max_len < 1:
        raise ArgumentError(f"max_len must be >= 1, got {max_len}")
    v = vocab_size(params)
    with nm.no_grad():
        active = [((BOS_ID,), 0.0, initial_state(params))]
        finished: list[tuple[tuple[int, ...], float]] = []
        for _ in range(max_len):
            if not active:
                break
            candidates = []
            for tokens, score, h in active:
                h_new, logits, _ = decode_step(tokens[-1], h, emb, params)
                lsm = nm.log_softmax(logits, axis=0).data
                for tok in range(v):
                    candidates.append(
                        (tokens + (tok,), score + float(lsm[tok]), h_new))
            candidates.sort(key=lambda c: (-c[1], c[0]))
            active = []
            for tokens, score, h in candidates[:beam]:
                if tokens[-1] == EOS_ID or len(tokens) - 1 >= max_len:
                    finished.append((tokens, score))
                else:
                    active.append((tokens, score, h))
        finished.extend((tokens, score) for tokens, score, _ in active)
    best_tokens, best_score = min(finished, key=lambda c: (-c[1], c[0]))
    return CaptionHypothesis(list(best_tokens), best_score, True)
