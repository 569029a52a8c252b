"""Two-stage training pipeline: dataset manifests, deterministic splits,
feature caching, pretraining and fine-tuning loops with early stopping.

Manifests are JSON Lines with fields id, audio, events, scene, captions.
Both loops train with Adam, evaluate validation loss after every epoch,
snapshot the best parameters, and stop after `patience` epochs without
improvement (patience 0 stops after the first epoch) or at max_epochs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .checkpoint import Checkpoint
from .decoder import (DecoderConfig, Vocabulary, init_decoder_params,
                      teacher_forced_loss_batch)
from .dsp import LogMelConfig, log_mel, read_wav
from .encoder import (EncoderConfig, encode_batch, init_encoder_params,
                      output_length)
from .errors import ArgumentError, DataError, InputError
from .metrics import tokenize
from .pretrain import TagHead, init_head_params, tag_forward_batch, tag_loss, \
    transfer_encoder
from .synth import SynthSpec, synth_generate  # noqa: F401  (pipeline surface)

TASKS = ("at", "asc", "caption")

PRETRAIN_LR = 1e-3
FINETUNE_LR = 5e-4
PRETRAIN_BATCH = 64
FINETUNE_BATCH = 32


@dataclass
class ManifestRecord:
    id: str
    audio: str
    events: list[str] | None = None
    scene: str | None = None
    captions: list[str] | None = None


def load_manifest(path) -> list[ManifestRecord]:
    """Read a JSONL manifest; audio paths resolve relative to the file."""
    base = Path(path).parent
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
        rid = obj.get("id")
        audio = obj.get("audio")
        if not rid or not audio:
            raise DataError(f"{path}:{line_no}: record needs id and audio")
        if not any(obj.get(k) for k in ("events", "scene", "captions")):
            raise DataError(
                f"{path}:{line_no}: record {rid!r} carries none of "
                f"events/scene/captions")
        resolved = Path(audio)
        if not resolved.is_absolute():
            resolved = base / resolved
        if not resolved.exists():
            raise DataError(
                f"{path}:{line_no}: record {rid!r} audio not found: {resolved}")
        records.append(ManifestRecord(
            id=rid, audio=str(resolved), events=obj.get("events"),
            scene=obj.get("scene"), captions=obj.get("captions")))
    if not records:
        raise DataError(f"{path}: manifest holds no records")
    return records


def split_dev(records: list, val_fraction: float, seed: int):
    """Deterministic shuffled split into (train, val); exact partition."""
    if len(records) < 2:
        raise InputError(f"need at least 2 records to split, got {len(records)}")
    if not 0.0 < val_fraction < 1.0:
        raise ArgumentError(f"val_fraction must be in (0,1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(len(records))
    n_val = round(len(records) * val_fraction)
    val = [records[i] for i in perm[:n_val]]
    train = [records[i] for i in perm[n_val:]]
    return train, val


@dataclass
class TrainConfig:
    task: str
    lr: float = PRETRAIN_LR
    batch_size: int = PRETRAIN_BATCH
    val_fraction: float = 0.1
    patience: int = 5
    max_epochs: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ArgumentError(f"unknown task {self.task!r}")
        if self.lr <= 0:
            raise ArgumentError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ArgumentError(
                f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ArgumentError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 0:
            raise ArgumentError(f"patience must be >= 0, got {self.patience}")


def finetune_config(**overrides) -> TrainConfig:
    base = dict(task="caption", lr=FINETUNE_LR, batch_size=FINETUNE_BATCH)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochStats]
    best_epoch: int
    best_val_loss: float
    labels: list[str] | None = None
    vocab: Vocabulary | None = None


def write_history_csv(history: list[EpochStats], path) -> None:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{h.epoch},{h.train_loss!r},{h.val_loss!r}" for h in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def feature_path(cache_dir, record_id: str) -> Path:
    return Path(cache_dir) / f"{record_id}.lms"


def compute_features(records: list[ManifestRecord],
                     dsp_cfg: LogMelConfig | None = None,
                     cache_dir=None) -> dict[str, np.ndarray]:
    """Log-mel features keyed by record id, optionally cached on disk."""
    dsp_cfg = dsp_cfg or LogMelConfig()
    feats = {}
    for record in records:
        cached = feature_path(cache_dir, record.id) if cache_dir else None
        if cached is not None and cached.exists():
            feats[record.id] = Checkpoint.load(cached)["lms"]
            continue
        values = log_mel(read_wav(record.audio), dsp_cfg).values
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            Checkpoint({"lms": values}).save(cached)
        feats[record.id] = values
    return feats


def featurize_manifest(records: list[ManifestRecord], out_dir,
                       dsp_cfg: LogMelConfig | None = None) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    compute_features(records, dsp_cfg, cache_dir=out_dir)


def _pad_batch(feats: list[np.ndarray]):
    """Zero-pad spectrograms in time; returns (N,1,T,D) tensor and lengths."""
    t_max = max(f.shape[0] for f in feats)
    batch = np.zeros((len(feats), 1, t_max, feats[0].shape[1]))
    lengths = np.zeros(len(feats), dtype=np.int64)
    for i, f in enumerate(feats):
        batch[i, 0, :f.shape[0]] = f
        lengths[i] = f.shape[0]
    return nm.Tensor(batch), lengths


# ---------------------------------------------------------------------------
# labels and targets
# ---------------------------------------------------------------------------


def collect_labels(records: list[ManifestRecord], task: str) -> list[str]:
    """Sorted label inventory; every record must carry the task's field."""
    labels = set()
    for record in records:
        if task == "at":
            if not record.events:
                raise DataError(f"record {record.id!r} has no event labels")
            labels.update(record.events)
        elif task == "asc":
            if not record.scene:
                raise DataError(f"record {record.id!r} has no scene label")
            labels.add(record.scene)
        else:
            raise ArgumentError(f"labels undefined for task {task!r}")
    return sorted(labels)


def encode_targets(records: list[ManifestRecord], labels: list[str],
                   task: str) -> np.ndarray:
    index = {label: i for i, label in enumerate(labels)}
    if task == "at":
        out = np.zeros((len(records), len(labels)))
        for i, record in enumerate(records):
            for event in record.events:
                if event not in index:
                    raise DataError(
                        f"record {record.id!r} event {event!r} not in label set")
                out[i, index[event]] = 1.0
        return out
    out = np.zeros(len(records), dtype=np.int64)
    for i, record in enumerate(records):
        if record.scene not in index:
            raise DataError(
                f"record {record.id!r} scene {record.scene!r} not in label set")
        out[i] = index[record.scene]
    return out


# ---------------------------------------------------------------------------
# early-stopped epoch engine
# ---------------------------------------------------------------------------


def _run_epochs(cfg: TrainConfig, params: dict, n_train: int,
                train_batch_loss, val_loss_fn, snapshot_extra: dict):
    """Shared epoch loop: shuffled minibatches, Adam, best-epoch snapshot.

    ``train_batch_loss(indices)`` returns (loss Tensor, weight);
    ``val_loss_fn()`` returns the validation loss as a float. Stops once
    the epochs-since-improvement counter reaches ``cfg.patience``.
    """
    opt = nm.Adam(params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng((cfg.seed, 1))
    history: list[EpochStats] = []
    best_val = np.inf
    best_epoch = -1
    best_snapshot: dict[str, np.ndarray] = {}
    bad_epochs = 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = shuffle_rng.permutation(n_train)
        total = 0.0
        weight_sum = 0.0
        for start in range(0, n_train, cfg.batch_size):
            indices = perm[start:start + cfg.batch_size]
            loss, weight = train_batch_loss(indices)
            opt.zero_grad()
            nm.backward(loss)
            opt.step()
            total += loss.item() * weight
            weight_sum += weight
        val_loss = val_loss_fn()
        history.append(EpochStats(epoch, total / weight_sum, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snapshot = {name: p.data.copy() for name, p in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
        if bad_epochs >= cfg.patience:
            break
    tensors = dict(best_snapshot)
    tensors.update(snapshot_extra)
    return Checkpoint(tensors), history, best_epoch, best_val


# ---------------------------------------------------------------------------
# stage 1: tagging / scene pretraining
# ---------------------------------------------------------------------------


def pretrain_loop(records: list[ManifestRecord], cfg: TrainConfig,
                  enc_cfg: EncoderConfig | None = None,
                  dsp_cfg: LogMelConfig | None = None,
                  feature_cache=None) -> TrainResult:
    """Train encoder + tagging head; return the best-validation checkpoint."""
    cfg.validate()
    if cfg.task not in ("at", "asc"):
        raise ArgumentError(f"pretrain task must be at or asc, got {cfg.task!r}")
    enc_cfg = enc_cfg or EncoderConfig()
    labels = collect_labels(records, cfg.task)
    head = TagHead(task=cfg.task, num_labels=len(labels))
    train, val = split_dev(records, cfg.val_fraction, cfg.seed)
    feats = compute_features(records, dsp_cfg, feature_cache)
    train_feats = [feats[r.id] for r in train]
    val_feats = [feats[r.id] for r in val]
    train_targets = encode_targets(train, labels, cfg.task)
    val_targets = encode_targets(val, labels, cfg.task)

    init_rng = np.random.default_rng((cfg.seed, 0))
    params = init_encoder_params(enc_cfg, init_rng)
    params.update(init_head_params(head, enc_cfg.embed_dim, init_rng))

    def batch_loss(indices):
        x, _ = _pad_batch([train_feats[i] for i in indices])
        logits = tag_forward_batch(x, params, enc_cfg, training=True)
        targets = train_targets[indices]
        return tag_loss(logits, targets, cfg.task), float(len(indices))

    def val_loss():
        total = 0.0
        with nm.no_grad():
            for start in range(0, len(val), cfg.batch_size):
                chunk = slice(start, start + cfg.batch_size)
                x, _ = _pad_batch(val_feats[chunk])
                logits = tag_forward_batch(x, params, enc_cfg, training=False)
                loss = tag_loss(logits, val_targets[chunk], cfg.task)
                total += loss.item() * (len(val_feats[chunk]))
        return total / len(val)

    extra = {"meta.time_subsample": np.array([float(enc_cfg.time_subsample)])}
    ckpt, history, best_epoch, best_val = _run_epochs(
        cfg, params, len(train), batch_loss, val_loss, extra)
    return TrainResult(ckpt, history, best_epoch, best_val, labels=labels)


# ---------------------------------------------------------------------------
# stage 2: caption fine-tuning
# ---------------------------------------------------------------------------


def build_vocab(train_records: list[ManifestRecord]) -> Vocabulary:
    tokenized = []
    for record in train_records:
        for caption in record.captions:
            tokens = tokenize(caption)
            if not tokens:
                raise DataError(
                    f"record {record.id!r} caption empty after tokenization")
            tokenized.append(tokens)
    return Vocabulary.from_captions(tokenized)


def init_caption_model(vocab_size: int, enc_cfg: EncoderConfig,
                       dec_cfg: DecoderConfig, init: Checkpoint | None,
                       seed: int) -> dict[str, nm.Tensor]:
    """Assemble encoder (fresh or transferred) plus a fresh decoder."""
    rng = np.random.default_rng((seed, 0))
    if init is not None:
        params = transfer_encoder(init, enc_cfg)
        # burn the encoder draws so decoder init matches the fresh case
        init_encoder_params(enc_cfg, rng)
    else:
        params = init_encoder_params(enc_cfg, rng)
    params.update(init_decoder_params(vocab_size, enc_cfg.embed_dim,
                                      dec_cfg, rng))
    return params


def finetune_loop(records: list[ManifestRecord], cfg: TrainConfig,
                  enc_cfg: EncoderConfig | None = None,
                  dec_cfg: DecoderConfig | None = None,
                  init: Checkpoint | None = None,
                  dsp_cfg: LogMelConfig | None = None,
                  feature_cache=None) -> TrainResult:
    """End-to-end teacher-forced training of encoder + decoder.

    With ``init`` given, the encoder starts from the pretrained "enc."
    tensors (nothing frozen); otherwise it is freshly initialized. The
    vocabulary is built from training-split captions only; each
    (clip, caption) pair is one training sample.
    """
    cfg.validate()
    if cfg.task != "caption":
        raise ArgumentError(f"finetune task must be caption, got {cfg.task!r}")
    enc_cfg = enc_cfg or EncoderConfig()
    dec_cfg = dec_cfg or DecoderConfig()
    for record in records:
        if not record.captions:
            raise DataError(f"record {record.id!r} has no captions")
    train, val = split_dev(records, cfg.val_fraction, cfg.seed)
    vocab = build_vocab(train)
    feats = compute_features(records, dsp_cfg, feature_cache)

    def make_samples(subset):
        samples = []
        for record in subset:
            for caption in record.captions:
                ids = vocab.caption_ids(tokenize(caption))
                samples.append((record.id, ids))
        return samples

    train_samples = make_samples(train)
    val_samples = make_samples(val)
    params = init_caption_model(len(vocab), enc_cfg, dec_cfg, init, cfg.seed)

    def assemble(sample_subset):
        x, frame_lens = _pad_batch([feats[rid] for rid, _ in sample_subset])
        emb_lens = np.array([output_length(int(t), enc_cfg.time_subsample)
                             for t in frame_lens])
        cap_max = max(len(ids) for _, ids in sample_subset)
        caps = np.zeros((len(sample_subset), cap_max), dtype=np.int64)
        for i, (_, ids) in enumerate(sample_subset):
            caps[i, :len(ids)] = ids
        return x, emb_lens, caps

    def batch_loss(indices):
        subset = [train_samples[i] for i in indices]
        x, emb_lens, caps = assemble(subset)
        emb = encode_batch(x, params, enc_cfg, training=True)
        loss = teacher_forced_loss_batch(emb, emb_lens, caps, params)
        weight = float(np.sum(caps != 0) - len(subset))  # predicted steps
        return loss, weight

    def val_loss():
        total = 0.0
        weight = 0.0
        with nm.no_grad():
            for start in range(0, len(val_samples), cfg.batch_size):
                subset = val_samples[start:start + cfg.batch_size]
                x, emb_lens, caps = assemble(subset)
                emb = encode_batch(x, params, enc_cfg, training=False)
                loss = teacher_forced_loss_batch(emb, emb_lens, caps, params)
                w = float(np.sum(caps != 0) - len(subset))
                total += loss.item() * w
                weight += w
        return total / weight

    extra = {"meta.time_subsample": np.array([float(enc_cfg.time_subsample)])}
    ckpt, history, best_epoch, best_val = _run_epochs(
        cfg, params, len(train_samples), batch_loss, val_loss, extra)
    return TrainResult(ckpt, history, best_epoch, best_val, vocab=vocab)
