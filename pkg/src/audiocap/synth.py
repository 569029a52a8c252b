"""Synthetic audio-captioning corpus: event sounds over scene beds.

Each clip mixes one or two sound events (local topics) additively over a
scene background (global topic) and carries three caption paraphrases
that always name every event and the scene. Generation is a pure function
of (spec, seed, index), so corpora are byte-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import write_wav
from .errors import ArgumentError

EVENT_TYPES = ("pure_tone", "chirp", "noise_burst", "click_train",
               "am_tone", "harmonic_stack", "sweep_pair", "silence_gap")

SCENES = ("quiet_room", "noisy_room", "hum_room", "windy_field")

# scene bed levels, dB relative to full scale
SCENE_LEVELS_DB = {
    "quiet_room": -60.0,
    "noisy_room": -20.0,
    "hum_room": -30.0,
    "windy_field": -25.0,
}

# each event phrase contains the event's designated noun and nothing that
# names any other event or scene
EVENT_PHRASES = {
    "pure_tone": ("a steady tone sounds",
                  "a clear tone is heard",
                  "a long tone plays"),
    "chirp": ("a quick chirp sweeps upward",
              "a rising chirp cuts through",
              "a sharp chirp slides higher"),
    "noise_burst": ("a burst of static crackles",
                    "rough static cuts in",
                    "a patch of static hisses"),
    "click_train": ("rapid clicks tick along",
                    "steady clicks repeat evenly",
                    "a run of clicks taps away"),
    "am_tone": ("a slow throb pulses",
                "a deep throb rises and falls",
                "a soft throb wavers"),
    "harmonic_stack": ("a rich chord rings out",
                       "a layered chord sustains",
                       "a full chord swells"),
    "sweep_pair": ("a siren wails up and down",
                   "a siren rises then falls",
                   "a passing siren swings by"),
    "silence_gap": ("a sudden silence interrupts",
                    "a short silence falls",
                    "a stretch of silence passes"),
}

EVENT_NOUNS = {
    "pure_tone": "tone",
    "chirp": "chirp",
    "noise_burst": "static",
    "click_train": "clicks",
    "am_tone": "throb",
    "harmonic_stack": "chord",
    "sweep_pair": "siren",
    "silence_gap": "silence",
}

SCENE_PHRASES = {
    "quiet_room": ("in a quiet room",
                   "inside a quiet room",
                   "in a very quiet room"),
    "noisy_room": ("in a noisy room",
                   "inside a noisy room",
                   "in a loud noisy room"),
    "hum_room": ("in a humming room",
                 "inside a humming room",
                 "in a room with a low humming"),
    "windy_field": ("in a windy field",
                    "out in a windy field",
                    "across a windy field"),
}

SCENE_NOUNS = {
    "quiet_room": "quiet",
    "noisy_room": "noisy",
    "hum_room": "humming",
    "windy_field": "windy",
}

N_CAPTIONS = 3

TONE_HZ = 1000.0


@dataclass
class SynthSpec:
    sample_rate: int = 16000
    clip_seconds: float = 2.0
    event_min_amp: float = 0.25
    event_max_amp: float = 0.5

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.clip_seconds))


def _db_amp(db: float) -> float:
    return 10.0 ** (db / 20.0)


def _envelope(length: int, sr: int, ramp_s: float = 0.01) -> np.ndarray:
    env = np.ones(length)
    ramp = min(int(ramp_s * sr), length // 2)
    if ramp > 0:
        shape = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = shape
        env[-ramp:] = shape[::-1]
    return env


def _place(spec: SynthSpec, rng: np.random.Generator):
    dur = rng.uniform(0.4, 1.0)
    n_event = int(dur * spec.sample_rate)
    start = int(rng.uniform(0.0, spec.clip_seconds - dur) * spec.sample_rate)
    amp = rng.uniform(spec.event_min_amp, spec.event_max_amp)
    return start, n_event, amp


def _render_event(name: str, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Additive event signal at full clip length (silence_gap is separate)."""
    sr = spec.sample_rate
    out = np.zeros(spec.n_samples)
    start, n, amp = _place(spec, rng)
    t = np.arange(n) / sr
    if name == "pure_tone":
        sig = np.sin(2 * np.pi * TONE_HZ * t)
    elif name == "chirp":
        f0, f1 = 600.0, 3000.0
        sig = np.sin(2 * np.pi * (f0 * t + (f1 - f0) / (2 * t[-1]) * t * t))
    elif name == "noise_burst":
        sig = rng.standard_normal(n) * 0.5
    elif name == "click_train":
        rate = rng.uniform(8.0, 12.0)
        sig = np.zeros(n)
        width = max(1, int(0.0015 * sr))
        for k in range(int(rate * n / sr) + 1):
            pos = int(k * sr / rate)
            if pos + width <= n:
                sig[pos:pos + width] = rng.choice([-1.0, 1.0])
    elif name == "am_tone":
        sig = np.sin(2 * np.pi * 800.0 * t) * (0.55 + 0.45 * np.sin(2 * np.pi * 4.0 * t))
    elif name == "harmonic_stack":
        sig = sum(np.sin(2 * np.pi * 220.0 * k * t) / k for k in range(1, 6))
        sig = sig / np.max(np.abs(sig))
    elif name == "sweep_pair":
        half = n // 2
        th = np.arange(half) / sr
        up = np.sin(2 * np.pi * (500.0 * th + 2000.0 / (2 * th[-1]) * th * th))
        down = np.sin(2 * np.pi * (2500.0 * th - 2000.0 / (2 * th[-1]) * th * th))
        sig = np.concatenate([up, down, np.zeros(n - 2 * half)])
    else:
        raise ArgumentError(f"unknown additive event {name!r}")
    out[start:start + n] = amp * sig * _envelope(n, sr)
    return out


def _gap_envelope(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative gate that silences a stretch of the mixture."""
    sr = spec.sample_rate
    dur = rng.uniform(0.3, 0.6)
    n = int(dur * sr)
    start = int(rng.uniform(0.2, spec.clip_seconds - dur - 0.2) * sr)
    gate = np.ones(spec.n_samples)
    gate[start:start + n] = 1.0 - _envelope(n, sr, ramp_s=0.02)
    return gate


def _render_scene(name: str, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n, sr = spec.n_samples, spec.sample_rate
    level = _db_amp(SCENE_LEVELS_DB[name])
    if name in ("quiet_room", "noisy_room"):
        return rng.standard_normal(n) * level
    if name == "hum_room":
        phase = rng.uniform(0, 2 * np.pi)
        return level * np.sin(2 * np.pi * 50.0 * np.arange(n) / sr + phase)
    if name == "windy_field":
        noise = rng.standard_normal(n)
        freqs = np.fft.rfftfreq(n, d=1.0 / sr)
        gain = 1.0 / np.sqrt(1.0 + (freqs / 150.0) ** 4)
        shaped = np.fft.irfft(np.fft.rfft(noise) * gain, n=n)
        return shaped * (level / max(shaped.std(), 1e-12))
    raise ArgumentError(f"unknown scene {name!r}")


def make_captions(events: list[str], scene: str) -> list[str]:
    """Three paraphrases naming every event and the scene."""
    captions = []
    for k in range(N_CAPTIONS):
        parts = " and ".join(EVENT_PHRASES[e][k] for e in events)
        captions.append(f"{parts} {SCENE_PHRASES[scene][k]}")
    return captions


def render_clip(spec: SynthSpec, seed: int, index: int):
    """Deterministically render clip ``index``: (samples, events, scene, captions)."""
    rng = np.random.default_rng((seed, index))
    n_events = int(rng.integers(1, 3))
    events = [EVENT_TYPES[i] for i in rng.choice(len(EVENT_TYPES), size=n_events,
                                                 replace=False)]
    scene = SCENES[int(rng.integers(0, len(SCENES)))]
    mix = _render_scene(scene, spec, rng)
    gate = None
    for event in events:
        if event == "silence_gap":
            gate = _gap_envelope(spec, rng)
        else:
            mix = mix + _render_event(event, spec, rng)
    if gate is not None:
        mix = mix * gate
    peak = np.max(np.abs(mix))
    if peak > 0.98:
        mix = mix * (0.98 / peak)
    return mix, events, scene, make_captions(events, scene)


def synth_generate(spec: SynthSpec, n_clips: int, seed: int, out_dir) -> list[dict]:
    """Write WAV clips and a JSONL manifest; return the manifest records."""
    if n_clips < 1:
        raise ArgumentError(f"n_clips must be >= 1, got {n_clips}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for index in range(n_clips):
        samples, events, scene, captions = render_clip(spec, seed, index)
        clip_id = f"synth-{index:05d}"
        wav_name = f"{clip_id}.wav"
        write_wav(out / wav_name, samples, spec.sample_rate)
        records.append({
            "id": clip_id,
            "audio": wav_name,
            "events": events,
            "scene": scene,
            "captions": captions,
        })
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return records
