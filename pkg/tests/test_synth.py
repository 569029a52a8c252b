"""Synthetic-corpus generator tests: determinism, templates, label
consistency, and spectral sanity."""

import numpy as np
import pytest

from audiocap import dsp, synth
from audiocap.errors import ArgumentError
from audiocap.metrics import tokenize

SPEC = synth.SynthSpec()


class TestRenderClip:
    def test_pure_function_of_spec_seed_index(self):
        a = synth.render_clip(SPEC, seed=7, index=3)
        b = synth.render_clip(SPEC, seed=7, index=3)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1:] == b[1:]

    def test_different_indices_differ(self):
        a = synth.render_clip(SPEC, seed=7, index=0)
        b = synth.render_clip(SPEC, seed=7, index=1)
        assert not np.array_equal(a[0], b[0])

    def test_clip_shape_and_range(self):
        for index in range(8):
            samples, events, scene, captions = synth.render_clip(SPEC, 0, index)
            assert samples.shape == (32000,)
            assert np.max(np.abs(samples)) <= 1.0
            assert 1 <= len(events) <= 2
            assert len(set(events)) == len(events)
            assert scene in synth.SCENES
            assert len(captions) == 3


class TestCaptions:
    def test_template_zero_matches_expected_phrase(self):
        captions = synth.make_captions(["pure_tone"], "noisy_room")
        assert captions[0] == "a steady tone sounds in a noisy room"

    def test_two_event_composition(self):
        captions = synth.make_captions(["pure_tone", "chirp"], "windy_field")
        assert captions[0] == ("a steady tone sounds and a quick chirp "
                               "sweeps upward in a windy field")

    def test_every_caption_names_events_and_scene(self):
        for events in (["chirp"], ["am_tone", "silence_gap"]):
            for scene in synth.SCENES:
                for caption in synth.make_captions(events, scene):
                    tokens = tokenize(caption)
                    for event in events:
                        assert synth.EVENT_NOUNS[event] in tokens
                    assert synth.SCENE_NOUNS[scene] in tokens

    def test_nouns_never_leak_across_types(self):
        # an event's designated noun must not appear in any other event's
        # phrases nor in any scene phrase
        for event, noun in synth.EVENT_NOUNS.items():
            for other, phrases in synth.EVENT_PHRASES.items():
                if other == event:
                    continue
                for phrase in phrases:
                    assert noun not in tokenize(phrase), (event, other, phrase)
            for phrases in synth.SCENE_PHRASES.values():
                for phrase in phrases:
                    assert noun not in tokenize(phrase), (event, phrase)
        for scene, noun in synth.SCENE_NOUNS.items():
            for phrases in synth.EVENT_PHRASES.values():
                for phrase in phrases:
                    assert noun not in tokenize(phrase), (scene, phrase)


class TestGenerate:
    def test_rejects_zero_clips(self, tmp_path):
        with pytest.raises(ArgumentError):
            synth.synth_generate(SPEC, 0, 0, tmp_path)

    def test_byte_identical_regeneration(self, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        synth.synth_generate(SPEC, 5, seed=3, out_dir=out_a)
        synth.synth_generate(SPEC, 5, seed=3, out_dir=out_b)
        for name in sorted(p.name for p in out_a.iterdir()):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_manifest_and_label_consistency(self, tmp_path):
        records = synth.synth_generate(SPEC, 24, seed=5, out_dir=tmp_path)
        assert len(records) == 24
        for record in records:
            assert (tmp_path / record["audio"]).exists()
            assert 1 <= len(record["events"]) <= 2
            assert record["scene"] in synth.SCENES
            assert len(record["captions"]) == 3
            for caption in record["captions"]:
                tokens = tokenize(caption)
                for event, noun in synth.EVENT_NOUNS.items():
                    present = noun in tokens
                    assert present == (event in record["events"]), (
                        record["id"], event, caption)

    def test_tone_clip_peaks_in_expected_band(self, tmp_path):
        records = synth.synth_generate(SPEC, 40, seed=9, out_dir=tmp_path)
        tone_only = [r for r in records if r["events"] == ["pure_tone"]]
        assert tone_only, "corpus of 40 clips should contain a tone-only clip"
        cfg = dsp.LogMelConfig()
        centers = dsp.band_centers_hz(cfg)
        expected = int(np.argmin(np.abs(centers - synth.TONE_HZ)))
        for record in tone_only[:3]:
            wav = dsp.read_wav(tmp_path / record["audio"])
            lms = dsp.log_mel(wav, cfg).values
            # frames inside the tone are the energetic ones
            hot = lms.max(axis=1) >= lms.max() - 2.0
            assert np.all(lms[hot].argmax(axis=1) == expected)
