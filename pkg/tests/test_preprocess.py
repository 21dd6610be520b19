import json

import numpy as np
import pytest

from mainet.preprocess import (
    LOG_FLOOR, AlignmentError, EmbeddingMaps, Recording, WaveEmbedding, adaptive_avg_pool,
    audio_to_melspec, hz_to_mel, image_to_map, load_recording, log_mel, mel_filterbank,
    to_embedding_maps, wave_to_map, window_count, window_stream, write_windows,
)
from mainet.records import read_records
from mainet.tensor import ConfigurationError, DimensionError, Tensor, grad_check

import oracles
from helpers import write_recording_dir


class TestAdaptivePool:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 5, 6))
        np.testing.assert_array_equal(adaptive_avg_pool(x, 5, 6).data, x)

    def test_quadrants(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        out = adaptive_avg_pool(x, 2, 2).data[0]
        np.testing.assert_allclose(out, [[x[0, :2, :2].mean(), x[0, :2, 2:].mean()],
                                         [x[0, 2:, :2].mean(), x[0, 2:, 2:].mean()]])

    def test_against_window_enumeration(self, rng):
        for shape, out in [((2, 7, 7), (3, 3)), ((1, 5, 9), (4, 2)), ((1, 4, 3), (7, 5))]:
            x = rng.standard_normal(shape)
            np.testing.assert_allclose(adaptive_avg_pool(x, *out).data,
                                       oracles.adaptive_pool_windows(x, *out), rtol=1e-12, atol=1e-14)

    def test_mean_preserved_when_partitioned(self, rng):
        x = rng.standard_normal((3, 12, 8))
        assert abs(adaptive_avg_pool(x, 4, 2).data.mean() - x.mean()) < 1e-9

    def test_bad_output(self):
        with pytest.raises(ConfigurationError):
            adaptive_avg_pool(np.zeros((1, 3, 3)), 0, 2)

    def test_gradient(self, rng):
        x = rng.standard_normal((1, 5, 7))
        w = rng.standard_normal((1, 3, 4))
        assert grad_check(lambda t: (adaptive_avg_pool(t, 3, 4) * w).sum(), x, 1e-5) <= 1e-6


class TestMel:
    def test_silence_is_floor(self):
        out = audio_to_melspec(np.zeros((2, 16000)), 16000).data
        assert out.shape == (2, 224, 224)
        np.testing.assert_allclose(out, np.log(LOG_FLOOR), rtol=1e-12)

    def test_shape_for_random_audio(self, rng):
        out = audio_to_melspec(rng.uniform(-1, 1, (2, 22050)), 22050)
        assert out.shape == (2, 224, 224) and np.isfinite(out.data).all()

    def test_filterbank_covers_band(self):
        fb = mel_filterbank(16000, 1024, 128)
        assert (fb.sum(axis=1) > 0).all()
        freqs = np.arange(513) * 16000 / 1024
        covered = freqs[fb.sum(axis=0) > 0]
        assert covered.min() < 20 and covered.max() > 7900

    def test_tone_lands_in_expected_bin(self):
        sr, n_mels = 16000, 128
        t = np.arange(sr) / sr
        tone = np.sin(2 * np.pi * 1000.0 * t)
        # centre mels are evenly spaced: bin k sits at (k + 1) * mel(nyquist) / (n_mels + 1)
        step = hz_to_mel(sr / 2) / (n_mels + 1)
        expected = int(round(hz_to_mel(1000.0) / step)) - 1
        spec = log_mel(tone, sr, n_mels=n_mels)
        assert (spec.argmax(axis=0) == expected).all()
        pooled = audio_to_melspec(np.vstack([tone, tone]), sr).data[0]
        for row in pooled.argmax(axis=0):
            lo, hi = (row * n_mels) // 224, -((-(row + 1) * n_mels) // 224)
            assert lo <= expected < hi

    def test_deterministic(self, rng):
        x = rng.uniform(-1, 1, (2, 16000))
        assert audio_to_melspec(x, 16000).data.tobytes() == audio_to_melspec(x.copy(), 16000).data.tobytes()

    def test_too_short(self):
        with pytest.raises(ConfigurationError):
            audio_to_melspec(np.zeros((2, 100)), 16000)


class TestWave:
    def test_zero_wave_gives_bias_pattern(self, rng):
        emb = WaveEmbedding(rng)
        emb.bias.assign_(rng.standard_normal(224))
        out = wave_to_map(np.zeros((9, 200)), emb).data
        assert out.shape == (1, 224, 224)
        np.testing.assert_allclose(out[0], np.broadcast_to(emb.bias.data, (224, 224)), rtol=1e-12)

    def test_constant_wave_equals_zero_wave(self, rng):
        emb = WaveEmbedding(rng)
        a = wave_to_map(np.full((9, 200), 3.7), emb).data
        b = wave_to_map(np.zeros((9, 200)), emb).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_against_step_by_step_oracle(self, rng):
        emb = WaveEmbedding(rng)
        emb.bias.assign_(rng.standard_normal(224) * 0.1)
        wave = rng.standard_normal((9, 200)) * rng.uniform(0.5, 3, (9, 1)) + rng.standard_normal((9, 1))
        z = np.empty_like(wave)
        for c in range(9):
            mu = sum(wave[c]) / 200
            var = sum((v - mu) ** 2 for v in wave[c]) / 200
            z[c] = (wave[c] - mu) / np.sqrt(max(var, 1e-8))
        latent = np.array([[sum(z[c, t] * emb.weight.data[c, j] for c in range(9)) + emb.bias.data[j]
                            for j in range(224)] for t in range(200)])
        ref = oracles.adaptive_pool_windows(latent[None], 224, 224)
        np.testing.assert_allclose(wave_to_map(wave, emb).data, ref, rtol=1e-10, atol=1e-12)

    def test_wrong_shape(self, rng):
        with pytest.raises(DimensionError):
            wave_to_map(np.zeros((6, 200)), WaveEmbedding(rng))

    def test_embedding_is_trainable(self, rng):
        emb = WaveEmbedding(rng, width=8)
        wave = rng.standard_normal((9, 200))

        def f(w):
            emb.weight = w
            return (wave_to_map(wave, emb, size=6) * 0.1).sum()

        w0 = emb.weight.data.copy()
        assert grad_check(lambda t: f(t), w0, 1e-5) <= 1e-6


class TestEmbeddingMaps:
    def test_shapes_enforced(self):
        with pytest.raises(DimensionError):
            EmbeddingMaps(Tensor(np.zeros((3, 224, 224))), Tensor(np.zeros((1, 224, 224))),
                          Tensor(np.zeros((1, 224, 224))))

    def test_from_raw_window(self, rng):
        rec = _recording(rng, 1.0)
        win = window_stream(rec)[0]
        maps = to_embedding_maps(win, WaveEmbedding(rng))
        assert maps.image_map.shape == (3, 224, 224)
        assert maps.audio_map.shape == (2, 224, 224)
        assert maps.wave_map.shape == (1, 224, 224)

    def test_image_resized(self, rng):
        assert image_to_map(rng.uniform(size=(3, 90, 160))).shape == (3, 224, 224)


def _recording(rng, seconds, sr=8000, fps=20):
    n_frames = int(seconds * fps) + 1
    frames = [(i * 1000.0 / fps, rng.uniform(size=(3, 12, 16))) for i in range(n_frames)]
    labels = {int(i * 500): i % 3 for i in range(int(seconds * 2) + 1)}
    return Recording(frames, rng.uniform(-0.5, 0.5, (2, int(seconds * sr))), sr,
                     rng.standard_normal((9, int(seconds * 200))), labels)


class TestWindowing:
    @pytest.mark.parametrize("duration,count", [(1.0, 1), (2.0, 3), (10.0, 19), (0.9, 0), (1.4, 1), (1.5, 2)])
    def test_count(self, duration, count):
        assert window_count(duration) == count

    def test_ten_seconds_by_formula(self):
        assert window_count(10.0) == int(np.floor((10.0 - 1.0) / 0.5)) + 1 == 19

    def test_starts_and_alignment(self, rng):
        rec = _recording(rng, 2.0)
        wins = window_stream(rec)
        assert [w.timestamp for w in wins] == [0.0, 500.0, 1000.0]
        for w in wins:
            assert w.audio.shape == (2, 8000) and w.wave.shape == (9, 200)
            assert w.skew_ms <= 1.0
        np.testing.assert_array_equal(wins[1].wave, rec.wave[:, 100:300])
        np.testing.assert_array_equal(wins[2].audio, rec.audio[:, 8000:16000])
        assert [w.label for w in wins] == [0, 1, 2]

    def test_short_stream_is_empty(self, rng):
        assert window_stream(_recording(rng, 0.5)) == []

    def test_skew_violation(self, rng):
        rec = _recording(rng, 2.0)
        rec.frames = [(ts + 7.0, img) for ts, img in rec.frames]
        with pytest.raises(AlignmentError):
            window_stream(rec)


class TestRecordingIO:
    def test_load_and_emit(self, rng, tmp_path):
        d = tmp_path / "rec"
        sr = 8000
        pcm = write_recording_dir(rng, d, sr)
        rec = load_recording(d)
        assert rec.sample_rate == sr and rec.audio.shape == (2, 2 * sr) and rec.wave.shape == (9, 400)
        wins = window_stream(rec)
        assert [w.label for w in wins] == [0, 1, 2]
        np.testing.assert_allclose(wins[0].audio[:, :5], pcm[:5].T / 32768.0)

        manifest = write_windows(wins, tmp_path / "out", seed=3, cfg={"width": 1.0})
        assert manifest["class_counts"] == [1, 1, 1]
        recs, man2 = read_records(tmp_path / "out")
        assert json.loads((tmp_path / "out" / "manifest.json").read_text())["seed"] == 3
        np.testing.assert_array_equal(recs[2]["wave"], wins[2].wave)
        assert recs[1]["label"] == 1.0
