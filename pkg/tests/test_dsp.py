import struct

import numpy as np
import pytest

from voiceprior.dsp import (AnalysisConfig, Waveform, extract_features, format_feature_row, quantize, read_wav,
                            write_wav)
from voiceprior.errors import MalformedHeader, NoVoicedFrames, TooShort, UnsupportedFormat

FS = 22050


def _raw_wav(values, rate=FS, channels=1, bits=16, fmt=1, truncate=0):
    data = struct.pack(f"<{len(values)}h", *values)
    declared = len(data)
    data = data[: len(data) - truncate]
    block = channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", fmt, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt_chunk + b"data" + struct.pack("<I", declared) + data
    return b"RIFF" + struct.pack("<I", 4 + len(body) - 4) + body


def _sine(freq=220.0, amp=0.5, dur=1.0):
    t = np.arange(int(dur * FS)) / FS
    return Waveform(amp * np.sin(2 * np.pi * freq * t), FS)


def alternating_pulse_train(p1=0.0045, p2=0.0055, dur=1.0, amp=0.5):
    """One cosine cycle per period, so every period peaks at its own start."""
    t = np.arange(int(dur * FS)) / FS
    bounds = [0.0]
    while bounds[-1] < dur + p2:
        bounds.append(bounds[-1] + (p1 if len(bounds) % 2 else p2))
    bounds = np.array(bounds)
    idx = np.searchsorted(bounds, t, side="right") - 1
    phase = (t - bounds[idx]) / (bounds[idx + 1] - bounds[idx])
    return amp * np.cos(2 * np.pi * phase)


def brute_force_jitter(x):
    """Relative jitter from integer sample positions of every local maximum."""
    peaks = np.where((x[1:-1] > x[:-2]) & (x[1:-1] >= x[2:]))[0] + 1
    periods = np.diff(peaks).astype(float)
    return np.mean(np.abs(np.diff(periods))) / periods.mean()


class TestWavIO:
    def test_read_fixed_point_scaling(self, tmp_path):
        p = tmp_path / "four.wav"
        p.write_bytes(_raw_wav([0, 16384, -16384, 32767]))
        w = read_wav(p)
        assert w.sample_rate == FS
        np.testing.assert_array_equal(w.samples, [0.0, 0.5, -0.5, 32767 / 32768])

    def test_truncated_data_chunk(self, tmp_path):
        p = tmp_path / "trunc.wav"
        p.write_bytes(_raw_wav([1, 2, 3, 4, 5, 6], truncate=4))
        with pytest.raises(MalformedHeader):
            read_wav(p)

    def test_garbage_header(self, tmp_path):
        p = tmp_path / "junk.wav"
        p.write_bytes(b"NOTAWAVEFILE" * 4)
        with pytest.raises(MalformedHeader):
            read_wav(p)

    @pytest.mark.parametrize("kw", [{"channels": 2}, {"bits": 8}, {"fmt": 3, "bits": 32}])
    def test_unsupported(self, tmp_path, kw):
        p = tmp_path / "odd.wav"
        p.write_bytes(_raw_wav([0, 1, 2, 3], **kw))
        with pytest.raises(UnsupportedFormat):
            read_wav(p)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        w = Waveform(rng.uniform(-1, 1, 1000), 16000)
        write_wav(w, tmp_path / "rt.wav")
        back = read_wav(tmp_path / "rt.wav")
        assert back.sample_rate == 16000
        assert np.max(np.abs(back.samples - w.samples)) <= 1 / 32768

    def test_quantize_edges(self):
        assert quantize(np.array([1.0]))[0] == 32767
        assert quantize(np.array([0.25]))[0] == 8192
        assert quantize(np.array([-1.0]))[0] == -32768
        # half away from zero
        assert quantize(np.array([0.5 / 32768]))[0] == 1
        assert quantize(np.array([-0.5 / 32768]))[0] == -1
        assert quantize(np.array([2.0]))[0] == 32767

    def test_empty_waveform(self, tmp_path):
        write_wav(Waveform(np.zeros(0), FS), tmp_path / "empty.wav")
        back = read_wav(tmp_path / "empty.wav")
        assert back.samples.size == 0


class TestFeatures:
    def test_pure_sine(self):
        f = extract_features(_sine())
        assert f.pitch_mean == pytest.approx(220, abs=2)
        assert f.pitch_std <= 2
        assert f.jitter_ratio <= 0.005
        assert f.shimmer_ratio <= 0.01
        assert f.level_db == pytest.approx(20 * np.log10(0.5 / np.sqrt(2)), abs=0.2)

    def test_alternating_periods_jitter(self):
        x = alternating_pulse_train()
        oracle = brute_force_jitter(x)
        assert oracle == pytest.approx(0.2, abs=0.02)
        f = extract_features(Waveform(x, FS))
        assert f.jitter_ratio == pytest.approx(0.2, abs=0.02)

    def test_silence(self):
        with pytest.raises(NoVoicedFrames):
            extract_features(Waveform(np.zeros(FS), FS))

    def test_noise_only(self):
        rng = np.random.default_rng(0)
        with pytest.raises(NoVoicedFrames):
            extract_features(Waveform(0.1 * rng.standard_normal(FS), FS))

    def test_too_short(self):
        with pytest.raises(TooShort):
            extract_features(_sine(dur=0.15))

    def test_deterministic(self):
        w = _sine(freq=173.0)
        assert extract_features(w) == extract_features(Waveform(w.samples.copy(), FS))

    def test_halving_amplitude(self):
        t = np.arange(FS) / FS
        f0 = 180 + 10 * np.sin(2 * np.pi * 3 * t)
        x = 0.6 * np.sin(2 * np.pi * np.cumsum(f0) / FS)
        a = extract_features(Waveform(x, FS))
        b = extract_features(Waveform(0.5 * x, FS))
        assert a.level_db - b.level_db == pytest.approx(20 * np.log10(2), abs=0.01)
        for name in ("pitch_mean", "pitch_std", "jitter_ratio"):
            va, vb = getattr(a, name), getattr(b, name)
            assert abs(va - vb) <= 0.01 * abs(va)

    def test_config_pins(self):
        cfg = AnalysisConfig()
        assert (cfg.frame_s, cfg.hop_s, cfg.fmin, cfg.fmax, cfg.voicing_threshold) == (0.04, 0.01, 60, 600, 0.5)

    def test_csv_row(self):
        f = extract_features(_sine())
        text = format_feature_row("a.wav", f, header=True)
        header, row = text.strip().split("\n")
        assert header == "path,pitch_mean_hz,pitch_std_hz,level_db,jitter_ratio,shimmer_ratio"
        assert row.startswith("a.wav,")
        assert float(row.split(",")[1]) == f.pitch_mean
