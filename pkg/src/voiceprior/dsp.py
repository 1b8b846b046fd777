"""WAV I/O and extraction of five interpretable voice features.

The features are an eGeMAPS-like subset: mean and standard deviation of
F0, RMS level, local jitter and local shimmer. F0 comes from a frame-wise
normalized cross-correlation search; jitter and shimmer come from glottal
period marks tracked sample-by-sample through the voiced regions.
"""

from __future__ import annotations

import csv
import io
import wave
from dataclasses import asdict, dataclass

import numpy as np

from .errors import IoFailure, MalformedHeader, NoVoicedFrames, TooShort, UnsupportedFormat

FEATURE_CSV_HEADER = ["path", "pitch_mean_hz", "pitch_std_hz", "level_db", "jitter_ratio", "shimmer_ratio"]


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D samples)")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def validate(self) -> None:
        if self.sample_rate < 8000:
            raise ValueError(f"sample_rate {self.sample_rate} below 8000 Hz")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite samples")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("samples outside [-1, 1]")


@dataclass(frozen=True)
class FeatureVector:
    pitch_mean: float
    pitch_std: float
    level_db: float
    jitter_ratio: float
    shimmer_ratio: float

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch_mean, self.pitch_std, self.level_db,
                         self.jitter_ratio, self.shimmer_ratio])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AnalysisConfig:
    frame_s: float = 0.040
    hop_s: float = 0.010
    fmin: float = 60.0
    fmax: float = 600.0
    voicing_threshold: float = 0.5
    # a later lag is preferred over an earlier local peak only when the earlier
    # one falls below this fraction of the band maximum (guards octave drops)
    octave_ratio: float = 0.85
    min_voiced_frames: int = 5
    min_duration_s: float = 0.2
    # period marks closer than this to a voiced-region edge are discarded
    edge_trim_s: float = 0.015
    search_slack: float = 0.3


# --------------------------------------------------------------------- WAV


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file into [-1, 1) floats."""
    try:
        with wave.open(str(path), "rb") as wf:
            nch, width, rate, nframes = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            if nch != 1:
                raise UnsupportedFormat(f"{nch} channels; only mono is supported")
            if width != 2:
                raise UnsupportedFormat(f"{8 * width}-bit samples; only 16-bit PCM is supported")
            raw = wf.readframes(nframes)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormat(msg) from exc
        raise MalformedHeader(msg) from exc
    except EOFError as exc:
        raise MalformedHeader(f"unexpected end of file: {exc}") from exc
    except FileNotFoundError as exc:
        raise IoFailure(str(exc)) from exc
    if len(raw) != 2 * nframes:
        raise MalformedHeader(f"data chunk truncated: header declares {nframes} frames, found {len(raw) // 2}")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data, rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1], scale by 32768 and round half away from zero."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32768.0
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(waveform: Waveform, path) -> None:
    try:
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(int(waveform.sample_rate))
            wf.writeframes(quantize(waveform.samples).tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


# ---------------------------------------------------------------- analysis


def _frames(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def _parabolic(y_left: float, y_mid: float, y_right: float) -> tuple[float, float]:
    """Vertex offset in [-0.5, 0.5] and height of the parabola through 3 points."""
    denom = y_left - 2.0 * y_mid + y_right
    if denom >= 0.0:
        return 0.0, y_mid
    offset = 0.5 * (y_left - y_right) / denom
    return offset, y_mid - 0.25 * (y_left - y_right) * offset


def nccf(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation of each frame with its own lagged copy.

    Row ``i``, column ``k`` holds
    ``sum x[n] x[n+k] / sqrt(sum x[n]^2 * sum x[n+k]^2)`` with both sums over
    the overlap ``n = 0 .. N-1-k``.
    """
    n = frames.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(frames, nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, : max_lag + 1]
    sq = frames ** 2
    csum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(sq, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    head = csum[:, n - lags]                 # energy of x[0 : N-k]
    tail = csum[:, n:n + 1] - csum[:, lags]  # energy of x[k : N]
    denom = np.sqrt(head * tail)
    out = np.zeros_like(acf)
    ok = denom > 1e-12 * np.maximum(csum[:, n:n + 1], 1e-300)
    out[ok] = acf[ok] / denom[ok]
    return out


def pitch_track(waveform: Waveform, config: AnalysisConfig = AnalysisConfig()):
    """Frame-wise F0 estimates.

    Returns ``(f0, strength, centers)``: F0 in Hz (NaN where unvoiced),
    the correlation peak height per frame, and frame centres in samples.
    """
    fs = waveform.sample_rate
    x = waveform.samples
    frame_len = int(round(config.frame_s * fs))
    hop = int(round(config.hop_s * fs))
    min_lag = max(2, int(np.floor(fs / config.fmax)))
    max_lag = min(frame_len - 2, int(np.ceil(fs / config.fmin)))
    frames = _frames(x, frame_len, hop)
    r = nccf(frames, max_lag + 1)

    n_frames = frames.shape[0]
    f0 = np.full(n_frames, np.nan)
    strength = np.zeros(n_frames)
    for i in range(n_frames):
        row = r[i]
        band = row[min_lag:max_lag + 1]
        # interior local maxima inside the search band
        inner = np.arange(min_lag, max_lag + 1)
        is_peak = (row[inner] >= row[inner - 1]) & (row[inner] > row[inner + 1])
        peaks = inner[is_peak]
        if peaks.size == 0:
            continue
        best = band.max()
        chosen = peaks[np.argmax(row[peaks] >= config.octave_ratio * best)]
        offset, height = _parabolic(row[chosen - 1], row[chosen], row[chosen + 1])
        strength[i] = height
        if height >= config.voicing_threshold:
            f0[i] = fs / (chosen + offset)
    centers = hop * np.arange(n_frames) + frame_len / 2.0
    return f0, strength, centers


def _voiced_runs(voiced: np.ndarray) -> list[tuple[int, int]]:
    runs = []
    start = None
    for i, v in enumerate(voiced):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(voiced) - 1))
    return runs


def _refine_peak(x: np.ndarray, k: int) -> tuple[float, float]:
    if 0 < k < len(x) - 1:
        off, h = _parabolic(x[k - 1], x[k], x[k + 1])
        return k + off, h
    return float(k), float(x[k])


def period_marks(waveform: Waveform, f0: np.ndarray, centers: np.ndarray,
                 config: AnalysisConfig = AnalysisConfig()) -> list[tuple[np.ndarray, np.ndarray]]:
    """Track one positive peak per glottal period through each voiced run.

    Returns a list (one entry per voiced run) of ``(times, amplitudes)``,
    times in fractional samples.
    """
    x = waveform.samples
    fs = waveform.sample_rate
    frame_len = int(round(config.frame_s * fs))
    hop = int(round(config.hop_s * fs))
    trim = config.edge_trim_s * fs
    voiced = np.isfinite(f0)
    out = []
    for a, b in _voiced_runs(voiced):
        seg_lo = a * hop
        seg_hi = min(len(x), b * hop + frame_len)
        vc, vf = centers[a:b + 1], f0[a:b + 1]
        period_at = lambda n: fs / np.interp(n, vc, vf)  # noqa: E731

        first_T = period_at(seg_lo)
        end = min(seg_hi, seg_lo + int(np.ceil(first_T)))
        k = seg_lo + int(np.argmax(x[seg_lo:end]))
        times, amps = [], []
        t, h = _refine_peak(x, k)
        times.append(t)
        amps.append(h)
        while True:
            T = period_at(k)
            lo = k + int(np.floor((1.0 - config.search_slack) * T))
            hi = k + int(np.ceil((1.0 + config.search_slack) * T)) + 1
            if hi > seg_hi:
                break
            k = lo + int(np.argmax(x[lo:hi]))
            t, h = _refine_peak(x, k)
            times.append(t)
            amps.append(h)
        times = np.asarray(times)
        amps = np.asarray(amps)
        keep = (times >= seg_lo + trim) & (times <= seg_hi - trim)
        out.append((times[keep], amps[keep]))
    return out


def _local_perturbation(series: list[np.ndarray]) -> float:
    diffs = [np.abs(np.diff(s)) for s in series if len(s) >= 2]
    values = [s for s in series if len(s) >= 2]
    if not diffs:
        return 0.0
    mean_diff = np.concatenate(diffs).mean()
    mean_val = np.concatenate(values).mean()
    return float(mean_diff / mean_val) if mean_val > 0 else 0.0


def extract_features(waveform: Waveform, config: AnalysisConfig = AnalysisConfig()) -> FeatureVector:
    """Compute pitch mean/std, RMS level, jitter and shimmer of an utterance."""
    if waveform.duration < config.min_duration_s:
        raise TooShort(f"{waveform.duration * 1000:.1f} ms < {config.min_duration_s * 1000:.0f} ms")
    f0, _, centers = pitch_track(waveform, config)
    voiced = np.isfinite(f0)
    if voiced.sum() < config.min_voiced_frames:
        raise NoVoicedFrames(f"{int(voiced.sum())} voiced frames (need {config.min_voiced_frames})")

    marks = period_marks(waveform, f0, centers, config)
    periods = [np.diff(t) for t, _ in marks if len(t) >= 2]
    amps = [a for _, a in marks]

    rms = np.sqrt(np.mean(waveform.samples ** 2))
    return FeatureVector(
        pitch_mean=float(np.mean(f0[voiced])),
        pitch_std=float(np.std(f0[voiced])),
        level_db=float(20.0 * np.log10(rms)),
        jitter_ratio=_local_perturbation(periods),
        shimmer_ratio=_local_perturbation(amps),
    )


def feature_csv_row(path, features: FeatureVector) -> list:
    return [str(path), repr(features.pitch_mean), repr(features.pitch_std), repr(features.level_db),
            repr(features.jitter_ratio), repr(features.shimmer_ratio)]


def write_feature_csv(rows: list[tuple[str, FeatureVector]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FEATURE_CSV_HEADER)
        for p, fv in rows:
            w.writerow(feature_csv_row(p, fv))


def format_feature_row(path, features: FeatureVector, header: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(FEATURE_CSV_HEADER)
    w.writerow(feature_csv_row(path, features))
    return buf.getvalue()

