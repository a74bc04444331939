"""Waveform I/O, resampling, STFT/ISTFT, log-mel features and pitch analysis.

Everything here is a pure function of its inputs; no shared mutable state,
so concurrent use over different utterances is safe.
"""

from __future__ import annotations

import contextlib
import wave as _wavelib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptySpectrogramError, FormatError, NoPitchError

SAMPLE_RATE = 16_000
FRAME_LEN = 400  # 25 ms at 16 kHz
HOP = 160  # 10 ms at 16 kHz
LOG_FLOOR = 1e-10
_RESAMPLE_TAPS = 32


@dataclass(frozen=True)
class Waveform:
    """Mono PCM samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", arr)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if arr.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {arr.shape}")
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError("samples contain non-finite values")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Complex STFT frames, time major: frames[t, k]."""

    frames: np.ndarray
    frame_len: int
    hop: int
    window: str
    sample_rate: int

    @property
    def fft_bins(self) -> int:
        return self.frame_len // 2 + 1


@dataclass(frozen=True)
class FeatureMatrix:
    """Log mel-filterbank energies, time x n_mels."""

    values: np.ndarray
    frame_shift_s: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def load_wav(path) -> Waveform:
    """Read a 16-bit PCM mono RIFF WAV file, scaling samples by 1/32768."""
    try:
        with contextlib.closing(_wavelib.open(str(path), "rb")) as wf:
            if wf.getcomptype() != "NONE":
                raise FormatError(f"compressed WAV not supported: {wf.getcomptype()}")
            if wf.getnchannels() != 1:
                raise FormatError(f"expected mono WAV, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise FormatError(f"expected 16-bit samples, got {8 * wf.getsampwidth()}-bit")
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except _wavelib.Error as exc:
        raise FormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise OSError(f"{path}: truncated WAV header") from exc
    if len(raw) < 2 * n:
        raise OSError(f"{path}: truncated WAV payload ({len(raw)} of {2 * n} bytes)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def save_wav(wave: Waveform, path) -> None:
    """Write 16-bit PCM mono; values outside [-1, 1] saturate."""
    q = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    with contextlib.closing(_wavelib.open(str(path), "wb")) as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(wave.sample_rate)
        wf.writeframes(q.tobytes())


def _sinc_kernel_lobe(u):
    # raised-cosine taper on [-1, 1], zero outside
    w = 0.5 + 0.5 * np.cos(np.pi * np.clip(u, -1.0, 1.0))
    return np.where(np.abs(u) <= 1.0, w, 0.0)


def _sinc_resample(x: np.ndarray, src_rate: float, dst_rate: float) -> np.ndarray:
    """Band-limited resampling with a windowed-sinc kernel (_RESAMPLE_TAPS taps)."""
    ratio = dst_rate / src_rate
    n_out = int(round(len(x) * ratio))
    if n_out == 0 or len(x) == 0:
        return np.zeros(0)
    half = _RESAMPLE_TAPS // 2
    cutoff = min(1.0, ratio)  # anti-alias when downsampling
    pos = np.arange(n_out) / ratio
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    offs = np.arange(1 - half, half + 1)
    dist = offs[None, :] - frac[:, None]
    kern = cutoff * np.sinc(cutoff * dist) * _sinc_kernel_lobe(dist / half)
    idx = base[:, None] + offs[None, :]
    valid = (idx >= 0) & (idx < len(x))
    taps = np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)
    return np.einsum("ij,ij->i", taps, kern)


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Resample to target_rate; output length is round(len * target/source)."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == wave.sample_rate:
        return Waveform(wave.samples.copy(), wave.sample_rate)
    return Waveform(_sinc_resample(wave.samples, wave.sample_rate, target_rate), target_rate)


def get_window(name: str, frame_len: int) -> np.ndarray:
    if name == "hann":
        # periodic Hann, COLA at hop = frame_len / 2k
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len)
    if name == "rect":
        return np.ones(frame_len)
    raise ValueError(f"unknown window {name!r}")


def stft(wave: Waveform, frame_len: int = FRAME_LEN, hop: int = HOP,
         window: str = "hann") -> ComplexSpectrogram:
    """Windowed FFT of non-padded frames.

    Frame count is 1 + floor((len - frame_len) / hop); fft_bins = frame_len/2 + 1.
    """
    if not 0 < hop <= frame_len:
        raise ValueError(f"need 0 < hop <= frame_len, got hop={hop} frame_len={frame_len}")
    if frame_len % 2:
        raise ValueError(f"frame_len must be even, got {frame_len}")
    x = wave.samples
    if len(x) < frame_len:
        raise EmptySpectrogramError(
            f"waveform of {len(x)} samples is shorter than one {frame_len}-sample frame")
    n_frames = 1 + (len(x) - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * get_window(window, frame_len)
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1), frame_len, hop, window,
                              wave.sample_rate)


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Overlap-add synthesis with window-sum normalization."""
    win = get_window(spec.window, spec.frame_len)
    frames = np.fft.irfft(spec.frames, n=spec.frame_len, axis=1)
    n_frames = frames.shape[0]
    n = (n_frames - 1) * spec.hop + spec.frame_len
    num = np.zeros(n)
    den = np.zeros(n)
    for t in range(n_frames):
        o = t * spec.hop
        num[o:o + spec.frame_len] += frames[t] * win
        den[o:o + spec.frame_len] += win * win
    interior = den[spec.frame_len:n - spec.frame_len] if n > 2 * spec.frame_len else den
    if interior.size and interior.min() < 1e-8 * (win * win).max():
        raise ConfigError(
            f"window {spec.window!r} with hop {spec.hop} does not satisfy overlap-add")
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 1e-12)
    return Waveform(out, spec.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    mels = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def mel_filterbank(n_mels: int, frame_len: int, sample_rate: int,
                   f_min: float, f_max: float) -> np.ndarray:
    """Triangular filters with unit peak, shape (fft_bins, n_mels)."""
    if n_mels < 2:
        raise ValueError(f"n_mels must be >= 2, got {n_mels}")
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ValueError(f"need 0 <= f_min < f_max <= Nyquist, got {f_min}, {f_max}")
    mels = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    edges = mel_to_hz(mels)
    bin_hz = np.arange(frame_len // 2 + 1) * sample_rate / frame_len
    fb = np.zeros((len(bin_hz), n_mels))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / (center - lo)
        down = (hi - bin_hz) / (hi - center)
        fb[:, m] = np.clip(np.minimum(up, down), 0.0, 1.0)
    return fb


def log_mel(spec: ComplexSpectrogram, n_mels: int, f_min: float = 0.0,
            f_max: float | None = None) -> FeatureMatrix:
    """Mel filterbank over the power spectrum, natural log, floor LOG_FLOOR."""
    if f_max is None:
        f_max = spec.sample_rate / 2
    fb = mel_filterbank(n_mels, spec.frame_len, spec.sample_rate, f_min, f_max)
    power = np.abs(spec.frames) ** 2
    feats = np.log(np.maximum(power @ fb, LOG_FLOOR))
    return FeatureMatrix(feats, spec.hop / spec.sample_rate)


def estimate_f0(wave: Waveform, f_lo: float = 80.0, f_hi: float = 600.0) -> float:
    """Autocorrelation-peak F0 estimate in [f_lo, f_hi].

    Uses the biased autocorrelation so the fundamental beats its multiples,
    with parabolic refinement of the peak lag. Raises NoPitchError when the
    normalized peak is too weak (noise, silence, DC).
    """
    if not 0 < f_lo < f_hi:
        raise ValueError(f"need 0 < f_lo < f_hi, got {f_lo}, {f_hi}")
    x = wave.samples - wave.samples.mean() if len(wave.samples) else wave.samples
    sr = wave.sample_rate
    if len(x) < 3 * sr / f_lo:
        raise ValueError(f"waveform too short: need >= 3 periods of {f_lo} Hz")
    nfft = 1 << int(np.ceil(np.log2(2 * len(x))))
    spectrum = np.fft.rfft(x, nfft)
    r = np.fft.irfft(spectrum * np.conj(spectrum))[:len(x)]
    if r[0] <= 0:
        raise NoPitchError("signal has no energy after mean removal")
    lag_min = max(2, int(np.floor(sr / f_hi)))
    lag_max = min(len(x) - 2, int(np.ceil(sr / f_lo)))
    seg = r[lag_min:lag_max + 1]
    peak = lag_min + int(np.argmax(seg))
    if r[peak] / r[0] < 0.3:
        raise NoPitchError(f"no periodic peak in [{f_lo}, {f_hi}] Hz")
    # parabolic refinement around the integer-lag peak
    lag = float(peak)
    if lag_min < peak < lag_max:
        a, b, c = r[peak - 1], r[peak], r[peak + 1]
        denom = a - 2 * b + c
        if denom < 0:
            lag += 0.5 * (a - c) / denom
    return float(np.clip(sr / lag, f_lo, f_hi))
