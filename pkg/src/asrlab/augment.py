"""Data augmentation: pitch shift, speed change, VTLP warping, SpecAugment.

All operations are deterministic given their seeded generator; parallel use
over utterances is safe when each utterance derives its own stream via
``derive_rng``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .signal import (
    ComplexSpectrogram,
    FeatureMatrix,
    Waveform,
    _sinc_resample,
    istft,
    log_mel,
    stft,
)

PV_FRAME_LEN = 1024
PV_HOP = 256
VTLP_FRAME_LEN = 512
VTLP_HOP = 128

METHODS = ("pp", "sp", "vtlp", "sa", "sa+pp", "sa+sp", "sa+vtlp", "none")

SP_RATES = (0.9, 1.1)
VTLP_ALPHAS = (0.9, 1.1)


@dataclass(frozen=True)
class PitchPerturbConfig:
    """Shift by n_semitones/12 octave; sign is the direction."""

    n_semitones: int

    def __post_init__(self):
        if abs(self.n_semitones) > 12:
            raise ValueError(f"|n_semitones| must be <= 12, got {self.n_semitones}")


@dataclass(frozen=True)
class SpeedPerturbConfig:
    rate: float = 1.0

    def __post_init__(self):
        if not 0.5 <= self.rate <= 2.0:
            raise ValueError(f"rate must be in [0.5, 2.0], got {self.rate}")


@dataclass(frozen=True)
class VtlpConfig:
    alpha: float = 1.0
    f_boundary: float = 6400.0  # 0.8 * Nyquist at 16 kHz

    def __post_init__(self):
        if not 0.8 <= self.alpha <= 1.2:
            raise ValueError(f"alpha must be in [0.8, 1.2], got {self.alpha}")
        if self.f_boundary <= 0:
            raise ValueError(f"f_boundary must be positive, got {self.f_boundary}")


@dataclass(frozen=True)
class SpecAugmentConfig:
    """Mask widths are drawn uniformly; mask_value None means the feature mean.

    Defaults fit the 16-mel toy frontend; at 80 mels use max_freq_width=27.
    """

    n_freq_masks: int = 2
    max_freq_width: int = 4
    n_time_masks: int = 2
    max_time_fraction: float = 0.05
    mask_value: float | None = None

    def __post_init__(self):
        if not 0 < self.max_time_fraction <= 0.5:
            raise ValueError(
                f"max_time_fraction must be in (0, 0.5], got {self.max_time_fraction}")
        if self.max_freq_width < 0 or self.n_freq_masks < 0 or self.n_time_masks < 0:
            raise ValueError("mask counts and widths must be >= 0")


@dataclass(frozen=True)
class AugmentPolicy:
    method: str = "none"
    copies: int = 2
    seed: int = 0
    spec_augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown augmentation method {self.method!r}; "
                              f"expected one of {METHODS}")
        if self.copies < 0:
            raise ValueError(f"copies must be >= 0, got {self.copies}")


def derive_rng(seed: int, utt_id: str) -> np.random.Generator:
    """Per-utterance stream so parallel order never changes results."""
    return np.random.default_rng((seed ^ zlib.crc32(utt_id.encode())) & 0xFFFFFFFF)


def _fix_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - len(x))])


def _pv_time_stretch(x: np.ndarray, sample_rate: int, stretch: float,
                     frame_len: int = PV_FRAME_LEN, hop: int = PV_HOP) -> np.ndarray:
    """Phase-vocoder time stretch; output duration ~ stretch * input duration."""
    padded = np.concatenate([x, np.zeros(frame_len)])
    if len(padded) < frame_len + hop:
        padded = np.concatenate([padded, np.zeros(frame_len + hop - len(padded))])
    spec = stft(Waveform(padded, sample_rate), frame_len, hop)
    mag = np.abs(spec.frames)
    ph = np.angle(spec.frames)
    n_frames, n_bins = mag.shape
    omega = 2.0 * np.pi * np.arange(n_bins) * hop / frame_len
    mag_pad = np.vstack([mag, np.zeros((1, n_bins))])
    ph_pad = np.vstack([ph, ph[-1:]])
    steps = np.arange(0, n_frames, 1.0 / stretch)
    out = np.empty((len(steps), n_bins), dtype=complex)
    phase = ph[0].copy()
    for j, t in enumerate(steps):
        i = int(t)
        a = t - i
        m = (1.0 - a) * mag_pad[i] + a * mag_pad[i + 1]
        out[j] = m * np.exp(1j * phase)
        dph = ph_pad[i + 1] - ph_pad[i] - omega
        dph -= 2.0 * np.pi * np.round(dph / (2.0 * np.pi))
        phase = phase + omega + dph
    return istft(ComplexSpectrogram(out, frame_len, hop, "hann", sample_rate)).samples


def pitch_perturb(wave: Waveform, cfg: PitchPerturbConfig) -> Waveform:
    """Scale F0 by 2^(n/12) at constant duration.

    Phase-vocoder stretch by the shift factor, then resample back to the
    original duration so the pitch moves and the length stays put.
    """
    if len(wave.samples) == 0:
        raise ValueError("waveform is empty")
    if cfg.n_semitones == 0:
        return Waveform(wave.samples.copy(), wave.sample_rate)
    factor = 2.0 ** (cfg.n_semitones / 12.0)
    stretched = _pv_time_stretch(wave.samples, wave.sample_rate, factor)
    shifted = _sinc_resample(stretched, wave.sample_rate, wave.sample_rate / factor)
    return Waveform(_fix_length(shifted, len(wave.samples)), wave.sample_rate)


def sample_pitch_shifts(rng: np.random.Generator) -> tuple[PitchPerturbConfig, PitchPerturbConfig]:
    """Two draws: magnitude uniform in 1..12, then an independent fair-coin sign."""
    out = []
    for _ in range(2):
        mag = int(rng.integers(1, 13))
        sign = 1 if rng.integers(0, 2) == 1 else -1
        out.append(PitchPerturbConfig(sign * mag))
    return out[0], out[1]


def speed_perturb(wave: Waveform, cfg: SpeedPerturbConfig) -> Waveform:
    """Resample-based speed change: length round(len/rate), pitch scales with rate."""
    if len(wave.samples) == 0:
        raise ValueError("waveform is empty")
    if cfg.rate == 1.0:
        return Waveform(wave.samples.copy(), wave.sample_rate)
    out = _sinc_resample(wave.samples, wave.sample_rate, wave.sample_rate / cfg.rate)
    return Waveform(out, wave.sample_rate)


def vtlp(wave: Waveform, cfg: VtlpConfig, frame_len: int = VTLP_FRAME_LEN,
         hop: int = VTLP_HOP) -> Waveform:
    """Piecewise-linear frequency warp of the STFT magnitude.

    Slope alpha below f_boundary, then a linear segment pinned to Nyquist.
    Magnitudes are resampled along frequency with a Jacobian factor that
    keeps spectral energy, and phases are carried from the source bin.
    """
    nyq = wave.sample_rate / 2.0
    if not cfg.f_boundary < nyq:
        raise ValueError(f"f_boundary {cfg.f_boundary} must be below Nyquist {nyq}")
    knee = cfg.alpha * cfg.f_boundary
    if not knee < nyq:
        raise ValueError(f"alpha*f_boundary {knee} must be below Nyquist {nyq}")
    x = np.concatenate([np.zeros(frame_len), wave.samples, np.zeros(frame_len)])
    spec = stft(Waveform(x, wave.sample_rate), frame_len, hop)
    n_bins = spec.fft_bins
    bin_hz = np.arange(n_bins) * wave.sample_rate / frame_len
    # inverse warp: where does each output frequency read from?
    inv_slope_hi = (nyq - cfg.f_boundary) / (nyq - knee)
    src_hz = np.where(bin_hz <= knee,
                      bin_hz / cfg.alpha,
                      cfg.f_boundary + (bin_hz - knee) * inv_slope_hi)
    jac = np.where(bin_hz <= knee, 1.0 / cfg.alpha, inv_slope_hi)
    pos = src_hz * frame_len / wave.sample_rate
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_bins - 1)
    hi = np.clip(lo + 1, 0, n_bins - 1)
    w = pos - lo
    mag = np.abs(spec.frames)
    ph = np.angle(spec.frames)
    warped_mag = ((1.0 - w) * mag[:, lo] + w * mag[:, hi]) * np.sqrt(jac)
    warped_ph = ph[:, np.clip(np.round(pos).astype(np.int64), 0, n_bins - 1)]
    frames = warped_mag * np.exp(1j * warped_ph)
    y = istft(ComplexSpectrogram(frames, frame_len, hop, "hann",
                                 wave.sample_rate)).samples
    y = y[frame_len:frame_len + len(wave.samples)]
    # carried phases do not overlap-add coherently, so restore the input level
    e_in = np.sum(wave.samples ** 2)
    e_out = np.sum(y ** 2)
    if e_in > 0 and e_out > 0:
        y = y * np.sqrt(e_in / e_out)
    return Waveform(y, wave.sample_rate)


def spec_augment(feat: FeatureMatrix, cfg: SpecAugmentConfig,
                 rng: np.random.Generator) -> FeatureMatrix:
    """Mask random frequency bands and time stripes.

    Draw order, per mask: width, then start offset. Frequency masks are drawn
    before time masks. Cells outside the stripes are bit-identical to the input.
    """
    values = feat.values
    if values.size == 0:
        raise ValueError("feature matrix is empty")
    n_frames, n_mels = values.shape
    out = values.copy()
    fill = float(values.mean()) if cfg.mask_value is None else cfg.mask_value
    for _ in range(cfg.n_freq_masks):
        width = int(rng.integers(0, min(cfg.max_freq_width, n_mels) + 1))
        start = int(rng.integers(0, n_mels - width + 1))
        out[:, start:start + width] = fill
    max_t = int(cfg.max_time_fraction * n_frames)
    for _ in range(cfg.n_time_masks):
        width = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        out[start:start + width, :] = fill
    return FeatureMatrix(out, feat.frame_shift_s)


def default_feature_fn(wave: Waveform, n_mels: int = 16) -> FeatureMatrix:
    return log_mel(stft(wave), n_mels=n_mels)


def augment_plan(policy: AugmentPolicy, rng: np.random.Generator):
    """Waveform-level recipe for each copy: list of (kind, params dict).

    PP magnitudes/signs are drawn from ``rng`` here, so the plan itself is the
    provenance record for the copies.
    """
    base = policy.method.removeprefix("sa+")
    plan = []
    if base == "pp":
        shifts = []
        while len(shifts) < policy.copies:
            pair = sample_pitch_shifts(rng)
            shifts.extend(pair)
        for cfg in shifts[:policy.copies]:
            plan.append(("pp", {"n_semitones": cfg.n_semitones}))
    elif base == "sp":
        for i in range(policy.copies):
            plan.append(("sp", {"rate": SP_RATES[i % len(SP_RATES)]}))
    elif base == "vtlp":
        for i in range(policy.copies):
            plan.append(("vtlp", {"alpha": VTLP_ALPHAS[i % len(VTLP_ALPHAS)]}))
    elif base in ("sa", "none"):
        plan = [("none", {})] * policy.copies
    return plan


def _apply_wave_step(wave: Waveform, kind: str, params: dict) -> Waveform:
    if kind == "pp":
        return pitch_perturb(wave, PitchPerturbConfig(**params))
    if kind == "sp":
        return speed_perturb(wave, SpeedPerturbConfig(**params))
    if kind == "vtlp":
        return vtlp(wave, VtlpConfig(**params))
    return Waveform(wave.samples.copy(), wave.sample_rate)


def make_augmented_copies(wave: Waveform, policy: AugmentPolicy,
                          rng: np.random.Generator, feature_fn=None,
                          include_original: bool = False):
    """Build the policy's augmented variants of one utterance.

    Returns ``policy.copies`` items, Waveforms for waveform-level methods and
    FeatureMatrix for the sa* methods. With ``include_original`` the untouched
    original (featurized for sa*) is prepended, giving the copies-plus-original
    set used for training.
    """
    if policy.method not in METHODS:
        raise ConfigError(f"unknown augmentation method {policy.method!r}")
    uses_sa = policy.method.startswith("sa")
    if feature_fn is None:
        feature_fn = default_feature_fn
    plan = augment_plan(policy, rng)
    out = []
    if include_original:
        original = Waveform(wave.samples.copy(), wave.sample_rate)
        out.append(feature_fn(original) if uses_sa else original)
    for kind, params in plan:
        item = _apply_wave_step(wave, kind, params)
        if uses_sa:
            item = spec_augment(feature_fn(item), policy.spec_augment, rng)
        out.append(item)
    return out
