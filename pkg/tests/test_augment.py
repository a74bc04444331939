import numpy as np
import pytest

from asrlab.augment import (
    SP_RATES,
    VTLP_ALPHAS,
    AugmentPolicy,
    PitchPerturbConfig,
    SpecAugmentConfig,
    SpeedPerturbConfig,
    VtlpConfig,
    augment_plan,
    derive_rng,
    make_augmented_copies,
    pitch_perturb,
    sample_pitch_shifts,
    spec_augment,
    speed_perturb,
    vtlp,
)
from asrlab.errors import ConfigError
from asrlab.signal import FeatureMatrix, Waveform, estimate_f0, log_mel, stft
from conftest import make_noise, make_tone


def stft_peak_hz(wave, frame_len=512):
    """Oracle: argmax bin of the frame-averaged power spectrum, in Hz."""
    spec = stft(wave, frame_len=frame_len, hop=frame_len // 4)
    mean_power = (np.abs(spec.frames) ** 2).mean(axis=0)
    return np.argmax(mean_power) * wave.sample_rate / frame_len


class TestPitchPerturb:
    def test_zero_shift_identity(self, tone440):
        out = pitch_perturb(tone440, PitchPerturbConfig(0))
        assert np.array_equal(out.samples, tone440.samples)

    def test_up_one_octave(self):
        w = make_tone(220.0)
        out = pitch_perturb(w, PitchPerturbConfig(12))
        f0 = estimate_f0(out)
        assert abs(f0 - 440.0) <= 0.03 * 440.0

    def test_down_one_octave(self, tone440):
        out = pitch_perturb(tone440, PitchPerturbConfig(-12))
        f0 = estimate_f0(out)
        assert abs(f0 - 220.0) <= 0.03 * 220.0

    @pytest.mark.parametrize("n", [-7, -3, 4, 9])
    def test_intermediate_shifts(self, n):
        w = make_tone(250.0)
        f0 = estimate_f0(pitch_perturb(w, PitchPerturbConfig(n)))
        target = 250.0 * 2 ** (n / 12)
        assert abs(f0 - target) <= 0.03 * target

    def test_duration_preserved(self, tone440):
        out = pitch_perturb(tone440, PitchPerturbConfig(5))
        assert len(out.samples) == len(tone440.samples)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            PitchPerturbConfig(13)
        with pytest.raises(ValueError):
            PitchPerturbConfig(-13)


class TestSamplePitchShifts:
    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = sample_pitch_shifts(rng)
            assert 1 <= abs(a.n_semitones) <= 12
            assert 1 <= abs(b.n_semitones) <= 12

    def test_fixed_seed_reproducible(self):
        a = sample_pitch_shifts(np.random.default_rng(17))
        b = sample_pitch_shifts(np.random.default_rng(17))
        assert a == b

    def test_magnitude_histogram(self):
        rng = np.random.default_rng(42)
        mags = []
        for _ in range(5000):
            a, b = sample_pitch_shifts(rng)
            mags += [abs(a.n_semitones), abs(b.n_semitones)]
        counts = np.bincount(mags, minlength=13)[1:]
        freqs = counts / len(mags)
        assert np.all(np.abs(freqs - 1 / 12) <= 0.01)

    def test_both_signs_occur(self):
        rng = np.random.default_rng(5)
        signs = {np.sign(c.n_semitones) for _ in range(100)
                 for c in sample_pitch_shifts(rng)}
        assert signs == {-1, 1}


class TestSpeedPerturb:
    def test_identity(self, tone440):
        out = speed_perturb(tone440, SpeedPerturbConfig(1.0))
        assert np.array_equal(out.samples, tone440.samples)

    def test_length_fast(self, tone440):
        out = speed_perturb(tone440, SpeedPerturbConfig(1.1))
        assert abs(len(out.samples) - 14545) <= 1

    def test_length_slow(self, tone440):
        out = speed_perturb(tone440, SpeedPerturbConfig(0.9))
        assert abs(len(out.samples) - 17778) <= 1

    @pytest.mark.parametrize("rate", [0.9, 1.1, 1.3])
    def test_round_trip_length(self, rate):
        w = make_noise(1.0, seed=11)
        there = speed_perturb(w, SpeedPerturbConfig(rate))
        back = speed_perturb(there, SpeedPerturbConfig(1.0 / rate))
        assert abs(len(back.samples) - len(w.samples)) <= 2

    def test_pitch_scales_with_rate(self, tone440):
        out = speed_perturb(tone440, SpeedPerturbConfig(1.1))
        assert abs(estimate_f0(out) - 484.0) <= 0.02 * 484.0

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            SpeedPerturbConfig(0.4)
        with pytest.raises(ValueError):
            SpeedPerturbConfig(2.5)


class TestVtlp:
    def test_identity_warp(self, tone440):
        out = vtlp(tone440, VtlpConfig(alpha=1.0))
        assert np.abs(out.samples - tone440.samples).max() < 1e-5

    def test_peak_up(self):
        w = make_tone(1000.0)
        out = vtlp(w, VtlpConfig(alpha=1.1))
        assert abs(stft_peak_hz(out) - 1100.0) <= 16000 / 512  # one analysis bin

    def test_peak_down(self):
        w = make_tone(1000.0)
        out = vtlp(w, VtlpConfig(alpha=0.9))
        assert abs(stft_peak_hz(out) - 900.0) <= 16000 / 512

    @pytest.mark.parametrize("alpha", [0.9, 1.1])
    def test_energy_preserved(self, alpha):
        w = make_tone(1000.0)
        out = vtlp(w, VtlpConfig(alpha=alpha))
        e_in = np.sum(w.samples ** 2)
        e_out = np.sum(out.samples ** 2)
        assert abs(e_out - e_in) / e_in < 0.05

    def test_duration_unchanged(self, tone440):
        out = vtlp(tone440, VtlpConfig(alpha=1.1))
        assert len(out.samples) == len(tone440.samples)

    def test_bad_alpha_rejected(self):
        with pytest.raises(ValueError):
            VtlpConfig(alpha=0.7)
        with pytest.raises(ValueError):
            VtlpConfig(alpha=1.3)


def replay_mask_region(values_shape, cfg, rng):
    """Oracle: replay the documented draw order and mark the masked cells."""
    n_frames, n_mels = values_shape
    masked = np.zeros(values_shape, dtype=bool)
    for _ in range(cfg.n_freq_masks):
        width = int(rng.integers(0, min(cfg.max_freq_width, n_mels) + 1))
        start = int(rng.integers(0, n_mels - width + 1))
        masked[:, start:start + width] = True
    max_t = int(cfg.max_time_fraction * n_frames)
    for _ in range(cfg.n_time_masks):
        width = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        masked[start:start + width, :] = True
    return masked


class TestSpecAugment:
    def make_feat(self, seed=0, n_frames=120, n_mels=16):
        rng = np.random.default_rng(seed)
        return FeatureMatrix(rng.standard_normal((n_frames, n_mels)), 0.01)

    def test_zero_masks_identity(self):
        feat = self.make_feat()
        cfg = SpecAugmentConfig(n_freq_masks=0, n_time_masks=0)
        out = spec_augment(feat, cfg, np.random.default_rng(0))
        assert np.array_equal(out.values, feat.values)

    def test_masked_region_matches_seeded_draws(self):
        feat = self.make_feat(seed=3)
        cfg = SpecAugmentConfig(n_freq_masks=2, max_freq_width=4,
                                n_time_masks=2, max_time_fraction=0.2,
                                mask_value=-7.5)
        out = spec_augment(feat, cfg, np.random.default_rng(99))
        region = replay_mask_region(feat.values.shape, cfg, np.random.default_rng(99))
        assert np.all(out.values[region] == -7.5)
        assert np.array_equal(out.values[~region], feat.values[~region])

    def test_default_mask_value_is_mean(self):
        feat = self.make_feat(seed=4)
        cfg = SpecAugmentConfig(n_freq_masks=1, max_freq_width=16,
                                n_time_masks=0)
        out = spec_augment(feat, cfg, np.random.default_rng(1))
        region = replay_mask_region(feat.values.shape, cfg, np.random.default_rng(1))
        if region.any():
            assert np.all(out.values[region] == feat.values.mean())

    def test_changed_cell_bound(self):
        feat = self.make_feat(seed=5, n_frames=200)
        cfg = SpecAugmentConfig(n_freq_masks=2, max_freq_width=4,
                                n_time_masks=2, max_time_fraction=0.05,
                                mask_value=123.0)
        out = spec_augment(feat, cfg, np.random.default_rng(7))
        changed = np.sum(out.values != feat.values)
        n_frames, n_mels = feat.values.shape
        bound = (cfg.n_freq_masks * cfg.max_freq_width * n_frames
                 + cfg.n_time_masks * cfg.max_time_fraction * n_frames * n_mels)
        assert changed <= bound

    def test_deterministic(self):
        feat = self.make_feat(seed=6)
        cfg = SpecAugmentConfig(mask_value=0.0)
        a = spec_augment(feat, cfg, np.random.default_rng(12))
        b = spec_augment(feat, cfg, np.random.default_rng(12))
        assert np.array_equal(a.values, b.values)


class TestMakeAugmentedCopies:
    def test_none_gives_identical_copies(self, tone440):
        policy = AugmentPolicy(method="none", copies=2)
        out = make_augmented_copies(tone440, policy, np.random.default_rng(0))
        assert len(out) == 2
        for item in out:
            assert np.array_equal(item.samples, tone440.samples)

    def test_sp_lengths(self, tone440):
        policy = AugmentPolicy(method="sp", copies=2)
        out = make_augmented_copies(tone440, policy, np.random.default_rng(0))
        n = len(tone440.samples)
        assert abs(len(out[0].samples) - round(n / SP_RATES[0])) <= 1
        assert abs(len(out[1].samples) - round(n / SP_RATES[1])) <= 1

    def test_pp_ratios_match_seeded_draws(self):
        w = make_tone(260.0)
        policy = AugmentPolicy(method="pp", copies=2)
        plan = augment_plan(policy, np.random.default_rng(21))
        out = make_augmented_copies(w, policy, np.random.default_rng(21))
        for (kind, params), item in zip(plan, out):
            assert kind == "pp"
            target = 260.0 * 2 ** (params["n_semitones"] / 12)
            assert abs(estimate_f0(item) - target) <= 0.03 * target

    def test_include_original(self, tone440):
        policy = AugmentPolicy(method="sp", copies=2)
        out = make_augmented_copies(tone440, policy, np.random.default_rng(0),
                                    include_original=True)
        assert len(out) == 3
        assert np.array_equal(out[0].samples, tone440.samples)

    def test_sa_returns_features(self, tone440):
        policy = AugmentPolicy(method="sa", copies=2)
        out = make_augmented_copies(tone440, policy, np.random.default_rng(0))
        assert all(isinstance(item, FeatureMatrix) for item in out)

    def test_sa_plus_sp_changes_frame_count(self, tone440):
        policy = AugmentPolicy(method="sa+sp", copies=2)
        out = make_augmented_copies(tone440, policy, np.random.default_rng(0),
                                    include_original=True)
        base_frames = out[0].n_frames
        assert out[1].n_frames > base_frames  # rate 0.9 stretches
        assert out[2].n_frames < base_frames  # rate 1.1 compresses

    def test_deterministic_given_seed(self, tone440):
        policy = AugmentPolicy(method="vtlp", copies=2)
        a = make_augmented_copies(tone440, policy, np.random.default_rng(3))
        b = make_augmented_copies(tone440, policy, np.random.default_rng(3))
        for xa, xb in zip(a, b):
            assert np.array_equal(xa.samples, xb.samples)

    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigError):
            AugmentPolicy(method="reverb")

    def test_derive_rng_stable(self):
        a = derive_rng(10, "utt1").integers(0, 1 << 30)
        b = derive_rng(10, "utt1").integers(0, 1 << 30)
        c = derive_rng(10, "utt2").integers(0, 1 << 30)
        assert a == b
        assert a != c
