import numpy as np
import pytest

from asrlab.signal import SAMPLE_RATE, Waveform


def make_tone(freq, duration_s=1.0, rate=SAMPLE_RATE, amp=0.5, phase=0.0):
    t = np.arange(int(round(duration_s * rate))) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), rate)


def make_noise(duration_s=1.0, rate=SAMPLE_RATE, amp=0.3, seed=0):
    rng = np.random.default_rng(seed)
    return Waveform(amp * rng.uniform(-1, 1, int(round(duration_s * rate))), rate)


@pytest.fixture
def tone440():
    return make_tone(440.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
