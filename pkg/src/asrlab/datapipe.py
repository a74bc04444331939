"""Manifests, quality filtering, speaker-disjoint splits, vocabulary, batching,
and a deterministic synthetic "spoken digit string" corpus generator.

Manifest format: one JSON object per line with fields id, audio, text,
speaker, duration_s, optional prefilter_wer, optional provenance. Relative
audio paths are resolved against the manifest's directory on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError, SplitError, VocabularyError
from .signal import SAMPLE_RATE, Waveform, save_wav

DIGIT_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven",
               "eight", "nine")
RESERVED = ("<blank>", "<bos>", "<eos>", "<unk>")


def normalize_text(text: str) -> str:
    """Lowercase and collapse runs of whitespace."""
    return " ".join(text.lower().split())


@dataclass
class ManifestEntry:
    id: str
    audio: str
    text: str
    speaker: str
    duration_s: float
    prefilter_wer: float | None = None
    provenance: dict | None = None

    def to_dict(self) -> dict:
        out = {"id": self.id, "audio": self.audio, "text": self.text,
               "speaker": self.speaker, "duration_s": self.duration_s}
        if self.prefilter_wer is not None:
            out["prefilter_wer"] = self.prefilter_wer
        if self.provenance is not None:
            out["provenance"] = self.provenance
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        missing = [k for k in ("id", "audio", "text", "speaker", "duration_s")
                   if k not in d]
        if missing:
            raise ValueError(f"missing fields: {', '.join(missing)}")
        entry = cls(id=str(d["id"]), audio=str(d["audio"]), text=str(d["text"]),
                    speaker=str(d["speaker"]), duration_s=float(d["duration_s"]),
                    prefilter_wer=None if d.get("prefilter_wer") is None
                    else float(d["prefilter_wer"]),
                    provenance=d.get("provenance"))
        if entry.duration_s <= 0:
            raise ValueError(f"duration_s must be positive, got {entry.duration_s}")
        if not normalize_text(entry.text):
            raise ValueError("text is empty after normalization")
        if not entry.id:
            raise ValueError("id is empty")
        return entry


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = ManifestEntry.from_dict(json.loads(line))
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if entry.id in seen:
                raise IntegrityError(f"{path}:{lineno}: duplicate id {entry.id!r}")
            seen.add(entry.id)
            if not Path(entry.audio).is_absolute():
                entry.audio = str(path.parent / entry.audio)
            entries.append(entry)
    return entries


def write_manifest(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class FilterPolicy:
    max_wer: float = 0.5
    min_words: int = 3
    max_duration_s: float = 30.0

    def __post_init__(self):
        if min(self.max_wer, self.min_words, self.max_duration_s) <= 0:
            raise ValueError("all filter thresholds must be positive")


@dataclass
class Removal:
    entry: ManifestEntry
    reasons: tuple


def filter_entries(entries, policy: FilterPolicy = FilterPolicy()):
    """Partition entries into (kept, removed-with-reasons).

    An entry goes when its prefilter WER exceeds max_wer (entries without the
    statistic are exempt from that rule), when it has fewer than min_words
    words, or when it runs longer than max_duration_s.
    """
    kept, removed = [], []
    for entry in entries:
        reasons = []
        if entry.prefilter_wer is not None and entry.prefilter_wer > policy.max_wer:
            reasons.append("wer")
        if len(normalize_text(entry.text).split()) < policy.min_words:
            reasons.append("min_words")
        if entry.duration_s > policy.max_duration_s:
            reasons.append("max_duration")
        if reasons:
            removed.append(Removal(entry, tuple(reasons)))
        else:
            kept.append(entry)
    return kept, removed


@dataclass(frozen=True)
class SplitPolicy:
    fractions: tuple = (0.70, 0.15, 0.15)
    seed: int = 0
    unit: str = "speaker"

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {self.fractions}")
        if len(self.fractions) != 3:
            raise ValueError("expected (train, dev, test) fractions")


SPLIT_NAMES = ("train", "dev", "test")


def split_by_speaker(entries, policy: SplitPolicy = SplitPolicy()):
    """Speaker-disjoint split targeting utterance-count fractions.

    Speakers are shuffled by the seed and assigned greedily to the split with
    the largest remaining deficit. Returns ({split: entries}, {speaker: split}).
    """
    speakers = sorted({e.speaker for e in entries})
    if len(speakers) < 3:
        raise SplitError(f"need >= 3 distinct speakers, got {len(speakers)}")
    counts = {s: 0 for s in speakers}
    for e in entries:
        counts[e.speaker] += 1
    total = len(entries)
    rng = np.random.default_rng(policy.seed)
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    targets = np.array([f * total for f in policy.fractions])
    assigned = np.zeros(3)
    speaker_split = {}
    for spk in order:
        deficit = targets - assigned
        pick = int(np.argmax(deficit))
        speaker_split[spk] = SPLIT_NAMES[pick]
        assigned[pick] += counts[spk]
    splits = {name: [] for name in SPLIT_NAMES}
    for e in entries:
        splits[speaker_split[e.speaker]].append(e)
    return splits, speaker_split


@dataclass(frozen=True)
class Vocabulary:
    """Reserved ids first (blank, bos, eos, unk), then sorted characters."""

    symbols: tuple

    blank = 0
    bos = 1
    eos = 2
    unk = 3

    @property
    def size(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        index = {s: i for i, s in enumerate(self.symbols)}
        out = []
        for ch in normalize_text(text):
            if ch not in index:
                raise VocabularyError(f"character {ch!r} not in vocabulary")
            out.append(index[ch])
        return out

    def decode(self, ids) -> str:
        chars = []
        for i in ids:
            if 0 <= i < len(self.symbols) and i >= len(RESERVED):
                chars.append(self.symbols[i])
        return "".join(chars)


def build_char_vocab(transcripts) -> Vocabulary:
    chars = set()
    for text in transcripts:
        chars.update(normalize_text(text))
    return Vocabulary(tuple(RESERVED) + tuple(sorted(chars)))


@dataclass
class Batch:
    ids: list
    features: np.ndarray  # (batch, max_frames, n_mels)
    masks: np.ndarray  # (batch, max_frames) bool
    targets: list  # token id lists


def make_batches(entries, batch_size: int, feature_fn, vocab: Vocabulary,
                 seed: int = 0) -> list[Batch]:
    """Shuffle entries by seed, featurize, pad to batch max with masks.

    ``feature_fn`` maps a ManifestEntry to a (frames, n_mels) array or a
    FeatureMatrix. Encoding failures name the character and the utterance.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    entries = list(entries)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(entries))
    batches = []
    for ofs in range(0, len(entries), batch_size):
        chunk = [entries[i] for i in order[ofs:ofs + batch_size]]
        feats = []
        targets = []
        for e in chunk:
            f = feature_fn(e)
            feats.append(f.values if hasattr(f, "values") else np.asarray(f))
            try:
                targets.append(vocab.encode(e.text))
            except VocabularyError as exc:
                raise VocabularyError(f"{exc} (utterance {e.id!r})") from exc
        max_t = max(f.shape[0] for f in feats)
        n_mels = feats[0].shape[1]
        arr = np.zeros((len(chunk), max_t, n_mels))
        mask = np.zeros((len(chunk), max_t), dtype=bool)
        for i, f in enumerate(feats):
            arr[i, :f.shape[0]] = f
            mask[i, :f.shape[0]] = True
        batches.append(Batch([e.id for e in chunk], arr, mask, targets))
    return batches


_DIGIT_F1 = (400.0, 700.0, 1100.0, 1700.0, 2500.0)
_DIGIT_F2 = (3200.0, 5000.0)


def digit_tone_frequencies(digit: int) -> tuple[float, float]:
    """Each digit owns a distinct low/high pair from a 5 x 2 frequency grid.

    Grid points sit more than one 16-band mel filter apart, so digits stay
    separable after the log-mel frontend even with speaker offsets.
    """
    return _DIGIT_F1[digit % 5], _DIGIT_F2[digit // 5]


def speaker_base_multiplier(speaker_index: int) -> float:
    return 1.0 + 0.015 * ((speaker_index % 5) - 2)


def synth_digit_utterance(digits, speaker_mult: float = 1.0,
                          rate: int = SAMPLE_RATE, tone_s: float = 0.24,
                          gap_s: float = 0.06, lead_s: float = 0.05,
                          min_duration_s: float = 1.0, noise_amp: float = 0.004,
                          noise_seed: int = 0):
    """Render a digit string as tone pairs; returns (Waveform, segments).

    ``segments`` holds the (start, stop) sample range of each digit tone,
    which the matched-filter tests use to window individual digits. A faint
    deterministic noise floor keeps the off-tone log-mel channels at a stable
    level instead of the log floor.
    """
    tone_n = int(tone_s * rate)
    gap_n = int(gap_s * rate)
    lead_n = int(lead_s * rate)
    ramp_n = int(0.01 * rate)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp_n) / ramp_n)
    chunks = [np.zeros(lead_n)]
    segments = []
    pos = lead_n
    t = np.arange(tone_n) / rate
    for d in digits:
        f1, f2 = digit_tone_frequencies(int(d))
        tone = 0.35 * (np.sin(2 * np.pi * f1 * speaker_mult * t)
                       + np.sin(2 * np.pi * f2 * speaker_mult * t)) / 2
        tone[:ramp_n] *= ramp
        tone[-ramp_n:] *= ramp[::-1]
        chunks.append(tone)
        segments.append((pos, pos + tone_n))
        pos += tone_n
        chunks.append(np.zeros(gap_n))
        pos += gap_n
    samples = np.concatenate(chunks)
    min_n = int(min_duration_s * rate)
    if len(samples) < min_n:
        samples = np.concatenate([samples, np.zeros(min_n - len(samples))])
    if noise_amp:
        noise = np.random.default_rng(noise_seed).normal(0.0, noise_amp,
                                                         len(samples))
        samples = np.clip(samples + noise, -1.0, 1.0)
    return Waveform(samples, rate), segments


def synth_corpus(seed: int, n_utts: int, n_speakers: int, out_dir,
                 min_digits: int = 3, max_digits: int = 8) -> list[ManifestEntry]:
    """Write a deterministic digit-string corpus: WAVs plus manifest.jsonl.

    Every entry passes the default FilterPolicy: at least three words, clips
    of a few seconds, and prefilter WER drawn below the removal threshold.
    """
    if not n_utts >= n_speakers >= 1:
        raise ValueError(f"need n_utts >= n_speakers >= 1, got {n_utts}, {n_speakers}")
    if not 3 <= min_digits <= max_digits:
        raise ValueError("need 3 <= min_digits <= max_digits")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_utts):
        spk = i % n_speakers if i < n_speakers else int(rng.integers(0, n_speakers))
        n_digits = int(rng.integers(min_digits, max_digits + 1))
        digits = [int(d) for d in rng.integers(0, 10, n_digits)]
        wave, _ = synth_digit_utterance(digits, speaker_base_multiplier(spk),
                                        noise_seed=seed * 100003 + i)
        rel = f"wav/utt{i:04d}.wav"
        save_wav(wave, out_dir / rel)
        entries.append(ManifestEntry(
            id=f"utt{i:04d}",
            audio=str(out_dir / rel),
            text=" ".join(DIGIT_WORDS[d] for d in digits),
            speaker=f"spk{spk:02d}",
            duration_s=wave.duration_s,
            prefilter_wer=round(float(rng.uniform(0.0, 0.4)), 3),
        ))
    manifest = [ManifestEntry(e.id, f"wav/utt{i:04d}.wav", e.text, e.speaker,
                              e.duration_s, e.prefilter_wer)
                for i, e in enumerate(entries)]
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return entries
