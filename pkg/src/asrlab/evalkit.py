"""Greedy decoding, Levenshtein word error rate, and benchmark tables.

Scoring normalizes text the same way the data pipeline does (lowercase,
collapsed whitespace) and pools error counts for corpus-level WER.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .datapipe import Vocabulary, normalize_text
from .errors import ModeError
from .model import Model, decode_teacher_forced, encode


def greedy_ctc_decode(log_probs, vocab: Vocabulary) -> str:
    """Frame argmax, collapse adjacent repeats, drop blanks, map to text."""
    arr = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    ids = arr.argmax(axis=-1)
    out = []
    prev = None
    for i in ids:
        if i != prev and i != vocab.blank:
            out.append(int(i))
        prev = i
    return vocab.decode(out)


@dataclass(frozen=True)
class GreedyDecodeResult:
    text: str
    truncated: bool
    token_ids: tuple


def greedy_ar_decode(model: Model, feat, vocab: Vocabulary,
                     max_len: int | None = None, pad_mask=None) -> GreedyDecodeResult:
    """Iterative argmax from bos until eos; truncation is flagged, not fatal."""
    if model.config.mode != "enc_dec":
        raise ModeError(f"autoregressive decode requires enc_dec mode, model is "
                        f"{model.config.mode!r}")
    if max_len is None:
        n_prompts = (model.peft.prompts_dec
                     if model.peft is not None and model.peft.method == "prompt"
                     else 0)
        max_len = model.config.max_len - n_prompts - 1
    enc = encode(model, feat, pad_mask)
    prefix = [vocab.bos]
    tokens = []
    truncated = True
    for _ in range(max_len):
        logits = decode_teacher_forced(model, enc, prefix)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == vocab.eos:
            truncated = False
            break
        tokens.append(nxt)
        prefix.append(nxt)
    return GreedyDecodeResult(vocab.decode(tokens), truncated, tuple(tokens))


@dataclass(frozen=True)
class WerReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words


def wer_alignment(ref_words, hyp_words):
    """Minimal edit script as (op, ref_index, hyp_index) tuples.

    Unit costs; on ties the backtrace prefers the diagonal, so a substitution
    beats an insertion-plus-deletion pair.
    """
    m, n = len(ref_words), len(hyp_words)
    dist = np.zeros((m + 1, n + 1), dtype=np.int64)
    dist[:, 0] = np.arange(m + 1)
    dist[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            same = ref_words[i - 1] == hyp_words[j - 1]
            dist[i, j] = min(dist[i - 1, j - 1] + (not same),
                             dist[i - 1, j] + 1,
                             dist[i, j - 1] + 1)
    ops = []
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = ref_words[i - 1] == hyp_words[j - 1]
            if dist[i, j] == dist[i - 1, j - 1] + (not same):
                ops.append(("match" if same else "sub", i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            ops.append(("del", i - 1, None))
            i -= 1
            continue
        ops.append(("ins", None, j - 1))
        j -= 1
    ops.reverse()
    return ops


def wer(ref: str, hyp: str) -> WerReport:
    """Word error rate from a minimal-cost alignment of normalized text."""
    ref_words = normalize_text(ref).split()
    hyp_words = normalize_text(hyp).split()
    if not ref_words:
        raise ValueError("reference is empty after normalization")
    ops = wer_alignment(ref_words, hyp_words)
    subs = sum(1 for op, _, _ in ops if op == "sub")
    dels = sum(1 for op, _, _ in ops if op == "del")
    ins = sum(1 for op, _, _ in ops if op == "ins")
    return WerReport(subs, dels, ins, len(ref_words))


@dataclass
class ResultsRow:
    system: str
    split: str
    wer: float
    trainable_params: int | None = None
    wall_time_s: float | None = None
    status: str = "ok"


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)

    def add(self, row: ResultsRow) -> None:
        if any(r.system == row.system and r.split == row.split for r in self.rows):
            raise ValueError(f"duplicate row for ({row.system}, {row.split})")
        self.rows.append(row)

    def merge(self, other: "ResultsTable") -> "ResultsTable":
        for row in other.rows:
            self.add(row)
        return self

    def sorted(self) -> "ResultsTable":
        return ResultsTable(sorted(self.rows, key=lambda r: (r.system, r.split)))

    def to_tsv(self) -> str:
        lines = ["system\tsplit\twer\tparams\twall_time_s\tstatus"]
        for r in self.rows:
            params = "" if r.trainable_params is None else str(r.trainable_params)
            wall = "" if r.wall_time_s is None else f"{r.wall_time_s:.3f}"
            lines.append(f"{r.system}\t{r.split}\t{r.wer:.6f}\t{params}\t{wall}"
                         f"\t{r.status}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = ("system", "split", "WER", "params", "time (s)", "status")
        body = []
        for r in self.rows:
            params = "-" if r.trainable_params is None else f"{r.trainable_params:,}"
            wall = "-" if r.wall_time_s is None else f"{r.wall_time_s:.1f}"
            body.append((r.system, r.split, f"{100 * r.wer:.2f}%", params, wall,
                         r.status))
        widths = [max(len(header[c]), *(len(row[c]) for row in body)) if body
                  else len(header[c]) for c in range(len(header))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*row) for row in body]
        return "\n".join(lines) + "\n"


def aggregate_report(reports, system: str, split: str,
                     trainable_params: int | None = None,
                     wall_time_s: float | None = None) -> ResultsTable:
    """Pool error counts over utterances: corpus WER = total errors / ref words."""
    reports = list(reports)
    if not reports:
        raise ValueError("no per-utterance reports to aggregate")
    errors = sum(r.errors for r in reports)
    ref_words = sum(r.ref_words for r in reports)
    table = ResultsTable()
    table.add(ResultsRow(system, split, errors / ref_words, trainable_params,
                         wall_time_s))
    return table
