"""Training objectives: CTC, sequence cross-entropy, perturbation invariance.

All losses are pure functions of their tensor inputs and return scalar graph
nodes, so they compose with autodiff.backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, constant, custom_op, log_softmax, mul, scale
from .errors import ConfigError, InfeasibleAlignmentError, ShapeError
from .model import Model, ctc_logits, decode_teacher_forced, encode

_NEG_INF = -np.inf


@dataclass(frozen=True)
class PifConfig:
    """Weight of the encoder-output distance penalty for perturbed pairs."""

    weight: float = 0.0
    distance: str = "mse_pooled"

    def __post_init__(self):
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ValueError(f"weight must be finite and >= 0, got {self.weight}")
        if self.distance != "mse_pooled":
            raise ValueError(f"unknown distance {self.distance!r}")


@dataclass
class LossBreakdown:
    task_loss: float
    pif_loss: float
    total: float
    total_node: Tensor


def _extend_targets(target, blank):
    ext = [blank]
    for t in target:
        ext.append(int(t))
        ext.append(blank)
    return np.asarray(ext, dtype=np.int64)


def _ctc_alpha_beta(lp: np.ndarray, ext: np.ndarray, allow_skip: np.ndarray):
    n_frames = lp.shape[0]
    n_states = len(ext)
    alpha = np.full((n_frames, n_states), _NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if n_states > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        step = np.full(n_states, _NEG_INF)
        step[1:] = prev[:-1]
        skip = np.full(n_states, _NEG_INF)
        skip[2:] = prev[:-2]
        skip = np.where(allow_skip, skip, _NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(prev, step), skip) + lp[t, ext]
    beta = np.full((n_frames, n_states), _NEG_INF)
    beta[-1, -1] = 0.0
    if n_states > 1:
        beta[-1, -2] = 0.0
    allow_fwd = np.zeros(n_states, dtype=bool)
    allow_fwd[:n_states - 2] = allow_skip[2:]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        step = np.full(n_states, _NEG_INF)
        step[:-1] = nxt[1:]
        skip = np.full(n_states, _NEG_INF)
        skip[:n_states - 2] = nxt[2:]
        skip = np.where(allow_fwd, skip, _NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(nxt, step), skip)
    return alpha, beta


def ctc_loss(log_probs: Tensor, target, blank: int = 0) -> Tensor:
    """Negative log-probability of all alignments that collapse to ``target``.

    ``log_probs`` is a (frames, vocab) matrix of log-softmaxed scores. The
    forward algorithm runs in log space over the blank-interleaved label
    sequence; the gradient comes from the state posteriors.
    """
    lp = log_probs.data
    if lp.ndim != 2:
        raise ShapeError(f"log_probs must be 2-D, got shape {lp.shape}")
    n_frames, vocab = lp.shape
    target = [int(t) for t in target]
    if any(t == blank for t in target):
        raise ValueError("target must not contain the blank symbol")
    if any(not 0 <= t < vocab for t in target):
        raise ValueError(f"target symbol out of range for vocab {vocab}")
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    min_frames = len(target) + repeats
    if n_frames < min_frames:
        raise InfeasibleAlignmentError(
            f"{n_frames} frames cannot align a target of {len(target)} symbols "
            f"with {repeats} repeats (needs >= {min_frames})")
    ext = _extend_targets(target, blank)
    allow_skip = np.zeros(len(ext), dtype=bool)
    allow_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha, beta = _ctc_alpha_beta(lp, ext, allow_skip)
        if len(ext) > 1:
            log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
        else:
            log_z = alpha[-1, -1]
        if not np.isfinite(log_z):
            raise InfeasibleAlignmentError("no feasible alignment path")
        gamma = alpha + beta - log_z
        post = np.exp(gamma)
    grad = np.zeros_like(lp)
    for s, label in enumerate(ext):
        grad[:, label] += post[:, s]
    grad = -grad

    def vjp(g):
        return (g * grad,)

    return custom_op(-log_z, (log_probs,), vjp)


def seq_ce_loss(logits: Tensor, target) -> Tensor:
    """Mean negative log-probability of the target tokens (teacher forcing)."""
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim != 2 or target.ndim != 1 or logits.shape[0] != target.size:
        raise ShapeError(f"logits {logits.shape} do not match target of "
                         f"length {target.size}")
    n, vocab = logits.shape
    onehot = np.zeros((n, vocab))
    onehot[np.arange(n), target] = 1.0
    picked = mul(log_softmax(logits, axis=-1), constant(onehot)).sum()
    return scale(picked, -1.0 / n)


def pif_loss(enc_orig: Tensor, enc_pert: Tensor) -> Tensor:
    """MSE between time-mean-pooled encoder outputs; lengths may differ."""
    if enc_orig.shape[-1] != enc_pert.shape[-1]:
        raise ShapeError(f"encoder widths differ: {enc_orig.shape} vs "
                         f"{enc_pert.shape}")
    diff = enc_orig.mean(axis=0) - enc_pert.mean(axis=0)
    return mul(diff, diff).mean()


@dataclass
class TrainExample:
    """One utterance with its augmentation views; views[0] is the original."""

    utt_id: str
    views: list  # feature arrays, (frames, n_mels)
    target: list  # token ids (no bos/eos; those are added per mode)

    def __post_init__(self):
        if not self.views:
            raise ValueError(f"{self.utt_id}: needs at least one view")


def _task_loss_for_view(model: Model, view, target, bos: int, eos: int,
                        blank: int, reuse_enc=None):
    if model.config.mode == "ctc":
        enc = encode(model, view) if reuse_enc is None else reuse_enc
        logits = enc @ model.params["head.w"] + model.params["head.b"]
        return ctc_loss(log_softmax(logits, axis=-1), target, blank), enc
    enc = encode(model, view) if reuse_enc is None else reuse_enc
    prefix = [bos] + list(target)
    labels = list(target) + [eos]
    logits = decode_teacher_forced(model, enc, prefix)
    return seq_ce_loss(logits, labels), enc


def total_objective(model: Model, batch: list, pif: PifConfig,
                    bos: int = 1, eos: int = 2, blank: int = 0) -> LossBreakdown:
    """Task loss over every view plus the weighted pairwise invariance term.

    The invariance term compares each perturbed view's encoder output against
    the original's; it requires at least one example with a perturbed view.
    """
    if not batch:
        raise ValueError("empty batch")
    task_terms = []
    pif_terms = []
    for ex in batch:
        encs = []
        for view in ex.views:
            loss, enc = _task_loss_for_view(model, view, ex.target, bos, eos, blank)
            task_terms.append(loss)
            encs.append(enc)
        if pif.weight > 0:
            for pert in encs[1:]:
                pif_terms.append(pif_loss(encs[0], pert))
    if pif.weight > 0 and not pif_terms:
        raise ConfigError("pif weight > 0 but the batch has no perturbed pairs")
    task = task_terms[0]
    for term in task_terms[1:]:
        task = task + term
    task = scale(task, 1.0 / len(task_terms))
    if pif_terms:
        pif_term = pif_terms[0]
        for term in pif_terms[1:]:
            pif_term = pif_term + term
        pif_term = scale(pif_term, 1.0 / len(pif_terms))
        total = task + scale(pif_term, pif.weight)
        pif_value = float(pif_term.data)
    else:
        total = task
        pif_value = 0.0
    return LossBreakdown(task_loss=float(task.data), pif_loss=pif_value,
                         total=float(total.data), total_node=total)
