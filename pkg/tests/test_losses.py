import itertools

import numpy as np
import pytest

from asrlab.autodiff import Tensor, backward, grad_check, log_softmax
from asrlab.errors import ConfigError, InfeasibleAlignmentError, ShapeError
from asrlab.losses import (
    LossBreakdown,
    PifConfig,
    TrainExample,
    ctc_loss,
    pif_loss,
    seq_ce_loss,
    total_objective,
)
from asrlab.model import ModelConfig, build_model, encode


def collapse(path, blank=0):
    return [k for k, _ in itertools.groupby(path) if k != blank]


def ctc_brute_force(log_probs, target, blank=0):
    """Oracle: enumerate every vocab^T path and sum those collapsing to target."""
    n_frames, vocab = log_probs.shape
    total = 0.0
    for path in itertools.product(range(vocab), repeat=n_frames):
        if collapse(path, blank) == list(target):
            total += np.exp(sum(log_probs[t, k] for t, k in enumerate(path)))
    return -np.log(total)


def random_log_probs(n_frames, vocab, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_frames, vocab))
    x = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    return x


def all_targets(vocab, max_len):
    symbols = range(1, vocab)
    out = [[]]
    for n in range(1, max_len + 1):
        out += [list(t) for t in itertools.product(symbols, repeat=n)]
    return out


class TestCtcLoss:
    def test_single_frame_uniform_is_ln2(self):
        lp = np.log(np.full((1, 2), 0.5))
        loss = ctc_loss(Tensor(lp), [1])
        assert abs(float(loss.data) - np.log(2.0)) < 1e-12

    def test_matches_exhaustive_enumeration(self):
        seed = 0
        for vocab in (2, 3):
            for n_frames in (1, 2, 3, 4):
                for target in all_targets(vocab, 2):
                    seed += 1
                    lp = random_log_probs(n_frames, vocab, seed)
                    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
                    if n_frames < len(target) + repeats:
                        with pytest.raises(InfeasibleAlignmentError):
                            ctc_loss(Tensor(lp), target)
                        continue
                    got = float(ctc_loss(Tensor(lp), target).data)
                    want = ctc_brute_force(lp, target)
                    assert abs(got - want) < 1e-10, (vocab, n_frames, target)

    def test_repeated_symbol_needs_separator(self):
        lp = random_log_probs(2, 3, seed=1)
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(Tensor(lp), [1, 1])

    def test_blank_in_target_rejected(self):
        lp = random_log_probs(4, 3, seed=2)
        with pytest.raises(ValueError):
            ctc_loss(Tensor(lp), [0, 1])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        lp = random_log_probs(5, 4, seed=seed)
        err = grad_check(lambda t: ctc_loss(t, [1, 2]), Tensor(lp))
        assert err < 1e-5

    def test_gradient_through_log_softmax(self, rng):
        logits = rng.standard_normal((6, 4))
        err = grad_check(lambda t: ctc_loss(log_softmax(t, axis=-1), [2, 1, 3]),
                         Tensor(logits))
        assert err < 1e-5

    @pytest.mark.parametrize("seed", range(20))
    def test_permutation_sensitive(self, seed):
        lp = random_log_probs(6, 4, seed=100 + seed)
        a = float(ctc_loss(Tensor(lp), [1, 2]).data)
        b = float(ctc_loss(Tensor(lp), [2, 1]).data)
        assert a != b


class TestSeqCeLoss:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((1, 7)))
        loss = seq_ce_loss(logits, [3])
        assert abs(float(loss.data) - np.log(7.0)) < 1e-12

    def test_saturated_logits(self):
        logits = np.zeros((2, 5))
        logits[0, 1] = 100.0
        logits[1, 4] = 100.0
        loss = seq_ce_loss(Tensor(logits), [1, 4])
        assert float(loss.data) < 1e-10

    def test_matches_hand_softmax_arithmetic(self, rng):
        logits = rng.standard_normal((3, 4))
        target = [2, 0, 3]
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        want = -np.mean([np.log(probs[i, t]) for i, t in enumerate(target)])
        got = float(seq_ce_loss(Tensor(logits), target).data)
        assert abs(got - want) < 1e-12

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            seq_ce_loss(Tensor(np.zeros((3, 4))), [1, 2])

    def test_gradient(self, rng):
        logits = rng.standard_normal((4, 5))
        err = grad_check(lambda t: seq_ce_loss(t, [1, 2, 0, 4]), Tensor(logits))
        assert err < 1e-5


class TestPifLoss:
    def test_identical_inputs_zero(self, rng):
        x = Tensor(rng.standard_normal((7, 16)))
        assert float(pif_loss(x, x).data) == 0.0

    def test_symmetry(self, rng):
        a = Tensor(rng.standard_normal((5, 8)))
        b = Tensor(rng.standard_normal((9, 8)))
        assert float(pif_loss(a, b).data) == float(pif_loss(b, a).data)

    def test_hand_case(self):
        a = Tensor(np.array([[1.0, 0.0]]))
        b = Tensor(np.array([[0.0, 1.0]]))
        assert float(pif_loss(a, b).data) == 1.0

    def test_nonnegative_and_zero_iff_equal_pooled(self, rng):
        for _ in range(20):
            a = Tensor(rng.standard_normal((4, 6)))
            b = Tensor(rng.standard_normal((6, 6)))
            v = float(pif_loss(a, b).data)
            assert v >= 0.0
            pooled_equal = np.allclose(a.data.mean(axis=0), b.data.mean(axis=0))
            assert (v < 1e-30) == pooled_equal

    def test_width_mismatch_rejected(self, rng):
        a = Tensor(rng.standard_normal((4, 6)))
        b = Tensor(rng.standard_normal((4, 8)))
        with pytest.raises(ShapeError):
            pif_loss(a, b)

    def test_gradient(self, rng):
        b = Tensor(rng.standard_normal((5, 6)))
        err = grad_check(lambda t: pif_loss(t, b), Tensor(rng.standard_normal((3, 6))))
        assert err < 1e-5


def toy_ctc_model(seed=0):
    cfg = ModelConfig(mode="ctc", d_model=32, n_heads=2, enc_layers=1,
                      dec_layers=0, ffn_dim=64, n_mels=8, vocab_size=6)
    return build_model(cfg, seed)


def toy_batch(rng, with_perturbed=True):
    batch = []
    for i in range(2):
        orig = rng.standard_normal((12, 8))
        views = [orig]
        if with_perturbed:
            views.append(orig + 0.1 * rng.standard_normal((12, 8)))
        batch.append(TrainExample(f"utt{i}", views, [1, 2, 3]))
    return batch


class TestTotalObjective:
    def test_zero_weight_equals_task(self, rng):
        model = toy_ctc_model()
        out = total_objective(model, toy_batch(rng), PifConfig(weight=0.0))
        assert out.total == out.task_loss
        assert out.pif_loss == 0.0

    def test_identity_views_give_zero_pif(self, rng):
        model = toy_ctc_model()
        orig = rng.standard_normal((12, 8))
        batch = [TrainExample("u", [orig, orig.copy()], [1, 2])]
        out = total_objective(model, batch, PifConfig(weight=0.1))
        assert out.pif_loss == 0.0
        assert out.total == out.task_loss

    def test_breakdown_invariant_exact(self, rng):
        model = toy_ctc_model()
        batch = toy_batch(rng)
        out = total_objective(model, batch, PifConfig(weight=0.1))
        assert out.total == out.task_loss + 0.1 * out.pif_loss

    def test_weighted_total_matches_separate_computation(self, rng):
        model = toy_ctc_model()
        batch = toy_batch(rng)
        with_pif = total_objective(model, batch, PifConfig(weight=0.1))
        without = total_objective(model, batch, PifConfig(weight=0.0))
        pooled = []
        for ex in batch:
            base = encode(model, ex.views[0])
            for view in ex.views[1:]:
                pooled.append(float(pif_loss(base, encode(model, view)).data))
        assert with_pif.task_loss == without.task_loss
        assert with_pif.total == without.total + 0.1 * np.mean(pooled)

    def test_weight_without_pairs_rejected(self, rng):
        model = toy_ctc_model()
        batch = toy_batch(rng, with_perturbed=False)
        with pytest.raises(ConfigError):
            total_objective(model, batch, PifConfig(weight=0.1))

    def test_backward_flows(self, rng):
        model = toy_ctc_model()
        out = total_objective(model, toy_batch(rng), PifConfig(weight=0.1))
        grads = backward(out.total_node)
        head = model.params["head.w"]
        assert head in grads and np.any(grads[head] != 0)
