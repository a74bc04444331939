"""Desk-scale speech recognition finetuning laboratory.

Modules:
    signal    waveform I/O, STFT/ISTFT, log-mel features, F0 analysis
    augment   pitch/speed/VTLP perturbation and SpecAugment masking
    autodiff  reverse-mode autodiff over dense float64 tensors, Adam
    model     miniature transformer ASR model with injectable PEFT
    losses    CTC, sequence cross-entropy, perturbation-invariance penalty
    datapipe  manifests, filtering, speaker splits, vocab, synthetic corpus
    evalkit   greedy decoding, word error rate, result tables
    runner    experiment configs, training loop, matrix runs, CLI
"""

__version__ = "0.1.0"
