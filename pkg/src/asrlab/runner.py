"""Experiment configuration, deterministic training, evaluation, matrix runs.

A run is a pure function of (config, seed): batches, augmentation draws and
parameter updates all derive from the config seed, so two runs of the same
config produce bit-identical loss curves on one machine.
"""

from __future__ import annotations

import hashlib
import json
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentPolicy, SpecAugmentConfig, derive_rng, make_augmented_copies
from .autodiff import (
    OptimizerState,
    Tensor,
    backward,
    constant,
    grad_check,
    load_checkpoint,
    mul,
    optimizer_step,
    save_checkpoint,
)
from . import autodiff as ad
from .datapipe import (
    FilterPolicy,
    SplitPolicy,
    Vocabulary,
    build_char_vocab,
    filter_entries,
    load_manifest,
    normalize_text,
    split_by_speaker,
)
from .errors import ConfigError, DivergedError, IntegrityError
from .evalkit import (
    ResultsRow,
    ResultsTable,
    aggregate_report,
    greedy_ar_decode,
    greedy_ctc_decode,
    wer,
)
from .losses import PifConfig, TrainExample, ctc_loss, seq_ce_loss, total_objective
from .model import (
    Model,
    ModelConfig,
    PeftConfig,
    apply_peft,
    build_model,
    count_trainable,
    count_trainable_params,
    ctc_logits,
    decode_teacher_forced,
    encode,
)
from .signal import FeatureMatrix, Waveform, load_wav, log_mel, stft

SIZE_PRESETS = {
    "tiny": dict(d_model=32, n_heads=2, enc_layers=1, ffn_dim=64),
    "small": dict(d_model=64, n_heads=4, enc_layers=2, ffn_dim=128),
    "base": dict(d_model=96, n_heads=4, enc_layers=3, ffn_dim=192),
}


@dataclass
class DataConfig:
    train_manifest: str = ""
    dev_manifest: str | None = None
    frame_len: int = 400
    hop: int = 160
    f_min: float = 0.0
    f_max: float | None = None
    normalize_features: bool = True
    filter: FilterPolicy | None = None
    split: SplitPolicy | None = None


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    lr: float = 3e-4
    lr_schedule: str = "constant"  # or "cosine" (decays to lr/10)
    warmup_steps: int = 0
    weight_decay: float = 0.0
    seed: int = 17
    checkpoint_interval: int = 100
    eval_interval: int = 50
    early_stop_train_wer: float | None = None


def lr_at_step(train_cfg: TrainConfig, step: int) -> float:
    base = train_cfg.lr
    if train_cfg.warmup_steps and step <= train_cfg.warmup_steps:
        return base * step / train_cfg.warmup_steps
    if train_cfg.lr_schedule == "cosine":
        span = max(1, train_cfg.steps - train_cfg.warmup_steps)
        progress = min(1.0, (step - train_cfg.warmup_steps) / span)
        floor = 0.1 * base
        return floor + 0.5 * (base - floor) * (1.0 + np.cos(np.pi * progress))
    return base


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    peft: PeftConfig | None = None
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    pif: PifConfig = field(default_factory=PifConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_splits: tuple = ("train",)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {
        "model": asdict(cfg.model),
        "peft": None if cfg.peft is None else asdict(cfg.peft),
        "augment": asdict(cfg.augment),
        "pif": asdict(cfg.pif),
        "data": asdict(cfg.data),
        "train": asdict(cfg.train),
        "eval_splits": list(cfg.eval_splits),
    }
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    def sub(cls, key, **extra):
        block = dict(d.get(key) or {})
        block.update(extra)
        return cls(**block)

    aug = dict(d.get("augment") or {})
    if isinstance(aug.get("spec_augment"), dict):
        aug["spec_augment"] = SpecAugmentConfig(**aug["spec_augment"])
    data = dict(d.get("data") or {})
    if isinstance(data.get("filter"), dict):
        data["filter"] = FilterPolicy(**data["filter"])
    if isinstance(data.get("split"), dict):
        split = data["split"]
        if isinstance(split.get("fractions"), list):
            split["fractions"] = tuple(split["fractions"])
        data["split"] = SplitPolicy(**split)
    peft = d.get("peft")
    if isinstance(peft, dict) and isinstance(peft.get("lora_targets"), list):
        peft = dict(peft)
        peft["lora_targets"] = tuple(peft["lora_targets"])
    return ExperimentConfig(
        model=sub(ModelConfig, "model"),
        peft=None if peft is None else PeftConfig(**peft),
        augment=AugmentPolicy(**aug),
        pif=sub(PifConfig, "pif"),
        data=DataConfig(**data),
        train=sub(TrainConfig, "train"),
        eval_splits=tuple(d.get("eval_splits") or ("train",)),
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_dict(json.load(f))


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def validate_config(cfg: ExperimentConfig, check_files: bool = True) -> ExperimentConfig:
    """Check cross-field constraints; errors carry the offending field path."""
    try:
        cfg.model.validate()
    except ConfigError as exc:
        raise ConfigError(f"model: {exc}") from exc
    if cfg.peft is not None:
        try:
            cfg.peft.validate()
        except ConfigError as exc:
            raise ConfigError(f"peft: {exc}") from exc
        if cfg.peft.method == "prompt":
            if cfg.peft.prompts_enc >= cfg.model.max_len:
                raise ConfigError(
                    f"peft.prompts_enc: {cfg.peft.prompts_enc} leaves no room "
                    f"for frames under model.max_len={cfg.model.max_len}")
            if cfg.model.mode == "enc_dec" \
                    and cfg.peft.prompts_dec >= cfg.model.max_len:
                raise ConfigError(f"peft.prompts_dec: exceeds model.max_len")
    if cfg.pif.weight > 0 and cfg.augment.method == "none":
        raise ConfigError("pif.weight: positive weight requires a perturbing "
                          "augment.method, got 'none'")
    if cfg.pif.weight > 0 and cfg.augment.copies < 1:
        raise ConfigError("pif.weight: positive weight requires augment.copies >= 1")
    if cfg.train.steps < 1 or cfg.train.batch_size < 1:
        raise ConfigError("train: steps and batch_size must be >= 1")
    if cfg.train.lr <= 0:
        raise ConfigError(f"train.lr: must be positive, got {cfg.train.lr}")
    if check_files:
        if not cfg.data.train_manifest:
            raise ConfigError("data.train_manifest: required")
        if not Path(cfg.data.train_manifest).exists():
            raise ConfigError(f"data.train_manifest: {cfg.data.train_manifest} "
                              f"not found")
        if cfg.data.dev_manifest and not Path(cfg.data.dev_manifest).exists():
            raise ConfigError(f"data.dev_manifest: {cfg.data.dev_manifest} "
                              f"not found")
    return cfg


def make_feature_fn(data_cfg: DataConfig, n_mels: int):
    """Waveform -> (frames, n_mels) array, with per-utterance normalization."""

    def featurize(wave: Waveform) -> np.ndarray:
        spec = stft(wave, frame_len=data_cfg.frame_len, hop=data_cfg.hop)
        feats = log_mel(spec, n_mels=n_mels, f_min=data_cfg.f_min,
                        f_max=data_cfg.f_max).values
        if data_cfg.normalize_features:
            feats = (feats - feats.mean()) / max(feats.std(), 1e-8)
        return feats

    return featurize


@dataclass
class EvalUtterance:
    utt_id: str
    features: np.ndarray
    text: str


def _featurize_entries(entries, feature_fn):
    return [EvalUtterance(e.id, feature_fn(load_wav(e.audio)), normalize_text(e.text))
            for e in entries]


def prepare_training_data(cfg: ExperimentConfig):
    """Load, filter, split, featurize and augment the corpus once, up front.

    Augmented views are materialized deterministically per utterance (seed
    xor utterance id), matching the fixed copies-plus-original convention.
    Returns (examples, vocab, eval_sets) where eval_sets maps split name to
    EvalUtterance lists.
    """
    entries = load_manifest(cfg.data.train_manifest)
    if cfg.data.filter is not None:
        entries, _ = filter_entries(entries, cfg.data.filter)
    dev_entries = None
    if cfg.data.dev_manifest:
        dev_entries = load_manifest(cfg.data.dev_manifest)
    elif cfg.data.split is not None:
        splits, _ = split_by_speaker(entries, cfg.data.split)
        entries, dev_entries = splits["train"], splits["dev"]
    if not entries:
        raise ConfigError("data.train_manifest: no training utterances left")
    vocab = build_char_vocab(e.text for e in entries)
    if vocab.size > cfg.model.vocab_size:
        raise ConfigError(f"model.vocab_size: corpus needs {vocab.size} symbols, "
                          f"config allows {cfg.model.vocab_size}")
    feature_fn = make_feature_fn(cfg.data, cfg.model.n_mels)

    def feat_of(item):
        if isinstance(item, FeatureMatrix):
            values = item.values
            if cfg.data.normalize_features:
                values = (values - values.mean()) / max(values.std(), 1e-8)
            return values
        return feature_fn(item)

    examples = []
    for e in entries:
        wave = load_wav(e.audio)
        if cfg.augment.method == "none":
            views = [feature_fn(wave)]
        else:
            rng = derive_rng(cfg.augment.seed, e.id)
            items = make_augmented_copies(
                wave, cfg.augment, rng,
                feature_fn=lambda w: log_mel(
                    stft(w, frame_len=cfg.data.frame_len, hop=cfg.data.hop),
                    n_mels=cfg.model.n_mels, f_min=cfg.data.f_min,
                    f_max=cfg.data.f_max),
                include_original=True)
            views = [feat_of(item) for item in items]
        examples.append(TrainExample(e.id, views, vocab.encode(e.text)))
    eval_sets = {"train": _featurize_entries(entries, feature_fn)}
    if dev_entries:
        eval_sets["dev"] = _featurize_entries(dev_entries, feature_fn)
    return examples, vocab, eval_sets


def decode_utterance(model: Model, vocab: Vocabulary, features) -> str:
    if model.config.mode == "ctc":
        return greedy_ctc_decode(ctc_logits(model, features), vocab)
    return greedy_ar_decode(model, features, vocab).text


def score_utterances(model: Model, vocab: Vocabulary, utts) -> tuple:
    """Returns (corpus_wer, per-utterance WerReports)."""
    reports = []
    for u in utts:
        hyp = decode_utterance(model, vocab, u.features)
        reports.append(wer(u.text, hyp))
    errors = sum(r.errors for r in reports)
    words = sum(r.ref_words for r in reports)
    return errors / words, reports


@dataclass
class RunRecord:
    config_hash: str
    losses: list
    wer_history: dict
    final_wer: dict
    best: dict
    trainable_params: int
    steps_run: int
    wall_time_s: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    record: RunRecord
    model: Model
    vocab: Vocabulary
    eval_sets: dict


def _checkpoint_meta(cfg: ExperimentConfig, vocab: Vocabulary) -> dict:
    return {
        "model": asdict(cfg.model),
        "peft": None if cfg.peft is None else asdict(cfg.peft),
        "data": {k: v for k, v in asdict(cfg.data).items()
                 if k in ("frame_len", "hop", "f_min", "f_max",
                          "normalize_features")},
        "vocab": list(vocab.symbols),
        "init_seed": cfg.train.seed,
        "mode": cfg.model.mode,
        "config_hash": config_hash(cfg),
    }


def train(cfg: ExperimentConfig, out_dir=None) -> TrainResult:
    """Seeded single-writer loop: batch, augment, objective, backward, Adam.

    Tracks dev WER (train WER when no dev split is configured), retains the
    best checkpoint, and aborts with DivergedError on non-finite losses.
    """
    validate_config(cfg)
    t0 = time.monotonic()
    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
    examples, vocab, eval_sets = prepare_training_data(cfg)
    model = build_model(cfg.model, cfg.train.seed)
    if cfg.peft is not None:
        apply_peft(model, cfg.peft)
    trainable = model.trainable_params()
    opt = OptimizerState(lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    rng = np.random.default_rng(cfg.train.seed)
    select_split = "dev" if "dev" in eval_sets else "train"
    losses = []
    wer_history = {name: [] for name in eval_sets}
    best = {"split": select_split, "step": 0, "wer": float("inf")}
    best_params = None
    log_file = open(out_path / "train_log.jsonl", "w") if out_path else None
    order = []
    cursor = 0
    steps_run = 0
    try:
        for step in range(1, cfg.train.steps + 1):
            batch = []
            for _ in range(cfg.train.batch_size):
                if cursor >= len(order):
                    order = list(rng.permutation(len(examples)))
                    cursor = 0
                batch.append(examples[order[cursor]])
                cursor += 1
            breakdown = total_objective(model, batch, cfg.pif, bos=vocab.bos,
                                        eos=vocab.eos, blank=vocab.blank)
            if not np.isfinite(breakdown.total):
                raise DivergedError(f"non-finite loss at step {step}: "
                                    f"{breakdown.total}")
            grads = backward(breakdown.total_node)
            named = {n: grads.get(p) for n, p in trainable.items()}
            optimizer_step(trainable, named, opt)
            entry = {"step": step, "task_loss": breakdown.task_loss,
                     "pif_loss": breakdown.pif_loss, "total": breakdown.total}
            losses.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
            steps_run = step
            stop = False
            if step % cfg.train.eval_interval == 0 or step == cfg.train.steps:
                for name, utts in eval_sets.items():
                    w, _ = score_utterances(model, vocab, utts)
                    wer_history[name].append((step, w))
                    if name == select_split and w < best["wer"]:
                        best = {"split": name, "step": step, "wer": w}
                        best_params = model.snapshot()
                target = cfg.train.early_stop_train_wer
                if target is not None and wer_history["train"] \
                        and wer_history["train"][-1][1] <= target:
                    stop = True
            if out_path and cfg.train.checkpoint_interval \
                    and step % cfg.train.checkpoint_interval == 0:
                save_checkpoint(out_path / "last.ckpt", model.params,
                                _checkpoint_meta(cfg, vocab))
            if stop:
                break
    finally:
        if log_file:
            log_file.close()
    final_wer = {}
    for name, utts in eval_sets.items():
        w, _ = score_utterances(model, vocab, utts)
        final_wer[name] = w
        if not wer_history[name] or wer_history[name][-1][0] != steps_run:
            wer_history[name].append((steps_run, w))
    if best_params is None or final_wer[select_split] < best["wer"]:
        best = {"split": select_split, "step": steps_run,
                "wer": final_wer[select_split]}
        best_params = model.snapshot()
    record = RunRecord(
        config_hash=config_hash(cfg),
        losses=losses,
        wer_history=wer_history,
        final_wer=final_wer,
        best=best,
        trainable_params=count_trainable_params(model),
        steps_run=steps_run,
        wall_time_s=time.monotonic() - t0,
    )
    if out_path:
        meta = _checkpoint_meta(cfg, vocab)
        best_tensors = {n: Tensor(a) for n, a in best_params.items()}
        save_checkpoint(out_path / "best.ckpt", best_tensors, meta)
        save_checkpoint(out_path / "last.ckpt", model.params, meta)
        if cfg.peft is not None and model.frozen:
            peft_only = {n: best_tensors[n] for n in best_tensors
                         if n not in model.frozen}
            save_checkpoint(out_path / "best.peft.ckpt", peft_only, meta)
        with open(out_path / "runrecord.json", "w") as f:
            json.dump(record.to_dict(), f, indent=2)
    return TrainResult(record, model, vocab, eval_sets)


def load_model_from_checkpoint(path) -> tuple:
    """Rebuild the model a checkpoint describes and load its parameters."""
    params, meta = load_checkpoint(path)
    model_cfg = ModelConfig(**meta["model"])
    model = build_model(model_cfg, meta["init_seed"])
    if meta.get("peft") is not None:
        peft = dict(meta["peft"])
        if isinstance(peft.get("lora_targets"), list):
            peft["lora_targets"] = tuple(peft["lora_targets"])
        apply_peft(model, PeftConfig(**peft))
    if set(params) != set(model.params):
        missing = set(model.params) - set(params)
        extra = set(params) - set(model.params)
        raise IntegrityError(f"checkpoint does not match its config: "
                             f"missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
    for name, arr in params.items():
        if arr.shape != model.params[name].data.shape:
            raise IntegrityError(f"parameter {name!r}: checkpoint shape "
                                 f"{arr.shape} != config shape "
                                 f"{model.params[name].data.shape}")
        model.params[name].data = arr
    vocab = Vocabulary(tuple(meta["vocab"]))
    return model, vocab, meta


def load_peft_overlay(model: Model, path) -> Model:
    """Apply a trainable-subset checkpoint on top of a freshly built model."""
    params, meta = load_checkpoint(path)
    for name, arr in params.items():
        if name not in model.params:
            raise IntegrityError(f"overlay parameter {name!r} unknown to model")
        if name in model.frozen:
            raise IntegrityError(f"overlay parameter {name!r} is frozen")
        model.params[name].data = arr
    return model


def evaluate(checkpoint_path, manifest_path, mode: str | None = None,
             system: str = "model", split: str = "eval") -> ResultsTable:
    """Deterministic greedy scoring of a manifest against a checkpoint."""
    model, vocab, meta = load_model_from_checkpoint(checkpoint_path)
    if mode is not None and mode != meta["mode"]:
        raise IntegrityError(f"checkpoint mode {meta['mode']!r} does not match "
                             f"requested {mode!r}")
    entries = load_manifest(manifest_path)
    if not entries:
        raise ValueError(f"{manifest_path}: empty manifest")
    data_cfg = DataConfig(**meta["data"])
    feature_fn = make_feature_fn(data_cfg, model.config.n_mels)
    utts = _featurize_entries(entries, feature_fn)
    _, reports = score_utterances(model, vocab, utts)
    return aggregate_report(reports, system, split,
                            trainable_params=count_trainable_params(model))


def _cell_seed(base_seed: int, label: str) -> int:
    return (base_seed ^ zlib.crc32(label.encode())) & 0x7FFFFFFF


def run_matrix(base_cfg: ExperimentConfig, out_dir=None, peft_methods=None,
               sizes=None, da_methods=None) -> tuple[ResultsTable, dict]:
    """Cartesian product of finetuning axes; failed cells are recorded, not fatal.

    Returns (table sorted by cell label, {label: RunRecord-or-error}).
    """
    peft_axis = list(peft_methods) if peft_methods else [None]
    size_axis = list(sizes) if sizes else [None]
    da_axis = list(da_methods) if da_methods else [None]
    table = ResultsTable()
    records = {}
    for size in size_axis:
        for peft in peft_axis:
            for da in da_axis:
                parts = [p for p in (size, peft, da) if p is not None]
                label = "|".join(parts) if parts else "base"
                cfg_dict = config_to_dict(base_cfg)
                if size is not None:
                    if size not in SIZE_PRESETS:
                        records[label] = {"error": f"unknown size {size!r}"}
                        table.add(ResultsRow(label, "train", float("nan"),
                                             status="error"))
                        continue
                    preset = dict(SIZE_PRESETS[size])
                    preset["dec_layers"] = (0 if base_cfg.model.mode == "ctc"
                                            else preset["enc_layers"])
                    cfg_dict["model"].update(preset)
                if peft is not None:
                    base_peft = cfg_dict["peft"] or asdict(PeftConfig())
                    base_peft["method"] = peft
                    cfg_dict["peft"] = base_peft
                if da is not None:
                    cfg_dict["augment"]["method"] = da
                cfg_dict["train"]["seed"] = _cell_seed(base_cfg.train.seed, label)
                cell_cfg = config_from_dict(cfg_dict)
                cell_dir = None
                if out_dir is not None:
                    cell_dir = Path(out_dir) / "cells" / label.replace("|", "_")
                try:
                    result = train(cell_cfg, cell_dir)
                    records[label] = result.record
                    for split_name, w in sorted(result.record.final_wer.items()):
                        table.add(ResultsRow(
                            label, split_name, w,
                            trainable_params=result.record.trainable_params,
                            wall_time_s=result.record.wall_time_s))
                except Exception as exc:  # cell failures must not kill the matrix
                    records[label] = {"error": f"{type(exc).__name__}: {exc}"}
                    table.add(ResultsRow(label, "train", float("nan"),
                                         status="error"))
    table = table.sorted()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "matrix.tsv").write_text(table.to_tsv())
        serializable = {k: (v.to_dict() if isinstance(v, RunRecord) else v)
                        for k, v in records.items()}
        (out / "matrix_records.json").write_text(json.dumps(serializable, indent=2))
    return table, records


def _micro_configs():
    ctc = ModelConfig(mode="ctc", d_model=16, n_heads=2, enc_layers=1,
                      dec_layers=0, ffn_dim=32, n_mels=4, vocab_size=6, max_len=32)
    enc_dec = ModelConfig(mode="enc_dec", d_model=16, n_heads=2, enc_layers=1,
                          dec_layers=1, ffn_dim=32, n_mels=4, vocab_size=6,
                          max_len=32)
    return ctc, enc_dec


def model_loss_grad_check(cfg: ModelConfig, seed: int = 0,
                          coords_per_param: int = 4, eps: float = 1e-5) -> float:
    """Finite-difference check of the full training loss at micro scale.

    Samples a few coordinates per parameter; returns the max relative error.
    """
    rng = np.random.default_rng(seed)
    model = build_model(cfg, seed)
    feats = rng.standard_normal((9, cfg.n_mels))
    target = [4, 5]

    def loss_fn():
        if cfg.mode == "ctc":
            logits = ctc_logits(model, feats)
            return ctc_loss(ad.log_softmax(logits, axis=-1), target, blank=0)
        enc = encode(model, feats)
        logits = decode_teacher_forced(model, enc, [1] + target)
        return seq_ce_loss(logits, target + [2])

    loss = loss_fn()
    grads = backward(loss)
    worst = 0.0
    for name, p in model.params.items():
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords_per_param, flat.size),
                           replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            adg = g.reshape(-1)[i]
            worst = max(worst, abs(adg - fd) / max(1e-8, abs(adg) + abs(fd)))
    return worst


def gradcheck_suite(coords_per_param: int = 4) -> list:
    """Verification battery: every primitive plus both full-model losses.

    Returns [(name, max_rel_err, threshold, passed)].
    """
    rng = np.random.default_rng(0)

    def draw(*shape):
        a = rng.standard_normal(shape)
        return constant(np.sign(a) * (np.abs(a) + 0.1))

    w = draw(5, 4)
    c4 = draw(3, 4)
    c5 = draw(3, 5)
    bias = draw(4)
    gain = constant(rng.uniform(0.5, 1.5, 5))
    beta = constant(rng.standard_normal(5))
    crow = draw(5)
    ccol = draw(3)
    cemb = draw(6, 4)
    ids = rng.integers(0, 3, size=6)
    x = Tensor(rng.standard_normal((3, 5)))
    table = Tensor(rng.standard_normal((3, 4)))
    lp = rng.standard_normal((6, 4))
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
    primitive_cases = [
        ("matmul", lambda t: mul(ad.matmul(t, w), c4).sum(), x),
        ("add", lambda t: mul(ad.add(t, c5), c5).sum(), x),
        ("bias_add", lambda t: mul(ad.add(ad.matmul(t, w), bias), c4).sum(), x),
        ("mul", lambda t: mul(mul(t, c5), c5).sum(), x),
        ("scale", lambda t: ad.scale(t, -1.7).sum(), x),
        ("transpose", lambda t: mul(ad.transpose(t), ad.transpose(c5)).sum(), x),
        ("concat", lambda t: mul(ad.concat([t, t], axis=0),
                                 ad.concat([c5, c5], axis=0)).sum(), x),
        ("slice", lambda t: mul(ad.slice_axis(t, 1, 1, 4),
                                ad.slice_axis(c5, 1, 1, 4)).sum(), x),
        ("softmax", lambda t: mul(ad.softmax(t, axis=-1), c5).sum(), x),
        ("log_softmax", lambda t: mul(ad.log_softmax(t, axis=-1), c5).sum(), x),
        ("layer_norm", lambda t: mul(ad.layer_norm(t, gain, beta), c5).sum(), x),
        ("gelu", lambda t: mul(ad.gelu(t), c5).sum(), x),
        ("embedding_lookup", lambda t: mul(ad.embedding_lookup(t, ids), cemb).sum(),
         table),
        ("mean", lambda t: mul(t.mean(axis=0), crow).sum(), x),
        ("sum", lambda t: mul(t.sum(axis=1), ccol).sum(), x),
        ("ctc_loss", lambda t: ctc_loss(t, [1, 2]), Tensor(lp)),
        ("seq_ce_loss", lambda t: seq_ce_loss(t, [1, 2, 0, 3, 2, 1]), Tensor(lp)),
    ]
    results = []
    for name, fn, point in primitive_cases:
        err = grad_check(fn, point)
        results.append((name, err, 1e-5, err < 1e-5))
    ctc_cfg, ed_cfg = _micro_configs()
    err = model_loss_grad_check(ctc_cfg, coords_per_param=coords_per_param)
    results.append(("full_ctc_loss", err, 1e-4, err < 1e-4))
    err = model_loss_grad_check(ed_cfg, coords_per_param=coords_per_param)
    results.append(("full_enc_dec_loss", err, 1e-4, err < 1e-4))
    return results
