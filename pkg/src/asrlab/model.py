"""Miniature transformer ASR model with injectable PEFT mechanisms.

Two modes: an encoder with a linear CTC head, and an encoder-decoder for
teacher-forced cross-entropy training. Pre-norm blocks, sinusoidal positions,
float64 parameters on the autodiff substrate. Parameters are read-only during
forward, so concurrent inference over utterances is safe; training is
single-writer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    constant,
    embedding_lookup,
    gelu,
    layer_norm,
    parameter,
    slice_axis,
    softmax,
)
from .errors import ConfigError, LengthError, ModeError, ShapeError, StateError
from .signal import FeatureMatrix

MODES = ("ctc", "enc_dec")
PEFT_METHODS = ("full", "encoder_only", "decoder_only", "lora", "adapter",
                "prompt", "prefix")
_MASK_FILL = -1e30


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "ctc"
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 0
    ffn_dim: int = 128
    n_mels: int = 16
    vocab_size: int = 30
    max_len: int = 256

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by "
                              f"n_heads {self.n_heads}")
        if self.mode == "ctc" and self.dec_layers != 0:
            raise ConfigError(f"ctc mode requires dec_layers=0, got {self.dec_layers}")
        if self.mode == "enc_dec" and self.dec_layers < 1:
            raise ConfigError("enc_dec mode requires dec_layers >= 1")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the reserved symbols (>= 4)")
        if min(self.d_model, self.ffn_dim, self.n_mels, self.max_len) < 1:
            raise ConfigError("model dimensions must be positive")
        return self


@dataclass(frozen=True)
class PeftConfig:
    """Prompt/prefix counts default to the reference-scale values; toy runs
    typically use prompts 8/4 and prefixes 4/2."""

    method: str = "full"
    lora_rank: int = 8
    lora_targets: tuple = ("query", "value")
    adapter_bottleneck: int = 32
    prompts_enc: int = 100
    prompts_dec: int = 20
    prefix_enc: int = 50
    prefix_dec: int = 10

    def validate(self):
        if self.method not in PEFT_METHODS:
            raise ConfigError(f"peft method must be one of {PEFT_METHODS}, "
                              f"got {self.method!r}")
        used = {
            "lora": [self.lora_rank],
            "adapter": [self.adapter_bottleneck],
            "prompt": [self.prompts_enc, self.prompts_dec],
            "prefix": [self.prefix_enc, self.prefix_dec],
        }.get(self.method, [])
        if any(v < 1 for v in used):
            raise ConfigError(f"counts for method {self.method!r} must be positive")
        if self.method == "lora" and not set(self.lora_targets) <= {"query", "value"}:
            raise ConfigError(f"lora_targets must be within query/value, "
                              f"got {self.lora_targets}")
        return self


class Model:
    def __init__(self, config: ModelConfig, params: dict, init_seed: int):
        self.config = config
        self.params = params
        self.init_seed = init_seed
        self.peft: PeftConfig | None = None
        self.frozen: set[str] = set()
        self._positions = _sinusoid_table(config.max_len, config.d_model)
        self._mask_cache: dict[int, Tensor] = {}

    def trainable_params(self) -> dict:
        return {n: p for n, p in self.params.items() if n not in self.frozen}

    def snapshot(self, names=None) -> dict:
        names = self.params.keys() if names is None else names
        return {n: self.params[n].data.copy() for n in names}

    def positions(self, length: int) -> Tensor:
        return constant(self._positions[:length])

    def causal_mask(self, length: int) -> Tensor:
        cached = self._mask_cache.get(length)
        if cached is None:
            m = np.triu(np.full((length, length), _MASK_FILL), k=1)
            cached = constant(m)
            self._mask_cache[length] = cached
        return cached


def _sinusoid_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    dim = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _attention_module_keys(cfg: ModelConfig):
    keys = [f"enc.{i}.attn" for i in range(cfg.enc_layers)]
    if cfg.mode == "enc_dec":
        for i in range(cfg.dec_layers):
            keys.append(f"dec.{i}.self")
            keys.append(f"dec.{i}.cross")
    return keys


def _block_keys(cfg: ModelConfig):
    keys = [f"enc.{i}" for i in range(cfg.enc_layers)]
    if cfg.mode == "enc_dec":
        keys += [f"dec.{i}" for i in range(cfg.dec_layers)]
    return keys


def _base_param_shapes(cfg: ModelConfig):
    d, ffn, v = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    shapes = [("enc.in.w", (cfg.n_mels, d)), ("enc.in.b", (d,))]

    def attn(prefix):
        # no key bias: softmax is invariant to per-query constant shifts,
        # which makes it unlearnable and breaks finite-difference checks
        return [(f"{prefix}.wq", (d, d)), (f"{prefix}.bq", (d,)),
                (f"{prefix}.wk", (d, d)),
                (f"{prefix}.wv", (d, d)), (f"{prefix}.bv", (d,)),
                (f"{prefix}.wo", (d, d)), (f"{prefix}.bo", (d,))]

    def ln(prefix):
        return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]

    def ffn_block(prefix):
        return [(f"{prefix}.w1", (d, ffn)), (f"{prefix}.b1", (ffn,)),
                (f"{prefix}.w2", (ffn, d)), (f"{prefix}.b2", (d,))]

    for i in range(cfg.enc_layers):
        shapes += ln(f"enc.{i}.ln1") + attn(f"enc.{i}.attn")
        shapes += ln(f"enc.{i}.ln2") + ffn_block(f"enc.{i}.ffn")
    if cfg.enc_layers:
        shapes += ln("enc.norm")
    if cfg.mode == "enc_dec":
        shapes.append(("dec.embed", (v, d)))
        for i in range(cfg.dec_layers):
            shapes += ln(f"dec.{i}.ln1") + attn(f"dec.{i}.self")
            shapes += ln(f"dec.{i}.ln2") + attn(f"dec.{i}.cross")
            shapes += ln(f"dec.{i}.ln3") + ffn_block(f"dec.{i}.ffn")
        shapes += ln("dec.norm")
        shapes += [("dec.out.w", (d, v)), ("dec.out.b", (v,))]
    else:
        shapes += [("head.w", (d, v)), ("head.b", (v,))]
    return shapes


def _peft_param_shapes(cfg: ModelConfig, peft: PeftConfig):
    d = cfg.d_model
    shapes = []
    if peft.method == "lora":
        r = peft.lora_rank
        for key in _attention_module_keys(cfg):
            for target in ("q", "v"):
                name = {"q": "query", "v": "value"}[target]
                if name in peft.lora_targets:
                    shapes.append((f"peft.lora.{key}.{target}.a", (d, r)))
                    shapes.append((f"peft.lora.{key}.{target}.b", (r, d)))
    elif peft.method == "adapter":
        bn = peft.adapter_bottleneck
        for key in _block_keys(cfg):
            shapes += [(f"peft.adapter.{key}.down.w", (d, bn)),
                       (f"peft.adapter.{key}.down.b", (bn,)),
                       (f"peft.adapter.{key}.up.w", (bn, d)),
                       (f"peft.adapter.{key}.up.b", (d,))]
    elif peft.method == "prompt":
        shapes.append(("peft.prompt.enc", (peft.prompts_enc, d)))
        if cfg.mode == "enc_dec":
            shapes.append(("peft.prompt.dec", (peft.prompts_dec, d)))
    elif peft.method == "prefix":
        for i in range(cfg.enc_layers):
            shapes.append((f"peft.prefix.enc.{i}", (peft.prefix_enc, d)))
        if cfg.mode == "enc_dec":
            for i in range(cfg.dec_layers):
                shapes.append((f"peft.prefix.dec.{i}", (peft.prefix_dec, d)))
    return shapes


def _init_array(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    last = name.rsplit(".", 1)[-1]
    if last in ("g",):
        return np.ones(shape)
    if last in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
        return np.zeros(shape)
    if name == "dec.embed" or ".prompt." in name or ".prefix." in name:
        return rng.normal(0.0, 0.02, shape)
    if ".lora." in name and name.endswith(".b"):
        return np.zeros(shape)
    if ".adapter." in name and ".up." in name:
        return np.zeros(shape)
    # remaining 2-d weights: scaled normal by fan-in
    return rng.normal(0.0, shape[0] ** -0.5, shape)


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Materialize all base parameters, deterministically from the seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _base_param_shapes(cfg):
        params[name] = parameter(_init_array(name, shape, rng), name=name)
    return Model(cfg, params, seed)


def apply_peft(model: Model, peft: PeftConfig) -> Model:
    """Inject the PEFT method and freeze the complement parameter set.

    LoRA adds x @ A @ B (B zero-initialized) to the query/value projections;
    adapters add a zero-initialized residual bottleneck after each block, so
    both leave the forward pass untouched at injection time. Prompts prepend
    learned vectors to the module input; prefixes prepend per-layer vectors
    that are stripped from each layer's output.
    """
    if model.peft is not None:
        raise StateError(f"model already has PEFT {model.peft.method!r} applied")
    peft.validate()
    cfg = model.config
    if peft.method == "decoder_only" and cfg.mode == "ctc":
        raise ConfigError("decoder_only is meaningless in ctc mode")
    if peft.method == "prompt" and peft.prompts_enc >= cfg.max_len:
        raise ConfigError(f"prompts_enc {peft.prompts_enc} exceeds the position "
                          f"budget max_len={cfg.max_len}")
    base_names = set(model.params)
    if peft.method == "full":
        frozen = set()
    elif peft.method == "encoder_only":
        frozen = {n for n in base_names if n.startswith("dec.")}
    elif peft.method == "decoder_only":
        frozen = {n for n in base_names if n.startswith("enc.")}
    else:
        frozen = set(base_names)
        rng = np.random.default_rng((model.init_seed + 1) & 0xFFFFFFFF)
        for name, shape in _peft_param_shapes(cfg, peft):
            model.params[name] = parameter(_init_array(name, shape, rng), name=name)
    model.frozen = frozen
    model.peft = peft
    return model


def count_trainable_params(model: Model) -> int:
    return sum(p.size for n, p in model.params.items() if n not in model.frozen)


def count_trainable(cfg: ModelConfig, peft: PeftConfig | None) -> int:
    """Closed-form trainable count; agrees exactly with a materialized model."""
    base = _base_param_shapes(cfg)
    if peft is None or peft.method == "full":
        return sum(int(np.prod(s)) for _, s in base)
    if peft.method == "encoder_only":
        return sum(int(np.prod(s)) for n, s in base if not n.startswith("dec."))
    if peft.method == "decoder_only":
        return sum(int(np.prod(s)) for n, s in base if not n.startswith("enc."))
    return sum(int(np.prod(s)) for _, s in _peft_param_shapes(cfg, peft))


def _linear(model: Model, prefix: str, x: Tensor) -> Tensor:
    return x @ model.params[f"{prefix}.w"] + model.params[f"{prefix}.b"]


def _ln(model: Model, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, model.params[f"{prefix}.g"], model.params[f"{prefix}.b"])


def _attention(model: Model, key: str, xq: Tensor, xkv: Tensor,
               mask: Tensor | None) -> Tensor:
    p = model.params
    q = xq @ p[f"{key}.wq"] + p[f"{key}.bq"]
    k = xkv @ p[f"{key}.wk"]
    v = xkv @ p[f"{key}.wv"] + p[f"{key}.bv"]
    if model.peft is not None and model.peft.method == "lora":
        if f"peft.lora.{key}.q.a" in p:
            q = q + (xq @ p[f"peft.lora.{key}.q.a"]) @ p[f"peft.lora.{key}.q.b"]
        if f"peft.lora.{key}.v.a" in p:
            v = v + (xkv @ p[f"peft.lora.{key}.v.a"]) @ p[f"peft.lora.{key}.v.b"]
    n_heads = model.config.n_heads
    dh = model.config.d_model // n_heads
    inv_sqrt = 1.0 / np.sqrt(dh)
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_axis(q, 1, lo, hi)
        kh = slice_axis(k, 1, lo, hi)
        vh = slice_axis(v, 1, lo, hi)
        scores = (qh @ kh.transpose()) * inv_sqrt
        if mask is not None:
            scores = scores + mask
        heads.append(softmax(scores, axis=-1) @ vh)
    out = concat(heads, axis=1)
    return out @ p[f"{key}.wo"] + p[f"{key}.bo"]


def _ffn(model: Model, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    return gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] \
        + p[f"{prefix}.b2"]


def _adapter(model: Model, block_key: str, x: Tensor) -> Tensor:
    p = model.params
    key = f"peft.adapter.{block_key}"
    h = gelu(x @ p[f"{key}.down.w"] + p[f"{key}.down.b"])
    return x + (h @ p[f"{key}.up.w"] + p[f"{key}.up.b"])


def _with_prefix(model: Model, scope: str, layer: int, h: Tensor, body):
    """Prepend this layer's prefix vectors, run the block, strip them again."""
    peft = model.peft
    if peft is None or peft.method != "prefix":
        return body(h, 0)
    name = f"peft.prefix.{scope}.{layer}"
    if name not in model.params:
        return body(h, 0)
    pre = model.params[name]
    n = pre.shape[0]
    out = body(concat([pre, h], axis=0), n)
    return slice_axis(out, 0, n, out.shape[0])


def _encoder_block(model: Model, i: int, h: Tensor) -> Tensor:
    def body(z, _n_pre):
        x1 = _ln(model, f"enc.{i}.ln1", z)
        a = z + _attention(model, f"enc.{i}.attn", x1, x1, None)
        return a + _ffn(model, f"enc.{i}.ffn", _ln(model, f"enc.{i}.ln2", a))

    h = _with_prefix(model, "enc", i, h, body)
    if model.peft is not None and model.peft.method == "adapter":
        h = _adapter(model, f"enc.{i}", h)
    return h


def encode(model: Model, feat, pad_mask=None) -> Tensor:
    """Encoder states for one utterance, shape (frames', d_model).

    ``pad_mask`` marks valid frames; padded frames are dropped before any
    computation, so they cannot influence the output. Prompt vectors, when
    active, stay in the returned sequence.
    """
    values = feat.values if isinstance(feat, FeatureMatrix) else np.asarray(feat)
    if pad_mask is not None:
        values = values[np.asarray(pad_mask, dtype=bool)]
    cfg = model.config
    if values.ndim != 2 or values.shape[1] != cfg.n_mels:
        raise ShapeError(f"features must be (frames, {cfg.n_mels}), "
                         f"got {values.shape}")
    n_prompts = 0
    if model.peft is not None and model.peft.method == "prompt":
        n_prompts = model.peft.prompts_enc
    if values.shape[0] + n_prompts > cfg.max_len:
        raise LengthError(
            f"{values.shape[0]} frames + {n_prompts} prompts exceeds "
            f"max_len={cfg.max_len}")
    h = constant(values) @ model.params["enc.in.w"] + model.params["enc.in.b"]
    if n_prompts:
        h = concat([model.params["peft.prompt.enc"], h], axis=0)
    h = h + model.positions(h.shape[0])
    for i in range(cfg.enc_layers):
        h = _encoder_block(model, i, h)
    if cfg.enc_layers:
        h = _ln(model, "enc.norm", h)
    return h


def ctc_logits(model: Model, feat, pad_mask=None) -> Tensor:
    if model.config.mode != "ctc":
        raise ModeError(f"ctc_logits requires ctc mode, model is "
                        f"{model.config.mode!r}")
    h = encode(model, feat, pad_mask)
    return h @ model.params["head.w"] + model.params["head.b"]


def decode_teacher_forced(model: Model, enc: Tensor, target_prefix) -> Tensor:
    """Causal decoder logits, one row per prefix position."""
    cfg = model.config
    if cfg.mode != "enc_dec":
        raise ModeError(f"decoder requires enc_dec mode, model is {cfg.mode!r}")
    tokens = np.asarray(target_prefix, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < 1:
        raise ShapeError(f"target_prefix must be a non-empty 1-D sequence, "
                         f"got shape {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ShapeError(f"token id out of range for vocab {cfg.vocab_size}")
    n_prompts = 0
    if model.peft is not None and model.peft.method == "prompt":
        n_prompts = model.peft.prompts_dec
    length = tokens.size + n_prompts
    if length > cfg.max_len:
        raise LengthError(f"{tokens.size} tokens + {n_prompts} prompts exceeds "
                          f"max_len={cfg.max_len}")
    h = embedding_lookup(model.params["dec.embed"], tokens)
    if n_prompts:
        h = concat([model.params["peft.prompt.dec"], h], axis=0)
    h = h + model.positions(length)
    for i in range(cfg.dec_layers):
        def body(z, _n_pre, i=i):
            mask = model.causal_mask(z.shape[0])
            x1 = _ln(model, f"dec.{i}.ln1", z)
            a = z + _attention(model, f"dec.{i}.self", x1, x1, mask)
            b = a + _attention(model, f"dec.{i}.cross",
                               _ln(model, f"dec.{i}.ln2", a), enc, None)
            return b + _ffn(model, f"dec.{i}.ffn", _ln(model, f"dec.{i}.ln3", b))

        h = _with_prefix(model, "dec", i, h, body)
        if model.peft is not None and model.peft.method == "adapter":
            h = _adapter(model, f"dec.{i}", h)
    h = _ln(model, "dec.norm", h)
    logits = h @ model.params["dec.out.w"] + model.params["dec.out.b"]
    if n_prompts:
        logits = slice_axis(logits, 0, n_prompts, logits.shape[0])
    return logits
