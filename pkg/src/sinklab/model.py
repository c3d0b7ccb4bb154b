"""Pre-norm decoder-only transformer with swappable attention normalisation.

Each block computes::

    h     = x + W_O(agg(Norm(x)))
    x_out = h + FFN(Norm(h)),   FFN(z) = (silu(z W_gate) * z W_up) W_down

where ``agg`` is per-head RoPE attention followed by value aggregation.  The
three variants differ only inside ``agg``:

* ``softmax``  -- row-stochastic causal softmax (the baseline),
* ``sigmoid``  -- elementwise sigmoid of the logits, no row normalisation,
* ``headnorm`` -- softmax, then every aggregated head vector is RMS-normalised
  and multiplied by a learnable ``d_head`` gain shared across heads.

Forward passes can capture a :class:`LayerTrace` per layer, which is what the
diagnostics consume.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import rng
from . import tensor as T
from .errors import ConfigError, InputError, NumericError
from .interventions import InterventionSpec, Kind, ValueMeanTable, causal_mask, layer_mask
from .tensor import Tensor


class Variant(str, Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    HEADNORM = "headnorm"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, Variant):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        aliases = {"softmax": "softmax", "baseline": "softmax", "sigmoid": "sigmoid",
                   "headnorm": "headnorm", "headnormsoftmax": "headnorm", "headrmsnorm": "headnorm"}
        if key not in aliases:
            raise ConfigError(f"unknown attention variant {name!r}; expected softmax, sigmoid or headnorm")
        return cls(aliases[key])

    @property
    def row_stochastic(self) -> bool:
        return self is not Variant.SIGMOID


@dataclass
class ModelConfig:
    d_model: int = 256
    d_ff: int = 1024
    d_head: int = 32
    n_heads: int = 8
    n_layers: int = 6
    max_seq_len: int = 256
    vocab_size: int = 259
    variant: Variant = Variant.SOFTMAX
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    head_norm_eps: float = 1e-10
    init_std: float = 0.02

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.validate()

    def validate(self):
        for name in ("d_model", "d_ff", "d_head", "n_heads", "n_layers", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.max_seq_len < 2:
            raise ConfigError(f"model.max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(f"model.d_model ({self.d_model}) must equal n_heads * d_head "
                              f"({self.n_heads} * {self.d_head})")
        if self.d_head % 2:
            raise ConfigError(f"model.d_head must be even for rotary embeddings, got {self.d_head}")
        for name in ("rope_base", "norm_eps", "head_norm_eps", "init_std"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"model.{name} must be a positive real, got {v}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model fields {sorted(extra)}")
        return cls(**d)


TRACE_FIELDS = ("x_in", "attn_in", "q", "k", "v", "attn", "agg", "agg_final", "attn_out", "h",
                "ffn_in", "gate", "up", "mid", "ffn_out", "x_out")


@dataclass
class LayerTrace:
    """Intermediates of one block; unrequested fields stay None.

    Head tensors are ``(B, H, T, d_head)``, attention is ``(B, H, T, T)`` and
    residual-width tensors are ``(B, T, d)``.  ``agg`` is the raw ``A @ V``;
    ``agg_final`` is what enters ``W_O`` (after interventions and, for the
    headnorm variant, head-wise RMSNorm).  ``q`` and ``k`` are post-RoPE.
    """

    layer: int
    x_in: np.ndarray | None = None
    attn_in: np.ndarray | None = None
    q: np.ndarray | None = None
    k: np.ndarray | None = None
    v: np.ndarray | None = None
    attn: np.ndarray | None = None
    agg: np.ndarray | None = None
    agg_final: np.ndarray | None = None
    attn_out: np.ndarray | None = None
    h: np.ndarray | None = None
    ffn_in: np.ndarray | None = None
    gate: np.ndarray | None = None
    up: np.ndarray | None = None
    mid: np.ndarray | None = None
    ffn_out: np.ndarray | None = None
    x_out: np.ndarray | None = None


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"embed": (V, d)}
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        if cfg.variant is Variant.HEADNORM:
            shapes[p + "head_norm"] = (cfg.d_head,)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "w_gate"] = (d, f)
        shapes[p + "w_up"] = (d, f)
        shapes[p + "w_down"] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, V)
    return shapes


def is_gain(name: str) -> bool:
    return name.endswith("_norm")


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32,
                head_norm_probe: tuple[int, int] = (64, 8)) -> dict[str, Tensor]:
    """Normal(0, 0.02) weights; output maps (W_O, W_down) use 0.02/sqrt(2L).

    RMSNorm gains start at one.  Head-norm gains start at the per-dimension
    standard deviation of the first token's aggregated output, measured on a
    batch of random tokens (pooled over batch and heads, layer by layer).
    """
    out_std = cfg.init_std / math.sqrt(2 * cfg.n_layers)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if is_gain(name):
            arr = np.ones(shape)
        else:
            std = out_std if name.endswith((".wo", ".w_down")) else cfg.init_std
            arr = rng.stream(seed, f"init/{name}").normal(0.0, std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    if cfg.variant is Variant.HEADNORM:
        model = Transformer(cfg, params)
        n, t = head_norm_probe
        toks = rng.stream(seed, "init/head_norm_probe").integers(0, cfg.vocab_size,
                                                                 size=(n, min(t, cfg.max_seq_len)))
        # later layers see earlier layers' calibrated gains
        for l in range(cfg.n_layers):
            _, traces = model.forward(toks, capture=("agg",), upto=l + 1)
            first = traces[l].agg[:, :, 0, :].astype(np.float64)  # (B, H, dk)
            std = first.reshape(-1, cfg.d_head).std(axis=0)
            std = np.where(std > 0, std, 1.0)
            params[f"layers.{l}.head_norm"].data[...] = std.astype(dtype)
    return params


class Transformer:
    """Parameters plus the forward pass.  Parameters are plain tensors in ``params``."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        expected = param_shapes(config)
        missing = [n for n in expected if n not in params]
        if missing:
            raise ConfigError(f"missing parameters: {missing}")
        for n, shape in expected.items():
            if params[n].shape != shape:
                raise ConfigError(f"parameter {n} has shape {params[n].shape}, expected {shape}")
        self.params = {n: params[n] for n in expected}
        self._rope_cache: dict = {}

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Transformer":
        return cls(config, init_params(config, seed, dtype))

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def astype(self, dtype) -> "Transformer":
        return Transformer(self.config, {n: Tensor(p.data.astype(dtype), requires_grad=True, name=n)
                                         for n, p in self.params.items()})

    def n_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def _rope(self, seq_len: int):
        key = (seq_len, self.dtype)
        if key not in self._rope_cache:
            self._rope_cache[key] = T.rope_tables(seq_len, self.config.d_head, self.config.rope_base,
                                                  self.dtype)
        return self._rope_cache[key]

    def forward(self, tokens, interventions: Sequence[InterventionSpec] = (),
                value_means: ValueMeanTable | None = None, capture: bool | Iterable[str] | None = None,
                upto: int | None = None):
        """Return ``(logits, traces)``.

        ``tokens`` is ``(T,)`` or ``(B, T)``; logits are ``(T, V)`` or
        ``(B, T, V)`` to match.  ``traces`` is None unless ``capture`` is
        True (every field) or a collection of :data:`TRACE_FIELDS`.  ``upto``
        stops after that many blocks and returns no logits.
        """
        cfg = self.config
        toks = np.asarray(tokens)
        squeeze = toks.ndim == 1
        if squeeze:
            toks = toks[None]
        if toks.ndim != 2:
            raise InputError(f"tokens must be 1-D or 2-D, got shape {toks.shape}")
        if not np.issubdtype(toks.dtype, np.integer):
            raise InputError("token ids must be integers")
        B, seq = toks.shape
        if seq < 1 or seq > cfg.max_seq_len:
            raise InputError(f"sequence length {seq} outside [1, {cfg.max_seq_len}]")
        if toks.size and (toks.min() < 0 or toks.max() >= cfg.vocab_size):
            raise InputError(f"token id out of range [0, {cfg.vocab_size})")
        for spec in interventions:
            spec.validate_for(cfg.n_layers, cfg.n_heads, seq)
            if spec.kind is Kind.VARIANCE_AMPLIFY and value_means is None:
                raise InputError("variance_amplify needs a ValueMeanTable (value_means=...)")

        if capture is True:
            want = set(TRACE_FIELDS)
        elif capture:
            want = set(capture)
            unknown = want - set(TRACE_FIELDS)
            if unknown:
                raise InputError(f"unknown trace fields {sorted(unknown)}")
        else:
            want = set()

        x = T.embedding(self.params["embed"], toks)
        base = causal_mask(seq)
        traces = [] if want else None
        n_blocks = cfg.n_layers if upto is None else upto
        for l in range(n_blocks):
            mask = layer_mask(base, interventions, l, cfg.n_layers, cfg.n_heads)
            specs = [s for s in interventions if s.kind is not Kind.MASK_BLOCK and s.applies_to(l, cfg.n_layers)]
            tr = LayerTrace(layer=l) if want else None
            x = self.block_forward(l, x, mask, specs, value_means, tr, want)
            if tr is not None:
                traces.append(tr)
        if upto is not None:
            return None, traces
        x = T.rmsnorm(x, self.params["final_norm"], cfg.norm_eps)
        logits = T.matmul(x, self.params["lm_head"])
        if squeeze:
            logits = T.reshape(logits, logits.shape[1:])
        return logits, traces

    __call__ = forward

    def block_forward(self, l: int, x: Tensor, mask: np.ndarray, specs: Sequence[InterventionSpec] = (),
                      value_means: ValueMeanTable | None = None, trace: LayerTrace | None = None,
                      want: set | frozenset = frozenset()) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"layers.{l}."
        B, seq, d = x.shape
        H, dk = cfg.n_heads, cfg.d_head
        stage = "attn_norm"

        def keep(name, t):
            if name in want:
                setattr(trace, name, t.data.copy())

        try:
            keep("x_in", x)
            a_in = T.rmsnorm(x, p[pre + "attn_norm"], cfg.norm_eps)
            keep("attn_in", a_in)
            stage = "qkv"
            heads = []
            for w in ("wq", "wk", "wv"):
                y = T.reshape(T.matmul(a_in, p[pre + w]), (B, seq, H, dk))
                heads.append(T.transpose(y, (0, 2, 1, 3)))
            q, k, v = heads
            stage = "rope"
            tables = self._rope(seq)
            q = T.rope(q, cfg.rope_base, tables)
            k = T.rope(k, cfg.rope_base, tables)
            keep("q", q)
            keep("k", k)
            keep("v", v)
            stage = "attention_scores"
            logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
            if cfg.variant is Variant.SIGMOID:
                attn = T.masked_sigmoid(logits, mask)
            else:
                attn = T.masked_softmax(logits, mask)
            keep("attn", attn)
            stage = "value_aggregate"
            o = T.matmul(attn, v)
            keep("agg", o)
            stage = "intervention"
            for s in specs:
                if s.kind is Kind.VARIANCE_AMPLIFY:
                    shift = (1.0 - s.factor) * value_means.layer(l)
                    o = T.position_affine(o, s.position, s.factor, shift, s.heads)
                elif s.kind is Kind.NORM_SCALE:
                    o = T.position_affine(o, s.position, s.factor, None, s.heads)
            if cfg.variant is Variant.HEADNORM:
                stage = "head_norm"
                o = T.rmsnorm(o, p[pre + "head_norm"], cfg.head_norm_eps)
            keep("agg_final", o)
            stage = "w_o"
            merged = T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, seq, d))
            attn_out = T.matmul(merged, p[pre + "wo"])
            keep("attn_out", attn_out)
            h = T.add(x, attn_out)
            keep("h", h)
            stage = "ffn"
            f_in = T.rmsnorm(h, p[pre + "ffn_norm"], cfg.norm_eps)
            keep("ffn_in", f_in)
            gate = T.matmul(f_in, p[pre + "w_gate"])
            up = T.matmul(f_in, p[pre + "w_up"])
            mid = T.mul(T.silu(gate), up)
            keep("gate", gate)
            keep("up", up)
            keep("mid", mid)
            f_out = T.matmul(mid, p[pre + "w_down"])
            keep("ffn_out", f_out)
            out = T.add(h, f_out)
            keep("x_out", out)
        except NumericError as e:
            raise NumericError(f"layer {l}, {stage}: {e}") from None
        return out

    def loss(self, inputs, targets) -> Tensor:
        logits, _ = self.forward(inputs)
        return T.cross_entropy(logits, np.asarray(targets))


# Small standalone pieces, handy for tests and diagnostics.


def rmsnorm_vec(x, gamma, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * np.asarray(gamma)


def head_rmsnorm_vec(o, lam, eps: float = 1e-10) -> np.ndarray:
    return rmsnorm_vec(o, lam, eps)


def swiglu_ffn(x, w_gate, w_up, w_down):
    """Return ``(out, gate, up, mid)`` for plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    gate = x @ w_gate
    up = x @ w_up
    mid = gate / (1 + np.exp(-gate)) * up
    return mid @ w_down, gate, up, mid


def attention_scores(q, k, variant: Variant = Variant.SOFTMAX, mask: np.ndarray | None = None) -> np.ndarray:
    q = Tensor(np.asarray(q, dtype=np.float64))
    k = Tensor(np.asarray(k, dtype=np.float64))
    seq, dk = q.shape
    if mask is None:
        mask = causal_mask(seq)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    if Variant.parse(variant) is Variant.SIGMOID:
        return T.masked_sigmoid(logits, mask).data
    return T.masked_softmax(logits, mask).data


def value_aggregate(attn, v) -> np.ndarray:
    return np.asarray(attn) @ np.asarray(v)
