"""Causal interventions that plant a sink at an arbitrary position.

Three kinds are supported, all hooked on the aggregated attention output
``o = A @ V`` (before head-wise RMSNorm and before ``W_O``) except MaskBlock,
which rewrites the attention mask:

* ``mask_block``: token ``k`` may only attend to itself.
* ``variance_amplify``: ``o'_k = mu + factor * (o_k - mu)`` with ``mu`` the
  per-layer, per-head mean aggregated output over random-token inputs.
* ``norm_scale``: ``o'_k = factor * o_k``, the norm-only control.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import rng
from .errors import ConfigError, InputError


class Kind(str, Enum):
    MASK_BLOCK = "mask_block"
    VARIANCE_AMPLIFY = "variance_amplify"
    NORM_SCALE = "norm_scale"

    @classmethod
    def parse(cls, name: str) -> "Kind":
        key = name.strip().lower().replace("-", "_")
        aliases = {"maskblock": "mask_block", "varianceamplify": "variance_amplify",
                   "normscale": "norm_scale", "mask": "mask_block", "amplify": "variance_amplify",
                   "scale": "norm_scale"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown intervention kind {name!r}; expected one of "
                              f"{[k.value for k in cls]}") from None


@dataclass(frozen=True)
class InterventionSpec:
    kind: Kind
    position: int
    layers: tuple[int, int] | None = None  # inclusive range, None = every layer
    heads: tuple[int, ...] | None = None  # None = every head
    factor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind) if isinstance(self.kind, str) else self.kind)
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(v) for v in self.layers))
        if self.heads is not None:
            object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if self.kind is Kind.MASK_BLOCK and self.position < 1:
            raise ConfigError("mask_block needs position >= 1 (position 0 already attends only to itself)")
        if self.position < 0:
            raise ConfigError(f"intervention position must be >= 0, got {self.position}")
        if self.kind is not Kind.MASK_BLOCK and not (np.isfinite(self.factor) and self.factor > 0):
            raise ConfigError(f"intervention factor must be finite and > 0, got {self.factor}")

    def validate_for(self, n_layers: int, n_heads: int, seq_len: int | None = None):
        lo, hi = self.layer_range(n_layers)
        if not (0 <= lo <= hi <= n_layers - 1):
            raise ConfigError(f"intervention layers {self.layers} outside [0, {n_layers - 1}]")
        if self.heads is not None and any(not 0 <= h < n_heads for h in self.heads):
            raise ConfigError(f"intervention heads {self.heads} outside [0, {n_heads - 1}]")
        if seq_len is not None and self.position >= seq_len:
            raise InputError(f"intervention position {self.position} >= sequence length {seq_len}")

    def layer_range(self, n_layers: int) -> tuple[int, int]:
        return (0, n_layers - 1) if self.layers is None else self.layers

    def applies_to(self, layer: int, n_layers: int) -> bool:
        lo, hi = self.layer_range(n_layers)
        return lo <= layer <= hi

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kind"] = self.kind.value
        out["layers"] = list(self.layers) if self.layers is not None else None
        out["heads"] = list(self.heads) if self.heads is not None else None
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "InterventionSpec":
        known = {"kind", "position", "layers", "heads", "factor"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown intervention fields {sorted(extra)}")
        if "kind" not in d or "position" not in d:
            raise ConfigError("intervention needs 'kind' and 'position'")
        return cls(kind=d["kind"], position=int(d["position"]), layers=d.get("layers"),
                   heads=d.get("heads"), factor=float(d.get("factor", 1.0)))


@dataclass
class ValueMeanTable:
    """Mean aggregated-output vector per (layer, head), shape ``(L, H, d_k)``."""

    means: np.ndarray
    count: int
    # per-entry standard error of the mean, same shape as ``means``
    stderr: np.ndarray = field(default=None)

    @property
    def n_layers(self) -> int:
        return self.means.shape[0]

    def layer(self, l: int) -> np.ndarray:
        return self.means[l]


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def apply_mask_block(mask: np.ndarray, k: int) -> np.ndarray:
    """Copy of ``mask`` whose row ``k`` permits only column ``k``."""
    T = mask.shape[-1]
    if not 1 <= k < T:
        raise InputError(f"mask_block position {k} outside [1, {T - 1}]")
    out = mask.copy()
    out[..., k, :] = False
    out[..., k, k] = True
    return out


def apply_variance_amplify(o: np.ndarray, mu: np.ndarray, factor: float) -> np.ndarray:
    o = np.asarray(o)
    mu = np.asarray(mu)
    if o.shape[-1] != mu.shape[-1]:
        raise InputError(f"aggregated output length {o.shape[-1]} != mean length {mu.shape[-1]}")
    return mu + factor * (o - mu)


def apply_norm_scale(o: np.ndarray, factor: float) -> np.ndarray:
    return factor * np.asarray(o)


def layer_mask(base: np.ndarray, specs: Sequence[InterventionSpec], layer: int, n_layers: int,
               n_heads: int) -> np.ndarray:
    """Attention mask for one layer after every MaskBlock targeting it.

    Returns ``(T, T)`` when all blocks cover every head, else ``(H, T, T)``.
    """
    blocks = [s for s in specs if s.kind is Kind.MASK_BLOCK and s.applies_to(layer, n_layers)]
    if not blocks:
        return base
    if all(s.heads is None for s in blocks):
        mask = base
        for s in blocks:
            mask = apply_mask_block(mask, s.position)
        return mask
    mask = np.broadcast_to(base, (n_heads,) + base.shape).copy()
    for s in blocks:
        hs = range(n_heads) if s.heads is None else s.heads
        for h in hs:
            mask[h] = apply_mask_block(mask[h], s.position)
    return mask


def estimate_value_means(model, n_sequences: int = 64, seq_len: int = 128, seed: int = 0,
                         chunk: int = 16) -> ValueMeanTable:
    """Mean aggregated output per layer and head over uniformly random tokens.

    Averages over both the batch and sequence axes.
    """
    cfg = model.config
    if n_sequences < 1:
        raise InputError("n_sequences must be >= 1")
    seq_len = min(seq_len, cfg.max_seq_len)
    gen = rng.stream(seed, "value_means")
    tokens = gen.integers(0, cfg.vocab_size, size=(n_sequences, seq_len))
    # standard error is taken over per-sequence means; positions within one
    # sequence are correlated
    total = np.zeros((cfg.n_layers, cfg.n_heads, cfg.d_head))
    total_sq = np.zeros_like(total)
    for start in range(0, n_sequences, chunk):
        _, traces = model.forward(tokens[start:start + chunk], capture=("agg",))
        for l, tr in enumerate(traces):
            per_seq = tr.agg.astype(np.float64).mean(axis=2)  # (B, H, dk)
            total[l] += per_seq.sum(axis=0)
            total_sq[l] += (per_seq * per_seq).sum(axis=0)
    means = total / n_sequences
    if n_sequences > 1:
        var = np.maximum(total_sq / n_sequences - means ** 2, 0.0) * n_sequences / (n_sequences - 1)
        stderr = np.sqrt(var / n_sequences)
    else:
        stderr = np.full_like(means, np.nan)
    return ValueMeanTable(means=means, count=n_sequences * seq_len, stderr=stderr)
