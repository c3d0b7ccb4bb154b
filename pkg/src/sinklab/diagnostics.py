"""Measurements over layer traces and parameters.

All functions are pure; they read float32 traces and accumulate in float64.
"Traces" is the list of :class:`~sinklab.model.LayerTrace` returned by a
captured forward pass over a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DomainError, InputError, StatisticsError
from .linalg import jacobi_svd, singular_values


@dataclass(frozen=True)
class MetricRecord:
    metric: str
    layer: int | None
    value: float
    n: int
    head: int | None = None
    position: int | None = None
    dimension: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise DomainError(f"metric {self.metric} has non-finite value {self.value}")


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _field(traces, layer: int, name: str) -> np.ndarray:
    if not 0 <= layer < len(traces):
        raise InputError(f"layer {layer} outside [0, {len(traces) - 1}]")
    arr = getattr(traces[layer], name)
    if arr is None:
        raise InputError(f"trace for layer {layer} was captured without {name!r}")
    return arr


def _weight(params, name) -> np.ndarray:
    w = params[name]
    return _f64(getattr(w, "data", w))


def _attn(traces, layer) -> np.ndarray:
    A = _f64(_field(traces, layer, "attn"))
    return A[None] if A.ndim == 3 else A  # (B, H, T, T)


# -- attention mass ---------------------------------------------------------------


def sink_score(traces, layer: int) -> float:
    """Mean attention that query positions 1..T-1 put on position 0, over heads and batch."""
    A = _attn(traces, layer)
    if A.shape[-1] < 2:
        raise InputError("sink score needs sequence length >= 2")
    return float(A[:, :, 1:, 0].mean())


def received_attention_profile(traces, layer: int) -> np.ndarray:
    """``recv[j]`` = mean of ``A[t, j]`` over heads, batch and queries ``t >= max(j, 1)``."""
    A = _attn(traces, layer)
    seq = A.shape[-1]
    t = np.arange(seq)[:, None]
    visible = t >= np.maximum(np.arange(seq), 1)[None, :]  # (T_query, T_key)
    counts = visible.sum(axis=0)
    col = (A.mean(axis=(0, 1)) * visible).sum(axis=0)
    out = np.zeros(seq)
    ok = counts > 0
    out[ok] = col[ok] / counts[ok]
    return out


# -- positional statistics ---------------------------------------------------------

STAGES = {"post_aggregation": "agg", "pre_wo": "agg_final", "post_wo": "attn_out",
          "block_input": "x_in", "block_output": "x_out"}


def stage_activations(traces, layer: int, stage: str) -> np.ndarray:
    """Activations at ``stage`` as ``(B, T, width)``; head tensors are concatenated per position."""
    if stage not in STAGES:
        raise InputError(f"unknown stage {stage!r}; expected one of {sorted(STAGES)}")
    arr = _field(traces, layer, STAGES[stage])
    if arr.ndim == 4:  # (B, H, T, dk) -> (B, T, H*dk)
        B, H, seq, dk = arr.shape
        arr = arr.transpose(0, 2, 1, 3).reshape(B, seq, H * dk)
    return arr


def positional_std(acts) -> np.ndarray:
    """Per-position mean over dimensions of the std over the batch; ``acts`` is ``(B, T, width)``."""
    acts = _f64(acts)
    if acts.shape[0] < 2:
        raise StatisticsError("positional variance needs a batch of at least 2 sequences")
    return acts.std(axis=0, ddof=1).mean(axis=-1)


def positional_variance(traces, layer: int, stage: str = "post_aggregation") -> np.ndarray:
    return positional_std(stage_activations(traces, layer, stage))


def dimension_std(traces, layer: int, stage: str = "pre_wo", position: int = 0) -> np.ndarray:
    """Std over the batch of every dimension at one position (``sigma_in`` for W_O alignment)."""
    acts = _f64(stage_activations(traces, layer, stage))
    if acts.shape[0] < 2:
        raise StatisticsError("dimension std needs a batch of at least 2 sequences")
    return acts[:, position, :].std(axis=0, ddof=1)


def representation_norm(traces, layer: int, position: int = 0) -> float:
    """Mean L2 norm of the block input at ``position``."""
    x = _f64(_field(traces, layer, "x_in"))
    return float(np.linalg.norm(x[:, position, :], axis=-1).mean())


# -- rank correlation --------------------------------------------------------------


def _tie_pairs(sorted_vals: np.ndarray) -> int:
    if sorted_vals.size == 0:
        return 0
    _, counts = np.unique(sorted_vals, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _count_inversions(a: np.ndarray) -> int:
    """Pairs ``i < j`` with ``a[i] > a[j]`` (strict), by bottom-up merging."""
    a = np.asarray(a, dtype=np.int64)
    n = a.size
    total = 0
    width = 1
    span = n + 1
    while width < n:
        idx = np.arange(n)
        block = idx // (2 * width)
        right = (idx // width) % 2 == 1
        keyed = block * span + a
        left_keys = keyed[~right]  # increasing: sorted within blocks, blocks in order
        rk = keyed[right]
        rb = block[right]
        # number of left elements in the same block that exceed each right element
        upto = np.searchsorted(left_keys, rk, side="right")
        block_end = np.searchsorted(left_keys, (rb + 1) * span, side="left")
        total += int((block_end - upto).sum())
        a = np.sort(keyed, kind="stable") - block * span
        width *= 2
    return total


def kendall_tau(a, b) -> float | None:
    """Tie-corrected Kendall tau-b in O(n log^2 n).  Returns None if either side is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n = a.size
    if b.size != n:
        raise InputError(f"kendall_tau inputs differ in length: {n} vs {b.size}")
    if n < 2:
        raise InputError("kendall_tau needs at least 2 observations")
    ra = np.unique(a, return_inverse=True)[1]
    rb = np.unique(b, return_inverse=True)[1]
    order = np.lexsort((rb, ra))
    ra, rb = ra[order], rb[order]
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(ra)
    n2 = _tie_pairs(rb)
    n3 = _tie_pairs(ra.astype(np.int64) * (n + 1) + rb)
    if n1 == n0 or n2 == n0:
        return None
    swaps = _count_inversions(rb)
    numer = n0 - n1 - n2 + n3 - 2 * swaps
    return numer / math.sqrt(float((n0 - n1) * (n0 - n2)))


@dataclass
class AlignmentReport:
    taus: np.ndarray  # one per output neuron, NaN where undefined
    mean: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def wo_alignment(w_o, sigma_in, bins: int = 20) -> AlignmentReport:
    """Kendall tau between ``|W_O[:, j]|`` and the first token's per-dimension std, for every j."""
    w = np.abs(_f64(w_o))
    sigma = _f64(sigma_in)
    if w.shape[0] != sigma.shape[0]:
        raise InputError(f"W_O has {w.shape[0]} input rows but sigma_in has {sigma.shape[0]} entries")
    taus = np.array([np.nan if (t := kendall_tau(w[:, j], sigma)) is None else t for j in range(w.shape[1])])
    ok = taus[np.isfinite(taus)]
    counts, edges = np.histogram(ok, bins=bins, range=(-1, 1))
    return AlignmentReport(taus, float(ok.mean()) if ok.size else float("nan"), counts, edges)


# -- FFN super neurons --------------------------------------------------------------


def excess_kurtosis(x) -> float:
    x = _f64(x)
    c = x - x.mean()
    m2 = (c * c).mean()
    if m2 == 0:
        return 0.0
    return float((c ** 4).mean() / m2 ** 2 - 3.0)


@dataclass
class SuperNeuronReport:
    gate_norms: np.ndarray
    up_norms: np.ndarray
    top: np.ndarray  # neuron indices, by descending score
    top_scores: np.ndarray
    flagged: np.ndarray  # neurons with score > mean + 4 std
    down_row_norms: np.ndarray  # for each top neuron
    down_kurtosis: np.ndarray
    down_outliers: list  # per top neuron: dims with |w| > 6 * row std
    heavy_tailed: np.ndarray  # per top neuron: kurtosis > 3 or any outlier

    @property
    def top_to_median(self) -> float:
        score = score_neurons(self.gate_norms, self.up_norms)
        med = float(np.median(score))
        return float(self.top_scores[0] / med) if med > 0 else float("inf")


def score_neurons(gate_norms, up_norms) -> np.ndarray:
    """Geometric mean of the gate and up column norms."""
    return np.sqrt(_f64(gate_norms) * _f64(up_norms))


def super_neuron_scan_weights(w_gate, w_up, w_down, top_k: int = 8) -> SuperNeuronReport:
    gate_n = np.linalg.norm(_f64(w_gate), axis=0)
    up_n = np.linalg.norm(_f64(w_up), axis=0)
    score = score_neurons(gate_n, up_n)
    top = np.argsort(-score, kind="stable")[:top_k]
    flagged = np.flatnonzero(score > score.mean() + 4 * score.std())
    wd = _f64(w_down)
    rows = wd[top]
    norms = np.linalg.norm(rows, axis=1)
    kurt = np.array([excess_kurtosis(r) for r in rows])
    outliers = [np.flatnonzero(np.abs(r) > 6 * r.std()) for r in rows]
    heavy = np.array([k > 3 or o.size > 0 for k, o in zip(kurt, outliers)])
    return SuperNeuronReport(gate_n, up_n, top, score[top], flagged, norms, kurt, outliers, heavy)


def super_neuron_scan(params, layer: int, top_k: int = 8) -> SuperNeuronReport:
    """Rank FFN neurons by the norms of their gate and up columns, then inspect their down rows."""
    p = f"layers.{layer}."
    return super_neuron_scan_weights(_weight(params, p + "w_gate"), _weight(params, p + "w_up"),
                                     _weight(params, p + "w_down"), top_k)


def cosine(a, b, axis: int = -1):
    """Cosine along ``axis``; NaN where either vector is zero."""
    a, b = _f64(a), _f64(b)
    na = np.linalg.norm(a, axis=axis)
    nb = np.linalg.norm(b, axis=axis)
    dot = (a * b).sum(axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = dot / (na * nb)
    return np.where((na > 0) & (nb > 0), out, np.nan)


def neuron_activation_trace(trace, params, layer: int, neuron: int):
    """Per position: cos(x_norm, gate column j) and the raw up-projection <x_norm, up column j>.

    ``trace`` is the LayerTrace of ``layer``.  Returns two ``(B, T)`` arrays;
    the cosine is NaN where the normalised input is zero.
    """
    x = _f64(_field([trace], 0, "ffn_in"))
    wg = _weight(params, f"layers.{layer}.w_gate")[:, neuron]
    wu = _weight(params, f"layers.{layer}.w_up")[:, neuron]
    return cosine(x, np.broadcast_to(wg, x.shape)), x @ wu


# -- dimension disparity and rank ------------------------------------------------------


def dominance_ratio(h) -> float:
    """``max |h_j|`` over the mean ``|h_k|``."""
    h = np.abs(_f64(h)).ravel()
    total = h.sum()
    if total == 0:
        raise DomainError("dominance ratio of an all-zero vector is undefined")
    return float(h.max() / (total / h.size))


def effective_rank(hmat, tol: float = 1e-8) -> float:
    """``exp(entropy)`` of the singular values normalised to sum to one."""
    h = _f64(hmat)
    if h.ndim != 2:
        raise InputError(f"effective rank needs a matrix, got shape {h.shape}")
    if not np.isfinite(h).all():
        raise DomainError("effective rank of a non-finite matrix")
    s = singular_values(h, tol=tol)
    return effective_rank_from_singular_values(s)


def effective_rank_from_singular_values(s) -> float:
    s = _f64(s)
    total = s.sum()
    if total <= 0:
        raise DomainError("effective rank of an all-zero matrix is undefined")
    p = s[s > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


# -- QK locking -------------------------------------------------------------------------


def principal_query_direction(w_q_head) -> np.ndarray:
    """Right singular vector (length d_head) of ``W_Q^(h)`` with the largest singular value."""
    _, v, _ = jacobi_svd(w_q_head)
    return v[:, 0]


def qk_locking_report(params, traces, layer: int, n_heads: int):
    """Per head: ``|cos(u_1, k_0)|`` (batch mean) and the fraction of ``<q_t, k_0> > 0``.

    Returns ``(alignment, positive_ratio)`` arrays of length ``n_heads``;
    alignment is NaN for heads whose first key is zero.
    """
    wq = _weight(params, f"layers.{layer}.wq")
    q = _f64(_field(traces, layer, "q"))
    k = _f64(_field(traces, layer, "k"))
    dk = q.shape[-1]
    align = np.full(n_heads, np.nan)
    pos = np.zeros(n_heads)
    for h in range(n_heads):
        u1 = principal_query_direction(wq[:, h * dk:(h + 1) * dk])
        k0 = k[:, h, 0, :]  # (B, dk)
        c = np.abs(cosine(k0, np.broadcast_to(u1, k0.shape)))
        if np.isfinite(c).any():
            align[h] = float(np.nanmean(c))
        dots = np.einsum("btd,bd->bt", q[:, h], k0)
        pos[h] = float((dots > 0).mean())
    return align, pos


def attention_entropy(A) -> np.ndarray:
    """Row entropy with 0 ln 0 = 0, over the last axis."""
    A = _f64(A)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(A > 0, A * np.log(np.where(A > 0, A, 1)), 0.0)
    return -terms.sum(axis=-1)


@dataclass
class HeadStats:
    entropy: np.ndarray  # per head
    output_std: np.ndarray  # per head
    renormalized: bool  # True when rows were rescaled to sum to one first (sigmoid attention)


def head_entropy_std(traces, layer: int, renormalize: bool | None = None) -> HeadStats:
    """Mean attention entropy and std of the aggregated output (as fed to W_O), per head."""
    A = _attn(traces, layer)
    rows = A.sum(axis=-1, keepdims=True)
    if renormalize is None:
        renormalize = not np.allclose(rows, 1.0, atol=1e-4)
    if renormalize:
        A = A / np.where(rows > 0, rows, 1)
    ent = attention_entropy(A).mean(axis=(0, 2))
    o = _f64(_field(traces, layer, "agg_final"))
    std = o.transpose(1, 0, 2, 3).reshape(o.shape[1], -1).std(axis=1)
    return HeadStats(ent, std, bool(renormalize))


def first_token_key(params, layer: int, x0, n_heads: int, eps: float = 1e-6) -> np.ndarray:
    """Per-head key of a raw block input vector ``x0`` (position 0, so RoPE is identity)."""
    p = f"layers.{layer}."
    gamma = _weight(params, p + "attn_norm")
    wk = _weight(params, p + "wk")
    x0 = _f64(x0)
    xn = x0 / np.sqrt(np.mean(x0 * x0) + eps) * gamma
    return (xn @ wk).reshape(n_heads, -1)


def key_row_cosines(params, layer: int, k0, outlier_dim: int) -> np.ndarray:
    """``cos(k_0^(h), W_K[c, head h])`` per head; ``k0`` is ``(H, d_head)``."""
    wk = _weight(params, f"layers.{layer}.wk")
    k0 = _f64(k0)
    H, dk = k0.shape
    row = wk[outlier_dim].reshape(H, dk)
    return cosine(k0, row)


def key_approximation_check(params, traces, layer: int, outlier_dim: int) -> np.ndarray:
    """Batch-mean per-head cosine between the first-token key and row ``outlier_dim`` of W_K."""
    k = _f64(_field(traces, layer, "k"))
    cos = np.stack([key_row_cosines(params, layer, k[b, :, 0, :], outlier_dim) for b in range(k.shape[0])])
    return np.nanmean(cos, axis=0)


# -- record generators for reports -----------------------------------------------------


def _layers(traces):
    return range(len(traces))


def records_sink_score(model, traces, tokens) -> Iterator[MetricRecord]:
    B = _attn(traces, 0).shape[0]
    for l in _layers(traces):
        yield MetricRecord("sink_score", l, sink_score(traces, l), B)


def records_received_attention(model, traces, tokens) -> Iterator[MetricRecord]:
    for l in _layers(traces):
        prof = received_attention_profile(traces, l)
        for j, v in enumerate(prof):
            yield MetricRecord("received_attention", l, float(v), _attn(traces, l).shape[0], position=j)


def records_positional_variance(model, traces, tokens) -> Iterator[MetricRecord]:
    for l in _layers(traces):
        for stage in ("post_aggregation", "post_wo"):
            prof = positional_variance(traces, l, stage)
            B = traces[l].attn.shape[0] if traces[l].attn is not None else len(tokens)
            for t, v in enumerate(prof):
                yield MetricRecord(f"positional_variance.{stage}", l, float(v), B, position=t)


def records_representation_norm(model, traces, tokens) -> Iterator[MetricRecord]:
    for l in _layers(traces):
        yield MetricRecord("representation_norm", l, representation_norm(traces, l, 0), len(tokens), position=0)


def records_dominance_ratio(model, traces, tokens) -> Iterator[MetricRecord]:
    for l in _layers(traces):
        x = _f64(_field(traces, l, "x_out"))[:, 0, :]
        vals = [dominance_ratio(r) for r in x]
        yield MetricRecord("dominance_ratio", l, float(np.mean(vals)), len(vals), position=0)


def records_effective_rank(model, traces, tokens) -> Iterator[MetricRecord]:
    for l in _layers(traces):
        x = _f64(_field(traces, l, "x_out"))
        vals = [effective_rank(m) for m in x]
        for v in vals:
            yield MetricRecord("effective_rank", l, v, x.shape[1])
        yield MetricRecord("effective_rank_mean", l, float(np.mean(vals)), len(vals))


def records_wo_alignment(model, traces, tokens) -> Iterator[MetricRecord]:
    for l in _layers(traces):
        sigma = dimension_std(traces, l, "pre_wo", 0)
        rep = wo_alignment(model.params[f"layers.{l}.wo"].data, sigma)
        yield MetricRecord("wo_alignment_mean", l, rep.mean, int(np.isfinite(rep.taus).sum()))
        for j, t in enumerate(rep.taus):
            if np.isfinite(t):
                yield MetricRecord("wo_alignment_tau", l, float(t), sigma.size, dimension=j)


def records_super_neurons(model, traces, tokens) -> Iterator[MetricRecord]:
    for l in range(model.config.n_layers):
        rep = super_neuron_scan(model.params, l)
        for rank, (j, s) in enumerate(zip(rep.top, rep.top_scores)):
            yield MetricRecord("super_neuron_score", l, float(s), rep.gate_norms.size, position=rank, dimension=int(j))
            yield MetricRecord("super_neuron_down_kurtosis", l, float(rep.down_kurtosis[rank]),
                               model.config.d_model, position=rank, dimension=int(j))
        yield MetricRecord("super_neuron_top_to_median", l, rep.top_to_median, rep.gate_norms.size)


def records_neuron_activation(model, traces, tokens) -> Iterator[MetricRecord]:
    for l in _layers(traces):
        rep = super_neuron_scan(model.params, l, top_k=1)
        j = int(rep.top[0])
        cos, up = neuron_activation_trace(traces[l], model.params, l, j)
        for t in range(cos.shape[1]):
            c = cos[:, t]
            if np.isfinite(c).any():
                yield MetricRecord("neuron_gate_cosine", l, float(np.nanmean(c)), int(np.isfinite(c).sum()),
                                   position=t, dimension=j)
            yield MetricRecord("neuron_up_activation", l, float(up[:, t].mean()), up.shape[0], position=t, dimension=j)


def records_qk_locking(model, traces, tokens) -> Iterator[MetricRecord]:
    H = model.config.n_heads
    for l in _layers(traces):
        align, pos = qk_locking_report(model.params, traces, l, H)
        for h in range(H):
            if np.isfinite(align[h]):
                yield MetricRecord("qk_svd_alignment", l, float(align[h]), len(tokens), head=h)
            yield MetricRecord("qk_positive_ratio", l, float(pos[h]), len(tokens), head=h)


def records_head_entropy_std(model, traces, tokens) -> Iterator[MetricRecord]:
    for l in _layers(traces):
        st = head_entropy_std(traces, l)
        name = "head_entropy_renormalized" if st.renormalized else "head_entropy"
        for h in range(len(st.entropy)):
            yield MetricRecord(name, l, float(st.entropy[h]), len(tokens), head=h)
            yield MetricRecord("head_output_std", l, float(st.output_std[h]), len(tokens), head=h)


def records_key_approximation(model, traces, tokens) -> Iterator[MetricRecord]:
    for l in _layers(traces):
        x0 = _f64(_field(traces, l, "x_in"))[:, 0, :]
        c = int(np.argmax(np.abs(x0).mean(axis=0)))
        cos = key_approximation_check(model.params, traces, l, c)
        for h, v in enumerate(cos):
            if np.isfinite(v):
                yield MetricRecord("key_row_cosine", l, float(v), len(tokens), head=h, dimension=c)


@dataclass(frozen=True)
class Analysis:
    fields: tuple[str, ...]
    run: Callable


REGISTRY: dict[str, Analysis] = {
    "sink_score": Analysis(("attn",), records_sink_score),
    "received_attention": Analysis(("attn",), records_received_attention),
    "positional_variance": Analysis(("agg", "attn_out"), records_positional_variance),
    "representation_norm": Analysis(("x_in",), records_representation_norm),
    "dominance_ratio": Analysis(("x_out",), records_dominance_ratio),
    "effective_rank": Analysis(("x_out",), records_effective_rank),
    "wo_alignment": Analysis(("agg_final",), records_wo_alignment),
    "super_neurons": Analysis((), records_super_neurons),
    "neuron_activation": Analysis(("ffn_in",), records_neuron_activation),
    "qk_locking": Analysis(("q", "k"), records_qk_locking),
    "head_entropy_std": Analysis(("attn", "agg_final"), records_head_entropy_std),
    "key_approximation": Analysis(("x_in", "k"), records_key_approximation),
}


def run_analyses(model, tokens, names: Sequence[str]) -> Iterator[MetricRecord]:
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise InputError(f"unknown analyses {unknown}; valid: {sorted(REGISTRY)}")
    wanted = set()
    for n in names:
        wanted |= set(REGISTRY[n].fields)
    wanted = wanted or {"x_out"}
    _, traces = model.forward(tokens, capture=tuple(sorted(wanted)))
    for n in names:
        yield from REGISTRY[n].run(model, traces, tokens)


def final_checkpoint_records(model, tokens) -> list[MetricRecord]:
    """Per-layer sink score, first-token dominance ratio and block-output effective rank."""
    return list(run_analyses(model, tokens, ["sink_score", "dominance_ratio", "effective_rank",
                                            "representation_norm"]))


def layer_values(records, metric: str) -> np.ndarray:
    """Values of ``metric`` ordered by layer, from records or row dicts."""
    rows = [(r["layer"], r["value"]) if isinstance(r, dict) else (r.layer, r.value) for r in records
            if (r["metric"] if isinstance(r, dict) else r.metric) == metric]
    rows.sort()
    return np.array([v for _, v in rows])
