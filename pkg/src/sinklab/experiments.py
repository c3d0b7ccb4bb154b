"""Shared recipes for the scripted experiments and the acceptance suite.

Runs are cached by directory: a run whose ``checkpoints/final.snkl`` exists
and whose stored config matches the recipe is reused, otherwise it is
trained from scratch.
"""

from __future__ import annotations

import logging
import os
import sysconfig
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import diagnostics as D
from . import io as sio
from .interventions import InterventionSpec, Kind, estimate_value_means
from .model import ModelConfig, Transformer, Variant
from .training import TrainConfig, train_run

log = logging.getLogger(__name__)

# Narrower and shallower than the desk defaults so that three seeds train in
# about an hour on a single CPU core.
DESK_MODEL = ModelConfig(d_model=128, d_ff=512, d_head=16, n_heads=8, n_layers=4, max_seq_len=128)
DESK_TRAIN = TrainConfig(peak_lr=2e-3, min_lr=2e-4, warmup_iters=100, max_iters=3000, batch_size=16,
                         block_size=128, eval_interval=100, checkpoint_interval=1000)
SEEDS = (0, 1, 2)
CORPUS_BYTES = 8_000_000


def runs_root() -> Path:
    """Cache directory for the recipe runs: ``$SINKLAB_RUNS`` or ``~/runs/acceptance``."""
    return Path(os.environ.get("SINKLAB_RUNS", Path.home() / "runs" / "acceptance"))


def default_corpus_path() -> Path:
    return Path(os.environ.get("SINKLAB_CORPUS", Path.home() / "data" / "corpus.bin"))


def stdlib_corpus(max_bytes: int = CORPUS_BYTES) -> np.ndarray:
    """Concatenated standard-library sources as byte ids (deterministic order)."""
    root = Path(sysconfig.get_paths()["stdlib"])
    parts, total = [], 0
    for f in sorted(root.rglob("*.py")):
        if {"site-packages", "test", "tests"} & set(f.parts):
            continue
        b = f.read_bytes()
        parts.append(b)
        total += len(b) + 1
        if total >= max_bytes:
            break
    data = b"\n".join(parts)[:max_bytes]
    return np.frombuffer(data, dtype=np.uint8).astype(np.uint16)


def load_corpus(path: Path | None = None) -> np.ndarray:
    path = path or default_corpus_path()
    if Path(path).exists():
        return sio.TokenStream.open(path).tokens
    return stdlib_corpus()


def recipe(variant: Variant | str, seed: int, model: ModelConfig = DESK_MODEL,
           train: TrainConfig = DESK_TRAIN) -> tuple[ModelConfig, TrainConfig]:
    return replace(model, variant=Variant.parse(variant)), replace(train, seed=seed)


def run_dir(root: Path, variant: Variant | str, seed: int) -> Path:
    return Path(root) / f"{Variant.parse(variant).value}_seed{seed}"


def ensure_run(root: Path, variant: Variant | str, seed: int, corpus: np.ndarray | None = None,
               model: ModelConfig = DESK_MODEL, train: TrainConfig = DESK_TRAIN) -> Path:
    """Path of the final checkpoint for (variant, seed), training it if absent or stale."""
    mc, tc = recipe(variant, seed, model, train)
    out = run_dir(root, variant, seed)
    final = out / "checkpoints" / "final.snkl"
    want = {"model": mc.to_dict(), "train": tc.to_dict()}
    if final.exists() and (out / "config.json").exists() and sio.read_json(out / "config.json") == want:
        return final
    log.info("training %s", out)
    corpus = load_corpus() if corpus is None else corpus
    start = time.perf_counter()
    final = train_run(mc, tc, corpus, out, run_config=want).final_checkpoint
    sio.write_json(out / "timing.json", {"train_seconds": time.perf_counter() - start})
    return final


def train_seconds(root: Path, variant: Variant | str, seed: int) -> float | None:
    """Wall-clock training time recorded by :func:`ensure_run`, if any."""
    path = run_dir(root, variant, seed) / "timing.json"
    return sio.read_json(path)["train_seconds"] if path.exists() else None


FACTORS = (1.0, 4.0, 16.0, 64.0)


@dataclass
class SweepResult:
    """recv(k) per layer for the baseline and each intervention, on identical inputs."""

    position: int
    base: np.ndarray
    sink: np.ndarray
    mask_block: np.ndarray
    variance_amplify: dict[float, np.ndarray]
    norm_scale: dict[float, np.ndarray]

    def delta(self, kind: str, factor: float | None = None) -> np.ndarray:
        got = self.mask_block if kind == "mask_block" else getattr(self, kind)[factor]
        return got - self.base


def intervention_sweep(model: Transformer, x: np.ndarray, position: int = 10, factors=FACTORS,
                       mu_sequences: int = 64, seed: int = 0) -> SweepResult:
    """Mask-block, mean-centered amplification and norm scaling at ``position`` over all layers."""
    L = model.config.n_layers
    means = estimate_value_means(model, mu_sequences, min(128, model.config.max_seq_len), seed=seed)

    def recv(specs):
        _, tr = model.forward(x, interventions=specs, value_means=means, capture=("attn",))
        return np.array([D.received_attention_profile(tr, l)[position] for l in range(L)]), tr

    base, tr = recv([])
    sink = np.array([D.sink_score(tr, l) for l in range(L)])
    mask = recv([InterventionSpec(Kind.MASK_BLOCK, position)])[0]
    va = {f: recv([InterventionSpec(Kind.VARIANCE_AMPLIFY, position, factor=f)])[0] for f in factors}
    ns = {f: recv([InterventionSpec(Kind.NORM_SCALE, position, factor=f)])[0] for f in factors}
    return SweepResult(position, base, sink, mask, va, ns)


def sink_onset(sink: np.ndarray, fraction: float = 0.5) -> int:
    """First layer whose sink score reaches ``fraction`` of its maximum over layers."""
    sink = np.asarray(sink)
    return int(np.flatnonzero(sink >= fraction * sink.max())[0])
