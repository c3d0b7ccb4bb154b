"""Pretraining loop: AdamW, cosine schedule with linear warmup, global-norm clipping.

Batches are drawn from a token array with a prepended BOS id.  The batch for
``(step, micro)`` comes from its own named random stream, so a resumed run
sees exactly the batches an uninterrupted run would.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import rng
from . import tensor as T
from .errors import ConfigError, InputError, NumericError, TrainingAborted
from .model import ModelConfig, Transformer, is_gain

log = logging.getLogger(__name__)

BOS, EOS, PAD = 256, 257, 258
BYTE_VOCAB = 259


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_iters: int = 200
    max_iters: int = 3000
    batch_size: int = 16
    block_size: int = 256
    grad_accum: int = 1
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps_adam: float = 1e-8
    seed: int = 0
    eval_interval: int = 100
    eval_batches: int = 4
    checkpoint_interval: int = 1000
    val_fraction: float = 0.05
    # parameter-name suffixes exempt from weight decay
    no_decay: tuple[str, ...] = ("_norm", "embed")

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.no_decay = tuple(self.no_decay)
        self.validate()

    def validate(self):
        if not (0 < self.min_lr <= self.peak_lr):
            raise ConfigError(f"train.min_lr must satisfy 0 < min_lr <= peak_lr, got {self.min_lr}, {self.peak_lr}")
        if not (0 <= self.warmup_iters < self.max_iters):
            raise ConfigError(f"train.warmup_iters ({self.warmup_iters}) must be < max_iters ({self.max_iters})")
        if not self.grad_clip > 0:
            raise ConfigError(f"train.grad_clip must be > 0, got {self.grad_clip}")
        for name in ("batch_size", "block_size", "grad_accum", "eval_interval", "eval_batches",
                     "checkpoint_interval"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"train.betas must be two values in [0, 1), got {self.betas}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"train.val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.weight_decay < 0 or self.eps_adam <= 0:
            raise ConfigError("train.weight_decay must be >= 0 and train.eps_adam > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["no_decay"] = list(self.no_decay)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train fields {sorted(extra)}")
        return cls(**d)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_iters:
        return cfg.peak_lr * step / cfg.warmup_iters
    progress = (step - cfg.warmup_iters) / (cfg.max_iters - cfg.warmup_iters)
    progress = min(max(progress, 0.0), 1.0)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls(m={n: np.zeros_like(p.data) for n, p in params.items()},
                   v={n: np.zeros_like(p.data) for n, p in params.items()}, step=0)


def decays(name: str, shape, cfg: TrainConfig) -> bool:
    return len(shape) >= 2 and not any(name.endswith(s) for s in cfg.no_decay)


def adamw_step(params, grads: dict[str, np.ndarray], state: OptimizerState, lr: float, cfg: TrainConfig):
    """Decoupled weight decay Adam with bias correction, updating ``params`` in place."""
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingAborted(f"non-finite gradient for {name} at optimizer step {t}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        w = p.data
        if cfg.weight_decay and decays(name, w.shape, cfg):
            w *= w.dtype.type(1 - lr * cfg.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)
        w -= (lr * update).astype(w.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        s = max_norm / total
        grads = {n: g * g.dtype.type(s) for n, g in grads.items()}
    return grads, total


def cross_entropy(logits, targets):
    logits = logits if isinstance(logits, T.Tensor) else T.Tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise InputError(f"target id out of range [0, {V})")
    return T.cross_entropy(logits, targets)


class BlockSampler:
    """Random windows of ``block_size`` tokens with BOS prepended.

    Returns ``inputs`` of shape ``(B, block_size)`` starting with BOS and
    ``targets`` shifted by one.  Sampling with replacement, so a corpus
    smaller than the token budget is simply revisited.
    """

    def __init__(self, tokens: np.ndarray, block_size: int, bos: int = BOS):
        if len(tokens) < block_size:
            raise ConfigError(f"corpus split has {len(tokens)} tokens, needs at least block_size={block_size}")
        self.tokens = np.asarray(tokens)
        self.block_size = block_size
        self.bos = bos

    def batch(self, gen: np.random.Generator, batch_size: int):
        n = len(self.tokens) - self.block_size + 1
        starts = gen.integers(0, n, size=batch_size)
        idx = starts[:, None] + np.arange(self.block_size)[None, :]
        win = self.tokens[idx]
        seq = np.concatenate([np.full((batch_size, 1), self.bos, dtype=win.dtype), win], axis=1)
        return seq[:, :-1].astype(np.int64), seq[:, 1:].astype(np.int64)


def corpus_windows(tokens: np.ndarray, n: int, seq: int, seed: int) -> np.ndarray:
    """``n`` random windows of ``seq - 1`` tokens, each preceded by BOS."""
    tokens = np.asarray(tokens)
    if len(tokens) < seq:
        raise InputError(f"corpus has {len(tokens)} tokens, needs {seq}")
    starts = rng.stream(seed, "inputs/corpus").integers(0, len(tokens) - seq + 2, size=n)
    rows = [np.concatenate([[BOS], tokens[s:s + seq - 1]]) for s in starts]
    return np.stack(rows).astype(np.int64)


def split_corpus(tokens: np.ndarray, val_fraction: float):
    cut = int(round(len(tokens) * (1 - val_fraction)))
    return tokens[:cut], tokens[cut:]


def param_hash(params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


def evaluate(model: Transformer, sampler: BlockSampler, cfg: TrainConfig) -> float:
    """Mean loss over a fixed set of validation batches, without recording a tape."""
    gen = rng.stream(cfg.seed, "batch/val")
    losses = []
    for _ in range(cfg.eval_batches):
        x, y = sampler.batch(gen, cfg.batch_size)
        losses.append(model.loss(x, y).item())
    return float(np.mean(losses))


def train_step(model: Transformer, sampler: BlockSampler, state: OptimizerState, step: int,
               cfg: TrainConfig):
    """One optimizer step over ``grad_accum`` micro-batches.  Returns (loss, lr, grad_norm)."""
    params = model.params
    acc = {n: np.zeros_like(p.data) for n, p in params.items()}
    losses = []
    for micro in range(cfg.grad_accum):
        gen = rng.stream(cfg.seed, f"batch/train/{step}/{micro}")
        x, y = sampler.batch(gen, cfg.batch_size)
        with T.Tape() as tape:
            try:
                loss = model.loss(x, y)
            except NumericError as e:
                raise TrainingAborted(f"non-finite forward value at step {step}: {e}") from None
            if not math.isfinite(loss.item()):
                raise TrainingAborted(f"non-finite loss at step {step}")
            grads = tape.backward(T.scale(loss, 1.0 / cfg.grad_accum))
        losses.append(loss.item())
        for n, p in params.items():
            g = grads.get(id(p))
            if g is not None:
                acc[n] += g
    lr = cosine_lr(step, cfg)
    acc, norm = clip_global_norm(acc, cfg.grad_clip)
    adamw_step(params, acc, state, lr, cfg)
    return float(np.mean(losses)), lr, norm


LOG_HEADER = ["step", "lr", "train_loss", "val_loss", "grad_norm"]


@dataclass
class TrainResult:
    final_checkpoint: Path
    loss_log: Path
    model: Transformer
    state: OptimizerState


def train_run(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: np.ndarray, out_dir,
              resume_from=None, stop_at: int | None = None, final_diagnostics: bool = True,
              run_config: dict | None = None) -> TrainResult:
    """Train from scratch (or resume) and write checkpoints, a loss log and final diagnostics.

    Layout of ``out_dir``: ``config.json``, ``loss_log.csv``,
    ``checkpoints/step_XXXXXX.snkl`` + ``checkpoints/final.snkl``, and
    ``reports/final_diagnostics.csv``.  ``stop_at`` ends the run early at
    that step (schedule unchanged), which is how resume tests cut a run.
    """
    from . import io as sio  # local import: io depends on this module's configs

    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    corpus = np.asarray(corpus)
    if corpus.size and corpus.max() >= model_cfg.vocab_size:
        raise ConfigError(f"corpus contains id {int(corpus.max())} >= vocab_size {model_cfg.vocab_size}")
    if train_cfg.block_size > model_cfg.max_seq_len:
        raise ConfigError(f"train.block_size {train_cfg.block_size} exceeds model.max_seq_len {model_cfg.max_seq_len}")
    train_tok, val_tok = split_corpus(corpus, train_cfg.val_fraction)
    if len(val_tok) < train_cfg.block_size or len(train_tok) < train_cfg.block_size:
        raise ConfigError(f"corpus too small ({len(corpus)} tokens) for block_size {train_cfg.block_size}")
    train_s = BlockSampler(train_tok, train_cfg.block_size)
    val_s = BlockSampler(val_tok, train_cfg.block_size)

    if resume_from is not None:
        ck = sio.load_checkpoint(resume_from)
        model, state, start = ck.model, ck.optimizer, ck.step
        if state is None:
            raise ConfigError(f"{resume_from} has no optimizer state; cannot resume")
    else:
        model = Transformer.create(model_cfg, train_cfg.seed, np.float32)
        state = OptimizerState.zeros_like(model.params)
        start = 0
    sio.write_json(out / "config.json", run_config or {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()})

    log_path = out / "loss_log.csv"
    mode = "a" if resume_from is not None and log_path.exists() else "w"
    end = train_cfg.max_iters if stop_at is None else min(stop_at, train_cfg.max_iters)
    with open(log_path, mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(LOG_HEADER)
        for step in range(start, end):
            try:
                loss, lr, norm = train_step(model, train_s, state, step, train_cfg)
            except TrainingAborted as e:
                _dump_batch(out, train_s, train_cfg, step)
                raise TrainingAborted(f"{e}; offending batch written to {out / 'abort_batch.npy'}") from None
            val = ""
            if step % train_cfg.eval_interval == 0 or step == train_cfg.max_iters - 1:
                val = f"{evaluate(model, val_s, train_cfg):.9g}"
            w.writerow([step, f"{lr:.9g}", f"{loss:.9g}", val, f"{norm:.9g}"])
            fh.flush()
            done = step + 1
            if done % train_cfg.checkpoint_interval == 0 and done < train_cfg.max_iters:
                sio.save_checkpoint(out / "checkpoints" / f"step_{done:06d}.snkl", model, state,
                                    train_cfg=train_cfg, step=done)
            if step % 50 == 0:
                log.info("step %d lr %.3g loss %.4f grad_norm %.3f", step, lr, loss, norm)
    final = out / "checkpoints" / ("final.snkl" if end == train_cfg.max_iters else f"step_{end:06d}.snkl")
    sio.save_checkpoint(final, model, state, train_cfg=train_cfg, step=end)
    if final_diagnostics and end == train_cfg.max_iters:
        from .diagnostics import final_checkpoint_records

        x, _ = val_s.batch(rng.stream(train_cfg.seed, "batch/diagnostics"), 8)
        sio.emit_report(final_checkpoint_records(model, x), "csv", out / "reports" / "final_diagnostics.csv")
    return TrainResult(final, log_path, model, state)


def _dump_batch(out: Path, sampler: BlockSampler, cfg: TrainConfig, step: int):
    gen = rng.stream(cfg.seed, f"batch/train/{step}/0")
    x, _ = sampler.batch(gen, cfg.batch_size)
    np.save(out / "abort_batch.npy", x)


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({"step": int(r["step"]), "lr": float(r["lr"]), "train_loss": float(r["train_loss"]),
                    "val_loss": float(r["val_loss"]) if r["val_loss"] else None,
                    "grad_norm": float(r["grad_norm"])})
    return out


def default_out_root() -> Path:
    return Path(os.environ.get("SINKLAB_OUT", "runs"))
