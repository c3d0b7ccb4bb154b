"""``sinklab`` command line: train, analyze, intervene, compare.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics as D
from . import io as sio
from . import rng
from .errors import ConfigError, InputError, SinklabError, TrainingAborted
from .interventions import InterventionSpec, Kind, estimate_value_means
from .model import ModelConfig, Variant
from .training import TrainConfig, corpus_windows, default_out_root, read_loss_log, train_run

log = logging.getLogger("sinklab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

COMPARE_COLUMNS = ["Train Loss", "Validation Loss", "Effective Rank (layer-wise mean)",
                   "Dimension Disparity (layer-wise mean)"]


class UsageError(Exception):
    """Bad flags or config; maps to exit status 2."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: str | None = None
    out_dir: str | None = None
    analyses: list[str] = field(default_factory=list)
    interventions: list[InterventionSpec] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "corpus": self.corpus,
                "out_dir": self.out_dir, "analyses": list(self.analyses),
                "interventions": [s.to_dict() for s in self.interventions]}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        extra = set(d) - {"model", "train", "corpus", "out_dir", "analyses", "interventions"}
        if extra:
            raise ConfigError(f"unknown run config fields {sorted(extra)}")
        cfg = cls(ModelConfig.from_dict(d.get("model", {})), TrainConfig.from_dict(d.get("train", {})),
                  d.get("corpus"), d.get("out_dir"), list(d.get("analyses", [])),
                  [InterventionSpec.from_dict(s) for s in d.get("interventions", [])])
        cfg.validate()
        return cfg

    def validate(self):
        unknown = [a for a in self.analyses if a not in D.REGISTRY]
        if unknown:
            raise ConfigError(f"analyses: unknown names {unknown}; valid: {sorted(D.REGISTRY)}")
        if self.corpus is not None and not Path(self.corpus).exists():
            raise ConfigError(f"corpus: path {self.corpus} does not exist")
        for i, s in enumerate(self.interventions):
            try:
                s.validate_for(self.model.n_layers, self.model.n_heads, self.model.max_seq_len)
            except InputError as e:
                raise ConfigError(f"interventions[{i}]: {e}") from None


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, assignments: list[str]) -> dict:
    """Apply ``section.field=value`` assignments; values are parsed as JSON when possible."""
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects dotted.path=value, got {item!r}")
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = _coerce(value)
    return raw


def _load_run_config(args) -> RunConfig:
    raw = sio.read_json(args.config) if getattr(args, "config", None) else {}
    sets = list(getattr(args, "set", None) or [])
    if getattr(args, "variant", None) is not None:
        sets.append(f"model.variant={args.variant}")
    if getattr(args, "seed", None) is not None:
        sets.append(f"train.seed={args.seed}")
    if getattr(args, "max_iters", None) is not None:
        sets.append(f"train.max_iters={args.max_iters}")
    if getattr(args, "corpus", None) is not None:
        sets.append(f"corpus={json.dumps(str(args.corpus))}")
    if getattr(args, "out", None) is not None:
        sets.append(f"out_dir={json.dumps(str(args.out))}")
    raw = apply_overrides(raw, sets)
    try:
        return RunConfig.from_dict(raw)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


# -- inputs ---------------------------------------------------------------------


def parse_shape(text: str) -> tuple[int, int]:
    try:
        n, t = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"expected NxT (e.g. 64x128), got {text!r}") from None
    if n < 1 or t < 1:
        raise UsageError(f"NxT must be positive, got {text!r}")
    return n, t


def random_tokens(n: int, seq: int, vocab: int, seed: int) -> np.ndarray:
    """Uniform token ids over the whole vocabulary."""
    return rng.stream(seed, "inputs/random").integers(0, vocab, size=(n, seq))


def corpus_sample(path, n: int, seq: int, seed: int) -> np.ndarray:
    """``n`` random windows of ``seq - 1`` corpus tokens, each preceded by BOS."""
    toks = sio.TokenStream.open(path).tokens
    if len(toks) < seq:
        raise InputError(f"corpus {path} has {len(toks)} tokens, needs {seq}")
    return corpus_windows(toks, n, seq, seed)


def _inputs(args, cfg: ModelConfig) -> np.ndarray:
    if args.random_tokens and args.corpus_sample:
        raise UsageError("use one of --random-tokens or --corpus-sample")
    if args.corpus_sample:
        if not args.corpus:
            raise UsageError("--corpus-sample needs --corpus")
        n, seq = parse_shape(args.corpus_sample)
        x = corpus_sample(args.corpus, n, seq, args.seed)
    else:
        n, seq = parse_shape(args.random_tokens or "64x128")
        x = random_tokens(n, seq, cfg.vocab_size, args.seed)
    if seq > cfg.max_seq_len:
        raise UsageError(f"sequence length {seq} exceeds the model's max_seq_len {cfg.max_seq_len}")
    return x


# -- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if cfg.corpus is None:
        raise UsageError("train needs --corpus or corpus in the config")
    out = Path(cfg.out_dir) if cfg.out_dir else default_out_root() / f"{cfg.model.variant.value}_seed{cfg.train.seed}"
    tokens = sio.TokenStream.open(cfg.corpus).tokens
    res = train_run(cfg.model, cfg.train, tokens, out, resume_from=args.resume, run_config=cfg.to_dict())
    print(res.final_checkpoint)
    return EXIT_OK


def cmd_analyze(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in D.REGISTRY]
    if unknown or not metrics:
        raise UsageError(f"unknown analyses {unknown}; valid names: {', '.join(sorted(D.REGISTRY))}")
    ck = sio.load_checkpoint(args.checkpoint)
    x = _inputs(args, ck.model.config)
    sio.emit_report(D.run_analyses(ck.model, x, metrics), args.format, args.out)
    return EXIT_OK


def parse_layers(text: str | None):
    if text is None:
        return None
    lo, sep, hi = text.partition(":")
    try:
        return (int(lo), int(hi if sep else lo))
    except ValueError:
        raise UsageError(f"--layers expects L or LO:HI, got {text!r}") from None


def intervention_records(model, x, spec: InterventionSpec, value_means=None):
    """Paired runs; per layer the base, intervened and delta recv(k) plus sink-score deltas."""
    kind = spec.kind.value
    _, base = model.forward(x, capture=("attn",))
    _, mod = model.forward(x, interventions=[spec], value_means=value_means, capture=("attn",))
    B = len(x)
    k = spec.position
    for l in range(model.config.n_layers):
        rb = D.received_attention_profile(base, l)
        rm = D.received_attention_profile(mod, l)
        for j in range(len(rb)):
            yield D.MetricRecord(f"{kind}.recv_delta", l, float(rm[j] - rb[j]), B, position=j)
        yield D.MetricRecord(f"{kind}.recv_base", l, float(rb[k]), B, position=k)
        yield D.MetricRecord(f"{kind}.recv_intervened", l, float(rm[k]), B, position=k)
        yield D.MetricRecord(f"{kind}.sink_score_delta", l,
                             D.sink_score(mod, l) - D.sink_score(base, l), B)


def cmd_intervene(args) -> int:
    ck = sio.load_checkpoint(args.checkpoint)
    model = ck.model
    cfg = model.config
    x = _inputs(args, cfg)
    if not 0 <= args.position < x.shape[1]:
        raise UsageError(f"--position {args.position} outside the input length {x.shape[1]}")
    heads = tuple(int(h) for h in args.heads.split(",")) if args.heads else None
    try:
        spec = InterventionSpec(Kind.parse(args.kind), args.position, parse_layers(args.layers), heads, args.factor)
        spec.validate_for(cfg.n_layers, cfg.n_heads, x.shape[1])
    except (ConfigError, InputError, ValueError) as e:
        raise UsageError(str(e)) from None
    specs = [spec]
    if spec.kind is not Kind.MASK_BLOCK and not args.no_control:
        other = Kind.NORM_SCALE if spec.kind is Kind.VARIANCE_AMPLIFY else Kind.VARIANCE_AMPLIFY
        specs.append(InterventionSpec(other, spec.position, spec.layers, spec.heads, spec.factor))
    means = None
    if any(s.kind is Kind.VARIANCE_AMPLIFY for s in specs):
        means = estimate_value_means(model, args.mu_sequences, min(128, cfg.max_seq_len), seed=args.seed)
    records = [r for s in specs for r in intervention_records(model, x, s, means)]
    sio.emit_report(records, args.format, args.out)
    if len(specs) == 2:
        _print_side_by_side(records, specs, cfg.n_layers)
    return EXIT_OK


def _print_side_by_side(records, specs, n_layers):
    k = specs[0].position
    names = [s.kind.value for s in specs]
    table = {n: {r.layer: r.value for r in records if r.metric == f"{n}.recv_delta" and r.position == k}
             for n in names}
    print(f"recv({k}) delta at factor {specs[0].factor:g}")
    print("layer  " + "  ".join(f"{n:>18}" for n in names))
    for l in range(n_layers):
        print(f"{l:>5}  " + "  ".join(f"{table[n][l]:>18.6g}" for n in names))


def _run_summary(run: Path) -> tuple[str, dict]:
    for rel in ("config.json", "loss_log.csv", "reports/final_diagnostics.csv"):
        if not (run / rel).exists():
            raise UsageError(f"{run}: missing {rel}")
    cfg = sio.read_json(run / "config.json")
    variant = Variant.parse(cfg["model"]["variant"]).value
    rows = read_loss_log(run / "loss_log.csv")
    if not rows:
        raise UsageError(f"{run}: loss_log.csv is empty")
    vals = [r["val_loss"] for r in rows if r["val_loss"] is not None]
    if not vals:
        raise UsageError(f"{run}: loss_log.csv has no validation loss")
    diag = sio.read_report(run / "reports" / "final_diagnostics.csv")
    er = D.layer_values(diag, "effective_rank_mean")
    dom = D.layer_values(diag, "dominance_ratio")
    if er.size == 0 or dom.size == 0:
        raise UsageError(f"{run}: final_diagnostics.csv lacks effective rank or dominance ratio records")
    summary = dict(zip(COMPARE_COLUMNS, (rows[-1]["train_loss"], vals[-1], float(er.mean()), float(dom.mean()))))
    summary["sink_score_max"] = float(D.layer_values(diag, "sink_score").max())
    return variant, summary


def compare_runs(run_dirs) -> dict:
    groups: dict[str, list[dict]] = {}
    for r in run_dirs:
        variant, summary = _run_summary(Path(r))
        groups.setdefault(variant, []).append(summary)
    out = {}
    for variant, items in groups.items():
        out[variant] = {"n": len(items)}
        for key in list(COMPARE_COLUMNS) + ["sink_score_max"]:
            v = np.array([it[key] for it in items])
            out[variant][key] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                                 "median": float(np.median(v)), "values": v.tolist()}
    return out


def format_compare(table: dict) -> str:
    header = ["Variant", "Runs"] + COMPARE_COLUMNS
    lines = [" | ".join(header)]
    for variant, row in table.items():
        cells = [variant, str(row["n"])] + [f"{row[c]['mean']:.4f} ± {row[c]['std']:.4f}" for c in COMPARE_COLUMNS]
        lines.append(" | ".join(cells))
    return "\n".join(lines)


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise UsageError("compare needs at least two run directories")
    table = compare_runs(args.runs)
    print(format_compare(table))
    if args.out:
        sio.write_json(args.out, table)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _add_input_flags(p):
    p.add_argument("--random-tokens", metavar="NxT", default=None,
                   help="uniform random token inputs (default when no corpus sample: 64x128)")
    p.add_argument("--corpus-sample", metavar="NxT", default=None,
                   help="BOS-prefixed corpus windows (default: %(default)s)")
    p.add_argument("--corpus", default=None, help="corpus file for --corpus-sample (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="input sampling seed (default: %(default)s)")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="report format (default: %(default)s)")
    p.add_argument("--out", default="-", help="report path, '-' for stdout (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sinklab", description="Attention-sink laboratory")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress (default: %(default)s)")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default=None, help="JSON run config (default: %(default)s)")
    t.add_argument("--variant", default=None, help="softmax | sigmoid | headnorm (default: from config)")
    t.add_argument("--seed", type=int, default=None, help="training seed (default: from config)")
    t.add_argument("--max-iters", type=int, default=None, help="override train.max_iters (default: from config)")
    t.add_argument("--corpus", default=None, help="byte or SNKT token file (default: from config)")
    t.add_argument("--out", default=None, help="run directory (default: $SINKLAB_OUT/<variant>_seed<seed>)")
    t.add_argument("--resume", default=None, help="checkpoint to resume from (default: %(default)s)")
    t.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                   help="dotted-path override, e.g. train.peak_lr=3e-4; repeatable (default: none)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="run diagnostics on a checkpoint")
    a.add_argument("checkpoint")
    a.add_argument("--metrics", required=True,
                   help=f"comma list from: {', '.join(sorted(D.REGISTRY))} (required, no default)")
    _add_input_flags(a)
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("intervene", help="paired forward passes with and without an intervention")
    i.add_argument("checkpoint")
    i.add_argument("--kind", required=True, help="mask_block | variance_amplify | norm_scale (required, no default)")
    i.add_argument("--position", type=int, default=10, help="target token index (default: %(default)s)")
    i.add_argument("--layers", default=None, help="L or LO:HI inclusive (default: all layers)")
    i.add_argument("--heads", default=None, help="comma list of heads (default: all heads)")
    i.add_argument("--factor", type=float, default=1.0, help="amplification factor (default: %(default)s)")
    i.add_argument("--mu-sequences", type=int, default=64,
                   help="random sequences for the value-mean table (default: %(default)s)")
    i.add_argument("--no-control", action="store_true",
                   help="skip the matched-factor counterpart run (default: %(default)s)")
    _add_input_flags(i)
    i.set_defaults(func=cmd_intervene)

    c = sub.add_parser("compare", help="summarize multiple run directories by variant")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out", default=None, help="also write the summary as JSON (default: %(default)s)")
    c.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SinklabError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
