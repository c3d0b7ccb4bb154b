"""Per-position std of the layer-0 aggregated output on an untrained model.

    python3 scripts/variance_decay.py --sequences 64
"""

import argparse

import numpy as np

from sinklab import diagnostics as D
from sinklab.cli import random_tokens
from sinklab.model import ModelConfig, Transformer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sequences", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = ModelConfig()
    m = Transformer.create(cfg, seed=args.seed)
    x = random_tokens(args.sequences, cfg.max_seq_len, cfg.vocab_size, seed=args.seed)
    _, tr = m.forward(x, capture=("agg",), upto=1)
    std = D.positional_variance(tr, 0, "post_aggregation")
    for t in (0, 1, 2, 4, 8, 16, 32, 64, 128, cfg.max_seq_len - 1):
        print(f"t={t:<4d} std {std[t]:.5f}  (1/sqrt(t+1) x std0 = {std[0] / np.sqrt(t + 1):.5f})")
    print(f"std(0) / mean std(t >= 32) = {std[0] / std[32:].mean():.2f}")


if __name__ == "__main__":
    main()
