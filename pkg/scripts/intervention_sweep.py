"""Mask-block, variance-amplify and norm-scale sweep on a trained checkpoint.

    python3 scripts/intervention_sweep.py ~/runs/acceptance/softmax_seed0/checkpoints/final.snkl

Prints recv(k) deltas per layer for each intervention on held-out corpus windows.
"""

import argparse

import numpy as np

from sinklab import experiments as E
from sinklab.io import load_checkpoint
from sinklab.training import corpus_windows, split_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--position", type=int, default=10)
    ap.add_argument("--sequences", type=int, default=16)
    args = ap.parse_args()
    ck = load_checkpoint(args.checkpoint)
    val = split_corpus(E.load_corpus(), ck.train_config.val_fraction)[1]
    x = corpus_windows(val, args.sequences, ck.model.config.max_seq_len, seed=0)
    sw = E.intervention_sweep(ck.model, x, position=args.position)
    np.set_printoptions(precision=4, suppress=True, linewidth=140)
    print(f"sink score      {sw.sink}  (onset layer {E.sink_onset(sw.sink)})")
    print(f"recv({sw.position}) base    {sw.base}")
    print(f"mask_block      {sw.delta('mask_block')}")
    for f in E.FACTORS:
        print(f"VA x{f:<5g}       {sw.delta('variance_amplify', f)}")
        print(f"NS x{f:<5g}       {sw.delta('norm_scale', f)}")


if __name__ == "__main__":
    main()
