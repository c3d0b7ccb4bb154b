"""Train (or reuse) the recipe runs behind acceptance criteria 5-7.

    python3 scripts/acceptance_runs.py                 # softmax and headnorm, seeds 0-2
    python3 scripts/acceptance_runs.py --variants softmax --seeds 0

Runs land in ``$SINKLAB_RUNS`` (default ``~/runs/acceptance``) and are
skipped when a matching final checkpoint already exists.
"""

import argparse
import logging

from sinklab import experiments as E


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=["softmax", "headnorm"])
    ap.add_argument("--seeds", nargs="+", type=int, default=list(E.SEEDS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    corpus = E.load_corpus()
    for v in args.variants:
        for s in args.seeds:
            final = E.ensure_run(E.runs_root(), v, s, corpus)
            secs = E.train_seconds(E.runs_root(), v, s)
            print(f"{v} seed {s}: {final}" + (f" ({secs:.0f} s)" if secs else ""), flush=True)


if __name__ == "__main__":
    main()
