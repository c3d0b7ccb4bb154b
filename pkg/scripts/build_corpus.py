"""Concatenate text files into a byte corpus.

Default source is the Python standard library, which is present on every
machine that can run this package:

    python3 scripts/build_corpus.py --out data/corpus.bin --max-bytes 20000000
"""

import argparse
import sysconfig
from pathlib import Path


def collect(root: Path, pattern: str, max_bytes: int) -> bytes:
    parts, total = [], 0
    for f in sorted(root.rglob(pattern)):
        if "site-packages" in f.parts or "test" in f.parts or "tests" in f.parts:
            continue
        try:
            b = f.read_bytes()
        except OSError:
            continue
        parts.append(b)
        total += len(b)
        if total >= max_bytes:
            break
    return b"\n".join(parts)[:max_bytes]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, default=Path(sysconfig.get_paths()["stdlib"]))
    ap.add_argument("--pattern", default="*.py")
    ap.add_argument("--max-bytes", type=int, default=20_000_000)
    ap.add_argument("--out", type=Path, default=Path("data/corpus.bin"))
    args = ap.parse_args()
    data = collect(args.root, args.pattern, args.max_bytes)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_bytes(data)
    print(f"wrote {len(data):,} bytes to {args.out}")


if __name__ == "__main__":
    main()
