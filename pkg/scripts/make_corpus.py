"""Write the deterministic synthetic English-like corpus used by the desk-scale experiments.

    python scripts/make_corpus.py data/corpus.txt --chars 1000000 --seed 0
"""

import argparse
from pathlib import Path

from trsp.data import synthetic_text


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path")
    ap.add_argument("--chars", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    p = Path(args.path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(synthetic_text(args.chars, args.seed), encoding="utf-8")
    print(f"wrote {args.chars} characters to {p}")


if __name__ == "__main__":
    main()
