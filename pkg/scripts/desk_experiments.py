"""Run every ablation arm of the desk-scale experiment and write a JSON summary.

    python scripts/desk_experiments.py --seeds 0 1 2 -o runs/desk.json

Pretrains (or loads from the cache) the dense model described by the config,
then for each pipeline seed records PPL with and without stage 2, the identity
penalty, the similarity shift, one-shot selection and the three baselines.
"""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from trsp.config import load_config
from trsp.data import corpus_from_text, synthetic_text
from trsp.experiments import cached_dense, seed_arms


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "desk.ini"))
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--chars", type=int, default=1_000_000)
    ap.add_argument("--cache", default=".cache")
    ap.add_argument("-o", "--output", default="runs/desk.json")
    args = ap.parse_args()

    cfg = load_config(args.config, args.set)
    corpus = corpus_from_text(synthetic_text(args.chars, seed=0))
    dense, info = cached_dense(cfg, corpus, args.cache)
    print(f"dense model ready ({'cached' if info['cache_hit'] else 'trained'}, "
          f"{info['pretrain_seconds']:.0f}s of pretraining)")
    rows = []
    for s in args.seeds:
        arms = seed_arms(dense, corpus, cfg, s)
        row = asdict(arms)
        row["similarity"] = {k: v for k, v in row["similarity"].items() if k not in ("before", "after")}
        row["similarity_before"] = arms.similarity["before"]
        row["similarity_after"] = arms.similarity["after"]
        rows.append(row)
        print(f"seed {s}: P={arms.prune_set} stage2 on {arms.ppl_stage2_on:.4f} off {arms.ppl_stage2_off:.4f} "
              f"one-shot {arms.ppl_one_shot:.4f} baselines "
              + ", ".join(f"{k} {v:.4f}" for k, v in arms.baselines.items()))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"config": cfg.to_dict(), "pretrain": info, "seeds": rows}, indent=2))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
