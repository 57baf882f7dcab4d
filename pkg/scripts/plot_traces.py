"""Plot a similarity trace CSV (layer, before, after, regularized) or a lambda grid CSV.

    python scripts/plot_traces.py runs/prune/similarity.csv -o sim.png
    python scripts/plot_traces.py runs/grid/grid.csv -o grid.png
"""

import argparse
import csv
from pathlib import Path

import numpy as np


def load_table(path):
    """Return ("similarity", rows) or ("grid", (lambda1s, lambda2s, matrix))."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    if header[:3] == ["layer", "before", "after"]:
        out = []
        for r in rows[1:]:
            out.append({
                "layer": int(r[0]),
                "before": float(r[1]) if r[1] else None,
                "after": float(r[2]) if r[2] else None,
                "regularized": len(r) > 3 and r[3] == "1",
            })
        return "similarity", out
    if header[0].startswith("lambda1"):
        lambda2s = [float(x) for x in header[1:]]
        lambda1s = [float(r[0]) for r in rows[1:]]
        matrix = np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows[1:]])
        return "grid", (lambda1s, lambda2s, matrix)
    raise ValueError(f"{path}: unrecognised table header {header}")


def plot(path, out):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    kind, payload = load_table(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "similarity":
        layers = [r["layer"] for r in payload]
        ax.plot(layers, [r["before"] for r in payload], "o-", label="before stage 2")
        if any(r["after"] is not None for r in payload):
            ax.plot(layers, [r["after"] for r in payload], "s-", label="after stage 2")
        for r in payload:
            if r["regularized"]:
                ax.axvspan(r["layer"] - 0.4, r["layer"] + 0.4, color="orange", alpha=0.2)
        ax.set_xlabel("layer")
        ax.set_ylabel("mean cosine(X_in, X_out)")
        ax.legend()
    else:
        l1, l2, m = payload
        im = ax.imshow(m, cmap="viridis_r")
        ax.set_xticks(range(len(l2)), [f"{x:g}" for x in l2])
        ax.set_yticks(range(len(l1)), [f"{x:g}" for x in l1])
        ax.set_xlabel("lambda2")
        ax.set_ylabel("lambda1")
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                ax.text(j, i, f"{m[i, j]:.3f}", ha="center", va="center", color="w", fontsize=8)
        fig.colorbar(im, label="PPL")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv")
    ap.add_argument("-o", "--output")
    args = ap.parse_args()
    out = args.output or str(Path(args.csv).with_suffix(".png"))
    print(plot(args.csv, out))


if __name__ == "__main__":
    main()
