#!/usr/bin/env python3
"""Plot metrics CSVs, a beta-sweep grid or an attention export.

    python scripts/plot.py curves runs/a/metrics.csv runs/b/metrics.csv -o curves.png
    python scripts/plot.py sweep runs/sweep/sweep.csv -o sweep.png
    python scripts/plot.py attention runs/x/attention.jsonl --episode 0 --step 5 -o att.png

Requires matplotlib.
"""
import argparse
import csv
import json
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def curves(paths, out):
    fig, axes = plt.subplots(1, 3, figsize=(15, 4))
    for path in paths:
        with open(path) as f:
            rows = list(csv.DictReader(f))
        epoch = [int(r["epoch"]) for r in rows]
        for ax, col in zip(axes, ["mean_reward", "ntnn_layer1", "ntnn_layer2"]):
            ax.plot(epoch, [float(r[col]) for r in rows], label=path)
            ax.set_title(col)
            ax.set_xlabel("epoch")
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out)


def sweep(path, out):
    with open(path) as f:
        rows = list(csv.reader(f))
    beta2 = rows[0][1:]
    beta1 = [r[0] for r in rows[1:]]
    grid = [[float(c) if c != "failed" else math.nan for c in r[1:]] for r in rows[1:]]
    fig, ax = plt.subplots()
    im = ax.imshow(grid, cmap="viridis")
    ax.set_xticks(range(len(beta2)), beta2)
    ax.set_yticks(range(len(beta1)), beta1)
    ax.set_xlabel("beta2")
    ax.set_ylabel("beta1")
    for i, row in enumerate(grid):
        for j, v in enumerate(row):
            ax.text(j, i, "x" if math.isnan(v) else f"{v:.2f}", ha="center", va="center", color="w")
    fig.colorbar(im)
    fig.savefig(out)


def attention(path, episode, step, out):
    with open(path) as f:
        recs = [json.loads(l) for l in f]
    recs = [r for r in recs if r["episode"] == episode and r["step"] == step]
    if not recs:
        raise SystemExit(f"no records for episode {episode} step {step}")
    fig, axes = plt.subplots(1, len(recs), figsize=(3 * len(recs), 3), squeeze=False)
    for ax, r in zip(axes[0], recs):
        n = r["n_agents"]
        m = r["tube_matrix"] or r["matrix"]
        ax.imshow([m[i * n:(i + 1) * n] for i in range(n)], vmin=0, vmax=1, cmap="Blues")
        ax.set_title(f"layer {r['layer']} head {r['head']}")
    fig.tight_layout()
    fig.savefig(out)


def main():
    p = argparse.ArgumentParser()
    sub = p.add_subparsers(dest="cmd", required=True)
    c = sub.add_parser("curves")
    c.add_argument("csv", nargs="+")
    c.add_argument("-o", "--out", default="curves.png")
    s = sub.add_parser("sweep")
    s.add_argument("csv")
    s.add_argument("-o", "--out", default="sweep.png")
    a = sub.add_parser("attention")
    a.add_argument("jsonl")
    a.add_argument("--episode", type=int, default=0)
    a.add_argument("--step", type=int, default=0)
    a.add_argument("-o", "--out", default="attention.png")
    args = p.parse_args()
    if args.cmd == "curves":
        curves(args.csv, args.out)
    elif args.cmd == "sweep":
        sweep(args.csv, args.out)
    else:
        attention(args.jsonl, args.episode, args.step, args.out)


if __name__ == "__main__":
    main()
