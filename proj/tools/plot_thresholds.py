#!/usr/bin/env python3
"""Plot dual-threshold trajectories from a thresholds.jsonl training log.

Solid lines are the high thresholds, dashed lines the low thresholds.
One panel per measure (classification score, objectness score, consistency IoU).
"""

import argparse
import collections
import json
import sys


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("log", help="thresholds.jsonl written by the train subcommand")
    ap.add_argument("-o", "--out", default="thresholds.png", help="output image path")
    args = ap.parse_args()

    per_class = collections.defaultdict(list)
    with open(args.log, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            per_class[rec["class"]].append(rec)
    if not per_class:
        print("no records in", args.log, file=sys.stderr)
        return 1
    for recs in per_class.values():
        recs.sort(key=lambda r: r["epoch"])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    measures = [("cls", "classification score"), ("obj", "objectness score"), ("iou", "consistency IoU")]
    fig, axes = plt.subplots(1, 3, figsize=(15, 4), sharex=True)
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for ax, (key, title) in zip(axes, measures):
        for i, (cls, recs) in enumerate(sorted(per_class.items())):
            epochs = [r["epoch"] for r in recs]
            color = colors[i % len(colors)]
            ax.plot(epochs, [r[f"{key}_high"] for r in recs], "-", color=color, label=f"class {cls} high")
            ax.plot(epochs, [r[f"{key}_low"] for r in recs], "--", color=color, label=f"class {cls} low")
        ax.set_title(title)
        ax.set_xlabel("epoch")
        ax.set_ylim(0.0, 1.05)
        ax.grid(True, alpha=0.3)
    axes[0].set_ylabel("threshold")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print("wrote", args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
