"""Learning-rate sensitivity on the reference checkpoint.

For each learning rate, optimize the task prompt over a few seeds and report
mean test accuracy and how many prompt positions stay anchored.

    python scripts/lr_sweep.py --lrs 0.001 0.01 0.1 1.0
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from embedtune.errors import NumericalError
from embedtune.experiments import ReferenceSpec, cached_reference_checkpoint, run_task
from embedtune.tasks import TASKS, get_task


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/lr_sweep.csv")
    ap.add_argument("--cache", default=".cache")
    ap.add_argument("--task", default="sentiment-toy", choices=sorted(TASKS))
    ap.add_argument("--lrs", type=float, nargs="+", default=[0.001, 0.01, 0.1, 1.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args(argv)

    ckpt = cached_reference_checkpoint(args.cache, ReferenceSpec(task=args.task))
    task = get_task(args.task)
    rows = []
    for lr in args.lrs:
        accs, anchored, status = [], [], "ok"
        for seed in args.seeds:
            try:
                run, extras = run_task(ckpt, task, seed, learning_rate=lr, max_epochs=args.epochs)
            except NumericalError as exc:
                status = str(exc)
                break
            accs.append(run.acc_after)
            anchored.append(sum(p.anchored for p in extras["anchors"].positions) / len(run.p_original))
        row = {
            "lr": lr,
            "mean_accuracy": float(np.mean(accs)) if accs else float("nan"),
            "anchored_fraction": float(np.mean(anchored)) if anchored else float("nan"),
            "status": status,
        }
        rows.append(row)
        print(f"lr {lr:g}: accuracy {row['mean_accuracy']:.3f}, anchored {row['anchored_fraction']:.3f} ({status})")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
