"""Reference experiment: pretrain (or load) the toy model, optimize the task
prompt for several seeds, and write accuracy, anchoring, entropy and LAT
results to one directory.

    python scripts/reference_run.py --out runs/reference --seeds 0 1 2
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from embedtune.diagnostics import write_json
from embedtune.engine import save_artifact
from embedtune.experiments import ReferenceSpec, cached_reference_checkpoint, run_task
from embedtune.tasks import TASKS, get_task


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/reference")
    ap.add_argument("--cache", default=".cache", help="where the pretrained checkpoint is kept")
    ap.add_argument("--task", default="sentiment-toy", choices=sorted(TASKS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--n-train", type=int, default=40)
    ap.add_argument("--n-test", type=int, default=100)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    spec = ReferenceSpec(task=args.task)
    ckpt = cached_reference_checkpoint(args.cache, spec)
    task = get_task(args.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    summary = {"checkpoint_hash": ckpt.content_hash, "spec": spec.__dict__, "runs": []}
    for seed in args.seeds:
        run, extras = run_task(
            ckpt, task, seed, learning_rate=args.lr, max_epochs=args.epochs,
            n_train=args.n_train, n_test=args.n_test,
        )
        d = out / f"seed{seed}"
        d.mkdir(exist_ok=True)
        save_artifact(extras["p1"], d / "artifact.bin")
        write_json(extras["anchors"].to_dict(ckpt.vocab), d / "anchor.json")
        write_json(extras["eval_after"].to_dict(), d / "eval_after.json")
        extras["lat"].write_csv(d / "lat.csv")
        summary["runs"].append(run.to_dict())
        print(
            f"seed {seed}: accuracy {run.acc_before:.2f} -> {run.acc_after:.2f}, "
            f"anchored {run.anchored_all}, entropy {run.entropy_before:.3f} -> {run.entropy_after:.3f} bits, "
            f"{run.seconds:.1f} s"
        )
    write_json(summary, out / "summary.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
