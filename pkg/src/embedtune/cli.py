"""Command-line entry point.

Exit codes: 0 success, 2 usage/validation error, 3 numerical failure.
Flags override ``--config`` (JSON) values, which override built-in defaults;
the resolved config is written to the run directory.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import numerics as nx
from .diagnostics import anchor_report, lat_delta, lat_direction, trajectory_entropy, write_json
from .engine import (
    PromptEmbedding,
    TrainConfig,
    TrainingExample,
    example_loss,
    init_prompt,
    load_artifact,
    load_dataset,
    loss_and_grad,
    mean_loss,
    optimize,
    save_artifact,
    write_dataset,
)
from .errors import EmbedTuneError, NumericalError, UsageError
from .inference import delimiter_match, evaluate, exact_match, generate, load_trace, save_trace
from .model import (
    ModelConfig,
    Vocabulary,
    corpus_loss,
    encode_corpus,
    load_checkpoint,
    pretrain_base,
    random_checkpoint,
    read_corpus,
    save_checkpoint,
)
from .tasks import TASKS, get_task

OUT_ROOT_ENV = "EMBEDTUNE_OUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("embedtune")

DEFAULTS = {
    "data": {"task": "sentiment-toy", "seed": 0, "n_corpus": 4000, "n_train": 40, "n_val": 10, "n_test": 100},
    "pretrain": {
        "seed": 0, "steps": 1500, "lr": 3e-3, "batch_size": 8,
        "d": 64, "layers": 4, "heads": 4, "d_ff": 256, "max_seq": 256,
    },
    "optimize": {"lr": 0.01, "epochs": 10, "patience": 2, "seed": 0, "val_fraction": 0.2},
    "infer": {"max_tokens": 64, "seed": 0},
    "eval": {"matcher": "exact", "seed": 0},
    "gradcheck": {"seeds": 20, "h": 1e-5, "tol": 1e-4, "seed": 0, "prompt_len": 4, "input_len": 6, "target_len": 3},
    "sweep": {"lrs": "0.001,0.01,0.1", "epochs_grid": "5,10", "patience": 2, "seed": 0, "matcher": "exact"},
    "diag": {"seed": 0, "max_period": 8, "min_repeats": 3},
}


class CliError(UsageError):
    pass


# ----------------------------------------------------------------------------
# config + run directory plumbing
# ----------------------------------------------------------------------------


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS.get(args.command, {}))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        try:
            cfg.update(json.loads(path.read_text()))
        except ValueError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
    for key, value in vars(args).items():
        if key in ("command", "config", "func", "diag_kind") or value is None:
            continue
        cfg[key] = value
    return cfg


def run_dir(cfg: dict, command: str) -> Path:
    out = cfg.get("out")
    if not out:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        out = root / f"{command}-seed{cfg.get('seed', 0)}"
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not cfg.get("force"):
        raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    cfg["out"] = str(out)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise CliError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"file not found: {p}")
    return p


def open_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    return handler


def load_prompt(cfg: dict, ckpt):
    if cfg.get("artifact"):
        return load_artifact(existing(cfg["artifact"]), ckpt)
    if cfg.get("prompt"):
        return init_prompt(cfg["prompt"], ckpt)
    raise CliError("one of --artifact or --prompt is required")


def make_matcher(name: str):
    if name == "exact":
        return exact_match
    if name.startswith("delim:") and len(name) > 6:
        return delimiter_match(name[6:])
    raise CliError(f"unknown matcher {name!r}; use 'exact' or 'delim:<marker>'")


def positive_lr(value) -> float:
    lr = float(value)
    if not lr > 0:
        raise CliError(f"learning rate must be > 0, got {value}")
    return lr


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_data(cfg: dict) -> int:
    task = get_task(cfg["task"])
    out = run_dir(cfg, "data")
    seed = int(cfg["seed"])
    (out / "corpus.txt").write_text("\n".join(task.corpus(int(cfg["n_corpus"]), seed)) + "\n")
    write_dataset(task.examples(int(cfg["n_train"]), 1000 + seed), out / "train.jsonl")
    write_dataset(task.examples(int(cfg["n_val"]), 3000 + seed), out / "val.jsonl")
    write_dataset(task.examples(int(cfg["n_test"]), 5000 + seed), out / "test.jsonl")
    (out / "prompt.txt").write_text(task.prompt)
    a, b = task.lat_stimuli(20, 9000 + seed)
    (out / "stimuli_a.txt").write_text("\n".join(a) + "\n")
    (out / "stimuli_b.txt").write_text("\n".join(b) + "\n")
    print(f"wrote {task.name} data to {out}")
    return EXIT_OK


def cmd_pretrain(cfg: dict) -> int:
    require(cfg, "corpus")
    lines = read_corpus(existing(cfg["corpus"]))
    if not lines:
        raise CliError("corpus is empty")
    out = run_dir(cfg, "pretrain")
    handler = open_log(out)
    try:
        vocab = Vocabulary.from_texts(lines + ([cfg["prompt"]] if cfg.get("prompt") else []))
        config = ModelConfig(
            d=int(cfg["d"]), n_layers=int(cfg["layers"]), heads=int(cfg["heads"]),
            d_ff=int(cfg["d_ff"]), max_seq=int(cfg["max_seq"]), vocab_size=len(vocab),
        )
        corpus = encode_corpus(lines, vocab)

        def progress(step, loss):
            if (step + 1) % 100 == 0 or step == 0:
                print(f"step {step + 1} loss {loss:.6f}", flush=True)
                log.info("step %d loss %.6f", step + 1, loss)

        ckpt = pretrain_base(
            corpus, config, vocab, seed=int(cfg["seed"]), steps=int(cfg["steps"]),
            lr=positive_lr(cfg["lr"]), batch_size=int(cfg["batch_size"]), log=progress,
        )
        save_checkpoint(ckpt, out / "checkpoint.bin")
        ce = corpus_loss(corpus, ckpt)
        print(f"final per-token CE {ce:.6f}")
        print(f"checkpoint {out / 'checkpoint.bin'} hash {ckpt.content_hash}")
        log.info("final per-token CE %.6f hash %s", ce, ckpt.content_hash)
    finally:
        log.removeHandler(handler)
        handler.close()
    return EXIT_OK


def cmd_optimize(cfg: dict) -> int:
    require(cfg, "checkpoint", "prompt", "train")
    lr = positive_lr(cfg["lr"])
    ckpt = load_checkpoint(existing(cfg["checkpoint"]))
    p0 = init_prompt(cfg["prompt"], ckpt)
    train = load_dataset(existing(cfg["train"]), ckpt, prompt_len=p0.k)
    val = load_dataset(existing(cfg["val"]), ckpt, prompt_len=p0.k) if cfg.get("val") else None
    tcfg = TrainConfig(
        learning_rate=lr, max_epochs=int(cfg["epochs"]), early_stop_patience=int(cfg["patience"]),
        seed=int(cfg["seed"]), val_fraction=float(cfg["val_fraction"]),
    )
    tcfg.validate()
    out = run_dir(cfg, "optimize")
    handler = open_log(out)
    try:
        def echo(epoch, tr, va):
            line = f"epoch {epoch} train_loss {tr:.6f}" + ("" if va is None else f" val_loss {va:.6f}")
            print(line, flush=True)
            log.info(line)

        p1, report = optimize(p0, train, ckpt, tcfg, val=val, log=echo)
        save_artifact(p1, out / "artifact.bin")
        rep = report.to_dict()
        wall = rep.pop("wall_time")
        rep["seed"] = tcfg.seed
        write_json(rep, out / "report.json")
        log.info("wall_time %.3f s", wall)
        print(f"stop {report.stop_reason} after {report.epochs_run} epochs; artifact {out / 'artifact.bin'}")
    finally:
        log.removeHandler(handler)
        handler.close()
    return EXIT_OK


def cmd_infer(cfg: dict) -> int:
    require(cfg, "checkpoint", "input")
    ckpt = load_checkpoint(existing(cfg["checkpoint"]))
    p = load_prompt(cfg, ckpt)
    out = run_dir(cfg, "infer")
    trace = generate(p, cfg["input"], ckpt, max_tokens=int(cfg["max_tokens"]))
    save_trace(trace, out / "trace.json")
    print(trace.text)
    print(f"[stop: {trace.stop_reason}, {len(trace)} tokens, trace {out / 'trace.json'}]")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    require(cfg, "checkpoint", "test")
    ckpt = load_checkpoint(existing(cfg["checkpoint"]))
    p = load_prompt(cfg, ckpt)
    test = load_dataset(existing(cfg["test"]), ckpt, prompt_len=p.k)
    matcher = make_matcher(cfg["matcher"])
    out = run_dir(cfg, "eval")
    report = evaluate(p, test, ckpt, matcher)
    write_json(report.to_dict(), out / "eval.json")
    print(f"accuracy {report.accuracy:.4f} ({sum(report.correct)}/{len(report.correct)})")
    return EXIT_OK


def cmd_diag(cfg: dict, kind: str) -> int:
    if kind == "entropy":
        require(cfg, "trace")
        trace = load_trace(existing(cfg["trace"]))
        rep = trajectory_entropy(trace, int(cfg["max_period"]), int(cfg["min_repeats"]))
        print(rep.to_text())
        if cfg.get("out"):
            out = run_dir(cfg, "diag")
            write_json(rep.to_dict(), out / "entropy.json")
            (out / "entropy.txt").write_text(rep.to_text() + "\n")
        return EXIT_OK
    if kind == "anchor":
        require(cfg, "checkpoint", "artifact")
        ckpt = load_checkpoint(existing(cfg["checkpoint"]))
        p = load_artifact(existing(cfg["artifact"]), ckpt)
        rep = anchor_report(p, ckpt)
        print(rep.to_text(ckpt.vocab))
        if cfg.get("out"):
            out = run_dir(cfg, "diag")
            write_json(rep.to_dict(ckpt.vocab), out / "anchor.json")
            (out / "anchor.txt").write_text(rep.to_text(ckpt.vocab) + "\n")
        return EXIT_OK
    if kind == "lat":
        require(cfg, "checkpoint", "artifact", "stimuli_a", "stimuli_b", "query")
        ckpt = load_checkpoint(existing(cfg["checkpoint"]))
        p1 = load_artifact(existing(cfg["artifact"]), ckpt)
        prompt = cfg.get("prompt") or p1.metadata.get("prompt")
        if not prompt:
            raise CliError("--prompt is required when the artifact does not record its prompt text")
        p0 = init_prompt(prompt, ckpt)
        if p0.tokens != p1.tokens:
            raise CliError("--prompt does not match the artifact's prompt tokens")
        a = read_corpus(existing(cfg["stimuli_a"]))
        b = read_corpus(existing(cfg["stimuli_b"]))
        rep = lat_delta(p0, p1, lat_direction(a, b, ckpt), cfg["query"], ckpt)
        print(rep.to_text())
        out = run_dir(cfg, "diag")
        rep.write_csv(out / "lat.csv")
        write_json(rep.to_dict(), out / "lat.json")
        sign = rep.to_dict()["first_layer_delta_sign"]
        (out / "log.txt").write_text(f"first-layer delta sign {sign:+d}\n")
        print(f"first-layer delta sign {sign:+d}")
        return EXIT_OK
    raise CliError(f"unknown diagnostic {kind!r}")


def cmd_gradcheck(cfg: dict) -> int:
    """Backward vs central differences on the prompt matrix, several seeds."""
    h, tol = float(cfg["h"]), float(cfg["tol"])
    n_seeds = int(cfg["seeds"])
    base_seed = int(cfg["seed"])
    if cfg.get("checkpoint"):
        fixed = load_checkpoint(existing(cfg["checkpoint"]))
        vocab = fixed.vocab
    else:
        fixed = None
        vocab = Vocabulary([chr(c) for c in range(32, 127)] + ["\n"])
    worst = 0.0
    started = time.perf_counter()
    for i in range(n_seeds):
        seed = base_seed + i
        ckpt = fixed or random_checkpoint(ModelConfig(vocab_size=len(vocab)), vocab, seed)
        err = gradcheck_once(ckpt, seed, h, int(cfg["prompt_len"]), int(cfg["input_len"]), int(cfg["target_len"]))
        worst = max(worst, err)
        print(f"seed {seed} max_rel_error {err:.3e}")
    verdict = "PASS" if worst < tol else "FAIL"
    print(f"max relative error {worst:.3e} over {n_seeds} seeds ({time.perf_counter() - started:.1f} s): {verdict}")
    return EXIT_OK if verdict == "PASS" else EXIT_NUMERIC


def gradcheck_once(ckpt, seed: int, h: float = 1e-5, k: int = 4, n: int = 6, t: int = 3) -> float:
    """Max relative error of the prompt gradient for one random prompt/example."""
    rng = np.random.default_rng(seed)
    V = ckpt.config.vocab_size
    ids = rng.integers(0, V, size=k)
    p = PromptEmbedding(tuple(ids), np.array(ckpt.weights["tok_emb"][ids]), ckpt.content_hash)
    ex = TrainingExample(rng.integers(0, V, size=n), rng.integers(0, V, size=t))
    _, grad = loss_and_grad(p, ex, ckpt)
    fd = nx.finite_diff_grad(lambda m: example_loss(p, ex, ckpt, nx.Tensor2(m)).item(), p.matrix, h)
    return nx.max_relative_error(grad, fd)


def cmd_sweep(cfg: dict) -> int:
    require(cfg, "checkpoint", "prompt", "train", "val", "test")
    lrs = [positive_lr(v) for v in str(cfg["lrs"]).split(",")]
    epochs = [int(v) for v in str(cfg["epochs_grid"]).split(",")]
    if not lrs or not epochs:
        raise CliError("sweep grids must be nonempty")
    ckpt = load_checkpoint(existing(cfg["checkpoint"]))
    p0 = init_prompt(cfg["prompt"], ckpt)
    train = load_dataset(existing(cfg["train"]), ckpt, prompt_len=p0.k)
    val = load_dataset(existing(cfg["val"]), ckpt, prompt_len=p0.k)
    test = load_dataset(existing(cfg["test"]), ckpt, prompt_len=p0.k)
    matcher = make_matcher(cfg["matcher"])
    out = run_dir(cfg, "sweep")
    rows = []
    for lr, ep in itertools.product(lrs, epochs):
        tcfg = TrainConfig(learning_rate=lr, max_epochs=ep, early_stop_patience=int(cfg["patience"]), seed=int(cfg["seed"]))
        try:
            p1, _ = optimize(p0, train, ckpt, tcfg, val=val)
            row = {"lr": lr, "epochs": ep, "val_loss": mean_loss(p1, val, ckpt),
                   "test_accuracy": evaluate(p1, test, ckpt, matcher).accuracy, "status": "ok"}
        except NumericalError as exc:
            row = {"lr": lr, "epochs": ep, "val_loss": float("nan"), "test_accuracy": float("nan"), "status": str(exc)}
        rows.append(row)
        print(f"lr {lr:g} epochs {ep} val_loss {row['val_loss']:.6f} test_accuracy {row['test_accuracy']:.4f}", flush=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["lr", "epochs", "val_loss", "test_accuracy", "status"])
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embedtune", description="Prompt-embedding optimization on a frozen toy LM.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, out=True):
        p.add_argument("--config", help="JSON file of option values (flags take precedence)")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", help=f"run directory (default under ${OUT_ROOT_ENV} or ./runs)")
            p.add_argument("--force", action="store_true", default=None, help="allow writing into a non-empty run directory")

    p = sub.add_parser("data", help="write a bundled synthetic task to disk")
    common(p)
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--n-corpus", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("pretrain", help="train the base model on a corpus")
    common(p)
    p.add_argument("--corpus", help="UTF-8 text, one document per line")
    p.add_argument("--prompt", help="extra text whose characters must be in the vocabulary")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    for name in ("d", "layers", "heads", "d-ff", "max-seq"):
        p.add_argument(f"--{name}", type=int)

    p = sub.add_parser("optimize", help="optimize a prompt embedding on a dataset")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--prompt")
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--val-fraction", type=float)

    p = sub.add_parser("infer", help="greedy generation for one query")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--artifact")
    p.add_argument("--prompt")
    p.add_argument("--input")
    p.add_argument("--max-tokens", type=int)

    p = sub.add_parser("eval", help="accuracy on a test set")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--artifact")
    p.add_argument("--prompt")
    p.add_argument("--test")
    p.add_argument("--matcher", help="'exact' or 'delim:<marker>'")

    p = sub.add_parser("diag", help="entropy / anchor / lat diagnostics")
    dsub = p.add_subparsers(dest="diag_kind", metavar="KIND")
    d = dsub.add_parser("entropy")
    common(d)
    d.add_argument("--trace")
    d.add_argument("--max-period", type=int)
    d.add_argument("--min-repeats", type=int)
    d = dsub.add_parser("anchor")
    common(d)
    d.add_argument("--checkpoint")
    d.add_argument("--artifact")
    d = dsub.add_parser("lat")
    common(d)
    d.add_argument("--checkpoint")
    d.add_argument("--artifact")
    d.add_argument("--prompt")
    d.add_argument("--stimuli-a")
    d.add_argument("--stimuli-b")
    d.add_argument("--query")

    p = sub.add_parser("gradcheck", help="finite-difference check of prompt gradients")
    common(p, out=False)
    p.add_argument("--checkpoint")
    p.add_argument("--seeds", type=int)
    p.add_argument("--h", type=float)
    p.add_argument("--tol", type=float)

    p = sub.add_parser("sweep", help="learning-rate x epochs grid")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--prompt")
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--test")
    p.add_argument("--lrs", help="comma-separated learning rates")
    p.add_argument("--epochs-grid", help="comma-separated epoch counts")
    p.add_argument("--patience", type=int)
    p.add_argument("--matcher")
    return parser


COMMANDS = {
    "data": cmd_data,
    "pretrain": cmd_pretrain,
    "optimize": cmd_optimize,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command or (args.command == "diag" and not args.diag_kind):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    log.setLevel(logging.INFO)
    log.propagate = False
    try:
        cfg = resolve(args)
        if args.command == "diag":
            return cmd_diag(cfg, args.diag_kind)
        return COMMANDS[args.command](cfg)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EmbedTuneError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
