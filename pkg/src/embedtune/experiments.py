"""The bundled desk-scale experiment: pretrain, optimize a prompt, diagnose."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .diagnostics import anchor_report, lat_delta, lat_direction, trajectory_entropy
from .engine import TrainConfig, TrainingExample, init_prompt, optimize
from .inference import delimiter_match, evaluate, exact_match, generate
from .model import (
    ModelCheckpoint,
    ModelConfig,
    Vocabulary,
    encode_corpus,
    load_checkpoint,
    pretrain_base,
    save_checkpoint,
    tokenize,
)
from .tasks import SyntheticTask, get_task

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReferenceSpec:
    task: str = "sentiment-toy"
    corpus_lines: int = 4000
    corpus_seed: int = 0
    pretrain_seed: int = 0
    steps: int = 1500
    lr: float = 3e-3
    batch_size: int = 8
    d: int = 64
    n_layers: int = 4
    heads: int = 4
    d_ff: int = 256
    max_seq: int = 256

    def cache_name(self) -> str:
        return (
            f"{self.task}-c{self.corpus_lines}s{self.corpus_seed}-p{self.pretrain_seed}"
            f"-n{self.steps}-lr{self.lr:g}-b{self.batch_size}"
            f"-d{self.d}L{self.n_layers}h{self.heads}f{self.d_ff}m{self.max_seq}.ckpt"
        )


def build_reference_checkpoint(spec: ReferenceSpec = ReferenceSpec()) -> ModelCheckpoint:
    task = get_task(spec.task)
    lines = task.corpus(spec.corpus_lines, spec.corpus_seed)
    vocab = Vocabulary.from_texts(lines + [task.prompt])
    config = ModelConfig(
        d=spec.d,
        n_layers=spec.n_layers,
        heads=spec.heads,
        d_ff=spec.d_ff,
        max_seq=spec.max_seq,
        vocab_size=len(vocab),
    )

    def report(step, loss):
        if (step + 1) % 100 == 0:
            log.info("pretrain step %d loss %.4f", step + 1, loss)

    return pretrain_base(
        encode_corpus(lines, vocab),
        config,
        vocab,
        seed=spec.pretrain_seed,
        steps=spec.steps,
        lr=spec.lr,
        batch_size=spec.batch_size,
        log=report,
    )


def cached_reference_checkpoint(cache_dir, spec: ReferenceSpec = ReferenceSpec()) -> ModelCheckpoint:
    """Load the reference checkpoint from ``cache_dir``, building it on a miss."""
    path = Path(cache_dir) / spec.cache_name()
    if path.exists():
        return load_checkpoint(path)
    ckpt = build_reference_checkpoint(spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(ckpt, tmp)
    tmp.replace(path)
    return ckpt


def encode_examples(examples, ckpt: ModelCheckpoint) -> list[TrainingExample]:
    vocab = ckpt.vocab
    return [
        TrainingExample(tokenize(e.input, vocab), tokenize(e.target, vocab) + [vocab.eos_id])
        for e in examples
    ]


def task_matcher(task: SyntheticTask):
    return delimiter_match(task.marker) if task.marker else exact_match


@dataclass
class TaskRun:
    seed: int
    learning_rate: float
    acc_before: float
    acc_after: float
    train_losses: list
    val_losses: list
    stop_reason: str
    anchored_all: bool
    p_original: list
    lat_delta: list
    entropy_before: float
    entropy_after: float
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


def run_task(
    ckpt: ModelCheckpoint,
    task: SyntheticTask,
    seed: int,
    learning_rate: float = 0.01,
    max_epochs: int = 10,
    n_train: int = 40,
    n_test: int = 100,
    n_stimuli: int = 20,
) -> tuple[TaskRun, dict]:
    """Optimize the task prompt for one seed and collect every diagnostic.

    Returns the summary plus the raw objects (prompts, reports) for callers
    that want to serialize them.
    """
    started = time.perf_counter()
    train = encode_examples(task.examples(n_train, 1000 + seed), ckpt)
    test = encode_examples(task.examples(n_test, 5000 + seed), ckpt)
    matcher = task_matcher(task)
    p0 = init_prompt(task.prompt, ckpt)
    before = evaluate(p0, test, ckpt, matcher)
    cfg = TrainConfig(learning_rate=learning_rate, max_epochs=max_epochs, seed=seed)
    p1, report = optimize(p0, train, ckpt, cfg)
    after = evaluate(p1, test, ckpt, matcher)
    anchors = anchor_report(p1, ckpt)
    stim_a, stim_b = task.lat_stimuli(n_stimuli, 9000 + seed)
    directions = lat_direction(stim_a, stim_b, ckpt)
    query = task.examples(1, 7000 + seed)[0].input
    lat = lat_delta(p0, p1, directions, query, ckpt)
    ent_before = trajectory_entropy(generate(p0, query, ckpt))
    ent_after = trajectory_entropy(generate(p1, query, ckpt))
    run = TaskRun(
        seed=seed,
        learning_rate=learning_rate,
        acc_before=before.accuracy,
        acc_after=after.accuracy,
        train_losses=report.train_losses,
        val_losses=report.val_losses,
        stop_reason=report.stop_reason,
        anchored_all=anchors.all_anchored,
        p_original=[p.p_original for p in anchors.positions],
        lat_delta=lat.delta,
        entropy_before=ent_before.trajectory_entropy,
        entropy_after=ent_after.trajectory_entropy,
        seconds=time.perf_counter() - started,
    )
    extras = {
        "p0": p0,
        "p1": p1,
        "train_report": report,
        "eval_before": before,
        "eval_after": after,
        "anchors": anchors,
        "lat": lat,
        "entropy_before": ent_before,
        "entropy_after": ent_after,
    }
    return run, extras
