"""Question-answering accuracy metric, collapse diagnostics, and the
ablation harness.

The accuracy metric is min(#agreeing humans / 3, 1) per example, averaged.
Both prediction and human answers are normalized before comparison (the
normalization rules are frozen here: lowercase, trim, collapse whitespace,
drop ASCII punctuation, drop one leading article).

The collapse report detects the degenerate regime where one answer dominates
the prediction distribution, which is exactly what an untrained or collapsed
model produces.
"""

from __future__ import annotations

import csv
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tokenizer
from .backbone import Model, ModelConfig
from .objectives import TrainConfig, VqaExample, build_full_caption_example, \
    build_split_half_example, build_vqa_example, train

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_ARTICLES = {"a", "an", "the"}


def normalize_answer(text: str) -> str:
    text = text.lower().strip()
    text = text.translate(_PUNCT_TABLE)
    words = re.split(r"\s+", text) if text else []
    words = [w for w in words if w]
    if words and words[0] in _ARTICLES:
        words = words[1:]
    return " ".join(words)


def vqa_accuracy(prediction: str, human_answers: list[str]) -> float:
    """min(#humans agreeing with the prediction / 3, 1), post-normalization."""
    if len(human_answers) != 10:
        raise ValueError(f"expected 10 human answers, got {len(human_answers)}")
    pred = normalize_answer(prediction)
    matches = sum(1 for a in human_answers if normalize_answer(a) == pred)
    return min(matches / 3.0, 1.0)


def is_yes_no(example: VqaExample) -> bool:
    return all(normalize_answer(a) in ("yes", "no") for a in example.human_answers)


@dataclass(frozen=True)
class CollapseReport:
    histogram: dict[str, int]
    entropy_nats: float
    top_share: float
    collapsed: bool


def collapse_report(predictions: list[str], share_threshold: float = 0.5) -> CollapseReport:
    if not predictions:
        raise ValueError("no predictions to analyze")
    counts = Counter(normalize_answer(p) for p in predictions)
    total = sum(counts.values())
    entropy = -sum((c / total) * math.log(c / total) for c in counts.values())
    top_share = max(counts.values()) / total
    return CollapseReport(
        histogram=dict(counts),
        entropy_nats=entropy,
        top_share=top_share,
        collapsed=top_share > share_threshold,
    )


@dataclass(frozen=True)
class EvalResult:
    per_example: tuple[float, ...]
    mean_accuracy: float
    collapse: CollapseReport
    predictions: tuple[str, ...]
    n_errors: int


def evaluate(model: Model, examples: list[VqaExample],
             max_decode_len: int | None = None) -> EvalResult:
    """Greedy-decode every example, score it, and aggregate."""
    scores: list[float] = []
    predictions: list[str] = []
    n_errors = 0
    for ex in examples:
        try:
            tokens = model.greedy_decode(ex.fused.rows, ex.fused.modality_ids,
                                         max_len=max_decode_len)
            pred = tokenizer.detokenize(tokens)
        except Exception:
            n_errors += 1
            continue
        predictions.append(pred)
        scores.append(vqa_accuracy(pred, list(ex.human_answers)))
    if not scores:
        raise ValueError("no example decoded successfully")
    return EvalResult(
        per_example=tuple(scores),
        mean_accuracy=float(np.mean(scores)),
        collapse=collapse_report(predictions),
        predictions=tuple(predictions),
        n_errors=n_errors,
    )


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationConfig:
    label: str
    pretrain: bool
    include_graph: bool
    yes_no_only: bool
    pretrain_steps: int = 100
    finetune_steps: int = 100
    pretrain_objective: str = "split_half"
    seed: int = 0


@dataclass(frozen=True)
class AblationRow:
    label: str
    accuracy: float | None
    iterations: int
    status: str = "ok"


def default_ablation_grid(pretrain_steps: int = 100, finetune_steps: int = 100,
                          seed: int = 0) -> list[AblationConfig]:
    """{pretrain on/off} x {graph on/off} x {yes/no-only on/off}."""
    grid = []
    for pretrain in (False, True):
        for graph in (True, False):
            for yes_no in (False, True):
                bits = [
                    "pretrain" if pretrain else "scratch",
                    "graph" if graph else "no-graph",
                    "yes-no-only" if yes_no else "all-questions",
                ]
                grid.append(AblationConfig(
                    label="+".join(bits),
                    pretrain=pretrain,
                    include_graph=graph,
                    yes_no_only=yes_no,
                    pretrain_steps=pretrain_steps,
                    finetune_steps=finetune_steps,
                    seed=seed,
                ))
    return grid


def run_ablation(grid: list[AblationConfig], model_config: ModelConfig,
                 corpus: list, vqa_records: list[dict], image_store,
                 encoders, batch_size: int = 16, lr: float = 1e-4,
                 max_target_len: int | None = None) -> list[AblationRow]:
    """One row per config; each run is independent and fully seeded.

    ``corpus`` is a list of (segment, graph) pairs for pretraining;
    ``vqa_records`` are raw {image_key, question, answers, graph} dicts so
    graph ablation can rebuild the fused inputs per config.
    """
    if max_target_len is None:
        max_target_len = model_config.max_target_len
    rows: list[AblationRow] = []
    for cfg in grid:
        try:
            rows.append(_run_one(cfg, model_config, corpus, vqa_records,
                                 image_store, encoders, batch_size, lr,
                                 max_target_len))
        except Exception as e:
            rows.append(AblationRow(cfg.label, None,
                                    cfg.finetune_steps
                                    + (cfg.pretrain_steps if cfg.pretrain else 0),
                                    status=f"failed: {e}"))
    return rows


def _run_one(cfg: AblationConfig, model_config: ModelConfig, corpus,
             vqa_records, image_store, encoders, batch_size, lr,
             max_target_len) -> AblationRow:
    build = (build_full_caption_example if cfg.pretrain_objective == "full_caption"
             else build_split_half_example)
    model = Model(model_config, seed=cfg.seed)
    iterations = 0

    if cfg.pretrain:
        examples = [
            build(seg, encoders, graph=graph if cfg.include_graph else None,
                  max_target_len=max_target_len)
            for seg, graph in corpus
        ]
        train(examples, model,
              TrainConfig(steps=cfg.pretrain_steps, batch_size=batch_size,
                          lr=lr, seed=cfg.seed))
        iterations += cfg.pretrain_steps

    rng = np.random.default_rng(cfg.seed)
    vqa_examples = [
        build_vqa_example(image_store, rec["image_key"], rec.get("graph"),
                          rec["question"], rec["answers"], rng, encoders,
                          include_graph=cfg.include_graph,
                          max_target_len=max_target_len)
        for rec in vqa_records
    ]
    if cfg.yes_no_only:
        vqa_examples = [ex for ex in vqa_examples if is_yes_no(ex)]
    if not vqa_examples:
        raise ValueError("no examples left after yes/no filtering")

    train(vqa_examples, model,
          TrainConfig(steps=cfg.finetune_steps, batch_size=batch_size,
                      lr=lr, seed=cfg.seed + 1))
    iterations += cfg.finetune_steps

    result = evaluate(model, vqa_examples, max_decode_len=16)
    return AblationRow(cfg.label, result.mean_accuracy, iterations)


def write_ablation_table(rows: list[AblationRow], fp) -> None:
    """Tab-separated (label, accuracy, iterations, status), header included."""
    writer = csv.writer(fp, delimiter="\t", lineterminator="\n")
    writer.writerow(["label", "accuracy", "iterations", "status"])
    for row in rows:
        acc = "" if row.accuracy is None else f"{row.accuracy:.4f}"
        writer.writerow([row.label, acc, row.iterations, row.status])
