"""Training-example construction for the two pretraining objectives and the
question-answering finetune, plus the teacher-forced training loop.

Objective "full_caption": the caption embedding goes in as an encoder row and
the same caption text is the decoder target. The target is therefore fully
determined by the input (the leaky variant). Objective "split_half": the
encoder sees only the first ceil(n/2) words; the decoder predicts the rest,
so nothing about the target leaks through the caption row.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tokenizer
from .backbone import AdamW, Model, cross_entropy_loss, save_checkpoint
from .errors import NotFoundError
from .experts import Embedding, FusedInput, fuse
from .scene_graph import SceneGraph
from .segmentation import Segment, sample_frame_times

OBJECTIVES = ("full_caption", "split_half")


@dataclass(frozen=True)
class PretrainExample:
    fused: FusedInput
    target: np.ndarray        # token ids, fixed length
    objective: str
    caption: str


@dataclass(frozen=True)
class VqaExample:
    fused: FusedInput
    human_answers: tuple[str, ...]
    chosen_target: str
    target: np.ndarray
    question: str
    image_key: str


def split_caption(words: list[str]) -> tuple[list[str], list[str]]:
    """First ceil(n/2) words vs the rest; concatenation reconstructs the input."""
    if len(words) < 2:
        raise ValueError("split-half needs a caption of at least 2 words")
    cut = math.ceil(len(words) / 2)
    return words[:cut], words[cut:]


def _frame_rows(segment: Segment, encoders, k_frames: int) -> list[Embedding]:
    times = segment.frame_times or sample_frame_times(segment, k_frames)
    return [encoders.encode_frame(segment.video_id, t) for t in times[:k_frames]]


def _graph_row(graph: SceneGraph | None, encoders) -> Embedding | None:
    return None if graph is None else encoders.encode_graph(graph)


def build_full_caption_example(segment: Segment, encoders, k_frames: int = 1,
                               graph: SceneGraph | None = None,
                               max_target_len: int = 128) -> PretrainExample:
    fused = fuse(
        _frame_rows(segment, encoders, k_frames),
        encoders.encode_caption(segment.caption),
        _graph_row(graph, encoders),
    )
    return PretrainExample(
        fused=fused,
        target=tokenizer.tokenize(segment.caption, max_target_len),
        objective="full_caption",
        caption=segment.caption,
    )


def build_split_half_example(segment: Segment, encoders, k_frames: int = 1,
                             graph: SceneGraph | None = None,
                             max_target_len: int = 128) -> PretrainExample:
    first, second = split_caption(segment.caption.split(" "))
    fused = fuse(
        _frame_rows(segment, encoders, k_frames),
        encoders.encode_caption(" ".join(first)),
        _graph_row(graph, encoders),
    )
    return PretrainExample(
        fused=fused,
        target=tokenizer.tokenize(" ".join(second), max_target_len),
        objective="split_half",
        caption=segment.caption,
    )


def build_vqa_example(image_store, image_key: str, graph: SceneGraph | None,
                      question: str, answers: list[str], rng: np.random.Generator,
                      encoders, include_graph: bool = True,
                      max_target_len: int = 128) -> VqaExample:
    """Image row + question row (+ graph row), target drawn from the answers."""
    if len(answers) != 10:
        raise ValueError(f"expected 10 human answers, got {len(answers)}")
    record = image_store.get_by_key(image_key)   # raises NotFoundError if absent
    image = Embedding(record.arrays[0][1].reshape(-1), "frame")
    graph_emb = _graph_row(graph if include_graph else None, encoders)
    fused = fuse([image], encoders.encode_question(question), graph_emb)
    chosen = answers[int(rng.integers(len(answers)))]
    return VqaExample(
        fused=fused,
        human_answers=tuple(answers),
        chosen_target=chosen,
        target=tokenizer.tokenize(chosen, max_target_len),
        question=question,
        image_key=image_key,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def collate(examples: list) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack fused rows, modality ids and targets; row counts must agree."""
    ms = {e.fused.rows.shape[0] for e in examples}
    if len(ms) != 1:
        raise ValueError(f"cannot batch examples with differing row counts: {sorted(ms)}")
    rows = np.stack([e.fused.rows for e in examples]).astype(np.float64)
    ids = np.stack([e.fused.modality_ids for e in examples])
    targets = np.stack([e.target for e in examples])
    return rows, ids, targets


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0     # 0 = never
    checkpoint_path: str | None = None


def train(examples: list, model: Model, cfg: TrainConfig,
          metrics_fp=None) -> list[dict]:
    """Seeded teacher-forced training; returns one metrics record per step.

    Batches follow per-epoch seeded permutations of the example list. Each
    record is {step, loss, lr, examples_seen, wall_ms}; records stream to
    ``metrics_fp`` (line-delimited JSON) as they happen so crashed runs stay
    parseable.
    """
    if not examples:
        raise ValueError("empty dataset")
    opt = AdamW(model.params(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    metrics: list[dict] = []
    examples_seen = 0
    epoch = 0
    order: list[int] = []
    t0 = time.monotonic()

    for step in range(cfg.steps):
        while len(order) < cfg.batch_size:
            rng = np.random.default_rng([cfg.seed, epoch])
            order.extend(int(i) for i in rng.permutation(len(examples)))
            epoch += 1
        batch_idx = [order.pop(0) for _ in range(cfg.batch_size)]
        rows, ids, targets = collate([examples[i] for i in batch_idx])

        model.zero_grad()
        loss = model.loss_and_grads(rows, ids, targets)
        record = {
            "step": step,
            "loss": loss,
            "lr": cfg.lr,
            "examples_seen": examples_seen,
            "wall_ms": (time.monotonic() - t0) * 1000.0,
        }
        if not math.isfinite(loss):
            record["error"] = "non-finite loss"
            metrics.append(record)
            if metrics_fp is not None:
                metrics_fp.write(json.dumps(record) + "\n")
            raise FloatingPointError(f"non-finite loss at step {step}")
        opt.step()
        examples_seen += cfg.batch_size
        record["examples_seen"] = examples_seen
        metrics.append(record)
        if metrics_fp is not None:
            metrics_fp.write(json.dumps(record) + "\n")
        if (cfg.checkpoint_every and cfg.checkpoint_path
                and (step + 1) % cfg.checkpoint_every == 0):
            save_checkpoint(model, cfg.checkpoint_path)

    if cfg.checkpoint_path:
        save_checkpoint(model, cfg.checkpoint_path)
    return metrics


def corpus_loss(model: Model, examples: list, batch_size: int = 32) -> float:
    """Token-weighted mean cross-entropy over the whole dataset, inference mode.

    A single minibatch loss is a noisy estimate of training progress; this
    walks every example once (no shuffling, no updates) and weights each
    batch by its number of non-padding target tokens so the result is the
    exact dataset-level mean.
    """
    if not examples:
        raise ValueError("empty dataset")
    total = 0.0
    n_tokens = 0
    for lo in range(0, len(examples), batch_size):
        rows, ids, targets = collate(examples[lo:lo + batch_size])
        logits = model.forward(rows, ids, targets[:, :-1])
        loss = cross_entropy_loss(logits, targets[:, 1:])
        batch_tokens = int((targets[:, 1:] != tokenizer.PAD).sum())
        total += loss * batch_tokens
        n_tokens += batch_tokens
    return total / n_tokens
