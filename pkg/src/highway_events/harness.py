"""Dataset splitting, training, threshold calibration, evaluation and streaming."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .clips import (
    EVENT_CLASSES,
    FRAME_HEIGHT,
    FRAME_WIDTH,
    N_EVENTS,
    Clip,
    MalformedInputError,
    load_clip,
    read_pgm,
    read_sidecar,
    write_pgm,
)
from .features import FrameEncoder, make_encoder
from .models import EventDetectorModel, ModelConfig, build_model
from .nn.adam import AdamState, adam_step, clip_gradients
from .nn.loss import DEFAULT_LOSS_WEIGHTS, check_loss_weights, weighted_bce_with_logits
from .synth import default_lane_mask

THRESHOLD_GRID = tuple(round(0.1 + 0.05 * k, 2) for k in range(17))
CACHED_VARIANTS = ("hist", "convFlow")  # representations that need optical flow


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, clip_id: str, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, clip {clip_id!r}")
        self.epoch = epoch
        self.clip_id = clip_id
        self.loss = loss


# --- splitting ----------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.70, 0.20, 0.10)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or not math.isclose(sum(self.ratios), 1.0):
            raise ValueError(f"split ratios must be 3 non-negative values summing to 1, got {self.ratios}")


def clip_category(clip: Clip) -> str:
    return clip.provenance.get("scenario_kind", "unknown")


def stratified_split(items: Sequence, spec: SplitSpec = SplitSpec(), category: Callable = clip_category):
    """Per category: seeded shuffle, floor(r_train n) train, floor(r_val n) val, rest test.

    Categories are visited in sorted order and each keeps the input order of its
    members before shuffling, so the partition depends only on the items and seed.
    """
    groups: dict[str, list] = {}
    for item in items:
        groups.setdefault(category(item), []).append(item)
    rng = np.random.default_rng(spec.seed)
    train, val, test = [], [], []
    for name in sorted(groups):
        members = groups[name]
        order = rng.permutation(len(members))
        n = len(members)
        n_train = math.floor(spec.ratios[0] * n + 1e-9)
        n_val = math.floor(spec.ratios[1] * n + 1e-9)
        picked = [members[i] for i in order]
        train += picked[:n_train]
        val += picked[n_train:n_train + n_val]
        test += picked[n_train + n_val:]
    return train, val, test


# --- datasets and representation caches ------------------------------------------


def load_dataset(data_dir) -> list[Clip]:
    """All ``*.tevc`` clips in a directory, with provenance from their JSON sidecars."""
    data_dir = Path(data_dir)
    paths = sorted(data_dir.glob("*.tevc"))
    if not paths:
        raise FileNotFoundError(f"no .tevc clips in {data_dir}")
    clips = []
    for path in paths:
        sidecar = path.with_suffix(".json")
        meta = read_sidecar(sidecar) if sidecar.exists() else {}
        clip = load_clip(path, meta.get("clip_id", path.stem))
        clips.append(Clip(clip.frames, clip.labels, clip.clip_id, clip.frame_rate, meta))
    return clips


def load_lane_mask(data_dir) -> np.ndarray:
    path = Path(data_dir) / "mask.pgm"
    if path.exists():
        return (read_pgm(path) > 0).astype(np.uint8)
    return default_lane_mask()


class RepresentationStore:
    """Per-clip frame representations, computed once.

    Flow-based variants are cached as float32 ``.npy`` files beside the clips
    (``<clip_id>.<variant>.npy``) when ``cache_dir`` is given, and in memory
    otherwise. Appearance-only tensors are cheap and large, so they are rebuilt
    on demand.
    """

    def __init__(self, variant: str, lane_mask=None, cache_dir=None, encoder_factory: Callable | None = None):
        self.variant = variant
        self.lane_mask = lane_mask
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._factory = encoder_factory or (lambda: make_encoder(variant, lane_mask))
        self._memory: dict[str, np.ndarray] = {}

    def encoder(self) -> FrameEncoder:
        return self._factory()

    def __call__(self, clip: Clip) -> np.ndarray:
        if self.variant not in CACHED_VARIANTS:
            return self.encoder().encode(clip.frames)
        if clip.clip_id in self._memory:
            return self._memory[clip.clip_id]
        path = self.cache_dir / f"{clip.clip_id}.{self.variant}.npy" if self.cache_dir else None
        if path is not None and path.exists():
            reps = np.load(path)
        else:
            reps = self.encoder().encode(clip.frames)
            if path is not None:
                np.save(path, reps)
        self._memory[clip.clip_id] = reps
        return reps


# --- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 350
    lr: float = 3e-5
    loss_weights: tuple = DEFAULT_LOSS_WEIGHTS
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"learning rate must be finite and non-negative, got {self.lr}")
        check_loss_weights(self.loss_weights)
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "loss_weights": list(self.loss_weights),
            "seed": self.seed,
            "clip_norm": self.clip_norm,
        }


@dataclass
class TrainResult:
    model: EventDetectorModel
    epoch_losses: list


def train(
    config: TrainConfig,
    clips: Sequence[Clip],
    representations: Callable[[Clip], np.ndarray],
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """One Adam update per clip (loss summed over its frames), clips reshuffled every epoch."""
    if not clips:
        raise ValueError("training set is empty")
    model = build_model(config.model, config.seed)
    if config.model.standardize:
        model.fit_standardization(representations(c) for c in clips)
    opt = AdamState(lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    losses = []
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for i in rng.permutation(len(clips)):
            clip = clips[i]
            model.zero_grad()
            logits, cache = model.forward_train(representations(clip))
            loss, dlogits = weighted_bce_with_logits(logits, clip.labels, config.loss_weights)
            if not math.isfinite(loss):
                raise NumericFailure(epoch, clip.clip_id, loss)
            model.backward(dlogits, cache)
            if config.clip_norm:
                clip_gradients(model.parameter_list(), config.clip_norm)
            adam_step(model.parameter_list(), opt)
            total += loss
        losses.append(total / len(clips))
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return TrainResult(model, losses)


# --- scoring ---------------------------------------------------------------------


def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


@dataclass(frozen=True)
class ClassScore:
    """Frame-level counts for one event class.

    Precision is 1.0 when nothing was predicted and recall is 1.0 when
    nothing was present, matching the F1 = 1.0 convention for silent classes.
    """

    event: str
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f1(self) -> float:
        return f1_score(self.tp, self.fp, self.fn)

    def to_dict(self) -> dict:
        return {
            "event": self.event,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass(frozen=True)
class F1Report:
    classes: tuple
    thresholds: tuple

    @property
    def macro_f1(self) -> float:
        return float(np.mean([c.f1 for c in self.classes]))

    def to_dict(self) -> dict:
        return {
            "classes": [c.to_dict() for c in self.classes],
            "macro_f1": self.macro_f1,
            "thresholds": list(self.thresholds),
        }

    def table(self) -> str:
        lines = [f"{'event':<12}{'TP':>7}{'FP':>7}{'FN':>7}{'prec':>8}{'recall':>8}{'F1':>8}{'gamma':>7}"]
        for c, g in zip(self.classes, self.thresholds):
            lines.append(
                f"{c.event:<12}{c.tp:>7}{c.fp:>7}{c.fn:>7}{c.precision:>8.3f}{c.recall:>8.3f}{c.f1:>8.3f}{g:>7.2f}"
            )
        lines.append(f"{'macro':<12}{'':>45}{self.macro_f1:>8.3f}")
        return "\n".join(lines)


def confusion(scores: np.ndarray, labels: np.ndarray, thresholds) -> F1Report:
    """Per-class frame-level counts for ``(N, 4)`` scores against ``(N, 4)`` labels."""
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 2 or scores.shape[1] != N_EVENTS:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must both be (N, 4)")
    pred = scores >= np.asarray(thresholds, dtype=np.float64)
    classes = []
    for event in EVENT_CLASSES:
        p, y = pred[:, event.index], labels[:, event.index]
        classes.append(ClassScore(event.slug, int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & y))))
    return F1Report(tuple(classes), tuple(float(g) for g in thresholds))


def predict(model: EventDetectorModel, clips: Iterable[Clip], representations: Callable) -> list[np.ndarray]:
    return [model.forward_clip(representations(c)) for c in clips]


def _stack(scores: Sequence[np.ndarray], clips: Sequence[Clip]):
    if not clips:
        raise ValueError("no clips to score")
    return np.concatenate(scores), np.concatenate([c.labels for c in clips])


def calibrate_from_scores(scores: np.ndarray, labels: np.ndarray, grid=THRESHOLD_GRID):
    """Per class, the grid value with the highest F1 (smallest on ties), plus the F1 table.

    Returns ``(gammas, table)`` where ``table[h][k]`` is the class-``h`` F1 at ``grid[k]``.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        raise ValueError("calibration needs at least one validation frame")
    table = np.zeros((N_EVENTS, len(grid)))
    gammas = []
    for h in range(N_EVENTS):
        y = labels[:, h]
        for k, g in enumerate(grid):
            p = scores[:, h] >= g
            table[h, k] = f1_score(int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & y)))
        gammas.append(float(grid[int(np.argmax(table[h]))]))  # argmax takes the first maximum
    return tuple(gammas), table


def calibrate_thresholds(model, clips: Sequence[Clip], representations: Callable, grid=THRESHOLD_GRID):
    if not clips:
        raise ValueError("validation set is empty")
    return calibrate_from_scores(*_stack(predict(model, clips, representations), clips), grid)


def evaluate(model, thresholds, clips: Sequence[Clip], representations: Callable) -> F1Report:
    if not clips:
        raise ValueError("test set is empty")
    return confusion(*_stack(predict(model, clips, representations), clips), thresholds)


# --- streaming -------------------------------------------------------------------


@dataclass(frozen=True)
class EventLogRecord:
    clip: str
    frame: int
    event: str
    p: float
    y: bool
    gamma: float

    def to_json(self) -> str:
        return json.dumps(
            {"clip": self.clip, "frame": self.frame, "event": self.event, "p": self.p, "y": self.y, "gamma": self.gamma}
        )


@dataclass
class StreamResult:
    scores: np.ndarray
    decisions: np.ndarray
    records: list
    frame_seconds: list


BANNER_ROWS = 12


def annotate_frame(frame: np.ndarray, text: str) -> np.ndarray:
    """The frame with a black banner and white event text across the top rows."""
    from PIL import Image, ImageDraw

    out = np.array(frame, dtype=np.uint8)
    banner = Image.new("L", (out.shape[1], BANNER_ROWS), 0)
    ImageDraw.Draw(banner).text((2, 0), text, fill=255)
    out[:BANNER_ROWS] = np.asarray(banner)
    return out


def _check_frame(index: int, frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.shape != (FRAME_HEIGHT, FRAME_WIDTH) or frame.dtype != np.uint8:
        raise MalformedInputError(
            f"frame {index}: expected ({FRAME_HEIGHT}, {FRAME_WIDTH}) uint8, got {frame.shape} {frame.dtype}"
        )
    return frame


def stream(
    model: EventDetectorModel,
    encoder: FrameEncoder,
    frames: Iterable,
    clip_id: str,
    thresholds=None,
    log_all: bool = False,
    annotate_dir=None,
    sink: Callable[[EventLogRecord], None] | None = None,
) -> StreamResult:
    """Online inference: encode, step, decide and log one frame at a time.

    Records are emitted for active events only unless ``log_all``; ``sink``
    receives each record as soon as its frame is processed.
    """
    gammas = np.asarray(model.config.thresholds if thresholds is None else thresholds, dtype=np.float64)
    model.reset_state()
    encoder.reset()
    scores, decisions, records, seconds = [], [], [], []
    if annotate_dir is not None:
        Path(annotate_dir).mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        frame = _check_frame(t, frame)
        start = time.perf_counter()
        p = model.step(encoder.step(frame))
        y = p >= gammas
        seconds.append(time.perf_counter() - start)
        scores.append(p)
        decisions.append(y)
        for event in EVENT_CLASSES:
            h = event.index
            if y[h] or log_all:
                rec = EventLogRecord(clip_id, t, event.slug, float(p[h]), bool(y[h]), float(gammas[h]))
                records.append(rec)
                if sink is not None:
                    sink(rec)
        if annotate_dir is not None:
            text = " ".join(e.slug for e in EVENT_CLASSES if y[e.index]) or "-"
            write_pgm(Path(annotate_dir) / f"{clip_id}_{t:04d}.pgm", annotate_frame(frame, text))
    n = len(scores)
    return StreamResult(
        np.asarray(scores).reshape(n, N_EVENTS),
        np.asarray(decisions, dtype=bool).reshape(n, N_EVENTS),
        records,
        seconds,
    )


# --- traces ------------------------------------------------------------------------


def trace_rows(scores: np.ndarray, thresholds, labels: np.ndarray) -> list[list]:
    """Rows of ``frame, p x4, predicted x4, ground truth x4``."""
    pred = np.asarray(scores) >= np.asarray(thresholds, dtype=np.float64)
    rows = []
    for t in range(len(scores)):
        rows.append(
            [t]
            + [float(v) for v in scores[t]]
            + [int(v) for v in pred[t]]
            + [int(v) for v in np.asarray(labels)[t]]
        )
    return rows


def trace_header() -> list[str]:
    slugs = [e.slug for e in EVENT_CLASSES]
    return ["frame"] + [f"p_{s}" for s in slugs] + [f"pred_{s}" for s in slugs] + [f"true_{s}" for s in slugs]


def export_trace(model: EventDetectorModel, thresholds, clip: Clip, representations: Callable) -> str:
    """CSV text: one row per frame with scores, decisions and stored labels."""
    scores = model.forward_clip(representations(clip))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(trace_header())
    writer.writerows(trace_rows(scores, thresholds, clip.labels))
    return buf.getvalue()
