"""Measurement protocols: length compliance, region classification, dense
captioning mAP over an IoU x text-similarity grid, and prefix extraction.

Every protocol takes a *captioner*: any object with

    greedy(scene, boxes, prefixes) -> results with ``.words`` and ``.logprob``
    sample(scene, box, prefixes, k, p, temperature, seed) -> results with ``.words``

so the metrics can be checked against hand-built stub models as well as a
trained :class:`lencap.decode.ModelCaptioner`.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import world
from .vocab import Vocab, length_token
from .world import Box, Scene


@dataclass(frozen=True)
class ComplianceRow:
    length: int
    mean_length: float
    accuracy: float
    count: int


@dataclass(frozen=True)
class DenseEvalConfig:
    iou_thresholds: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)
    sim_thresholds: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)

    def __post_init__(self):
        for name in ("iou_thresholds", "sim_thresholds"):
            values = getattr(self, name)
            if not values or list(values) != sorted(values):
                raise ValueError(f"{name} must be non-empty and ascending")


@dataclass(frozen=True)
class Prediction:
    image: int
    box: tuple[float, float, float, float]
    words: tuple[str, ...]
    confidence: float


@dataclass(frozen=True)
class GroundTruth:
    image: int
    box: tuple[float, float, float, float]
    words: tuple[str, ...]


@dataclass
class DenseResult:
    mean_ap: float
    grid: np.ndarray  # (len(iou_thresholds), len(sim_thresholds))
    config: DenseEvalConfig


def iou(a, b) -> float:
    """IoU of two centre-form boxes ``(cx, cy, w, h)``."""
    a = a if isinstance(a, Box) else Box(*a)
    b = b if isinstance(b, Box) else Box(*b)
    if a == b:
        return 1.0  # exact, whatever the corner arithmetic rounds to
    return world.box_iou(a, b)


def token_f1(pred: Sequence[str], ref: Sequence[str]) -> float:
    """Unigram F1 on word multisets; two empty sequences score 1."""
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


def pick_object(scene: Scene, seed: int) -> int:
    rng = np.random.default_rng([seed, scene.seed, 41])
    return int(rng.integers(len(scene.objects)))


# ---------------------------------------------------------------- length compliance

def eval_length_compliance(captioner, scenes: Sequence[Scene], lengths=range(1, 9),
                           seed: int = 0) -> list[ComplianceRow]:
    """Greedy caption of one seeded random object per scene for each LEN_K.

    Every (object, K) is decoded; K values the grammar cannot describe for that
    scene are left out of that K's denominator.
    """
    if not scenes:
        raise ValueError("length compliance needs at least one scene")
    lengths = list(lengths)
    got: dict[int, list[int]] = {k: [] for k in lengths}
    for scene in scenes:
        box = scene.objects[pick_object(scene, seed)].box
        results = captioner.greedy(scene, [box] * len(lengths),
                                   [[length_token(k)] for k in lengths])
        available = set(world.available_lengths(scene))
        for k, res in zip(lengths, results):
            if k in available:
                got[k].append(len(res.words))
    rows = []
    for k in lengths:
        counts = np.array(got[k], dtype=float)
        if counts.size:
            rows.append(ComplianceRow(k, float(counts.mean()), float(np.mean(counts == k)),
                                      int(counts.size)))
        else:
            rows.append(ComplianceRow(k, float("nan"), float("nan"), 0))
    return rows


# ---------------------------------------------------------------- region classification

def vote(captions: Sequence[Sequence[str]], classes: Sequence[str] = world.SHAPES) -> int:
    """Plurality over the first class word of each caption; ties and the
    all-abstain case go to the lowest class id."""
    index = {c: i for i, c in enumerate(classes)}
    tally = np.zeros(len(classes), dtype=int)
    for words in captions:
        for w in words:
            if w in index:
                tally[index[w]] += 1
                break
    return int(np.argmax(tally))


@dataclass
class RegionResult:
    accuracy: float
    truth: list[int]
    predicted: list[int]


def eval_region_classification(captioner, scenes: Sequence[Scene], k: int = 20,
                               lengths=(1, 2, 3, 4), p: float = 0.9,
                               temperature: float = 1.0, seed: int = 0) -> RegionResult:
    """Shape classification of every ground-truth box from k nucleus samples per length."""
    if not scenes:
        raise ValueError("region classification needs at least one scene")
    truth, predicted = [], []
    prefixes = [[length_token(n)] for n in lengths]
    for scene in scenes:
        for i, obj in enumerate(scene.objects):
            results = captioner.sample(scene, obj.box, prefixes, k, p, temperature,
                                       seed=seed * 1_000_003 + scene.seed * 16 + i)
            predicted.append(vote([r.words for r in results]))
            truth.append(world.SHAPES.index(obj.shape))
    acc = float(np.mean(np.array(truth) == np.array(predicted)))
    return RegionResult(acc, truth, predicted)


# ---------------------------------------------------------------- prefix extraction

def eval_prefix_extraction(captioner, scenes: Sequence[Scene],
                           vocab: Vocab | None = None) -> dict[str, float]:
    """Accuracy of the first word completed after ``LEN_4 the <attr> is``."""
    if not scenes:
        raise ValueError("prefix extraction needs at least one scene")
    vocab = vocab or Vocab()
    prefixes = [[length_token(4)] + vocab.tokenize(["the", attr, "is"])
                for attr in world.ATTRIBUTES]
    hits = {attr: [] for attr in world.ATTRIBUTES}
    for scene in scenes:
        for obj in scene.objects:
            results = captioner.greedy(scene, [obj.box] * len(prefixes), prefixes)
            for attr, res in zip(world.ATTRIBUTES, results):
                truth = world.attribute_caption(obj, attr)[-1]
                hits[attr].append(bool(res.words) and res.words[0] == truth)
    return {attr: float(np.mean(v)) for attr, v in hits.items()}


# ---------------------------------------------------------------- dense captioning

def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP of a confidence-ranked TP indicator vector."""
    if n_gt == 0:
        raise ValueError("average precision needs ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def _match(preds, gts_by_image, iou_mat, f1_mat, t_iou, t_sim) -> np.ndarray:
    tp = np.zeros(len(preds))
    used = {img: np.zeros(len(g), dtype=bool) for img, g in gts_by_image.items()}
    for n, pred in enumerate(preds):
        ious, f1s = iou_mat[n], f1_mat[n]
        if ious is None:
            continue
        ok = (~used[pred.image]) & (ious >= t_iou) & (f1s >= t_sim)
        if ok.any():
            best = int(np.argmax(np.where(ok, ious, -1.0)))
            used[pred.image][best] = True
            tp[n] = 1
    return tp


def eval_dense_captioning(predictions: Sequence[Prediction], ground_truths: Sequence[GroundTruth],
                          config: DenseEvalConfig | None = None) -> DenseResult:
    """Mean AP over every (IoU threshold, similarity threshold) cell.

    Predictions are ranked by confidence (stable for equal confidences) and each
    is matched to the unmatched ground truth of its image with the highest IoU
    among those passing both thresholds.
    """
    config = config or DenseEvalConfig()
    if not ground_truths:
        raise ValueError("dense captioning needs ground truth")
    gts_by_image: dict[int, list[GroundTruth]] = {}
    for g in ground_truths:
        gts_by_image.setdefault(g.image, []).append(g)
    order = sorted(range(len(predictions)), key=lambda n: -predictions[n].confidence)
    preds = [predictions[n] for n in order]
    iou_mat, f1_mat = [], []
    for pred in preds:
        gts = gts_by_image.get(pred.image)
        if gts is None:
            iou_mat.append(None)
            f1_mat.append(None)
            continue
        iou_mat.append(np.array([iou(pred.box, g.box) for g in gts]))
        f1_mat.append(np.array([token_f1(pred.words, g.words) for g in gts]))
    grid = np.zeros((len(config.iou_thresholds), len(config.sim_thresholds)))
    for a, t_iou in enumerate(config.iou_thresholds):
        for b, t_sim in enumerate(config.sim_thresholds):
            tp = _match(preds, gts_by_image, iou_mat, f1_mat, t_iou, t_sim)
            grid[a, b] = average_precision(tp, len(ground_truths))
    return DenseResult(float(grid.mean()), grid, config)


def _clip_box(cx, cy, w, h) -> Box:
    w, h = min(max(w, 0.02), 1.0), min(max(h, 0.02), 1.0)
    cx = min(max(cx, w / 2), 1 - w / 2)
    cy = min(max(cy, h / 2), 1 - h / 2)
    return Box(round(cx, 6), round(cy, 6), round(w, 6), round(h, 6))


def propose_boxes(scene: Scene, seed: int = 0, jitter: float = 0.05,
                  distractors: int = 2) -> list[Box]:
    """Ground-truth boxes with uniform +-jitter noise, plus random distractors."""
    rng = np.random.default_rng([seed, scene.seed, 31])
    boxes = []
    for obj in scene.objects:
        noise = rng.uniform(-jitter, jitter, size=4)
        boxes.append(_clip_box(*(np.array(obj.box.as_tuple()) + noise)))
    for _ in range(distractors):
        w, h = rng.uniform(0.1, 0.4, size=2)
        cx, cy = rng.uniform(0, 1, size=2)
        boxes.append(_clip_box(cx, cy, w, h))
    return boxes


def dense_ground_truth(scenes: Sequence[Scene], length: int = 3) -> list[GroundTruth]:
    return [GroundTruth(s.seed, o.box.as_tuple(), tuple(world.caption_for(s, i, length)))
            for s in scenes for i, o in enumerate(s.objects)]


def dense_predictions(captioner, scenes: Sequence[Scene], seed: int = 0,
                      length: int = 3) -> list[Prediction]:
    """Greedy LEN_``length`` captions of proposal boxes; confidence is the
    log-probability per generated token."""
    out = []
    for scene in scenes:
        boxes = propose_boxes(scene, seed)
        results = captioner.greedy(scene, boxes, [[length_token(length)]] * len(boxes))
        for box, res in zip(boxes, results):
            steps = max(len(getattr(res, "tokens", res.words)), 1)
            out.append(Prediction(scene.seed, box.as_tuple(), tuple(res.words),
                                  float(res.logprob) / steps))
    return out


# ---------------------------------------------------------------- reports

def _fmt(x) -> str:
    return "nan" if x != x else f"{x:.6f}"


def write_compliance_csv(rows: Sequence[ComplianceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["length", "mean_length", "accuracy", "count"])
        for r in rows:
            w.writerow([r.length, _fmt(r.mean_length), _fmt(r.accuracy), r.count])


def write_region_csv(result: RegionResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "support", "correct"])
        truth, pred = np.array(result.truth), np.array(result.predicted)
        for c, name in enumerate(world.SHAPES):
            sel = truth == c
            w.writerow([name, int(sel.sum()), int((pred[sel] == c).sum())])
        w.writerow(["overall", truth.size, int((truth == pred).sum())])


def write_dense_csv(result: DenseResult, path) -> None:
    """Per-cell AP grid followed by the mean."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iou_threshold", "sim_threshold", "ap"])
        for a, t_iou in enumerate(result.config.iou_thresholds):
            for b, t_sim in enumerate(result.config.sim_thresholds):
                w.writerow([f"{t_iou:g}", f"{t_sim:g}", _fmt(result.grid[a, b])])
        w.writerow(["mean", "", _fmt(result.mean_ap)])


def write_prefix_csv(scores: dict[str, float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attribute", "accuracy"])
        for attr, acc in scores.items():
            w.writerow([attr, _fmt(acc)])
