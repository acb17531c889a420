"""Parsing of grounding answers and the timestamp-accuracy metrics.

Covers moment-retrieval recall@1 at IoU thresholds, dense-captioning F1 over
IoU thresholds {0.3, 0.5, 0.7, 0.9}, highlight-detection mAP / HIT@1 on a
2-second clip grid, and a moment-style mAP at IoU 0.5 / 0.75.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .time_tokens import TimeTokenError, replace_time_runs

MR_THRESHOLDS = (0.5, 0.7)
DVC_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)
MOMENT_MAP_THRESHOLDS = (0.5, 0.75)
CLIP_SECONDS = 2.0
POSITIVE_SALIENCY = 4


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    caption: Optional[str] = None
    score: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"invalid segment [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class HighlightFrame:
    t: float
    score: float
    caption: Optional[str] = None

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"negative highlight time {self.t}")
        if not 1 <= self.score <= 5:
            raise ValueError(f"saliency score {self.score} outside [1, 5]")


@dataclass
class ParseResult:
    items: list
    diagnostics: list  # (line number, line, reason)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


_NUM = r"(\d+(?:\.\d+)?)"
_SPAN_RE = re.compile(rf"^\s*{_NUM}\s*-\s*{_NUM}\s*(?:seconds?)?\s*(?:,\s*(.*?))?\s*\.?\s*$", re.I)
_HL_RE = re.compile(
    rf"^\s*at\s+{_NUM}\s*seconds?\s*,\s*significance\s+score\s*:\s*{_NUM}\s*(?:,\s*(.*?))?\s*$", re.I
)


def parse_prediction(text, task: str = "mr", tokenizer=None) -> ParseResult:
    """Line-wise best-effort parse of a model answer.

    ``text`` may be a string (plain digits or time-token markup) or a token id
    sequence, in which case ``tokenizer`` decodes it first.  Lines that do not
    match the task format are reported in ``diagnostics``; they never raise.
    """
    if not isinstance(text, str):
        if tokenizer is None:
            raise ValueError("a tokenizer is needed to parse token ids")
        text = tokenizer.decode(text)
    task = task.lower()
    if task not in ("mr", "dvc", "vhd", "vs"):
        raise ValueError(f"unknown task {task!r}")
    items, diags = [], []
    for lineno, raw in enumerate(text.splitlines()):
        line = raw.strip()
        if not line:
            continue
        try:
            line = replace_time_runs(line)
        except (TimeTokenError, ValueError) as exc:
            diags.append((lineno, raw, f"bad time tokens: {exc}"))
            continue
        try:
            item = _parse_line(line, task)
        except ValueError as exc:
            diags.append((lineno, raw, str(exc)))
            continue
        if item is None:
            diags.append((lineno, raw, f"does not match the {task} answer format"))
        else:
            items.append(item)
    return ParseResult(items, diags)


def _parse_line(line: str, task: str):
    if task in ("vhd", "vs"):
        m = _HL_RE.match(line)
        if m:
            return HighlightFrame(float(m.group(1)), float(m.group(2)), m.group(3) or None)
        return None
    m = _SPAN_RE.match(line)
    if not m:
        return None
    start, end = float(m.group(1)), float(m.group(2))
    if end < start:
        raise ValueError(f"inverted span {start} - {end}")
    return Segment(start, end, m.group(3) or None)


def iou(a: Segment, b: Segment) -> float:
    """Temporal IoU; two zero-length segments score 1 only at the same point."""
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = max(a.end, b.end) - min(a.start, b.start)
    if union <= 0:
        return 1.0 if (a.start, a.end) == (b.start, b.end) else 0.0
    if a.length == 0 or b.length == 0:
        return 0.0
    return inter / union


def iou_matrix(preds: Sequence[Segment], gts: Sequence[Segment]) -> np.ndarray:
    return np.array([[iou(p, g) for g in gts] for p in preds], dtype=np.float64).reshape(len(preds), len(gts))


def recall_at_1(preds: Sequence[Optional[Segment]], gts: Sequence[Segment], thresholds=MR_THRESHOLDS) -> dict:
    """Fraction of queries whose top prediction reaches each IoU threshold.

    A ``None`` prediction (nothing parsed) counts as a miss.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} queries")
    if not gts:
        return {float(t): 0.0 for t in thresholds}
    ious = np.array([0.0 if p is None else iou(p, g) for p, g in zip(preds, gts)])
    return {float(t): float(np.mean(ious >= t)) for t in thresholds}


def max_matches(ious: np.ndarray, threshold: float) -> int:
    """Largest one-to-one matching using only pairs with IoU >= threshold."""
    if ious.size == 0:
        return 0
    ok = (ious >= threshold).astype(np.float64)
    rows, cols = linear_sum_assignment(-ok)
    return int(ok[rows, cols].sum())


def dvc_f1(preds: Sequence[Segment], gts: Sequence[Segment], thresholds=DVC_THRESHOLDS) -> float:
    """Localization F1 averaged over IoU thresholds.

    At each threshold predictions and ground truths are matched one-to-one,
    maximizing the number of matched pairs.
    """
    if not preds and not gts:
        return 1.0
    if not preds or not gts:
        return 0.0
    ious = iou_matrix(preds, gts)
    scores = []
    for t in thresholds:
        m = max_matches(ious, t)
        if m == 0:
            scores.append(0.0)
            continue
        p, r = m / len(preds), m / len(gts)
        scores.append(2 * p * r / (p + r))
    return float(np.mean(scores))


def average_precision(scores, positives) -> Optional[float]:
    """Mean precision at the rank of each positive; ranking by score desc, ties by index."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if not positives.any():
        return None
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def highlight_map_and_hit(
    pred_scores: Sequence[Sequence[float]], gt_saliency: Sequence[Sequence[float]], positive: float = POSITIVE_SALIENCY
) -> dict:
    """Clip-level highlight mAP and HIT@1 over queries.

    Clips with ground-truth saliency >= ``positive`` are positives.  Queries
    with no positive clip are skipped for both metrics.
    """
    if len(pred_scores) != len(gt_saliency):
        raise ValueError(f"{len(pred_scores)} predictions for {len(gt_saliency)} queries")
    aps, hits = [], []
    for q, (ps, gs) in enumerate(zip(pred_scores, gt_saliency)):
        ps = np.asarray(ps, dtype=np.float64)
        gs = np.asarray(gs, dtype=np.float64)
        if ps.shape != gs.shape:
            raise ValueError(f"query {q}: {ps.shape[0]} predicted clips vs {gs.shape[0]} ground-truth clips")
        pos = gs >= positive
        ap = average_precision(ps, pos)
        if ap is None:
            continue
        aps.append(ap)
        hits.append(float(pos[int(np.argsort(-ps, kind="stable")[0])]))
    return {
        "mAP": float(np.mean(aps)) if aps else None,
        "HIT@1": float(np.mean(hits)) if hits else None,
        "queries": len(aps),
    }


def frames_to_clip_scores(frames: Iterable[HighlightFrame], n_clips: int, clip_seconds: float = CLIP_SECONDS):
    """Place frame-level scores on the clip grid; unscored clips get 0, repeats keep the max."""
    out = np.zeros(n_clips)
    for f in frames:
        c = int(f.t // clip_seconds)
        if 0 <= c < n_clips:
            out[c] = max(out[c], f.score)
    return out


def moment_average_precision(preds: Sequence[Segment], gts: Sequence[Segment], threshold: float) -> Optional[float]:
    """Detection-style AP: ranked predictions, each ground truth matched at most once."""
    if not gts:
        return None
    order = sorted(range(len(preds)), key=lambda i: (-(preds[i].score or 0.0), i))
    used = set()
    tp = []
    for i in order:
        cands = [(iou(preds[i], g), -j) for j, g in enumerate(gts) if j not in used]
        cands = [c for c in cands if c[0] >= threshold]
        best = -max(cands)[1] if cands else None
        if best is None:
            tp.append(0)
        else:
            used.add(best)
            tp.append(1)
    tp = np.asarray(tp, dtype=np.float64)
    if tp.sum() == 0:
        return 0.0
    prec = np.cumsum(tp) / np.arange(1, len(tp) + 1)
    return float((prec * tp).sum() / len(gts))


def moment_map(per_query_preds, per_query_gts, thresholds=MOMENT_MAP_THRESHOLDS) -> dict:
    if len(per_query_preds) != len(per_query_gts):
        raise ValueError("predictions and ground truths are not aligned by query")
    out = {}
    for t in thresholds:
        aps = [moment_average_precision(p, g, t) for p, g in zip(per_query_preds, per_query_gts)]
        aps = [a for a in aps if a is not None]
        out[float(t)] = float(np.mean(aps)) if aps else None
    return out
