"""Grounding annotations, QA formatting and a synthetic dataset generator.

Annotation files are JSON lines (one :class:`VtgAnnotation` per line, UTF-8).
Synthetic videos are stored parametrically (duration, planted events, noise
seed); :meth:`SyntheticVideo.features` evaluates the feature track at any
time, so no frame data is written to disk.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .metrics import HighlightFrame, Segment
from .time_tokens import format_timestamp, span_text, timestamp_markup

TASKS = ("MR", "DVC", "VS", "VHD")
# instruction-set mix: 63.2K MR, 37.2K DVC, 15.2K VS, 3.9K VHD
DEFAULT_TASK_MIX = {"MR": 63.2, "DVC": 37.2, "VS": 15.2, "VHD": 3.9}

PROMPTS = {
    "MR": (
        "Find the start and end time of the moment: {query}.",
        "When does this happen in the video: {query}?",
        "Give the time span in which {query}.",
    ),
    "DVC": (
        "List every event in the video with its start and end time and a short description.",
        "Localize all events in this video and describe each of them.",
        "Which events happen in the video, and when?",
    ),
    "VS": (
        "Pick the highlight frames of this video and rate each with a significance score.",
        "Summarize the video by marking its most important moments with scores.",
    ),
    "VHD": (
        "Mark the frames that match the description and score each one: {query}.",
        "Which moments are highlights for: {query}? Give a significance score for each.",
    ),
}

VERBS = ("chopping", "pouring", "stirring", "slicing", "washing", "frying", "peeling", "mixing")
NOUNS = ("onions", "water", "butter", "bread", "carrots", "eggs", "noodles", "tomatoes")


@dataclass
class VtgAnnotation:
    video_id: str
    duration: float
    task: str
    query: str = ""
    events: list = field(default_factory=list)  # list[Segment]
    highlights: list = field(default_factory=list)  # list[HighlightFrame]

    def __post_init__(self):
        self.task = self.task.upper()
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not self.duration > 0:
            raise ValueError(f"{self.video_id}: duration must be positive")
        for s in self.events:
            if s.end > self.duration:
                raise ValueError(f"{self.video_id}: event [{s.start}, {s.end}] past duration {self.duration}")
        for h in self.highlights:
            if h.t > self.duration:
                raise ValueError(f"{self.video_id}: highlight at {h.t} past duration {self.duration}")
        if self.task == "MR" and (len(self.events) != 1 or not self.query):
            raise ValueError(f"{self.video_id}: MR needs a query and exactly one answer span")
        if self.task in ("VS", "VHD") and not self.highlights:
            raise ValueError(f"{self.video_id}: {self.task} needs at least one highlight frame")
        if self.task == "VHD" and not self.query:
            raise ValueError(f"{self.video_id}: VHD needs a query")

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "duration": self.duration,
            "task": self.task,
            "query": self.query,
            "events": [{"start": s.start, "end": s.end, "caption": s.caption, "score": s.score} for s in self.events],
            "highlights": [{"t": h.t, "score": h.score, "caption": h.caption} for h in self.highlights],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VtgAnnotation":
        return cls(
            video_id=d["video_id"],
            duration=float(d["duration"]),
            task=d["task"],
            query=d.get("query", ""),
            events=[Segment(e["start"], e["end"], e.get("caption"), e.get("score")) for e in d.get("events", [])],
            highlights=[HighlightFrame(h["t"], h["score"], h.get("caption")) for h in d.get("highlights", [])],
        )


def _dumps(d: dict) -> str:
    return json.dumps(d, ensure_ascii=False, sort_keys=True)


def save_jsonl(rows: Iterable, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(_dumps(r.to_dict() if hasattr(r, "to_dict") else r) + "\n")


def load_annotations(path) -> list[VtgAnnotation]:
    with open(path, encoding="utf-8") as f:
        return [VtgAnnotation.from_dict(json.loads(line)) for line in f if line.strip()]


# --- QA formatting -------------------------------------------------------------


def _fmt_score(s: float) -> str:
    return str(int(s)) if float(s).is_integer() else f"{s:g}"


def answer_text(a: VtgAnnotation, use_time_tokens: bool) -> str:
    if a.task == "MR":
        s = a.events[0]
        return f"{span_text(s.start, s.end, use_time_tokens)} seconds"
    if a.task == "DVC":
        return "\n".join(
            f"{span_text(s.start, s.end, use_time_tokens)} seconds, {s.caption or ''}".rstrip(", ")
            for s in a.events
        )
    render = timestamp_markup if use_time_tokens else format_timestamp
    lines = []
    for h in a.highlights:
        line = f"At {render(h.t)} second, significance score: {_fmt_score(h.score)}"
        if h.caption:
            line += f", {h.caption}"
        lines.append(line)
    return "\n".join(lines)


def format_sample(a: VtgAnnotation, use_time_tokens: bool = True, rng=None) -> tuple[str, str]:
    """(prompt, answer) for one annotation; the prompt template is a seeded draw."""
    a.validate()
    rng = np.random.default_rng(rng)
    pool = PROMPTS[a.task]
    prompt = pool[int(rng.integers(len(pool)))].format(query=a.query)
    return prompt, answer_text(a, use_time_tokens)


def derive_mr_from_dvc(dvc: VtgAnnotation) -> list[VtgAnnotation]:
    """One moment-retrieval sample per captioned event: caption as query, span as answer."""
    if dvc.task != "DVC":
        raise ValueError(f"expected a DVC annotation, got {dvc.task}")
    out = []
    for i, ev in enumerate(dvc.events):
        if not ev.caption:
            raise ValueError(f"{dvc.video_id}: event {i} has no caption to use as a query")
        out.append(
            VtgAnnotation(
                video_id=dvc.video_id,
                duration=dvc.duration,
                task="MR",
                query=ev.caption,
                events=[Segment(ev.start, ev.end, ev.caption)],
            )
        )
    return out


def normalize_saliency(raw: Sequence[float]) -> np.ndarray:
    """Min-max map onto [1, 5], unrounded.  A constant input maps to all 5s."""
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no scores to normalize")
    if not np.all(np.isfinite(x)):
        raise ValueError("saliency scores must be finite")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 5.0)
    return 1.0 + 4.0 * (x - lo) / (hi - lo)


def saliency_scores(raw: Sequence[float], keep_threshold: Optional[float] = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Integer scores in [1, 5] and the indices kept after the low-score filter.

    The filter compares the unrounded normalized score against
    ``keep_threshold``; ``None`` keeps everything.
    """
    norm = normalize_saliency(raw)
    scores = np.floor(norm + 0.5).astype(int)
    if keep_threshold is None:
        keep = np.arange(len(scores))
    else:
        keep = np.flatnonzero(norm >= keep_threshold)
    return scores, keep


def sample_frames(duration: float, n: int, mode: str = "test", rng=None) -> np.ndarray:
    """Frame times over ``n`` equal segments: a uniform draw in each (train) or the midpoints (test)."""
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if n < 1:
        raise ValueError(f"need at least one frame, got {n}")
    width = duration / n
    if mode == "test":
        return (np.arange(n) + 0.5) * width
    if mode == "train":
        rng = np.random.default_rng(rng)
        return (np.arange(n) + rng.random(n)) * width
    raise ValueError(f"unknown sampling mode {mode!r}")


# --- synthetic videos -------------------------------------------------------------


def word_vector(word: str, dim: int) -> np.ndarray:
    """Fixed unit vector for a word, independent of any global state."""
    rng = np.random.default_rng([zlib.crc32(word.encode("utf-8")), dim])
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def caption_vector(caption: str, dim: int) -> np.ndarray:
    v = sum(word_vector(w, dim) for w in caption.lower().split())
    return v / np.linalg.norm(v)


@dataclass
class SyntheticVideo:
    """A parametric video: planted events make the feature track bump on their spans."""

    video_id: str
    duration: float
    events: list  # (start, end, caption, saliency)
    noise_seed: int
    noise_scale: float = 0.3

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        self.events = [tuple(e) for e in self.events]
        for s, e, _, sal in self.events:
            if not 0 <= s <= e <= self.duration:
                raise ValueError(f"{self.video_id}: event [{s}, {e}] outside [0, {self.duration}]")
            if not 1 <= sal <= 5:
                raise ValueError(f"{self.video_id}: saliency {sal} outside [1, 5]")

    def features(self, times, dim: int) -> np.ndarray:
        t = np.asarray(times, dtype=np.float64)
        rng = np.random.default_rng([self.noise_seed, dim])
        background = rng.normal(0.0, self.noise_scale, size=dim)
        freqs = rng.uniform(0.05, 0.5, size=(4, 1))
        phases = rng.uniform(0, 2 * np.pi, size=(4, 1))
        mix = rng.normal(0.0, self.noise_scale / 2, size=(4, dim))
        out = np.sin(freqs * t[None, :] + phases).T @ mix + background
        for s, e, cap, sal in self.events:
            on = ((t >= s) & (t <= e)).astype(np.float64)
            out += np.outer(on, caption_vector(cap, dim)) * (0.6 + 0.1 * sal)
        return out

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "duration": self.duration,
            "events": [list(e) for e in self.events],
            "noise_seed": self.noise_seed,
            "noise_scale": self.noise_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticVideo":
        return cls(d["video_id"], float(d["duration"]), d["events"], int(d["noise_seed"]), float(d["noise_scale"]))


def load_videos(path) -> dict[str, SyntheticVideo]:
    with open(path, encoding="utf-8") as f:
        vids = [SyntheticVideo.from_dict(json.loads(line)) for line in f if line.strip()]
    return {v.video_id: v for v in vids}


@dataclass
class SynthSpec:
    counts: dict  # task -> number of samples
    duration_range: tuple = (20.0, 60.0)
    event_fraction: tuple = (0.10, 0.25)
    dvc_events: tuple = (2, 4)
    mr_distractors: int = 0
    noise_scale: float = 0.1
    prefix: str = "syn"

    @classmethod
    def from_mix(cls, total: int, mix: Optional[dict] = None, **kw) -> "SynthSpec":
        """Split ``total`` samples across tasks by the given ratios (largest remainder)."""
        mix = mix or DEFAULT_TASK_MIX
        w = np.array([mix.get(t, 0.0) for t in TASKS], dtype=np.float64)
        raw = total * w / w.sum()
        base = np.floor(raw).astype(int)
        for i in np.argsort(-(raw - base), kind="stable")[: total - base.sum()]:
            base[i] += 1
        return cls({t: int(c) for t, c in zip(TASKS, base)}, **kw)


def _caption(rng) -> str:
    return f"{VERBS[int(rng.integers(len(VERBS)))]} {NOUNS[int(rng.integers(len(NOUNS)))]}"


def _r1(x: float) -> float:
    return round(float(x), 1)


def _place_events(rng, duration: float, n: int, frac: tuple) -> list[tuple[float, float]]:
    """``n`` non-overlapping spans, each ``frac`` of the duration long."""
    lengths = rng.uniform(frac[0], frac[1], size=n) * duration
    if lengths.sum() > 0.9 * duration:
        lengths *= 0.9 * duration / lengths.sum()
    free = duration - lengths.sum()
    cuts = np.sort(rng.uniform(0, free, size=n))
    spans, offset = [], 0.0
    for cut, length in zip(cuts, lengths):
        start = cut + offset
        spans.append((_r1(start), _r1(min(start + length, duration))))
        offset += length
    return spans


def synth_generate(spec: SynthSpec, seed: int = 0) -> list[tuple[VtgAnnotation, SyntheticVideo]]:
    """Deterministic synthetic dataset; one (annotation, video) pair per sample."""
    lo, hi = spec.duration_range
    if not 0 < lo <= hi:
        raise ValueError(f"empty duration range {spec.duration_range}")
    for t, c in spec.counts.items():
        if t not in TASKS or c < 0:
            raise ValueError(f"bad task count {t}={c}")
    root = np.random.SeedSequence(seed)
    out = []
    for task, child in zip(TASKS, root.spawn(len(TASKS))):
        n = int(spec.counts.get(task, 0))
        for i, ss in enumerate(child.spawn(n)):
            rng = np.random.default_rng(ss)
            vid = f"{spec.prefix}-{task.lower()}-{i:05d}"
            duration = _r1(rng.uniform(lo, hi))
            out.append(_make_sample(task, vid, duration, rng, spec))
    return out


def _make_sample(task, vid, duration, rng, spec: SynthSpec):
    noise_seed = int(rng.integers(2**31))
    if task == "MR":
        n_ev = 1 + spec.mr_distractors
    elif task == "DVC":
        n_ev = int(rng.integers(spec.dvc_events[0], spec.dvc_events[1] + 1))
    else:
        n_ev = int(rng.integers(1, 3))
    spans = _place_events(rng, duration, n_ev, spec.event_fraction)
    caps: list[str] = []
    while len(caps) < n_ev:
        c = _caption(rng)
        if c not in caps:
            caps.append(c)
    sal = [int(rng.integers(3, 6)) for _ in range(n_ev)]
    events = [(s, e, c, v) for (s, e), c, v in zip(spans, caps, sal)]
    video = SyntheticVideo(vid, duration, events, noise_seed, spec.noise_scale)

    if task == "MR":
        pick = int(rng.integers(n_ev))
        s, e = spans[pick]
        ann = VtgAnnotation(vid, duration, "MR", caps[pick], [Segment(s, e, caps[pick])])
    elif task == "DVC":
        ann = VtgAnnotation(vid, duration, "DVC", "", [Segment(s, e, c) for (s, e), c in zip(spans, caps)])
    else:
        ann = _highlight_annotation(task, video, rng)
    return ann, video


def _highlight_annotation(task, video: SyntheticVideo, rng) -> VtgAnnotation:
    # score 2-second clips by cosine similarity with the caption, as a CLIP-style scorer would
    dim = 16
    n_clips = max(1, int(video.duration // 2))
    centers = np.minimum((np.arange(n_clips) + 0.5) * 2.0, video.duration)
    feats = video.features(centers, dim)
    target = video.events[0]
    q = caption_vector(target[2], dim)
    raw = feats @ q / np.maximum(np.linalg.norm(feats, axis=1), 1e-12)
    raw = raw + rng.normal(0, 0.01, size=raw.shape)
    scores, keep = saliency_scores(raw)
    cap = target[2] if task == "VS" else None
    highlights = [HighlightFrame(_r1(centers[i]), int(scores[i]), cap) for i in keep]
    query = target[2] if task == "VHD" else ""
    return VtgAnnotation(video.video_id, video.duration, task, query, highlights=highlights)


def clip_saliency(ann: VtgAnnotation, clip_seconds: float = 2.0) -> np.ndarray:
    """Ground-truth saliency on the clip grid (unlisted clips score 0)."""
    n = max(1, int(ann.duration // clip_seconds))
    out = np.zeros(n)
    for h in ann.highlights:
        c = min(int(h.t // clip_seconds), n - 1)
        out[c] = max(out[c], h.score)
    return out


def save_dataset(pairs, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_jsonl([a for a, _ in pairs], d / "annotations.jsonl")
    save_jsonl([v for _, v in pairs], d / "videos.jsonl")


def load_dataset(directory) -> list[tuple[VtgAnnotation, SyntheticVideo]]:
    d = Path(directory)
    anns = load_annotations(d / "annotations.jsonl")
    vids = load_videos(d / "videos.jsonl")
    return [(a, vids[a.video_id]) for a in anns]
