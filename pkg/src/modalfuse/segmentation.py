"""Sliding-window segmentation of word-timestamped transcripts.

Transcripts arrive as ordered (word, start, end) triples. We partition them
into fixed-size word windows, compute the words-per-minute density of each
window, drop low-density windows, and pick evenly spaced frame-sample times
inside each window's time span.

Conventions (all documented, all testable):
  * default window is 15 words, default density threshold 30 wpm (inclusive);
  * duration is measured first-word-start to last-word-end;
  * a trailing window shorter than ``window`` words is dropped, never padded;
  * zero-duration windows get infinite density and always pass the filter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

from .errors import RecordParseError, ValidationError

DEFAULT_WINDOW = 15
DEFAULT_MIN_WPM = 30.0


@dataclass(frozen=True)
class TimedWord:
    text: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError("word text must be non-empty")
        if any(c.isspace() for c in self.text):
            raise ValidationError(f"word text contains whitespace: {self.text!r}")
        if self.start_s < 0:
            raise ValidationError(f"negative start time: {self.start_s}")
        if self.end_s < self.start_s:
            raise ValidationError(
                f"word end {self.end_s} precedes start {self.start_s}"
            )


@dataclass(frozen=True)
class TimedTranscript:
    video_id: str
    language: str
    words: tuple[TimedWord, ...]

    def __post_init__(self):
        if not self.video_id:
            raise ValidationError("video_id must be non-empty")
        object.__setattr__(self, "words", tuple(self.words))
        starts = [w.start_s for w in self.words]
        if any(b < a for a, b in zip(starts, starts[1:])):
            raise ValidationError(f"transcript {self.video_id}: words not sorted by start time")


@dataclass(frozen=True)
class Segment:
    video_id: str
    word_start: int          # index of first word in the source transcript
    word_end: int            # one past the last word
    caption: str
    t_start: float
    t_end: float
    frame_times: tuple[float, ...] = field(default_factory=tuple)
    wpm: float = 0.0

    @property
    def word_count(self) -> int:
        return self.word_end - self.word_start

    @property
    def words(self) -> list[str]:
        return self.caption.split(" ")


def segment_transcript(
    transcript: TimedTranscript,
    window: int = DEFAULT_WINDOW,
    stride: int | None = None,
) -> list[Segment]:
    """Partition a transcript into word windows at offsets 0, stride, 2*stride, ...

    Each produced segment has exactly ``window`` words; a trailing remainder is
    dropped. ``stride`` defaults to ``window`` (non-overlapping partition).
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if stride is None:
        stride = window
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    words = transcript.words
    segments = []
    for offset in range(0, len(words) - window + 1, stride):
        span = words[offset : offset + window]
        seg = _make_segment(transcript.video_id, offset, span)
        segments.append(seg)
    return segments


def _make_segment(video_id: str, offset: int, span: tuple[TimedWord, ...]) -> Segment:
    t_start = span[0].start_s
    t_end = span[-1].end_s
    duration_min = (t_end - t_start) / 60.0
    wpm = math.inf if duration_min == 0.0 else len(span) / duration_min
    return Segment(
        video_id=video_id,
        word_start=offset,
        word_end=offset + len(span),
        caption=" ".join(w.text for w in span),
        t_start=t_start,
        t_end=t_end,
        wpm=wpm,
    )


def word_density(segment: Segment) -> float:
    """Words per minute over the segment's first-start-to-last-end span.

    A zero-duration span returns ``inf``: such segments are degenerate but
    maximally dense, so they always pass the density filter.
    """
    if segment.word_count < 1:
        raise ValueError("segment has no words")
    duration_min = (segment.t_end - segment.t_start) / 60.0
    if duration_min == 0.0:
        return math.inf
    return segment.word_count / duration_min


def filter_segments(segments: Iterable[Segment], min_wpm: float = DEFAULT_MIN_WPM) -> list[Segment]:
    """Keep segments whose density is >= min_wpm (inclusive), preserving order."""
    if min_wpm <= 0:
        raise ValueError(f"min_wpm must be positive, got {min_wpm}")
    return [s for s in segments if word_density(s) >= min_wpm]


def sample_frame_times(segment: Segment, k: int) -> list[float]:
    """k timestamps at the midpoints of k equal sub-spans of [t_start, t_end].

    k=1 yields the span midpoint; a degenerate span collapses all samples
    onto the single timestamp.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    span = segment.t_end - segment.t_start
    return [segment.t_start + (i + 0.5) * span / k for i in range(k)]


def with_frame_times(segment: Segment, k: int) -> Segment:
    return Segment(
        video_id=segment.video_id,
        word_start=segment.word_start,
        word_end=segment.word_end,
        caption=segment.caption,
        t_start=segment.t_start,
        t_end=segment.t_end,
        frame_times=tuple(sample_frame_times(segment, k)),
        wpm=segment.wpm,
    )


def mean_video_density(segments: Iterable[Segment]) -> float:
    """Mean per-segment density; optional whole-video density check."""
    vals = [word_density(s) for s in segments]
    if not vals:
        raise ValueError("no segments")
    finite = [v for v in vals if math.isfinite(v)]
    if not finite:
        return math.inf
    return sum(finite) / len(finite)


# ---------------------------------------------------------------------------
# Line-delimited IO.
#
# Transcript files: a header record {"video_id": ..., "lang": ...} followed by
# one word record {"w": ..., "s": ..., "e": ...} per line. Several transcripts
# may be concatenated in one file; each header starts a new one.
# ---------------------------------------------------------------------------

def read_transcripts(fp: TextIO) -> Iterator[TimedTranscript]:
    header = None
    words: list[TimedWord] = []
    for lineno, raw in enumerate(fp, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as e:
            raise RecordParseError(str(e), line=lineno) from e
        if "video_id" in rec:
            if header is not None:
                yield TimedTranscript(header["video_id"], header.get("lang", ""), tuple(words))
            header = rec
            words = []
        elif "w" in rec:
            if header is None:
                raise RecordParseError("word record before transcript header", line=lineno)
            try:
                words.append(TimedWord(rec["w"], float(rec["s"]), float(rec["e"])))
            except (KeyError, TypeError, ValueError, ValidationError) as e:
                raise RecordParseError(str(e), line=lineno) from e
        else:
            raise RecordParseError(f"unrecognized record: {raw[:80]}", line=lineno)
    if header is not None:
        yield TimedTranscript(header["video_id"], header.get("lang", ""), tuple(words))


def write_segments(segments: Iterable[Segment], fp: TextIO) -> int:
    n = 0
    for s in segments:
        fp.write(json.dumps({
            "video_id": s.video_id,
            "word_start": s.word_start,
            "word_end": s.word_end,
            "caption": s.caption,
            "t_start": s.t_start,
            "t_end": s.t_end,
            "frame_times": list(s.frame_times),
            "wpm": s.wpm if math.isfinite(s.wpm) else None,
        }) + "\n")
        n += 1
    return n


def read_segments(fp: TextIO) -> Iterator[Segment]:
    for lineno, raw in enumerate(fp, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
            yield Segment(
                video_id=rec["video_id"],
                word_start=int(rec["word_start"]),
                word_end=int(rec["word_end"]),
                caption=rec["caption"],
                t_start=float(rec["t_start"]),
                t_end=float(rec["t_end"]),
                frame_times=tuple(rec.get("frame_times", ())),
                wpm=math.inf if rec.get("wpm") is None else float(rec["wpm"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise RecordParseError(str(e), line=lineno) from e
