"""Interaction logs, student timelines and downstream task datasets.

Canonical interaction CSV (UTF-8, header required)::

    student_id,exercise_id,part,audio_duration_s,received_at_ms,elapsed_time_s,correctness

``audio_duration_s`` is empty for parts 5-7.  Exam-score labels use
``student_id,report_at_ms,score``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from amnet.errors import DataError, DomainError, ParseError, SchemaError

INTERACTION_COLUMNS = (
    "student_id",
    "exercise_id",
    "part",
    "audio_duration_s",
    "received_at_ms",
    "elapsed_time_s",
    "correctness",
)
LABEL_COLUMNS = ("student_id", "report_at_ms", "score")

N_PARTS = 7
LISTENING_PARTS = (1, 2, 3, 4)
# fixed limits for the reading parts, seconds
READING_TIME_LIMITS = {5: 25.0, 6: 50.0, 7: 55.0}
AUDIO_GRACE_S = 8.0

EXAM_SCORE_MIN = 10.0
EXAM_SCORE_MAX = 990.0
EXAM_WINDOW = 100
N_FOLDS = 5


def time_limit(part: int, audio_duration_s: float | None = None) -> float:
    """Recommended response time in seconds for an exercise of ``part``.

    Listening parts allow the audio duration plus an 8 second grace period.
    """
    if part in LISTENING_PARTS:
        if audio_duration_s is None:
            raise DomainError(f"part {part} needs an audio duration")
        return float(audio_duration_s) + AUDIO_GRACE_S
    if part in READING_TIME_LIMITS:
        return READING_TIME_LIMITS[part]
    raise DomainError(f"part must be in 1..7, got {part}")


def is_timely(elapsed_time_s: float, part: int, audio_duration_s: float | None) -> int:
    # inclusive boundary: a response exactly at the limit counts as timely
    return int(elapsed_time_s <= time_limit(part, audio_duration_s))


@dataclass(frozen=True, slots=True)
class Interaction:
    exercise_id: str
    part: int
    audio_duration_s: float | None
    received_at_ms: int
    elapsed_time_s: float
    correctness: int
    inactive_time_s: float = 0.0
    timeliness: int = field(init=False)

    def __post_init__(self):
        if self.part not in range(1, N_PARTS + 1):
            raise DomainError(f"part must be in 1..7, got {self.part}")
        if (self.audio_duration_s is not None) != (self.part in LISTENING_PARTS):
            raise DomainError(f"audio_duration_s must be given exactly for parts 1-4 (part {self.part})")
        if self.audio_duration_s is not None and self.audio_duration_s < 0:
            raise DomainError("audio_duration_s must be nonnegative")
        if self.elapsed_time_s < 0 or self.inactive_time_s < 0:
            raise DomainError("times must be nonnegative")
        if self.correctness not in (0, 1):
            raise DomainError(f"correctness must be 0 or 1, got {self.correctness}")
        object.__setattr__(
            self, "timeliness", is_timely(self.elapsed_time_s, self.part, self.audio_duration_s)
        )


@dataclass(frozen=True, slots=True)
class StudentTimeline:
    student_id: str
    interactions: tuple[Interaction, ...]

    def __len__(self) -> int:
        return len(self.interactions)


def build_timeline(student_id: str, interactions: Iterable[Interaction]) -> StudentTimeline:
    """Sort by receive time (stable) and fill in inactive gaps from timestamps."""
    ordered = sorted(interactions, key=lambda i: i.received_at_ms)
    out = []
    prev = None
    for it in ordered:
        gap = 0.0 if prev is None else (it.received_at_ms - prev) / 1000.0
        out.append(replace(it, inactive_time_s=gap))
        prev = it.received_at_ms
    return StudentTimeline(student_id, tuple(out))


def _check_header(header: Sequence[str] | None, required: Sequence[str], path) -> None:
    if header is None:
        raise SchemaError(f"{path}: empty file, expected header {','.join(required)}")
    for col in required:
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")


def parse_interactions(path: str | Path) -> list[StudentTimeline]:
    """Read a canonical interaction CSV into per-student timelines.

    Timelines come back ordered by student id; rows out of time order are
    sorted rather than rejected.
    """
    rows: dict[str, list[Interaction]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, INTERACTION_COLUMNS, path)
        for row in reader:
            line = reader.line_num
            try:
                audio_raw = row["audio_duration_s"].strip()
                it = Interaction(
                    exercise_id=row["exercise_id"],
                    part=int(row["part"]),
                    audio_duration_s=float(audio_raw) if audio_raw else None,
                    received_at_ms=int(row["received_at_ms"]),
                    elapsed_time_s=float(row["elapsed_time_s"]),
                    correctness=int(row["correctness"]),
                )
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), line) from None
            if not math.isfinite(it.elapsed_time_s):
                raise ParseError("elapsed_time_s is not finite", line)
            rows.setdefault(row["student_id"], []).append(it)
    return [build_timeline(sid, rows[sid]) for sid in sorted(rows)]


def _fmt_float(x: float) -> str:
    return repr(float(x))


def export_interactions(timelines: Iterable[StudentTimeline], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERACTION_COLUMNS)
        for tl in timelines:
            for it in tl.interactions:
                w.writerow(
                    (
                        tl.student_id,
                        it.exercise_id,
                        it.part,
                        "" if it.audio_duration_s is None else _fmt_float(it.audio_duration_s),
                        it.received_at_ms,
                        _fmt_float(it.elapsed_time_s),
                        it.correctness,
                    )
                )


@dataclass(frozen=True, slots=True)
class ExamLabel:
    student_id: str
    report_at_ms: int
    score: float


def parse_exam_labels(path: str | Path) -> list[ExamLabel]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, LABEL_COLUMNS, path)
        for row in reader:
            try:
                lab = ExamLabel(row["student_id"], int(row["report_at_ms"]), float(row["score"]))
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), reader.line_num) from None
            if not EXAM_SCORE_MIN <= lab.score <= EXAM_SCORE_MAX:
                raise ParseError(f"score {lab.score} outside [10, 990]", reader.line_num)
            out.append(lab)
    return out


def export_exam_labels(labels: Iterable[ExamLabel], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        for lab in labels:
            score = int(lab.score) if float(lab.score).is_integer() else _fmt_float(lab.score)
            w.writerow((lab.student_id, lab.report_at_ms, score))


# -- downstream tasks ---------------------------------------------------------


class TaskKind(str, enum.Enum):
    """Label-scarce downstream tasks.

    Only exam_score and review_correctness have dataset builders; the others
    are accepted by the training and evaluation code so that new builders can
    plug in.
    """

    EXAM_SCORE = "exam_score"
    REVIEW_CORRECTNESS = "review_correctness"
    GRADE = "grade"
    CERTIFICATION = "certification"
    COURSE_DROPOUT = "course_dropout"
    LECTURE_COMPLETE = "lecture_complete"

    @property
    def is_regression(self) -> bool:
        return self in (TaskKind.EXAM_SCORE, TaskKind.GRADE)

    @property
    def label_range(self) -> tuple[float, float]:
        if self is TaskKind.EXAM_SCORE:
            return EXAM_SCORE_MIN, EXAM_SCORE_MAX
        if self is TaskKind.GRADE:
            return 0.0, 4.0
        return 0.0, 1.0

    @property
    def needs_target(self) -> bool:
        return self is TaskKind.REVIEW_CORRECTNESS


@dataclass(frozen=True, slots=True)
class ExerciseRef:
    exercise_id: str
    part: int
    audio_duration_s: float | None = None


@dataclass(frozen=True, slots=True)
class TaskInstance:
    student_id: str
    input: tuple[Interaction, ...]
    label: float
    task_kind: TaskKind
    target: ExerciseRef | None = None

    def __post_init__(self):
        kind = TaskKind(self.task_kind)
        object.__setattr__(self, "task_kind", kind)
        lo, hi = kind.label_range
        if kind.is_regression:
            if not lo <= self.label <= hi:
                raise DataError(f"{kind.value} label {self.label} outside [{lo}, {hi}]")
        elif self.label not in (0, 1):
            raise DataError(f"{kind.value} label must be 0 or 1, got {self.label}")
        if (self.target is not None) != kind.needs_target:
            raise DataError(f"target exercise must be given iff task is review_correctness")


def build_exam_instances(
    timelines: Sequence[StudentTimeline], labels: Sequence[ExamLabel], window: int = EXAM_WINDOW
) -> list[TaskInstance]:
    """Pair each score report with the student's last ``window`` interactions before it."""
    by_id = {tl.student_id: tl for tl in timelines}
    out = []
    for lab in labels:
        tl = by_id.get(lab.student_id)
        if tl is None:
            raise DataError(f"label for unknown student {lab.student_id!r}")
        before = [it for it in tl.interactions if it.received_at_ms < lab.report_at_ms]
        if not before:
            raise DataError(f"student {lab.student_id!r} has no interactions before the report")
        out.append(
            TaskInstance(lab.student_id, tuple(before[-window:]), lab.score, TaskKind.EXAM_SCORE)
        )
    return out


def extract_review_instances(timeline: StudentTimeline) -> list[TaskInstance]:
    """One instance per exercise seen at least twice, from its first two occurrences.

    The input is everything strictly between the two attempts; the label is
    the correctness of the second attempt.  Instances are ordered by the
    position of the second attempt.
    """
    first: dict[str, int] = {}
    done: set[str] = set()
    out = []
    items = timeline.interactions
    for j, it in enumerate(items):
        ex = it.exercise_id
        if ex in done:
            continue
        i = first.get(ex)
        if i is None:
            first[ex] = j
            continue
        done.add(ex)
        out.append(
            TaskInstance(
                timeline.student_id,
                items[i + 1 : j],
                float(it.correctness),
                TaskKind.REVIEW_CORRECTNESS,
                ExerciseRef(ex, it.part, it.audio_duration_s),
            )
        )
    return out


def exclude_leakage(
    timelines: Iterable[StudentTimeline], labeled_student_ids: Iterable[str]
) -> list[StudentTimeline]:
    """Drop every timeline that belongs to a student used by a downstream task."""
    banned = set(labeled_student_ids)
    return [tl for tl in timelines if tl.student_id not in banned]


@dataclass(frozen=True)
class FoldSplit:
    """Index sets into the instance list; disjoint, covering every instance."""

    fold_id: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def student_ids(self, instances: Sequence[TaskInstance], part: str) -> set[str]:
        return {instances[i].student_id for i in getattr(self, part)}


def split_folds(instances: Sequence, seed: int, n_folds: int = N_FOLDS) -> list[FoldSplit]:
    """Shuffle once, cut into ``n_folds`` shards and rotate.

    Fold k tests on shard k, validates on shard k+1 and trains on the rest.
    """
    n = len(instances)
    if n < n_folds:
        raise DataError(f"need at least {n_folds} instances to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shards = np.array_split(order, n_folds)
    folds = []
    for k in range(n_folds):
        val = (k + 1) % n_folds
        train = np.concatenate([shards[s] for s in range(n_folds) if s not in (k, val)])
        folds.append(FoldSplit(k, train, shards[val], shards[k]))
    return folds
