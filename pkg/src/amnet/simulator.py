"""Synthetic students with known latent ability, for desk-scale verification.

Responses follow a one-parameter logistic model, P(correct) = logistic(theta - b).
Response speed shares part of its variance with ability, so elapsed time and
timeliness carry ability signal that correctness rates alone miss.  After a
wrong answer the exercise may be re-presented 3-30 interactions later with a
fixed practice gain, which yields review-correctness instances.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from amnet.dataio import (
    EXAM_WINDOW,
    LISTENING_PARTS,
    N_PARTS,
    ExamLabel,
    Interaction,
    StudentTimeline,
    build_exam_instances,
    build_timeline,
    split_folds,
)
from amnet.errors import DataError, DomainError

PRACTICE_GAIN = 0.5
SPEED_SD = 0.5
ELAPSED_NOISE_SD = 0.3
REVIEW_DELAY = (3, 30)
GAP_RANGE_S = (5.0, 12 * 3600.0)
ELAPSED_CLIP_S = (1.0, 600.0)
# typical response time per reading part; listening parts use audio + 4 s
READING_BASE_TIME_S = {5: 18.0, 6: 35.0, 7: 40.0}
EPOCH_MS = 1_577_836_800_000  # 2020-01-01T00:00:00Z
DAY_MS = 86_400_000


def logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def score_from_ability(theta: float) -> int:
    """Exam score on the 10..990 scale, rounded to a multiple of 5."""
    raw = 10.0 + 980.0 * float(logistic(theta))
    return int(5 * round(raw / 5))


@dataclass(frozen=True)
class LatentStudent:
    student_id: str
    theta: float
    speed: float
    true_score: int


@dataclass(frozen=True)
class LatentExercise:
    exercise_id: str
    part: int
    difficulty: float
    audio_duration_s: float | None
    base_time_s: float


@dataclass
class SimulatedCorpus:
    timelines: list[StudentTimeline]
    students: list[LatentStudent]
    exercises: list[LatentExercise]


def response_probability(theta: float, difficulty: float, review: bool = False) -> float:
    return float(logistic(theta - difficulty + (PRACTICE_GAIN if review else 0.0)))


def make_exercises(n_exercises: int, rng: np.random.Generator) -> list[LatentExercise]:
    if n_exercises < N_PARTS:
        raise DomainError(f"need at least {N_PARTS} exercises (one per part), got {n_exercises}")
    parts = np.concatenate([np.arange(1, N_PARTS + 1), rng.integers(1, N_PARTS + 1, n_exercises - N_PARTS)])
    out = []
    for k, part in enumerate(parts):
        part = int(part)
        b = float(rng.normal())
        if part in LISTENING_PARTS:
            audio = round(float(rng.uniform(5.0, 40.0)), 1)
            base = audio + 4.0
        else:
            audio = None
            base = READING_BASE_TIME_S[part]
        out.append(LatentExercise(f"q{k:04d}", part, b, audio, base))
    return out


def make_student(index: int, rng: np.random.Generator, speed_ability_corr: float) -> LatentStudent:
    theta = float(rng.normal())
    z = float(rng.normal())
    rho = speed_ability_corr
    speed = SPEED_SD * (rho * theta + math.sqrt(1.0 - rho * rho) * z)
    return LatentStudent(f"s{index:05d}", theta, speed, score_from_ability(theta))


def simulate_student(
    student: LatentStudent,
    exercises: Sequence[LatentExercise],
    n_interactions: int,
    rng: np.random.Generator,
    review_rate: float,
) -> StudentTimeline:
    n_ex = len(exercises)
    unseen = list(rng.permutation(n_ex))
    due: list[tuple[int, int]] = []  # (position, exercise index), kept sorted
    t_ms = EPOCH_MS + int(rng.integers(0, 30 * DAY_MS))
    log_lo, log_hi = math.log(GAP_RANGE_S[0]), math.log(GAP_RANGE_S[1])
    items = []
    for pos in range(n_interactions):
        review = bool(due) and due[0][0] <= pos
        if review:
            _, k = due.pop(0)
        elif unseen:
            k = int(unseen.pop())
        else:
            k = int(rng.integers(n_ex))
        ex = exercises[k]
        p = response_probability(student.theta, ex.difficulty, review)
        correct = int(rng.random() < p)
        elapsed = ex.base_time_s * math.exp(rng.normal(-student.speed, ELAPSED_NOISE_SD))
        elapsed = round(min(max(elapsed, ELAPSED_CLIP_S[0]), ELAPSED_CLIP_S[1]), 3)
        items.append(Interaction(ex.exercise_id, ex.part, ex.audio_duration_s, t_ms, elapsed, correct))
        if not correct and not review and rng.random() < review_rate:
            delay = int(rng.integers(REVIEW_DELAY[0], REVIEW_DELAY[1] + 1))
            due.append((pos + delay, k))
            due.sort()
        gap = math.exp(rng.uniform(log_lo, log_hi))
        t_ms += int(round(1000.0 * (elapsed + gap)))
    return build_timeline(student.student_id, items)


def simulate_corpus(
    n_students: int,
    n_exercises: int,
    interactions_per_student: int,
    seed: int,
    review_rate: float = 0.3,
    speed_ability_corr: float = 0.6,
    first_index: int = 0,
) -> SimulatedCorpus:
    """Generate timelines plus the latent truth that produced them.

    Each student draws from its own stream seeded by (seed, index), so the
    output does not depend on generation order, and a call with
    ``first_index=n`` yields fresh students from the same population and
    exercise bank as a call that generated students 0..n-1.
    """
    if n_students <= 0 or interactions_per_student <= 0 or first_index < 0:
        raise DomainError("student and interaction counts must be positive")
    if not 0.0 <= review_rate <= 1.0 or not -1.0 <= speed_ability_corr <= 1.0:
        raise DomainError("review_rate must be in [0, 1] and speed_ability_corr in [-1, 1]")
    exercises = make_exercises(n_exercises, np.random.default_rng([seed, 0]))
    students, timelines = [], []
    for i in range(first_index, first_index + n_students):
        rng = np.random.default_rng([seed, 1, i])
        st = make_student(i, rng, speed_ability_corr)
        students.append(st)
        timelines.append(simulate_student(st, exercises, interactions_per_student, rng, review_rate))
    return SimulatedCorpus(timelines, students, exercises)


def emit_exam_labels(corpus: SimulatedCorpus, fraction: float, seed: int) -> list[ExamLabel]:
    """True scores for a random subset of students, reported a day after their last interaction."""
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction must be in (0, 1], got {fraction}")
    n = len(corpus.students)
    k = int(round(fraction * n))
    if k == 0:
        raise DataError("label subset is empty")
    chosen = np.sort(np.random.default_rng([seed, 2]).choice(n, size=k, replace=False))
    out = []
    for i in chosen:
        st, tl = corpus.students[i], corpus.timelines[i]
        out.append(ExamLabel(st.student_id, tl.interactions[-1].received_at_ms + DAY_MS, float(st.true_score)))
    return out


def choose_holdout(
    corpus: SimulatedCorpus, fraction: float, seed: int, exclude: Sequence[str] = ()
) -> list[str]:
    """Reserve a random share of the students outside ``exclude`` for downstream tasks."""
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"fraction must be in [0, 1], got {fraction}")
    banned = set(exclude)
    pool = [st.student_id for st in corpus.students if st.student_id not in banned]
    k = int(round(fraction * len(corpus.students)))
    if k > len(pool):
        raise DataError(f"cannot reserve {k} students, only {len(pool)} are free")
    picked = np.random.default_rng([seed, 3]).choice(len(pool), size=k, replace=False)
    return sorted(pool[i] for i in picked)


def export_truth(students: Sequence[LatentStudent], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("student_id", "theta", "true_score"))
        for st in students:
            w.writerow((st.student_id, repr(st.theta), st.true_score))


# -- closed-form baseline ------------------------------------------------------------


@dataclass
class LearnabilityReport:
    n_labels: int
    intercept: float
    slope: float
    in_sample_mae: float
    fold_mae: list[float]
    null_mae: float  # mean absolute deviation of the scores

    @property
    def cv_mae(self) -> float:
        return float(np.mean(self.fold_mae))


def _fit_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    design = np.column_stack([np.ones_like(x), x])
    (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(a), float(b)


def correct_rates(timelines: Sequence[StudentTimeline], labels: Sequence[ExamLabel], window: int = EXAM_WINDOW) -> np.ndarray:
    instances = build_exam_instances(timelines, labels, window)
    return np.array([np.mean([it.correctness for it in inst.input]) for inst in instances])


def verify_learnability(
    timelines: Sequence[StudentTimeline], labels: Sequence[ExamLabel], seed: int = 0
) -> LearnabilityReport:
    """Linear regression of exam score on per-student correct rate.

    Reports the in-sample MAE and a 5-fold MAE on the same splits the neural
    runs use (fit on train+validation, score on test).
    """
    x = correct_rates(timelines, labels)
    y = np.array([lab.score for lab in labels])
    a, b = _fit_line(x, y)
    in_sample = float(np.mean(np.abs(a + b * x - y)))
    folds = []
    for f in split_folds(list(range(len(y))), seed):
        fit = np.concatenate([f.train, f.validation])
        fa, fb = _fit_line(x[fit], y[fit])
        folds.append(float(np.mean(np.abs(fa + fb * x[f.test] - y[f.test]))))
    null = float(np.mean(np.abs(y - y.mean())))
    return LearnabilityReport(len(y), a, b, in_sample, folds, null)
