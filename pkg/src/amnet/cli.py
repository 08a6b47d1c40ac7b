"""Command-line entry point: simulate, pretrain, finetune, evaluate, ablate.

All paths resolve against ``$AMNET_DATA_DIR`` (default: the working
directory).  Exit codes: 0 success, 2 configuration, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from amnet.checkpoint import file_digest, load_checkpoint, save_checkpoint
from amnet.config import RunConfig, load_config
from amnet.dataio import (
    TaskKind,
    build_exam_instances,
    exclude_leakage,
    export_exam_labels,
    export_interactions,
    extract_review_instances,
    parse_exam_labels,
    parse_interactions,
)
from amnet.errors import CheckpointError, ConfigError, DataError, DomainError, NumericError
from amnet.eval import (
    ExperimentResult,
    check_compatible,
    format_table,
    read_results,
    reinit_mismatched,
    results_from_records,
    run_cv,
    write_results,
    write_summary,
)
from amnet.features import FEATURES, MaskSpec
from amnet.simulator import choose_holdout, emit_exam_labels, export_truth, simulate_corpus, verify_learnability
from amnet.training import pretrain

log = logging.getLogger("amnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

INTERACTIONS_FILE = "interactions.csv"
LABELS_FILE = "labels.csv"
REVIEW_FILE = "review_students.txt"
TRUTH_FILE = "truth.csv"

# target sets compared by `ablate`, each added to correctness
ABLATION_TARGETS = (
    ("correctness",),
    ("correctness", "elapsed_time"),
    ("correctness", "timeliness"),
    ("correctness", "inactive_time"),
)


# -- helpers ------------------------------------------------------------------------


def _features(text: str) -> tuple[str, ...]:
    names = tuple(x.strip() for x in text.split(",") if x.strip())
    bad = [n for n in names if n not in FEATURES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown feature(s) {bad}; choose from {', '.join(FEATURES)}")
    return names


def _refuse_overwrite(paths, force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise ConfigError(f"refusing to overwrite {', '.join(existing)} (pass --force)")


def _read_review_students(cfg: RunConfig) -> list[str]:
    path = cfg.path("data_dir") / REVIEW_FILE
    if not path.exists():
        return []
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _load_corpus(cfg: RunConfig):
    data = cfg.path("data_dir")
    try:
        timelines = parse_interactions(data / INTERACTIONS_FILE)
        labels = parse_exam_labels(data / LABELS_FILE) if (data / LABELS_FILE).exists() else []
    except FileNotFoundError as exc:
        raise DataError(f"missing data file: {exc.filename}") from exc
    return timelines, labels, _read_review_students(cfg)


def _pretrain_corpus(cfg: RunConfig):
    timelines, labels, review = _load_corpus(cfg)
    corpus = exclude_leakage(timelines, [lab.student_id for lab in labels] + review)
    if not corpus:
        raise DataError("no unlabeled students left for pre-training")
    return corpus


def _instances(cfg: RunConfig, kind: TaskKind):
    timelines, labels, review = _load_corpus(cfg)
    if kind is TaskKind.EXAM_SCORE:
        if not labels:
            raise DataError(f"no exam labels in {cfg.path('data_dir') / LABELS_FILE}")
        return build_exam_instances(timelines, labels, cfg.input_length)
    if kind is TaskKind.REVIEW_CORRECTNESS:
        held = set(review)
        if not held:
            raise DataError(f"no review students listed in {cfg.path('data_dir') / REVIEW_FILE}")
        out = []
        for tl in timelines:
            if tl.student_id in held:
                out.extend(extract_review_instances(tl))
        return out
    raise ConfigError(f"no dataset builder for task {kind.value}")


def _print(text: str = "") -> None:
    print(text, flush=True)


# -- commands -----------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, args) -> int:
    data, truth = cfg.path("data_dir"), cfg.path("truth_dir")
    outputs = [data / INTERACTIONS_FILE, data / LABELS_FILE, data / REVIEW_FILE, truth / TRUTH_FILE]
    _refuse_overwrite(outputs, args.force)
    corpus = simulate_corpus(
        cfg.n_students,
        cfg.n_exercises,
        cfg.interactions_per_student,
        cfg.seed,
        review_rate=cfg.review_rate,
        speed_ability_corr=cfg.speed_ability_corr,
    )
    labels = emit_exam_labels(corpus, cfg.label_fraction, cfg.seed) if cfg.label_fraction > 0 else []
    review = choose_holdout(corpus, cfg.review_fraction, cfg.seed, [lab.student_id for lab in labels])
    data.mkdir(parents=True, exist_ok=True)
    truth.mkdir(parents=True, exist_ok=True)
    export_interactions(corpus.timelines, outputs[0])
    export_exam_labels(labels, outputs[1])
    outputs[2].write_text("".join(s + "\n" for s in review), encoding="utf-8")
    export_truth(corpus.students, outputs[3])
    n_rows = sum(len(tl) for tl in corpus.timelines)
    _print(f"wrote {n_rows} interactions for {len(corpus.timelines)} students to {outputs[0]}")
    _print(f"wrote {len(labels)} exam labels, {len(review)} review students; truth in {outputs[3]}")
    return EXIT_OK


def _checkpoint_path(cfg: RunConfig, args, default_name: str) -> Path:
    return Path(args.out) if args.out else cfg.path("checkpoint_dir") / default_name


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = _checkpoint_path(cfg, args, "pretrain.ckpt")
    corpus = _pretrain_corpus(cfg)
    resume = None
    if args.resume:
        if not out.exists():
            raise ConfigError(f"--resume given but {out} does not exist")
        resume = load_checkpoint(out)
        if resume.params.config != cfg.encoder() or resume.spec != cfg.mask_spec():
            raise ConfigError("checkpoint architecture or MaskSpec differs from the current config")
        _print(f"resuming {out} at step {resume.step}")
    else:
        _refuse_overwrite([out], args.force)
    out.parent.mkdir(parents=True, exist_ok=True)

    def save_periodically(state):
        if args.save_every and state.step % args.save_every == 0:
            save_checkpoint(state, out)

    state = pretrain(
        corpus,
        cfg.encoder(),
        cfg.mask_spec(),
        cfg.seed,
        cfg.train_config(),
        resume=resume,
        until_step=args.until_step,
        on_step=save_periodically,
    )
    digest = save_checkpoint(state, out)
    last = state.losses[-1] if state.losses else float("nan")
    _print(f"pre-trained {state.step} steps on {len(corpus)} students, final loss {last:.4f}")
    _print(f"checkpoint {out} sha256 {digest}")
    return EXIT_OK


def _finetune(cfg: RunConfig, kind: TaskKind, checkpoint: Path | None, allow_mismatch: bool, jobs: int):
    instances = _instances(cfg, kind)
    base = digest = spec = None
    if checkpoint is not None:
        state = load_checkpoint(checkpoint)
        base, digest, spec = state.params, file_digest(checkpoint), state.spec.to_dict()
        try:
            check_compatible(base, cfg.encoder())
        except ConfigError:
            if not allow_mismatch:
                raise
            log.warning("re-initialising layers that do not fit the requested architecture")
            base = reinit_mismatched(base, cfg.encoder(), cfg.seed)
    return run_cv(
        instances,
        kind,
        cfg.seed,
        base=base,
        config=cfg.encoder(),
        train_config=cfg.train_config(finetune=True),
        checkpoint_digest=digest,
        mask_spec=spec,
        jobs=jobs,
    )


def _result_name(r: ExperimentResult) -> str:
    tag = "nopretrain" if r.checkpoint_digest is None else r.checkpoint_digest[:12]
    return f"{r.task}-{tag}-seed{r.seed}.ndjson"


def cmd_finetune(cfg: RunConfig, args) -> int:
    kind = TaskKind(args.task)
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    result = _finetune(cfg, kind, ckpt, args.allow_mismatch, args.jobs)
    results_dir = cfg.path("results_dir")
    results_dir.mkdir(parents=True, exist_ok=True)
    path = results_dir / _result_name(result)
    _refuse_overwrite([path], args.force)
    write_results([result], path)
    _print(format_table([result]))
    _print(f"results {path}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    paths = [Path(p) for p in args.results] or sorted(cfg.path("results_dir").glob("*.ndjson"))
    if not paths:
        raise DataError(f"no result files in {cfg.path('results_dir')}")
    records = []
    for p in paths:
        try:
            records.extend(read_results(p))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read results {p}: {exc}") from exc
    results = results_from_records(records)
    _print(format_table(results))
    summary = cfg.path("results_dir") / "summary.csv"
    summary.parent.mkdir(parents=True, exist_ok=True)
    write_summary(results, summary)
    _print(f"summary {summary}")
    data = cfg.path("data_dir")
    if (data / LABELS_FILE).exists():
        timelines, labels, _ = _load_corpus(cfg)
        if len(labels) >= 5:
            rep = verify_learnability(timelines, labels, cfg.seed)
            _print(
                f"closed-form baseline (correct-rate regression): cv mae {rep.cv_mae:.4f}, "
                f"in-sample {rep.in_sample_mae:.4f}, null {rep.null_mae:.4f}"
            )
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    kinds = [TaskKind(t) for t in args.tasks]
    corpus = _pretrain_corpus(cfg)
    ckpt_dir, results_dir = cfg.path("checkpoint_dir"), cfg.path("results_dir")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    results_dir.mkdir(parents=True, exist_ok=True)
    table_path, ndjson_path = results_dir / "ablation.txt", results_dir / "ablation.ndjson"
    _refuse_overwrite([table_path, ndjson_path], args.force)
    results = []
    for targets in ABLATION_TARGETS:
        spec = MaskSpec.for_targets(targets, cfg.selection_rate)
        name = "ablate-" + "+".join(targets) + ".ckpt"
        state = pretrain(corpus, cfg.encoder(), spec, cfg.seed, cfg.train_config())
        path = ckpt_dir / name
        save_checkpoint(state, path)
        _print(f"pre-trained {'+'.join(targets)}: {state.step} steps, final loss {state.losses[-1]:.4f}")
        for kind in kinds:
            results.append(_finetune(cfg, kind, path, False, args.jobs))
    if args.baseline:
        for kind in kinds:
            results.append(_finetune(cfg, kind, None, False, args.jobs))
    write_results(results, ndjson_path)
    table = format_table(results)
    table_path.write_text(table + "\n", encoding="utf-8")
    write_summary(results, results_dir / "ablation_summary.csv")
    _print(table)
    for kind in kinds:
        ranked = sorted(
            (r for r in results if r.task == kind.value and r.checkpoint_digest is not None),
            key=lambda r: r.mean,
            reverse=not kind.is_regression,
        )
        order = " > ".join("+".join(r.mask_spec["predict_features"]) for r in ranked)
        _print(f"{kind.value} ranking (best first): {order}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    # repeated on every subcommand so flags work before or after it
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", metavar="PATH", default=d(None), help="flat key=value config file")
    p.add_argument("--seed", type=int, default=d(None), help="random seed (overrides the config)")
    p.add_argument("--deterministic", action="store_true", default=d(False), help="single-threaded BLAS")
    p.add_argument("--jobs", type=int, default=d(1), help="folds to run in parallel")
    p.add_argument("--force", action="store_true", default=d(False), help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amnet", description="Assessment-modeling pre-training toolkit.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic corpus with known ground truth")
    p.add_argument("--students", type=int, dest="n_students")
    p.add_argument("--exercises", type=int, dest="n_exercises")
    p.add_argument("--interactions", type=int, dest="interactions_per_student")
    p.add_argument("--label-fraction", type=float, dest="label_fraction")
    p.add_argument("--review-fraction", type=float, dest="review_fraction")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain", help="masked-assessment pre-training")
    p.add_argument("--mask-features", type=_features, dest="mask_features")
    p.add_argument("--predict-features", type=_features, dest="predict_features")
    p.add_argument("--selection-rate", type=float, dest="selection_rate")
    p.add_argument("--steps", type=int, dest="pretrain_steps", help="step budget (overrides epochs)")
    p.add_argument("--epochs", type=int, dest="pretrain_epochs")
    p.add_argument("--out", help="checkpoint path (default CHECKPOINT_DIR/pretrain.ckpt)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    p.add_argument("--save-every", type=int, default=0, help="also checkpoint every N steps")
    p.add_argument("--until-step", type=int, help="stop early at this step (for staged runs)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="5-fold fine-tune and test on a downstream task")
    p.add_argument("--task", required=True, choices=[TaskKind.EXAM_SCORE.value, TaskKind.REVIEW_CORRECTNESS.value])
    p.add_argument("--checkpoint", help="pre-trained checkpoint; omit for the no-pretrain baseline")
    p.add_argument("--allow-mismatch", action="store_true", help="re-initialise layers that do not fit")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="summarise result files and the closed-form baseline")
    p.add_argument("results", nargs="*", help="result files (default: every *.ndjson in RESULTS_DIR)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare the four pre-training target sets")
    p.add_argument(
        "--tasks",
        nargs="+",
        default=[TaskKind.EXAM_SCORE.value],
        choices=[TaskKind.EXAM_SCORE.value, TaskKind.REVIEW_CORRECTNESS.value],
    )
    p.add_argument("--no-baseline", dest="baseline", action="store_false", help="skip the no-pretrain rows")
    p.set_defaults(func=cmd_ablate)

    for sp in sub.choices.values():
        _global_flags(sp, suppress=True)
    return parser


_OVERRIDE_KEYS = (
    "n_students",
    "n_exercises",
    "interactions_per_student",
    "label_fraction",
    "review_fraction",
    "mask_features",
    "predict_features",
    "selection_rate",
    "pretrain_steps",
    "pretrain_epochs",
    "seed",
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
        if args.deterministic:
            overrides["deterministic"] = True
        cfg = load_config(args.config, **overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        if cfg.deterministic:
            with threadpool_limits(limits=1):
                return args.func(cfg, args)
        return args.func(cfg, args)
    except (ConfigError, DomainError) as exc:
        print(f"amnet: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"amnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"amnet: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
