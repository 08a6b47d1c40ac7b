"""End-to-end acceptance checks; each test prints one PASS/FAIL verdict line."""

import json
import time

import numpy as np
import pytest

from amnet import features
from amnet import numerics as nx
from amnet.checkpoint import from_bytes, to_bytes
from amnet.cli import main as cli_main
from amnet.dataio import TaskKind, build_exam_instances, exclude_leakage, extract_review_instances
from amnet.encoder import EncoderConfig, encoder_block
from amnet.eval import auc, mae, run_cv, write_results
from amnet.features import (
    CORRECTNESS,
    ELAPSED_TIME,
    INACTIVE_TIME,
    ExerciseVocab,
    MaskSpec,
    build_pretrain_batch,
    embed_sequences,
)
from amnet.model import ModelParams, hidden_states
from amnet.numerics import Tape, Tensor, numeric_gradient, relative_error
from amnet.simulator import emit_exam_labels, simulate_corpus, verify_learnability
from amnet.training import (
    TrainConfig,
    encode_instance,
    make_windows,
    noam_lr,
    pretrain,
    pretrain_loss,
    pretrain_predictions,
)

TINY = EncoderConfig(n_blocks=1, d_model=8, n_heads=2, ffn_hidden=12, dropout_rate=0.0, input_length=12)


@pytest.fixture(scope="module")
def corpus():
    return simulate_corpus(60, 25, 24, seed=21)


def _windows(corpus, vocab, width):
    return make_windows(corpus.timelines, vocab, width)


# -- 1. gradients -------------------------------------------------------------------


def _fd_error(build, arrays):
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*params)
    nx.backward(loss, tape)
    worst = 0.0
    for p in params:
        num = numeric_gradient(lambda: build(*params).item(), p.data, 1e-5)
        worst = max(worst, relative_error(p.grad, num))
    return worst


def _primitive_cases(rng):
    """(name, build, arrays) for every differentiable primitive."""
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    m = rng.normal(size=(4, 2))
    y01 = (rng.random((3, 4)) < 0.5).astype(float)
    ids = rng.integers(0, 3, size=(2, 5))
    mask = rng.random((3, 4)) < 0.3
    mask[:, 0] = False
    drop_seed = int(rng.integers(1 << 30))

    def weighted(t):
        return nx.tsum(nx.mul(t, w[: t.shape[0], : t.shape[1]] if t.ndim == 2 else 1.0))

    return [
        ("add", lambda x, z: weighted(nx.add(x, z)), [a, b]),
        ("sub", lambda x, z: weighted(nx.sub(x, z)), [a, b]),
        ("mul", lambda x, z: weighted(nx.mul(x, z)), [a, b]),
        ("scale", lambda x: weighted(nx.scale(x, 1.7)), [a]),
        ("relu", lambda x: weighted(nx.relu(x)), [a]),
        ("sigmoid", lambda x: weighted(nx.sigmoid(x)), [a]),
        ("matmul", lambda x, z: nx.tsum(nx.mul(nx.matmul(x, z), w[:, :2])), [a, m]),
        ("transpose", lambda x: nx.tsum(nx.mul(nx.transpose(x), w.T)), [a]),
        ("reshape", lambda x: nx.tsum(nx.mul(nx.reshape(x, (4, 3)), w.reshape(4, 3))), [a]),
        ("concat", lambda x, z: nx.tsum(nx.mul(nx.concat([x, z], 1), np.tile(w, 2))), [a, b]),
        ("take", lambda x: weighted(nx.take(x, [2, 0, 2])), [a]),
        ("embedding", lambda t: nx.tsum(nx.mul(nx.embedding(t, ids), rng_w(ids.shape + (4,)))), [a]),
        ("index", lambda x: nx.tsum(nx.mul(nx.index(x, (slice(0, 2), slice(1, 3))), w[:2, :2])), [a]),
        ("sum", lambda x: nx.tsum(nx.mul(nx.tsum(x, 0), w[0])), [a]),
        ("mean", lambda x: nx.tsum(nx.mul(nx.mean(x, 1), w[:, 0])), [a]),
        ("softmax", lambda x: weighted(nx.softmax(x, -1, mask)), [a]),
        ("layer_norm", lambda x, g, c: weighted(nx.layer_norm(x, g, c)), [a, rng.normal(size=4), rng.normal(size=4)]),
        ("dropout", lambda x: weighted(nx.dropout(x, 0.3, True, np.random.default_rng(drop_seed))), [a]),
        ("bce", lambda x: nx.binary_cross_entropy(nx.sigmoid(x), y01), [a]),
        ("bce_with_logits", lambda x: nx.bce_with_logits(x, y01), [a]),
        ("mse", lambda x: nx.mse(x, b), [a]),
    ]


_FIXED = np.random.default_rng(99).normal(size=(2, 5, 4))


def rng_w(shape):
    return _FIXED[: shape[0], : shape[1], : shape[2]]


def _block_case(seed):
    """Embedding tables, one encoder block and the masked pre-training loss."""
    rng = np.random.default_rng(seed)
    config = EncoderConfig(n_blocks=1, d_model=6, n_heads=2, ffn_hidden=8, dropout_rate=0.2, input_length=7)
    vocab = ExerciseVocab([f"q{k:04d}" for k in range(5)])
    spec = MaskSpec(0.5, frozenset({CORRECTNESS, "timeliness", ELAPSED_TIME}), frozenset({CORRECTNESS, ELAPSED_TIME}))
    params = ModelParams.init(config, vocab, rng, spec.ordered_predict())
    for name, t in params.trainable().items():
        t.data = t.data + rng.normal(0.0, 0.4, size=t.shape)
    corpus = simulate_corpus(2, 7, 7, seed=seed)
    seqs = [encode_instance_like(tl, vocab, n) for tl, n in zip(corpus.timelines, (7, 4))]
    flags_rng_seed = seed + 1
    trainable = params.trainable()
    names = list(trainable)

    def build(*tensors):
        for n, t in zip(names, tensors):
            setattr_path(params, n, t)
        batch = build_pretrain_batch(seqs, spec, params.tables, np.random.default_rng(flags_rng_seed), 7)
        h = encoder_block(batch.embeddings, params.blocks[0], config, True, np.random.default_rng(seed), batch.pad_mask)
        return pretrain_loss(h, params.pretrain_heads, batch)

    return build, [trainable[n].data for n in names]


def encode_instance_like(timeline, vocab, n):
    return features.encode_sequence(timeline.interactions[:n], vocab)


def setattr_path(params, name, tensor):
    if name.startswith("emb."):
        setattr(params.tables, name[4:], tensor)
    elif name.startswith("blocks."):
        _, k, field = name.split(".")
        setattr(params.blocks[int(k)], field, tensor)
    else:
        _, _, feat, part = name.split(".")
        w, b = params.pretrain_heads[feat]
        params.pretrain_heads[feat] = (tensor, b) if part == "w" else (w, tensor)


def test_criterion_1_gradients(verdict):
    start = time.perf_counter()
    worst, count = {}, 0
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        for name, build, arrays in _primitive_cases(rng):
            worst[name] = max(worst.get(name, 0.0), _fd_error(build, arrays))
            count += 1
        build, arrays = _block_case(trial)
        worst["block+loss"] = max(worst.get("block+loss", 0.0), _fd_error(build, arrays))
        count += 1
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    verdict("1", ok, f"{count} finite-difference checks, worst rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")
    assert ok


# -- 2. masking leak-freedom --------------------------------------------------------


def _garbage_stack(rng, n_rows):
    """A replacement for the batch stacker that fills padding with junk instead of zeros."""
    real = features._stack
    junk = {
        "exercise": lambda s: rng.integers(0, n_rows, s),
        "part": lambda s: rng.integers(0, 7, s),
        "correctness": lambda s: rng.integers(0, 2, s),
        "hidden": lambda s: rng.random(s) < 0.5,
    }

    def stack(seqs, width, name, dtype):
        out = real(seqs, width, name, dtype)
        for b, s in enumerate(seqs):
            tail = (width - len(s),)
            out[b, len(s):] = junk.get(name, lambda t: rng.normal(0, 5, t))(tail)
        return out

    return stack


def _perturb_masked(seq, flags, mask_set, rng):
    out = features.SequenceArrays(*(getattr(seq, f).copy() for f in features._ARRAY_FIELDS))
    pos = np.flatnonzero(flags[: len(seq)])
    if CORRECTNESS in mask_set:
        out.correctness[pos] = 1 - out.correctness[pos]
    if "timeliness" in mask_set:
        out.timeliness[pos] = 1 - out.timeliness[pos]
    if ELAPSED_TIME in mask_set:
        out.elapsed[pos] = rng.normal(0, 3, len(pos))
    if INACTIVE_TIME in mask_set:
        out.inactive[pos] = rng.normal(0, 3, len(pos))
    return out


def test_criterion_2_leak_freedom(corpus, verdict, monkeypatch):
    vocab = ExerciseVocab({it.exercise_id for tl in corpus.timelines for it in tl.interactions})
    windows = _windows(corpus, vocab, TINY.input_length)
    specs = [MaskSpec(), MaskSpec.for_targets([CORRECTNESS, INACTIVE_TIME], 0.4), MaskSpec.for_targets([ELAPSED_TIME], 0.8)]
    failures = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        spec = specs[trial % len(specs)]
        params = ModelParams.init(TINY, vocab, rng, spec.ordered_predict())
        pick = rng.choice(len(windows), size=6, replace=False)
        seqs = [windows[i].slice(0, int(rng.integers(1, len(windows[i]) + 1))) for i in pick]
        batch = build_pretrain_batch(seqs, spec, params.tables, np.random.default_rng([trial, 1]), TINY.input_length)
        h = hidden_states(params, seqs, batch.loss_flags, spec)[0]
        loss = pretrain_loss(h, params.pretrain_heads, batch).item()

        perturbed = [_perturb_masked(s, batch.loss_flags[b], spec.mask_features, rng) for b, s in enumerate(seqs)]
        with monkeypatch.context() as m:
            m.setattr(features, "_stack", _garbage_stack(rng, len(vocab) + 1))
            emb2, _ = embed_sequences(perturbed, params.tables, batch.loss_flags, spec)
            h2 = hidden_states(params, perturbed, batch.loss_flags, spec)[0]
        # the loss compares against the original targets; only the model's view changed
        loss2 = pretrain_loss(h2, params.pretrain_heads, batch).item()
        if not (np.array_equal(emb2.data, batch.embeddings.data) and np.array_equal(h2.data, h.data) and loss2 == loss):
            failures += 1
    ok = failures == 0
    verdict("2", ok, f"{100 - failures}/100 random batches bit-identical under masked/padding perturbation")
    assert ok


# -- 3. loss support ----------------------------------------------------------------


def test_criterion_3_loss_support(corpus, verdict):
    vocab = ExerciseVocab({it.exercise_id for tl in corpus.timelines for it in tl.interactions})
    windows = _windows(corpus, vocab, TINY.input_length)
    spec = MaskSpec.for_targets([CORRECTNESS, "timeliness", ELAPSED_TIME, INACTIVE_TIME])
    failures = 0
    for trial in range(100):
        rng = np.random.default_rng([7, trial])
        params = ModelParams.init(TINY, vocab, rng, spec.ordered_predict())
        pick = rng.choice(len(windows), size=5, replace=False)
        batch = build_pretrain_batch([windows[i] for i in pick], spec, params.tables, rng, TINY.input_length)
        h = hidden_states(params, [windows[i] for i in pick], batch.loss_flags, spec)[0]
        before = pretrain_loss(h, params.pretrain_heads, batch).item()
        off = ~batch.loss_flags
        for target in batch.targets.values():
            target[off] = rng.normal(0, 100, off.sum())
        after = pretrain_loss(h, params.pretrain_heads, batch).item()
        failures += before != after
    ok = failures == 0
    verdict("3", ok, f"{100 - failures}/100 trials bit-identical under unmasked target perturbation")
    assert ok


# -- 4. bidirectionality ------------------------------------------------------------


def test_criterion_4_bidirectionality(corpus, verdict):
    vocab = ExerciseVocab({it.exercise_id for tl in corpus.timelines for it in tl.interactions})
    spec = MaskSpec()
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng([4, trial])
        params = ModelParams.init(TINY, vocab, rng, spec.ordered_predict())
        tl = corpus.timelines[trial % len(corpus.timelines)]
        seq = features.encode_sequence(tl.interactions[: TINY.input_length], vocab)
        L = len(seq)
        t = int(rng.integers(0, L - 1))
        u = int(rng.integers(t + 1, L))
        flags = np.zeros((1, L), dtype=bool)
        flags[0, t] = True
        h = hidden_states(params, [seq], flags, spec)[0]
        changed = features.SequenceArrays(*(getattr(seq, f).copy() for f in features._ARRAY_FIELDS))
        changed.correctness[u] = 1 - changed.correctness[u]
        changed.elapsed[u] += 1.0
        changed.exercise[u] = (changed.exercise[u] + 1) % len(vocab)
        h2 = hidden_states(params, [changed], flags, spec)[0]
        p1 = pretrain_predictions(h, params.pretrain_heads, CORRECTNESS)[0, t]
        p2 = pretrain_predictions(h2, params.pretrain_heads, CORRECTNESS)[0, t]
        hits += abs(p1 - p2) > 1e-9
    ok = hits >= 95
    verdict("4", ok, f"future edit moved the earlier masked prediction in {hits}/100 trials")
    assert ok


# -- 5. metric oracles --------------------------------------------------------------


def _pairwise_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg))


def test_criterion_5_metric_oracles(verdict):
    rng = np.random.default_rng(5)
    worst_auc = worst_mae = 0.0
    sizes = []
    for trial in range(200):
        n = 2 + trial * 998 // 199
        sizes.append(n)
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        coarse = trial % 2 == 0
        scores = rng.integers(0, 10, n) / 10.0 if coarse else rng.normal(size=n)
        worst_auc = max(worst_auc, abs(auc(scores, labels) - _pairwise_auc(scores, labels)))
        p, t = rng.uniform(10, 990, n), rng.uniform(10, 990, n)
        loop = sum(abs(a - b) for a, b in zip(p, t)) / n
        worst_mae = max(worst_mae, abs(mae(p, t) - loop))
    ok = worst_auc < 1e-12 and worst_mae < 1e-9
    verdict("5", ok, f"200 instances n={min(sizes)}..{max(sizes)}: max |auc diff| {worst_auc:.1e}, max |mae diff| {worst_mae:.1e}")
    assert ok


# -- 6. schedule ---------------------------------------------------------------------


def test_criterion_6_schedule(verdict):
    got = {s: noam_lr(s) for s in (2000, 4000, 16000)}
    want = {2000: 0.0005, 4000: 0.001, 16000: 0.0005}
    err = max(abs(got[s] - want[s]) for s in want)
    ok = err <= 1e-12
    verdict("6", ok, "noam_lr " + ", ".join(f"{s}->{got[s]:.12g}" for s in got) + f" (max err {err:.1e})")
    assert ok


# -- 7. determinism and persistence --------------------------------------------------


def test_criterion_7_determinism(corpus, tmp_path, verdict):
    config = EncoderConfig(n_blocks=1, d_model=8, n_heads=2, ffn_hidden=16, dropout_rate=0.2, input_length=24)
    tc = TrainConfig(batch_size=8, warmup_steps=4, pretrain_steps=8, finetune_epochs=2, finetune_warmup_steps=4)
    a = pretrain(corpus.timelines, config, MaskSpec(), 3, tc)
    b = pretrain(corpus.timelines, config, MaskSpec(), 3, tc)
    same_ckpt = to_bytes(a) == to_bytes(b)
    round_trip = to_bytes(from_bytes(to_bytes(a))) == to_bytes(a)
    half = pretrain(corpus.timelines, config, MaskSpec(), 3, tc, until_step=3)
    resumed = pretrain(corpus.timelines, None, None, None, resume=from_bytes(to_bytes(half)))
    replay = resumed.losses == a.losses and to_bytes(resumed) == to_bytes(a)

    labels = emit_exam_labels(corpus, 0.5, 3)
    instances = build_exam_instances(corpus.timelines, labels, config.input_length)
    outs = []
    for k in range(2):
        r = run_cv(instances, TaskKind.EXAM_SCORE, 3, base=a.params, train_config=tc)
        write_results([r], tmp_path / f"r{k}.ndjson")
        outs.append((tmp_path / f"r{k}.ndjson").read_bytes())
    same_results = outs[0] == outs[1]
    ok = same_ckpt and round_trip and replay and same_results
    verdict(
        "7",
        ok,
        f"checkpoints identical={same_ckpt}, round trip exact={round_trip}, "
        f"resume replays losses={replay}, results identical={same_results}",
    )
    assert ok


# -- 8 and 9. transfer on the synthetic oracle --------------------------------------

TRANSFER_SEEDS = (0, 1, 2, 3, 4)
# desk-scale stand-ins for the full-size setup; see README for the reasoning
DESK_ENCODER = EncoderConfig(n_blocks=2, d_model=32, n_heads=2, ffn_hidden=64, dropout_rate=0.2, input_length=100)
DESK_PRETRAIN = TrainConfig(batch_size=128, peak_lr=1e-3, warmup_steps=100, pretrain_steps=1000)
DESK_EXAM = TrainConfig(batch_size=8, finetune_peak_lr=1e-3, finetune_warmup_steps=200, finetune_epochs=100)
DESK_REVIEW = TrainConfig(batch_size=32, finetune_peak_lr=1e-3, finetune_warmup_steps=200, finetune_epochs=100)


class _TransferRuns:
    """Per-seed corpus, pre-training and exam runs, computed once and shared."""

    def __init__(self):
        self.cache = {}

    def get(self, seed):
        if seed not in self.cache:
            start = time.perf_counter()
            corpus = simulate_corpus(2000, 300, 100, seed)
            labels = emit_exam_labels(corpus, 0.05, seed)
            labeled = {lab.student_id for lab in labels}
            unlabeled = exclude_leakage(corpus.timelines, labeled)
            spec = MaskSpec.for_targets([CORRECTNESS, "timeliness"], 0.6)
            state = pretrain(unlabeled, DESK_ENCODER, spec, seed, DESK_PRETRAIN)
            timelines = [tl for tl in corpus.timelines if tl.student_id in labeled]
            instances = build_exam_instances(timelines, labels)
            pre = run_cv(instances, TaskKind.EXAM_SCORE, seed, base=state.params, train_config=DESK_EXAM)
            scratch = run_cv(
                instances, TaskKind.EXAM_SCORE, seed, config=DESK_ENCODER, train_config=DESK_EXAM, vocab=state.params.vocab
            )
            baseline = verify_learnability(timelines, labels, seed)
            self.cache[seed] = {
                "n_unlabeled": len(unlabeled),
                "n_labeled": len(instances),
                "params": state.params,
                "pre": pre.mean,
                "scratch": scratch.mean,
                "baseline": baseline.cv_mae,
                "seconds": time.perf_counter() - start,
            }
        return self.cache[seed]


@pytest.fixture(scope="module")
def transfer():
    return _TransferRuns()


@pytest.mark.slow
def test_criterion_8_transfer(transfer, verdict):
    rows = [transfer.get(s) for s in TRANSFER_SEEDS]
    for s, r in zip(TRANSFER_SEEDS, rows):
        print(
            f"seed {s}: pre-trained {r['pre']:.2f}  no-pretrain {r['scratch']:.2f}  "
            f"closed-form {r['baseline']:.2f}  ({r['n_unlabeled']} unlabeled, {r['n_labeled']} labeled, {r['seconds']:.0f}s)"
        )
    assert all(r["n_unlabeled"] == 1900 and r["n_labeled"] == 100 for r in rows)
    beats_scratch = sum(r["pre"] < r["scratch"] for r in rows)
    beats_baseline = sum(r["pre"] < r["baseline"] for r in rows)
    minutes = sum(r["seconds"] for r in rows) / 60
    ok_a, ok_b, ok_t = beats_scratch >= 4, beats_baseline >= 3, minutes < 45
    detail = (
        f"pre-trained MAE < no-pretrain in {beats_scratch}/5 seeds (need 4), "
        f"< closed-form baseline in {beats_baseline}/5 (need 3), {minutes:.1f} min (limit 45)"
    )
    verdict("8", ok_a and ok_b and ok_t, detail)
    assert ok_a, detail
    assert ok_b, detail
    assert ok_t, detail


@pytest.mark.slow
def test_criterion_9_review(transfer, verdict):
    pre_auc, scratch_auc, counts = [], [], []
    for seed in TRANSFER_SEEDS:
        params = transfer.get(seed)["params"]
        # fresh students from the same population and exercise bank, never seen in pre-training
        held = simulate_corpus(200, 300, 100, seed, first_index=2000)
        instances = [inst for tl in held.timelines for inst in extract_review_instances(tl)]
        counts.append(len(instances))
        pre = run_cv(instances, TaskKind.REVIEW_CORRECTNESS, seed, base=params, train_config=DESK_REVIEW)
        scratch = run_cv(
            instances, TaskKind.REVIEW_CORRECTNESS, seed, config=DESK_ENCODER, train_config=DESK_REVIEW, vocab=params.vocab
        )
        pre_auc.append(pre.mean)
        scratch_auc.append(scratch.mean)
        print(f"seed {seed}: {len(instances)} instances, pre-trained AUC {pre.mean:.4f}±{pre.std:.4f}, no-pretrain {scratch.mean:.4f}")
    mean, std = float(np.mean(pre_auc)), float(np.std(pre_auc, ddof=1))
    wins = sum(p > s for p, s in zip(pre_auc, scratch_auc))
    ok_n, ok_sig, ok_win = min(counts) >= 2000, mean > 0.5 + 3 * std, wins >= 4
    detail = (
        f"pre-trained AUC {mean:.4f}±{std:.4f} over 5 seeds (bar {0.5 + 3 * std:.4f}), "
        f"beats no-pretrain in {wins}/5, min {min(counts)} instances"
    )
    verdict("9", ok_n and ok_sig and ok_win, detail)
    assert ok_n and ok_sig and ok_win, detail


# -- 10. ablation harness ------------------------------------------------------------

ABLATE_CONFIG = """\
n_blocks = 1
d_model = 16
n_heads = 2
ffn_hidden = 32
input_length = 50
batch_size = 32
warmup_steps = 40
pretrain_steps = 150
finetune_batch_size = 8
finetune_epochs = 40
finetune_warmup_steps = 60
n_students = 300
n_exercises = 60
interactions_per_student = 50
label_fraction = 0.2
review_fraction = 0.2
"""


def test_criterion_10_ablation(tmp_path, monkeypatch, capsys, verdict):
    monkeypatch.setenv("AMNET_DATA_DIR", str(tmp_path))
    (tmp_path / "desk.cfg").write_text(ABLATE_CONFIG)
    cfg = ["--config", str(tmp_path / "desk.cfg")]
    assert cli_main(cfg + ["simulate"]) == 0
    code = cli_main(cfg + ["ablate", "--tasks", "exam_score", "review_correctness"])
    out = capsys.readouterr().out
    table = (tmp_path / "results" / "ablation.txt").read_text().splitlines()
    records = [json.loads(x) for x in (tmp_path / "results" / "ablation.ndjson").read_text().splitlines()]
    labels = {
        "correctness",
        "correctness+elapsed_time",
        "correctness+timeliness",
        "correctness+inactive_time",
        "no-pretrain",
    }
    rows = [line.split() for line in table[2:]]
    seen = {(r[0], r[1]) for r in rows}
    want = {(task, label) for task in ("exam_score", "review_correctness") for label in labels}
    finite = all(np.isfinite(rec["value"]) for rec in records)
    rankings = [line for line in out.splitlines() if "ranking" in line]
    ok = code == 0 and seen == want and len(records) == 50 and finite and len(rankings) == 2
    with capsys.disabled():
        print("\n" + "\n".join(table))
        print("\n".join(rankings))
    verdict("10", ok, f"ablate exit {code}, {len(rows)} table rows, {len(records)} fold records; ordering reported, not asserted")
    assert ok
