"""End-to-end acceptance checks. Each test prints one PASS/FAIL line (see conftest)."""
import json
import math
import random
from fractions import Fraction
import time

import numpy as np
import pytest

from oracles import plain_gcn, projected_angle_atan2
from skelar.angles import coarse_bin, essential_targets, projected_angles
from skelar.autodiff import DiffTensor, check_gradients, no_grad, ops, parameter
from skelar.cli import main
from skelar.encoder import DecoupledGCN, EncoderConfig, SkeletonEncoder
from skelar.errors import ParseError
from skelar.har.backbones import BackboneConfig
from skelar.har.synth import synth_imu_dataset, synth_skeleton_corpus
from skelar.har.train import TrainConfig, few_shot_protocol, make_split, train_downstream
from skelar.matching import LabelBank, MatchHead, build_label_bank, cache_bank
from skelar.pretrain import AngleDecoder, Pretrainer, PretrainRun
from skelar.skeleton import CANONICAL
from skelar.skeleton.io import format_ntu, parse_ntu_skeleton

pytestmark = pytest.mark.slow

M = 6
PRETRAIN_EPOCHS = 300


# -- shared experiment state ---------------------------------------------------------

@pytest.fixture(scope="module")
def pretrained():
    """Coarse-objective pretraining on 4 activities x 5 subjects x 4 windows."""
    corpus = synth_skeleton_corpus(4, 5, 4, seed=0)
    trainer = Pretrainer(PretrainRun(encoder=EncoderConfig.small(k=32), m=M, seed=0, objective="coarse"))
    start = time.perf_counter()
    trainer.fit(corpus, PRETRAIN_EPOCHS)
    return trainer, corpus, time.perf_counter() - start


@pytest.fixture(scope="module")
def downstream(pretrained):
    """Label bank from five skeleton windows per activity plus a virtual-IMU dataset of unseen subjects."""
    trainer, corpus, _ = pretrained
    groups: dict = {}
    for s in corpus:
        groups.setdefault(s.activity_label, []).append(s)
    bank = build_label_bank({name: g[:5] for name, g in groups.items()}, trainer.encoder)
    skeletons = synth_skeleton_corpus(4, 20, 2, seed=1, subject_offset=200)
    data = synth_imu_dataset(skeletons, bank.names, seed=1)
    return bank, data


def downstream_config(family, provider, seed=0):
    return TrainConfig(epochs=30, lr=3e-3, batch_size=16, seed=seed, provider=provider,
                       backbone=BackboneConfig(family, d=32, width=16))


# -- 1 -----------------------------------------------------------------------------

def test_criterion_01_angle_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    e1, e2 = rng.normal(size=(2, 10_000, 3))
    theta, ok = projected_angles(e1, e2)
    worst, agree = 0.0, True
    for n in range(len(e1)):
        for axis, plane in enumerate(((1, 2), (2, 0), (0, 1))):
            ref = projected_angle_atan2(e1[n], e2[n], plane)
            agree &= bool(ok[n, axis]) == (ref is not None)
            if ref is not None:
                worst = max(worst, abs(theta[n, axis] - ref))

    scales = np.exp(rng.uniform(math.log(1e-3), math.log(1e3), size=(10_000, 1)))
    t2, ok2 = projected_angles(scales * e1, scales * e2)
    both = ok & ok2
    scale_err = float(np.abs(theta[both] - t2[both]).max())

    coords = rng.normal(size=(200, 21, 3, 10))
    shift = rng.uniform(-5, 5, size=(200, 1, 3, 1))
    _, a, da = essential_targets(coords.transpose(1, 2, 0, 3).reshape(21, 3, -1))
    _, b, db = essential_targets((coords + shift).transpose(1, 2, 0, 3).reshape(21, 3, -1))
    same = da & db
    shift_err = float(np.abs(a[same] - b[same]).max())
    elapsed = time.perf_counter() - start
    ok_all = agree and worst < 1e-9 and scale_err <= 1e-12 and shift_err <= 1e-12 and elapsed < 5
    verdict(1, ok_all, f"oracle max|d|={worst:.2e} scale={scale_err:.2e} translation={shift_err:.2e} "
                       f"defined-flags-agree={agree} {elapsed:.1f}s")


# -- 2 -----------------------------------------------------------------------------

def _shape(r, lo=1, hi=3):
    return tuple(int(n) for n in r.integers(1, 5, size=r.integers(lo, hi + 1)))


def _op_cases(r):
    """One scalar-valued closure per differentiable op, with its parameters."""
    cases = {}
    s = _shape(r)
    s2 = s[:-1] + (max(s[-1], 2),)
    x = parameter(r.normal(size=s) + 0.05)
    y = parameter(r.normal(size=s2))
    w = r.normal(size=s)
    w2 = r.normal(size=s2)
    cases["relu"] = (lambda: ops.sum(ops.mul(ops.relu(x), w)), [x])
    cases["exp"] = (lambda: ops.sum(ops.mul(ops.exp(x), w)), [x])
    cases["log"] = (lambda: ops.sum(ops.mul(ops.log(ops.add(ops.square(x), 1.0)), w)), [x])
    cases["square"] = (lambda: ops.sum(ops.mul(ops.square(x), w)), [x])
    cases["sum"] = (lambda: ops.sum(ops.square(ops.sum(x, axis=-1))), [x])
    cases["mean"] = (lambda: ops.sum(ops.square(ops.mean(x, axis=0))), [x])
    cases["softmax"] = (lambda: ops.sum(ops.mul(ops.softmax(y, axis=-1), w2)), [y])
    cases["log_softmax"] = (lambda: ops.sum(ops.mul(ops.log_softmax(y, axis=-1), w2)), [y])
    cases["layer_norm"] = (lambda: ops.sum(ops.mul(ops.layer_norm(y), w2)), [y])
    cases["reshape"] = (lambda: ops.sum(ops.mul(ops.reshape(x, (-1,)), w.reshape(-1))), [x])
    cases["transpose"] = (lambda: ops.sum(ops.mul(ops.transpose(x), w.T)), [x])
    cases["swapaxes"] = (lambda: ops.sum(ops.mul(ops.swapaxes(x, 0, -1), np.swapaxes(w, 0, -1))), [x])
    cases["index"] = (lambda: ops.sum(ops.square(ops.index(x, (slice(None, None, -1),)))), [x])
    r_pad = r.normal(size=s[:-1] + (s[-1] + 3,))
    cases["pad_last"] = (lambda: ops.sum(ops.mul(ops.pad_last(x, 1, 2), r_pad)), [x])

    a, b = parameter(r.normal(size=s)), parameter(r.normal(size=s[-1:]))
    cases["add"] = (lambda: ops.sum(ops.square(ops.add(a, b))), [a, b])
    cases["sub"] = (lambda: ops.sum(ops.square(ops.sub(a, b))), [a, b])
    cases["mul"] = (lambda: ops.sum(ops.square(ops.mul(a, b))), [a, b])
    cases["div"] = (lambda: ops.sum(ops.square(ops.div(a, ops.add(ops.square(b), 1.0)))), [a, b])
    cases["concat"] = (lambda: ops.sum(ops.square(ops.concat([a, a], axis=-1))), [a])
    w_stack = r.normal(size=(2,) + s)
    cases["stack"] = (lambda: ops.sum(ops.mul(ops.stack([a, a]), w_stack)), [a])

    n, k, c = (int(v) for v in r.integers(1, 5, size=3))
    A, B = parameter(r.normal(size=(2, n, k))), parameter(r.normal(size=(k, c)))
    cases["matmul"] = (lambda: ops.sum(ops.square(ops.matmul(A, B))), [A, B])

    c_in, c_out, width, stride = (int(v) for v in r.integers(1, 4, size=4))
    sig = parameter(r.normal(size=(2, c_in, width + stride * int(r.integers(1, 4)))))
    kern = parameter(r.normal(size=(c_out, c_in, width)))
    kern_t = parameter(r.normal(size=(c_in, c_out, width)))
    cases["conv1d"] = (lambda: ops.sum(ops.square(ops.conv1d(sig, kern, stride))), [sig, kern])
    cases["conv1d_transpose"] = (lambda: ops.sum(ops.square(ops.conv1d_transpose(sig, kern_t, stride))),
                                 [sig, kern_t])

    rows, classes = int(r.integers(2, 6)), int(r.integers(2, 5))
    logits = parameter(r.normal(size=(rows, classes)))
    target = r.integers(0, classes, size=rows)
    target[0] = -1
    cases["cross_entropy"] = (lambda: ops.cross_entropy(logits, target, ignore_index=-1), [logits])
    pred = parameter(r.normal(size=(rows, classes)))
    mask = r.random((rows, classes)) < 0.6
    mask[0, 0] = True
    goal = r.normal(size=(rows, classes))
    cases["mse"] = (lambda: ops.mse(pred, goal, mask), [pred])
    return cases


def _composed_cases(r, seed):
    """Encoder, decoder and matching paths. Biases start away from zero so no ReLU sits on its kink."""
    cases = {}
    enc = SkeletonEncoder(EncoderConfig.tiny(), seed=seed)
    for block in enc.blocks:
        block.tbias.values[...] = r.normal(scale=0.1, size=block.tbias.values.shape)
    x = enc.prepare_input(r.normal(size=(2, 21, 3, 20)))
    probe = r.normal(size=(2, 21, enc.k))
    cases["encoder"] = (lambda: ops.sum(ops.mul(enc(DiffTensor(x)), probe)), enc.parameters())

    dec = AngleDecoder(3, 4, r, channels=(6, 5, 4, 3))
    for b in dec.biases:
        b.values[...] = r.normal(scale=0.1, size=b.values.shape)
    Z = parameter(r.normal(size=(2, 21, 3)))
    out_probe = r.normal(size=(2, 3, 150, 4))
    p = CANONICAL.essential[int(r.integers(len(CANONICAL.essential)))]
    cases["decoder"] = (lambda: ops.sum(ops.mul(dec(Z, p), out_probe)), dec.parameters() + [Z])

    for mode in ("attention", "simple"):
        head = MatchHead(mode, 5, 4, r)
        bank = LabelBank(["a", "b", "c"], r.normal(size=(3, int(r.integers(2, 6)), 5)))
        Y = parameter(r.normal(size=(6, 4)))
        labels = r.integers(0, 3, size=6)
        cases[f"matching-{mode}"] = (
            lambda head=head, bank=bank, Y=Y, labels=labels:
                ops.cross_entropy(head.score(Y, bank, use_cache=False), labels),
            head.parameters() + [Y])
    return cases


def test_criterion_02_gradient_suite(verdict):
    start = time.perf_counter()
    worst: dict = {}
    for seed in range(5):
        r = np.random.default_rng([202, seed])
        for name, (fn, params) in {**_op_cases(r), **_composed_cases(r, seed)}.items():
            # composed paths use a smaller step: a 1e-5 nudge can still cross a ReLU kink
            h = 1e-6 if name in ("encoder", "decoder") or name.startswith("matching") else 1e-5
            ratio = max(check_gradients(fn, params, h=h, rtol=1e-4, atol=1e-7))
            worst[name] = max(worst.get(name, 0.0), ratio)
    elapsed = time.perf_counter() - start
    bad = sorted(n for n, v in worst.items() if v > 1.0)
    verdict(2, not bad and elapsed < 120,
            f"{len(worst)} paths x 5 shapes, worst ratio {max(worst.values()):.3f} "
            f"failing={bad or 'none'} {elapsed:.1f}s")


# -- 3 -----------------------------------------------------------------------------

def test_criterion_03_binning(verdict):
    theta = np.arange(10_000) * (2 * math.pi / 10_000)
    pi = Fraction(math.pi)
    details, ok = [], True
    for m in (3, 6, 12):
        # floor(theta*m/pi) evaluated exactly; float evaluation can round a grid point across an edge
        expected = np.array([math.floor(Fraction(t) * m / pi) for t in theta])
        got = coarse_bin(theta, m)
        edges = [k * (math.pi / m) for k in range(1, 2 * m)]
        upper = all(coarse_bin(e, m) == k for k, e in enumerate(edges, start=1))
        below = all(coarse_bin(np.nextafter(e, 0.0), m) == k - 1 for k, e in enumerate(edges, start=1))
        mism = int((got != expected).sum())
        ok &= mism == 0 and upper and below
        details.append(f"m={m}: {mism} grid mismatches, edges open below/closed above={upper and below}")
    verdict(3, ok, "; ".join(details))


# -- 4 -----------------------------------------------------------------------------

def test_criterion_04_gcn_collapse(verdict):
    r = np.random.default_rng(404)
    bare = np.zeros((21, 21))
    for a, b in CANONICAL.edges:
        bare[a, b] = bare[b, a] = 1.0
    worst = 0.0
    for _ in range(5):
        layer = DecoupledGCN(3, 8, 1, r)
        H = r.normal(size=(21, 3))
        with no_grad():
            out = layer(DiffTensor(H)).values
        worst = max(worst, float(np.abs(out - plain_gcn(H, layer.W.values, bare)).max()))
    identical = True
    for cfg in (EncoderConfig(), EncoderConfig.small()):
        enc = SkeletonEncoder(cfg, seed=9)
        for block in enc.blocks:
            identical &= all(np.array_equal(k, block.gcn.A.values[0]) for k in block.gcn.A.values)
            identical &= np.array_equal(block.gcn.A.values[0], CANONICAL.normalized_adjacency)
    verdict(4, worst <= 1e-12 and identical, f"g=1 max|d|={worst:.2e}, kernels identical at init={identical}")


# -- 5 and 6 -----------------------------------------------------------------------------

def test_criterion_05_pretraining_learnability(pretrained, verdict):
    trainer, _, elapsed = pretrained
    held_out = synth_skeleton_corpus(4, 5, 1, seed=0, subject_offset=450)
    report = trainer.evaluate(held_out)
    chance = report["chance"]
    per_axis = report["per_axis"]
    ok = bool(np.all(per_axis >= 3 * chance)) and elapsed < 600
    verdict(5, ok, f"held-out accuracy x/y/z={np.round(per_axis, 3).tolist()} overall={report['accuracy']:.3f} "
                   f"vs 3x chance {3 * chance:.3f}; {PRETRAIN_EPOCHS} epochs in {elapsed:.0f}s")


def test_criterion_06_representation_separability(pretrained, verdict):
    trainer, corpus, _ = pretrained
    cells: dict = {}
    for s in corpus:
        cells.setdefault(f"{s.activity_label}|{s.subject_id}", []).append(s)
    bank = build_label_bank(cells, trainer.encoder)
    vectors = bank.joint_mean()
    keys = [name.split("|") for name in bank.names]
    inter, intra = [], []
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            dist = float(np.linalg.norm(vectors[i] - vectors[j]))
            if keys[i][0] != keys[j][0]:
                inter.append(dist)
            elif keys[i][1] != keys[j][1]:
                intra.append(dist)
    ratio = np.mean(inter) / np.mean(intra)
    verdict(6, ratio >= 1.5, f"inter/intra distance ratio {ratio:.2f} "
                             f"({len(inter)} inter pairs, {len(intra)} intra pairs)")


# -- 7 and 8 -----------------------------------------------------------------------------

def test_criterion_07_downstream(downstream, verdict):
    bank, data = downstream
    start = time.perf_counter()
    lines, ok = [], True
    for family in ("resnet", "transformer"):
        means = {}
        for provider in ("skeleton", "one-hot"):
            accs = [train_downstream(data, bank.names, downstream_config(family, provider, seed), bank=bank)
                    .test_accuracy for seed in range(5)]
            means[provider] = float(np.mean(accs))
        ok &= means["skeleton"] >= 0.90 and means["skeleton"] >= means["one-hot"] - 0.02
        lines.append(f"{family}: skeleton {means['skeleton']:.3f} one-hot {means['one-hot']:.3f}")
    elapsed = time.perf_counter() - start
    verdict(7, ok and elapsed < 900, f"{'; '.join(lines)} over 5 seeds, {len(data)} samples, {elapsed:.0f}s")


def test_criterion_08_few_shot(downstream, verdict):
    bank, data = downstream
    # same optimiser-step budget as the full-shot runs of criterion 7, not the same epoch count
    base = downstream_config("resnet", "skeleton")
    full_steps = math.ceil(len(make_split(len(data), 0).train) / base.batch_size) * base.epochs
    epochs = math.ceil(full_steps / math.ceil(5 * len(bank) / base.batch_size))
    runs = {}
    for provider in ("skeleton", "one-hot"):
        cfg = downstream_config("resnet", provider)
        cfg.epochs = epochs
        runs[provider] = few_shot_protocol(data, bank.names, cfg, shots=5, bank=bank)
    sk, oh = runs["skeleton"].per_seed, runs["one-hot"].per_seed
    wins = sum(a >= b for a, b in zip(sk, oh))
    verdict(8, wins >= 4, f"5-shot skeleton(simple) {np.round(sk, 3).tolist()} vs one-hot "
                          f"{np.round(oh, 3).tolist()} ({epochs} epochs = {full_steps} steps): "
                          f"skeleton >= one-hot in {wins}/5 seeds")


# -- 9 -----------------------------------------------------------------------------

def _score_macs(head, bank):
    with ops.count_macs() as counter:
        head.score(np.zeros(head.d), bank, use_cache=False)
    return counter.total


def test_criterion_09_cache_and_complexity(verdict):
    r = np.random.default_rng(909)
    k, d = EncoderConfig().k, BackboneConfig().d
    head = MatchHead("attention", k, d, r)
    bank = LabelBank([f"a{i}" for i in range(8)], r.normal(size=(8, 21, k)))
    Y = r.normal(size=(1000, d))
    gap = float(np.abs(head.score(Y, bank, use_cache=False).values
                       - head.score(Y, cache_bank(bank, head)).values).max())
    macs = {v: _score_macs(head, LabelBank(bank.names, r.normal(size=(8, v, k)))) for v in (21, 42)}
    ratio = macs[42] / macs[21]
    verdict(9, gap <= 1e-6 and abs(ratio - 2.0) <= 0.02,
            f"cache max|d|={gap:.2e}; uncached multiply-adds v=21 {macs[21]}, v=42 {macs[42]}, "
            f"ratio {ratio:.4f} (target 2.0 +/- 1%, k={k}, d={d})")


# -- 10 -----------------------------------------------------------------------------

def _pipeline(root, seed):
    steps = [
        ["synth-skeletons", "--out", root / "raw", "activities=4", "subjects=5", "windows=1"],
        ["prepare", "--inputs", root / "raw", "--out", root / "prep"],
        ["pretrain", "--corpus", root / "prep" / "corpus.sklr", "--out", root / "pt", "--epochs", 10,
         "encoder=small", "batch_size=4"],
        ["embed-labels", "--checkpoint", root / "pt" / "pretrain.sklr", "--corpus", root / "prep" / "corpus.sklr",
         "--out", root / "bank"],
        ["synth-imu", "--corpus", root / "prep" / "corpus.sklr", "--out", root / "imu"],
        ["train", "--data", root / "imu", "--bank", root / "bank" / "bank.sklr", "--out", root / "train",
         "--epochs", 10, "d=16", "width=8"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv + ["--seed", seed]]) == 0, argv[0]
    return {rel: (root / rel).read_bytes() for rel in
            ("prep/corpus.sklr", "pt/pretrain.sklr", "pt/metrics.csv", "bank/bank.sklr", "imu/index.csv",
             "train/model.sklr", "train/metrics.csv", "train/summary.json")}


def test_criterion_10_determinism(tmp_path, verdict):
    first = _pipeline(tmp_path / "a", 11)
    second = _pipeline(tmp_path / "b", 11)
    other = _pipeline(tmp_path / "c", 12)
    differing = [k for k in first if first[k] != second[k]]
    seed_matters = first["pt/pretrain.sklr"] != other["pt/pretrain.sklr"]
    acc = json.loads(first["train/summary.json"])["test_accuracy"]
    verdict(10, not differing and seed_matters,
            f"{len(first)} artifacts compared, differing={differing or 'none'}, "
            f"another seed changes the checkpoint={seed_matters}, test acc {acc:.3f}")


# -- 11 -----------------------------------------------------------------------------

def _fuzz_ntu(rnd):
    """A random well-formed NTU file and the coordinates of its best-tracked body [25, 3, t]."""
    frames = rnd.randint(1, 6)
    ids = [str(rnd.getrandbits(56)) for _ in range(rnd.randint(1, 3))]
    coords = {b: [] for b in ids}
    track = {b: 0 for b in ids}
    lines = [str(frames)]
    for _ in range(frames):
        lines.append(str(len(ids)))
        for body in ids:
            lines.append(f"{body} 0 1 0 0 1 0 {rnd.uniform(-1, 1):.6f} {rnd.uniform(-1, 1):.6f} 2")
            lines.append("25")
            rows = []
            for _ in range(25):
                xyz = [rnd.choice([f"{rnd.uniform(-3, 3):.7f}", repr(rnd.uniform(-3, 3)),
                                   f"{rnd.uniform(-3, 3):.3e}", str(rnd.randint(-2, 2))]) for _ in range(3)]
                state = rnd.randint(0, 2)
                extras = [f"{rnd.uniform(0, 500):.4f}" for _ in range(4)] + \
                    [f"{rnd.uniform(-1, 1):.5f}" for _ in range(4)]
                lines.append(rnd.choice([" ", "  ", "\t"]).join(xyz + extras + [str(state)]))
                rows.append([float(v) for v in xyz])
                track[body] += state
            coords[body].append(rows)
    best = ids[0]
    for body in ids[1:]:
        if track[body] > track[best]:
            best = body
    return "\n".join(lines) + "\n", np.array(coords[best]).transpose(1, 2, 0)


def test_criterion_11_parser_robustness(verdict):
    rnd = random.Random(1111)
    closed, positioned, problems = 0, 0, []
    for i in range(100):
        text, coords = _fuzz_ntu(rnd)
        try:
            seq = parse_ntu_skeleton(text, source=f"valid{i}")
            again = parse_ntu_skeleton(format_ntu(seq), source=f"again{i}")
            if np.array_equal(seq.coords, coords) and np.array_equal(again.coords, seq.coords):
                closed += 1
            else:
                problems.append(f"valid{i}: coordinates changed")
        except Exception as exc:   # any failure on a valid file counts against the criterion
            problems.append(f"valid{i}: {type(exc).__name__}: {exc}")

        cut = rnd.randint(1, len(text) - 1)
        truncated = text[:cut]
        want_line = truncated.count("\n") + 1
        try:
            parse_ntu_skeleton(truncated, source=f"cut{i}")
            problems.append(f"cut{i}: accepted a truncated file")
        except ParseError as exc:
            if exc.lineno == want_line and f"cut{i}:{want_line}:" in str(exc):
                positioned += 1
            else:
                problems.append(f"cut{i}: reported line {exc.lineno}, expected {want_line}")
        except Exception as exc:
            problems.append(f"cut{i}: {type(exc).__name__}: {exc}")
    verdict(11, closed == 100 and positioned == 100,
            f"round-trip closure {closed}/100, positioned truncation errors {positioned}/100"
            + (f"; first problem: {problems[0]}" if problems else ""))
