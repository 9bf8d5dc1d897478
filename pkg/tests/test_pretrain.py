import math

import numpy as np
import pytest
from scipy.stats import chisquare

from skelar.angles import IGNORE
from skelar.autodiff import DiffTensor, backward, check_gradients, no_grad, ops, parameter
from skelar.encoder import EncoderConfig
from skelar.errors import ConfigError, ContractError
from skelar.har.synth import synth_skeleton_corpus
from skelar.pretrain import (DEFAULT_SCHEDULE, AngleDecoder, DropoutSchedule, Pretrainer, PretrainRun,
                             PretrainTargets, build_targets, dropout_mask_from_sampled, expected_drop_fraction,
                             joint_dropout, normalize_objective, objective_loss, sample_essential_joint,
                             solve_lambda, truncate_metrics)
from skelar.skeleton import CANONICAL

SMALL = EncoderConfig.small(k=16)


@pytest.fixture(scope="module")
def corpus20():
    return synth_skeleton_corpus(n_activities=4, n_subjects=5, windows=1, seed=0)


# -- joint dropout ---------------------------------------------------------------

def test_zero_lambda_keeps_everything(rng):
    assert np.array_equal(joint_dropout(CANONICAL, 0.0, rng), np.ones(21))


def test_leaf_drops_itself_and_parent():
    hand = CANONICAL.index("hand_left")
    sampled = np.zeros(21, dtype=bool)
    sampled[hand] = True
    mask = dropout_mask_from_sampled(CANONICAL, sampled)
    assert set(np.flatnonzero(mask == 0)) == {hand, CANONICAL.index("wrist_left")}


def test_interior_joint_drops_neighbours():
    wrist = CANONICAL.index("wrist_left")
    sampled = np.zeros(21, dtype=bool)
    sampled[wrist] = True
    mask = dropout_mask_from_sampled(CANONICAL, sampled)
    assert set(np.flatnonzero(mask == 0)) == {wrist, *CANONICAL.neighbors(wrist)}


def test_lambda_out_of_range(rng):
    with pytest.raises(ContractError):
        joint_dropout(CANONICAL, 1.0, rng)


def test_expected_fraction_matches_brute_force():
    # exact expectation on a 4-joint chain by enumerating every sampled subset
    from skelar.skeleton.topology import SkeletonTopology
    chain = SkeletonTopology(("a", "b", "c", "d"), ((0, 1), (1, 2), (2, 3)))
    lam = 0.3
    total = 0.0
    for bits in range(16):
        sampled = np.array([(bits >> i) & 1 for i in range(4)], dtype=bool)
        prob = np.prod(np.where(sampled, lam, 1 - lam))
        total += prob * (1 - dropout_mask_from_sampled(chain, sampled).mean())
    assert expected_drop_fraction(lam, chain) == pytest.approx(total, abs=1e-15)


def test_ten_percent_monte_carlo():
    lam = solve_lambda(0.10)
    rng = np.random.default_rng(0)
    frac = np.mean([1 - joint_dropout(CANONICAL, lam, rng).mean() for _ in range(10_000)])
    assert 0.08 <= frac <= 0.12


@pytest.mark.parametrize("target", [0.05, 0.10, 0.15, 0.20])
def test_each_stage_within_two_points(target):
    lam = solve_lambda(target)
    assert expected_drop_fraction(lam) == pytest.approx(target, abs=1e-10)
    rng = np.random.default_rng(int(target * 100))
    frac = np.mean([1 - joint_dropout(CANONICAL, lam, rng).mean() for _ in range(1_000)])
    assert abs(frac - target) <= 0.02


def test_schedule_boundaries():
    sched = DropoutSchedule()
    assert sched.steps == DEFAULT_SCHEDULE
    assert sched.fraction(0) == 0.0 and sched.fraction(199) == 0.0
    assert sched.fraction(200) == 0.05 and sched.fraction(799) == 0.15 and sched.fraction(5000) == 0.20
    assert sched.lam(199) == 0.0 and sched.lam(200) == pytest.approx(solve_lambda(0.05))


# -- essential joint sampling ----------------------------------------------------------

def test_essential_sampling_is_uniform():
    rng = np.random.default_rng(11)
    draws = [sample_essential_joint(rng) for _ in range(10_000)]
    counts = np.array([draws.count(j) for j in CANONICAL.essential])
    assert counts.sum() == 10_000
    assert chisquare(counts).pvalue > 0.01


def test_essential_set_shape():
    assert len(CANONICAL.essential) == 8
    for p in CANONICAL.essential:
        assert len(CANONICAL.incident_bones(p)) == 2
        assert len(CANONICAL.neighbors(p)) == 2


# -- decoder -------------------------------------------------------------------

def test_decoder_shape(rng):
    dec = AngleDecoder(8, 12, rng)
    assert dec.frames == 150
    with no_grad():
        out = dec(DiffTensor(rng.normal(size=(2, 21, 8))), CANONICAL.index("knee_left"))
    assert out.shape == (2, 3, 150, 12)


def test_decoder_ignores_non_neighbour_rows(rng):
    dec = AngleDecoder(8, 12, rng)
    p = CANONICAL.index("elbow_right")
    near = {p, *CANONICAL.neighbors(p)}
    Z = rng.normal(size=(1, 21, 8))
    with no_grad():
        base = dec(DiffTensor(Z), p).values
        for j in range(21):
            moved = Z.copy()
            moved[0, j] += 5.0
            out = dec(DiffTensor(moved), p).values
            assert np.array_equal(out, base) == (j not in near)


def test_decoder_gradients(rng):
    dec = AngleDecoder(3, 4, rng, channels=(6, 5, 4, 3))
    Z = parameter(rng.normal(size=(2, 21, 3)))
    probe = rng.normal(size=(2, 3, 150, 4))
    p = CANONICAL.index("ankle_left")
    params = [Z, dec.kernels[0], dec.kernels[3], dec.heads[1], dec.head_bias[2]]
    ratios = check_gradients(lambda: ops.sum(ops.mul(dec(Z, p), probe)), params, h=1e-6, rtol=1e-4)
    assert max(ratios) <= 1.0


def test_bad_decoder_config(rng):
    with pytest.raises(ConfigError):
        AngleDecoder(4, 12, rng, channels=(8, 8), strides=(5, 5, 6))


# -- losses ---------------------------------------------------------------------

def toy_targets(B=2, t=150, m=6):
    classes = np.zeros((B, 8, 3, t), dtype=np.int64)
    classes[:, :, :, ::3] = IGNORE
    return PretrainTargets(classes, np.zeros((B, 8, 3, t)), classes != IGNORE, np.zeros((B, 8, 3, t, 4)),
                           np.ones((8, 4)), {p: j for j, p in enumerate(CANONICAL.essential)})


def test_ignored_frames_get_no_gradient(rng):
    tg = toy_targets()
    out = parameter(rng.normal(size=(2, 3, 150, 12)))
    backward(objective_loss(out, "coarse", tg, np.arange(2), 0))
    g = out.grad
    assert np.all(g[:, :, ::3] == 0.0)
    assert np.all(np.abs(g[:, :, 1::3]).sum(axis=-1) > 0)


def test_untrained_loss_near_uniform(corpus20):
    m = 6
    trainer = Pretrainer(PretrainRun(m=m, batch_size=1, encoder=SMALL, seed=0))
    x, targets = trainer.prepare(corpus20[:1])
    loss = trainer.train_epoch(x, targets).loss
    assert abs(loss - 3 * math.log(2 * m)) <= 0.2 * 3 * math.log(2 * m)


def test_empty_corpus():
    with pytest.raises(ContractError):
        Pretrainer(PretrainRun(encoder=SMALL)).fit([], epochs=1)


@pytest.mark.parametrize("alias,name", [("coarse_angle", "coarse"), ("fine_angle", "fine"), ("coordinate", "coordinate")])
def test_objective_aliases(alias, name):
    assert normalize_objective(alias) == name
    with pytest.raises(ConfigError):
        normalize_objective("depth")


def test_loss_decreases(corpus20):
    trainer = Pretrainer(PretrainRun(encoder=SMALL, batch_size=4, seed=0))
    history = trainer.fit(corpus20, epochs=50)
    assert len(history) == 50
    assert history[-1].loss < 0.8 * history[0].loss


@pytest.mark.parametrize("objective", ["coarse", "fine", "coordinate"])
def test_objectives_share_encoder(objective, corpus20):
    a = Pretrainer(PretrainRun(encoder=SMALL, objective=objective, seed=3))
    b = Pretrainer(PretrainRun(encoder=SMALL, objective="coarse", seed=3))
    ea, eb = a.encoder.state_arrays(), b.encoder.state_arrays()
    assert list(ea) == list(eb) and all(np.array_equal(ea[k], eb[k]) for k in ea)
    assert a.decoder.heads[0].shape[1] == {"coarse": 12, "fine": 1, "coordinate": 4}[objective]
    metrics = a.fit(corpus20[:4], epochs=1)[0]
    assert math.isfinite(metrics.loss)


def test_coordinate_targets_mask_padding(corpus20):
    x = np.stack([s.coords for s in corpus20[:2]])
    tg = build_targets(x, 6, False)
    for p, j in tg.joint_slot.items():
        rows = (p,) + CANONICAL.neighbors(p)
        assert tg.coord_mask[j].tolist() == [1.0] * len(rows) + [0.0] * (4 - len(rows))
        assert np.array_equal(tg.coords[:, j, :, :, 0], x[:, p])


def run_state(trainer):
    return trainer.state_arrays()


def assert_same_state(a, b):
    assert list(a) == list(b)
    for k in a:
        assert np.array_equal(a[k], b[k]), k


FAST = dict(encoder=SMALL, batch_size=4, seed=7, schedule=DropoutSchedule(((1, 0.10), (3, 0.20))))


def test_bit_identical_runs(corpus20):
    a = Pretrainer(PretrainRun(**FAST))
    b = Pretrainer(PretrainRun(**FAST))
    ha = a.fit(corpus20[:8], epochs=4)
    hb = b.fit(corpus20[:8], epochs=4)
    assert [h.loss for h in ha] == [h.loss for h in hb]
    assert [h.drop_fraction for h in ha] == [0.0, 0.10, 0.10, 0.20]
    assert_same_state(run_state(a), run_state(b))


def test_resume_matches_uninterrupted(corpus20, tmp_path):
    full = Pretrainer(PretrainRun(**FAST))
    full.fit(corpus20[:8], epochs=4, metrics_path=tmp_path / "full.csv")

    part = Pretrainer(PretrainRun(**FAST))
    part.fit(corpus20[:8], epochs=2, checkpoint=tmp_path / "c.sklr", metrics_path=tmp_path / "part.csv")
    resumed = Pretrainer.load(tmp_path / "c.sklr")
    assert resumed.epoch == 2 and resumed.run == part.run
    resumed.fit(corpus20[:8], epochs=4, metrics_path=tmp_path / "part.csv")
    assert_same_state(run_state(full), run_state(resumed))
    assert (tmp_path / "full.csv").read_bytes() == (tmp_path / "part.csv").read_bytes()


def test_truncate_metrics(corpus20, tmp_path):
    path = tmp_path / "m.csv"
    Pretrainer(PretrainRun(**FAST)).fit(corpus20[:4], epochs=3, metrics_path=path)
    truncate_metrics(path, 1)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,loss,acc_x,acc_y,acc_z,drop_fraction"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0"]


def test_evaluate_reports_chance(corpus20):
    trainer = Pretrainer(PretrainRun(encoder=SMALL))
    report = trainer.evaluate(corpus20[:2])
    assert report["chance"] == pytest.approx(1 / 12)
    assert 0.0 <= report["accuracy"] <= 1.0 and report["frames"] > 0
