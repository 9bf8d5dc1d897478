"""Self-supervised pretraining: joint dropout plus angle reconstruction at one essential joint."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .angles import DEFAULT_BINS, IGNORE, coarse_bin, essential_targets
from .autodiff import DiffTensor, Module, backward, no_grad, ops, parameter, sgd_step
from .autodiff.checkpoint import load as load_arrays, save as save_arrays
from .autodiff.nn import glorot, he_normal
from .encoder import EncoderConfig, SkeletonEncoder
from .errors import CheckpointError, ConfigError, ContractError, NumericError
from .skeleton.io import WindowedSample
from .skeleton.topology import CANONICAL, SkeletonTopology

OBJECTIVES = ("coarse", "fine", "coordinate")
_ALIASES = {"coarse_angle": "coarse", "fine_angle": "fine", "coord": "coordinate"}

# Epoch at which each dropped-joint fraction takes effect; 0 before the first.
DEFAULT_SCHEDULE: tuple[tuple[int, float], ...] = ((200, 0.05), (400, 0.10), (600, 0.15), (800, 0.20))

DECODER_STRIDES = (5, 5, 3, 2)
DECODER_CHANNELS = (128, 64, 32, 32)
GATHER_ROWS = 4          # joint p plus up to three neighbours


def normalize_objective(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in OBJECTIVES:
        raise ConfigError(f"unknown objective {name!r}; choose from {', '.join(OBJECTIVES)}")
    return name


# --------------------------------------------------------------------------
# joint dropout


def expected_drop_fraction(lam: float, topology: SkeletonTopology = CANONICAL) -> float:
    """Expected share of joints zeroed when each joint is sampled with probability ``lam``.

    A joint survives only if neither it nor any neighbour was sampled.
    """
    closed = topology.adjacency.sum(axis=1)  # the joint itself plus its neighbours
    return float(np.mean(1.0 - (1.0 - lam) ** closed))


def solve_lambda(target: float, topology: SkeletonTopology = CANONICAL) -> float:
    """Sampling probability whose expected dropped fraction equals ``target``."""
    if not 0.0 <= target < 1.0:
        raise ContractError(f"target fraction must be in [0, 1), got {target}")
    if target == 0.0:
        return 0.0
    return float(brentq(lambda lam: expected_drop_fraction(lam, topology) - target, 0.0, 1.0,
                        xtol=1e-14, rtol=1e-12))


def joint_dropout(topology: SkeletonTopology, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Binary mask [v]: 0 for every sampled joint and each of its neighbours."""
    if not 0.0 <= lam < 1.0:
        raise ContractError(f"lambda must be in [0, 1), got {lam}")
    sampled = rng.random(topology.num_joints) < lam
    return dropout_mask_from_sampled(topology, sampled)


def dropout_mask_from_sampled(topology: SkeletonTopology, sampled) -> np.ndarray:
    sampled = np.asarray(sampled, dtype=bool)
    hit = sampled | (topology.adjacency[:, sampled].sum(axis=1) > 0)
    return (~hit).astype(np.float64)


@dataclass(frozen=True)
class DropoutSchedule:
    steps: tuple[tuple[int, float], ...] = DEFAULT_SCHEDULE

    def fraction(self, epoch: int) -> float:
        frac = 0.0
        for start, f in sorted(self.steps):
            if epoch >= start:
                frac = f
        return frac

    def lam(self, epoch: int, topology: SkeletonTopology = CANONICAL) -> float:
        return solve_lambda(self.fraction(epoch), topology)


def sample_essential_joint(rng: np.random.Generator, topology: SkeletonTopology = CANONICAL) -> int:
    essential = topology.essential
    if not essential:
        raise ContractError("topology has no essential joints")
    return int(essential[rng.integers(len(essential))])


# --------------------------------------------------------------------------
# decoder


def head_outputs(objective: str, m: int) -> int:
    return {"coarse": 2 * m, "fine": 1, "coordinate": GATHER_ROWS}[normalize_objective(objective)]


class AngleDecoder(Module):
    """Rebuilds per-frame targets for joint p from its own and its neighbours' vectors.

    The gathered rows are flattened to 4k channels at length 1, expanded by a
    transpose-convolution stack to 150 frames, then read out by three
    parallel per-frame linear heads (one per projection axis).
    """

    def __init__(self, k: int, n_out: int, rng: np.random.Generator,
                 channels: Sequence[int] = DECODER_CHANNELS, strides: Sequence[int] = DECODER_STRIDES,
                 topology: SkeletonTopology = CANONICAL):
        if len(channels) != len(strides):
            raise ConfigError("decoder channels and strides must have equal length")
        self._topology = topology
        self._strides = tuple(strides)
        self.n_out = n_out
        kernels, biases = [], []
        c_in = GATHER_ROWS * k
        for c, s in zip(channels, strides):
            kernels.append(parameter(he_normal(rng, c_in, (c_in, c, s))))
            biases.append(parameter(np.zeros((c, 1))))
            c_in = c
        self.kernels = kernels
        self.biases = biases
        # Small readout weights keep the untrained class distribution near uniform.
        self.heads = [parameter(0.1 * glorot(rng, c_in, n_out, (c_in, n_out))) for _ in range(3)]
        self.head_bias = [parameter(np.zeros(n_out)) for _ in range(3)]

    @property
    def frames(self) -> int:
        return int(np.prod(self._strides))

    def gather(self, Z: DiffTensor, p: int) -> DiffTensor:
        """[B, v, k] -> [B, 4k, 1] from rows p, neighbours(p), then zero padding."""
        rows = (p,) + self._topology.neighbors(p)
        if len(rows) > GATHER_ROWS:
            raise ContractError(f"joint {p} has {len(rows) - 1} neighbours; decoder takes at most {GATHER_ROWS - 1}")
        B, _, k = Z.shape
        picked = ops.index(Z, (slice(None), list(rows)))
        if len(rows) < GATHER_ROWS:
            picked = ops.concat([picked, DiffTensor(np.zeros((B, GATHER_ROWS - len(rows), k)))], axis=1)
        return ops.reshape(picked, (B, GATHER_ROWS * k, 1))

    def __call__(self, Z: DiffTensor, p: int) -> DiffTensor:
        """Returns [B, 3, frames, n_out]."""
        h = self.gather(Z, p)
        for kern, b, s in zip(self.kernels, self.biases, self._strides):
            h = ops.relu(ops.add(ops.conv1d_transpose(h, kern, s), b))
        h = ops.swapaxes(h, -1, -2)  # [B, frames, c]
        outs = [ops.add(ops.matmul(h, W), b) for W, b in zip(self.heads, self.head_bias)]
        return ops.stack(outs, axis=1)


# --------------------------------------------------------------------------
# targets and losses


@dataclass
class PretrainTargets:
    """Precomputed per-sample targets for every essential joint."""

    classes: np.ndarray      # [N, J, 3, t]
    angles: np.ndarray       # [N, J, 3, t]
    defined: np.ndarray      # [N, J, 3, t]
    coords: np.ndarray       # [N, J, 3, t, 4] gathered joint coordinates per axis
    coord_mask: np.ndarray   # [J, 4]
    joint_slot: dict         # joint id -> J index


def build_targets(inputs: np.ndarray, m: int, signed: bool,
                  topology: SkeletonTopology = CANONICAL) -> PretrainTargets:
    """``inputs`` are the encoder-ready [N, v, 3, t] arrays (already centred)."""
    cls, ang, dfn = [], [], []
    for x in inputs:
        c, a, d = essential_targets(x, m, signed, topology)
        cls.append(c)
        ang.append(a)
        dfn.append(d)
    ess = topology.essential
    n, _, _, t = inputs.shape
    coords = np.zeros((n, len(ess), 3, t, GATHER_ROWS))
    cmask = np.zeros((len(ess), GATHER_ROWS))
    for j, p in enumerate(ess):
        rows = (p,) + topology.neighbors(p)
        for r, joint in enumerate(rows):
            coords[:, j, :, :, r] = inputs[:, joint]
            cmask[j, r] = 1.0
    return PretrainTargets(np.stack(cls), np.stack(ang), np.stack(dfn), coords, cmask,
                           {p: j for j, p in enumerate(ess)})


def objective_loss(out: DiffTensor, objective: str, targets: PretrainTargets, idx: np.ndarray,
                   slot: int) -> DiffTensor:
    """Sum over the three axis heads of that objective's per-head loss."""
    losses = []
    for axis in range(3):
        head = ops.index(out, (slice(None), axis))          # [B, t, n_out]
        if objective == "coarse":
            B, t, c = head.shape
            tgt = targets.classes[idx, slot, axis]          # [B, t]
            losses.append(ops.cross_entropy(ops.reshape(head, (B * t, c)), tgt.reshape(-1), IGNORE))
        elif objective == "fine":
            tgt = targets.angles[idx, slot, axis][..., None]
            mask = targets.defined[idx, slot, axis][..., None]
            losses.append(ops.mse(head, tgt, mask))
        else:
            tgt = targets.coords[idx, slot, axis]           # [B, t, 4]
            mask = np.broadcast_to(targets.coord_mask[slot], tgt.shape)
            losses.append(ops.mse(head, tgt, mask))
    return ops.add(ops.add(losses[0], losses[1]), losses[2])


def head_predictions(out: np.ndarray, objective: str, m: int, signed: bool) -> Optional[np.ndarray]:
    """Predicted interval classes [B, 3, t], or None when the objective has none."""
    if objective == "coarse":
        return out.argmax(axis=-1)
    if objective == "fine":
        top = 2.0 * math.pi if signed else math.pi
        theta = np.clip(out[..., 0], 0.0, np.nextafter(top, 0.0))
        return coarse_bin(theta, m)
    return None


# --------------------------------------------------------------------------
# training loop


@dataclass
class PretrainRun:
    epochs: int = 1000
    lr: float = 1e-2
    batch_size: int = 16
    m: int = DEFAULT_BINS
    seed: int = 0
    objective: str = "coarse"
    signed: bool = False
    schedule: DropoutSchedule = field(default_factory=DropoutSchedule)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        self.objective = normalize_objective(self.objective)
        if self.m < 1:
            raise ConfigError(f"m must be positive, got {self.m}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: np.ndarray     # per axis head
    drop_fraction: float


METRIC_COLUMNS = ("epoch", "loss", "acc_x", "acc_y", "acc_z", "drop_fraction")


class Pretrainer:
    """Owns the encoder, decoder and epoch counter of one pretraining run."""

    def __init__(self, run: PretrainRun, topology: SkeletonTopology = CANONICAL):
        self.run = run
        self.topology = topology
        self.encoder = SkeletonEncoder(run.encoder, seed=run.seed, topology=topology)
        rng = np.random.default_rng([run.seed, 1])
        self.decoder = AngleDecoder(self.encoder.k, head_outputs(run.objective, run.m), rng,
                                    topology=topology)
        if self.decoder.frames != run.encoder.frames:
            raise ConfigError(f"decoder emits {self.decoder.frames} frames, windows have {run.encoder.frames}")
        self.epoch = 0
        self.history: list[EpochMetrics] = []

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def prepare(self, samples: Sequence[WindowedSample]):
        if len(samples) == 0:
            raise ContractError("pretraining corpus is empty")
        x = self.encoder.prepare_input(list(samples))
        return x, build_targets(x, self.run.m, self.run.signed, self.topology)

    def train_epoch(self, x: np.ndarray, targets: PretrainTargets) -> EpochMetrics:
        run = self.run
        rng = np.random.default_rng([run.seed, self.epoch])
        frac = run.schedule.fraction(self.epoch)
        lam = solve_lambda(frac, self.topology)
        order = rng.permutation(x.shape[0])
        params = self.parameters()
        total, batches = 0.0, 0
        correct = np.zeros(3)
        counted = np.zeros(3)
        for start in range(0, len(order), run.batch_size):
            idx = order[start:start + run.batch_size]
            mask = np.stack([joint_dropout(self.topology, lam, rng) for _ in idx])
            p = sample_essential_joint(rng, self.topology)
            slot = targets.joint_slot[p]
            Z = self.encoder(DiffTensor(x[idx]), mask)
            out = self.decoder(Z, p)
            loss = objective_loss(out, run.objective, targets, idx, slot)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {self.epoch}")
            backward(loss)
            sgd_step(params, run.lr)
            total += value
            batches += 1
            pred = head_predictions(out.values, run.objective, run.m, run.signed)
            if pred is not None:
                cls = targets.classes[idx, slot]
                keep = cls != IGNORE
                correct += ((pred == cls) & keep).sum(axis=(0, 2))
                counted += keep.sum(axis=(0, 2))
        acc = np.where(counted > 0, correct / np.maximum(counted, 1), np.nan)
        metrics = EpochMetrics(self.epoch, total / batches, acc, frac)
        self.history.append(metrics)
        self.epoch += 1
        return metrics

    def fit(self, samples: Sequence[WindowedSample], epochs: Optional[int] = None,
            checkpoint: Optional[str] = None, metrics_path: Optional[str] = None,
            checkpoint_every: int = 0) -> list[EpochMetrics]:
        """Train until ``epochs`` total epochs have run (continuing from ``self.epoch``)."""
        target = self.run.epochs if epochs is None else epochs
        x, targets = self.prepare(samples)
        done = []
        while self.epoch < target:
            done.append(self.train_epoch(x, targets))
            if metrics_path:
                append_metrics(metrics_path, done[-1])
            if checkpoint and checkpoint_every and self.epoch % checkpoint_every == 0:
                self.save(checkpoint)
        if checkpoint:
            self.save(checkpoint)
        return done

    def evaluate(self, samples: Sequence[WindowedSample], batch_size: int = 32) -> dict:
        """Held-out interval accuracy over every essential joint, without dropout."""
        x, targets = self.prepare(samples)
        run = self.run
        correct = np.zeros(3)
        counted = np.zeros(3)
        with no_grad():
            for start in range(0, x.shape[0], batch_size):
                idx = np.arange(start, min(start + batch_size, x.shape[0]))
                Z = self.encoder(DiffTensor(x[idx]))
                for p, slot in targets.joint_slot.items():
                    pred = head_predictions(self.decoder(Z, p).values, run.objective, run.m, run.signed)
                    if pred is None:
                        continue
                    cls = targets.classes[idx, slot]
                    keep = cls != IGNORE
                    correct += ((pred == cls) & keep).sum(axis=(0, 2))
                    counted += keep.sum(axis=(0, 2))
        per_axis = np.where(counted > 0, correct / np.maximum(counted, 1), np.nan)
        overall = float(correct.sum() / counted.sum()) if counted.sum() else float("nan")
        return {"accuracy": overall, "per_axis": per_axis, "chance": 1.0 / (2 * run.m),
                "frames": int(counted.sum())}

    # -- persistence -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        run = self.run
        arrays = self.encoder.state_arrays("encoder/")
        arrays.update(self.decoder.state_dict("decoder/"))
        arrays["meta/epoch"] = np.array([float(self.epoch)])
        arrays["meta/run"] = np.array([run.epochs, run.lr, run.batch_size, run.m, run.seed,
                                       OBJECTIVES.index(run.objective), float(run.signed)])
        arrays["meta/schedule"] = np.array(sorted(run.schedule.steps), dtype=np.float64).reshape(-1, 2)
        return arrays

    def save(self, path) -> None:
        save_arrays(path, self.state_arrays())

    @classmethod
    def from_arrays(cls, arrays, topology: SkeletonTopology = CANONICAL) -> "Pretrainer":
        try:
            epochs, lr, bs, m, seed, obj, signed = arrays["meta/run"]
            steps = tuple((int(a), float(b)) for a, b in arrays["meta/schedule"])
            run = PretrainRun(epochs=int(epochs), lr=float(lr), batch_size=int(bs), m=int(m), seed=int(seed),
                              objective=OBJECTIVES[int(obj)], signed=bool(signed),
                              schedule=DropoutSchedule(steps), encoder=EncoderConfig.from_arrays(arrays))
            trainer = cls(run, topology)
            trainer.encoder.load_state_dict(arrays, "encoder/")
            trainer.decoder.load_state_dict(arrays, "decoder/")
            trainer.epoch = int(arrays["meta/epoch"][0])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks {exc}") from None
        return trainer

    @classmethod
    def load(cls, path, topology: SkeletonTopology = CANONICAL) -> "Pretrainer":
        return cls.from_arrays(load_arrays(path), topology)


def append_metrics(path, m: EpochMetrics) -> None:
    """Append one CSV row, writing the header first if the file is new."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        w.writerow([m.epoch, repr(float(m.loss))] + [_fmt(a) for a in m.accuracy] + [repr(m.drop_fraction)])


def _fmt(x: float) -> str:
    return "" if not math.isfinite(x) else repr(float(x))


def truncate_metrics(path, epochs: int) -> None:
    """Drop rows for epochs >= ``epochs`` so a resumed run does not duplicate them."""
    if not os.path.exists(path):
        return
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return
    kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) < epochs]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(kept)
