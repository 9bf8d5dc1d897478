"""Downstream training and evaluation of sensor classifiers with swappable label heads."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..autodiff import Adam, DiffTensor, Linear, Module, backward, no_grad, ops, parameter
from ..autodiff.checkpoint import load as load_arrays, save as save_arrays
from ..autodiff.nn import glorot
from ..errors import CheckpointError, ConfigError, ContractError, NumericError
from ..matching import MODES, LabelBank, MatchHead, cache_bank, predict
from .backbones import FAMILIES, BackboneConfig, build_backbone
from .synth import SensorSample

PROVIDERS = ("skeleton", "one-hot", "random")
RANDOM_DIM = 256


def _provider(name: str) -> str:
    name = {"onehot": "one-hot", "one_hot": "one-hot"}.get(name, name)
    if name not in PROVIDERS:
        raise ConfigError(f"unknown provider {name!r}; choose from {', '.join(PROVIDERS)}")
    return name


class DownstreamModel(Module):
    """Backbone features scored against per-label vectors.

    skeleton: a MatchHead over a frozen LabelBank.
    one-hot:  a plain linear classification layer.
    random:   fixed random label vectors behind a learned [d, 256] projection.
    """

    def __init__(self, labels: Sequence[str], channels: int, steps: int, backbone: BackboneConfig,
                 provider: str, seed: int = 0, bank: Optional[LabelBank] = None, match_mode: str = "attention"):
        provider = _provider(provider)
        self._labels = list(labels)
        self._provider = provider
        self._match_mode = match_mode
        self._backbone_cfg = backbone
        self._bank = None
        self._shape = (steps, channels)
        self._mean = np.zeros(channels)
        self._std = np.ones(channels)
        rng = np.random.default_rng([seed, 7])
        self.backbone = build_backbone(backbone, channels, steps, rng)
        d = backbone.d
        if provider == "skeleton":
            if bank is None:
                raise ContractError("skeleton provider needs a label bank")
            if list(bank.names) != self._labels:
                raise ContractError(f"label bank activities {bank.names} differ from dataset labels {self._labels}")
            self._bank = LabelBank(bank.names, bank.Z)       # any stale cache is dropped
            self.head = MatchHead(match_mode, bank.k, d, rng)
        elif provider == "one-hot":
            self.head = Linear(d, len(self._labels), rng)
        else:
            self._random = rng.normal(0.0, 1.0, (len(self._labels), RANDOM_DIM))
            self.head = parameter(glorot(rng, d, RANDOM_DIM, (d, RANDOM_DIM)))

    @property
    def labels(self) -> list:
        return self._labels

    @property
    def provider(self) -> str:
        return self._provider

    @property
    def input_shape(self) -> tuple[int, int]:
        return self._shape

    @property
    def bank(self) -> Optional[LabelBank]:
        return self._bank

    def set_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        self._mean = np.asarray(mean, dtype=np.float64)
        self._std = np.asarray(std, dtype=np.float64)

    def features(self, series: np.ndarray) -> DiffTensor:
        x = (np.asarray(series, dtype=np.float64) - self._mean) / self._std
        return self.backbone(DiffTensor(x))

    def logits(self, series: np.ndarray, use_cache: bool = False) -> DiffTensor:
        Y = self.features(series)
        if self._provider == "skeleton":
            return self.head.score(Y, self._bank, use_cache=use_cache)
        if self._provider == "one-hot":
            return self.head(Y)
        return ops.matmul(ops.matmul(Y, self.head), DiffTensor(self._random.T))

    def predict(self, series: np.ndarray, batch_size: int = 64) -> np.ndarray:
        if self._provider == "skeleton" and self._match_mode == "attention":
            self._bank = cache_bank(self._bank, self.head)
        out = []
        with no_grad():
            for i in range(0, len(series), batch_size):
                out.append(predict(self.logits(series[i:i + batch_size], use_cache=True).values))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.state_dict("model/"))
        arrays["meta/norm/mean"] = self._mean
        arrays["meta/norm/std"] = self._std
        if self._provider == "random":
            arrays["meta/random_labels"] = self._random
        return arrays

    def load_arrays(self, arrays) -> None:
        try:
            self.load_state_dict(arrays, "model/")
            self.set_normalization(arrays["meta/norm/mean"], arrays["meta/norm/std"])
            if self._provider == "random":
                self._random = np.array(arrays["meta/random_labels"])
        except KeyError as exc:
            raise CheckpointError(f"model checkpoint lacks {exc}") from None
        if self._bank is not None:
            self._bank = LabelBank(self._bank.names, self._bank.Z)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: np.array(v, copy=True) for k, v in self.state_arrays().items()}


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.val, self.test):
            h.update(np.asarray(part, dtype="<i8").tobytes())
            h.update(b"|")
        return h.hexdigest()


def make_split(n: int, seed: int, test_frac: float = 0.1, val_frac: float = 0.1) -> Split:
    """Hold out ``test_frac`` of the data, then ``val_frac`` of what remains."""
    if n < 3:
        raise ContractError(f"need at least 3 samples to split, got {n}")
    order = np.random.default_rng([seed, 11]).permutation(n)
    n_test = max(1, int(round(test_frac * n)))
    rest = order[n_test:]
    n_val = max(1, int(round(val_frac * len(rest))))
    return Split(np.sort(rest[n_val:]), np.sort(rest[:n_val]), np.sort(order[:n_test]))


def stack_dataset(samples: Sequence[SensorSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise ContractError("empty dataset")
    shape = samples[0].series.shape
    for s in samples:
        if s.series.shape != shape:
            raise ContractError(f"sample shapes differ: {s.series.shape} vs {shape}")
        if not np.isfinite(s.series).all():
            raise ContractError("non-finite sensor values")
    return np.stack([s.series for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    provider: str = "skeleton"
    match_mode: str = "attention"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    select: str = "val_acc"          # or "train_loss"


@dataclass
class TrainResult:
    model: DownstreamModel
    test_accuracy: float
    best_epoch: int
    split_hash: str
    metrics: list = field(default_factory=list)


METRIC_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc")


def accuracy(model: DownstreamModel, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float((model.predict(x) == y).mean())


def fit(model: DownstreamModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
        x_val: Optional[np.ndarray] = None, y_val: Optional[np.ndarray] = None):
    """Adam over shuffled mini-batches; returns (per-epoch metrics, best snapshot, best epoch).

    The kept snapshot maximises validation accuracy (ties: lower training
    loss) or, with ``select='train_loss'``, minimises the epoch's mean
    training loss.
    """
    mean = x.reshape(-1, x.shape[-1]).mean(axis=0)
    std = x.reshape(-1, x.shape[-1]).std(axis=0)
    model.set_normalization(mean, np.where(std > 1e-8, std, 1.0))
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    rows, best, best_epoch, best_key = [], model.snapshot(), -1, None
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 13, epoch])
        order = rng.permutation(len(y))
        total, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = model.logits(x[idx])
            loss = ops.cross_entropy(logits, y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            correct += int((predict(logits.values) == y[idx]).sum())
            backward(loss)
            opt.step()
            total += value * len(idx)
        train_loss = total / len(y)
        val_acc = accuracy(model, x_val, y_val) if x_val is not None else float("nan")
        rows.append((epoch, train_loss, correct / len(y), val_acc))
        use_val = cfg.select == "val_acc" and not math.isnan(val_acc)
        key = (val_acc, -train_loss) if use_val else (-math.inf, -train_loss)
        if best_key is None or key > best_key:
            best_key, best, best_epoch = key, model.snapshot(), epoch
    model.load_arrays(best)
    return rows, best, best_epoch


def train_downstream(samples: Sequence[SensorSample], labels: Sequence[str], cfg: TrainConfig,
                     bank: Optional[LabelBank] = None, split: Optional[Split] = None) -> TrainResult:
    x, y = stack_dataset(samples)
    present = set(int(v) for v in y)
    if not present <= set(range(len(labels))):
        raise ContractError("dataset holds label indices outside the provider's label set")
    if bank is not None and cfg.provider == "skeleton" and list(bank.names) != list(labels):
        raise ContractError(f"label set mismatch: bank {bank.names} vs dataset {list(labels)}")
    split = split or make_split(len(y), cfg.seed)
    model = DownstreamModel(labels, x.shape[2], x.shape[1], cfg.backbone, cfg.provider, cfg.seed,
                            bank, cfg.match_mode)
    rows, _, best_epoch = fit(model, x[split.train], y[split.train], cfg, x[split.val], y[split.val])
    test_acc = accuracy(model, x[split.test], y[split.test])
    return TrainResult(model, test_acc, best_epoch, split.digest(), rows)


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for epoch, loss, tacc, vacc in rows:
            w.writerow([epoch, repr(float(loss)), repr(float(tacc)), "" if math.isnan(vacc) else repr(float(vacc))])


def save_model(path, result: TrainResult, cfg: TrainConfig) -> None:
    """Weights, normalisation, label bank and everything needed to rebuild the model."""
    model = result.model
    bb = cfg.backbone
    arrays = model.state_arrays()
    arrays["meta/model"] = np.array([
        PROVIDERS.index(model.provider), FAMILIES.index(bb.family), bb.d, bb.width, bb.kernel, bb.patch,
        bb.layers, MODES.index(cfg.match_mode), model.input_shape[1], model.input_shape[0], cfg.seed,
    ], dtype=np.float64)
    arrays["meta/test_accuracy"] = np.array([result.test_accuracy])
    if model.bank is not None:
        arrays.update(LabelBank(model.bank.names, model.bank.Z).to_arrays())
    save_arrays(path, arrays)


def load_model(path, labels: Sequence[str]) -> tuple[DownstreamModel, TrainConfig]:
    arrays = load_arrays(path)
    try:
        prov, fam, d, width, kernel, patch, layers, mode, channels, steps, seed = (int(v) for v in arrays["meta/model"])
    except KeyError:
        raise CheckpointError(f"{path}: not a downstream model file") from None
    backbone = BackboneConfig(FAMILIES[fam], d, width, kernel, patch, layers)
    cfg = TrainConfig(seed=seed, provider=PROVIDERS[prov], match_mode=MODES[mode], backbone=backbone)
    bank = LabelBank.from_arrays(arrays) if cfg.provider == "skeleton" else None
    model = DownstreamModel(labels, channels, steps, backbone, cfg.provider, seed, bank, cfg.match_mode)
    model.load_arrays(arrays)
    return model, cfg


# --------------------------------------------------------------------------
# few-shot


def sample_shots(y: np.ndarray, pool: np.ndarray, shots: Optional[int], n_labels: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Up to ``shots`` pool indices per class (all of them when ``shots`` is None)."""
    if shots is None:
        return np.sort(pool)
    picked = []
    for c in range(n_labels):
        members = pool[y[pool] == c]
        if len(members) < shots:
            raise ContractError(f"class {c} has {len(members)} training samples, {shots} shots requested")
        picked.append(rng.choice(members, size=shots, replace=False))
    return np.sort(np.concatenate(picked))


@dataclass
class FewShotResult:
    provider: str
    backbone: str
    per_seed: list
    split_hashes: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed))

    def summary(self) -> dict:
        return {"provider": self.provider, "backbone": self.backbone, "mean_acc": self.mean,
                "std_acc": self.std, "per_seed": [float(a) for a in self.per_seed]}


def few_shot_protocol(samples: Sequence[SensorSample], labels: Sequence[str], cfg: TrainConfig,
                      shots: Optional[int] = 5, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                      bank: Optional[LabelBank] = None) -> FewShotResult:
    """Train on ``shots`` samples per class for each seed; keep the lowest-training-loss epoch.

    Skeleton matching runs without attention (simple mode). The test split
    depends only on the seed, so every provider sees the same one.
    """
    x, y = stack_dataset(samples)
    accs, hashes = [], []
    mode = "simple" if _provider(cfg.provider) == "skeleton" else cfg.match_mode
    for seed in seeds:
        split = make_split(len(y), seed, val_frac=0.0)
        pool = np.concatenate([split.train, split.val])
        rng = np.random.default_rng([seed, 17])
        train_idx = sample_shots(y, pool, shots, len(labels), rng)
        run = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=seed,
                          provider=cfg.provider, match_mode=mode, backbone=cfg.backbone, select="train_loss")
        model = DownstreamModel(labels, x.shape[2], x.shape[1], cfg.backbone, cfg.provider, seed, bank, mode)
        fit(model, x[train_idx], y[train_idx], run)
        accs.append(accuracy(model, x[split.test], y[split.test]))
        hashes.append(Split(train_idx, np.zeros(0, dtype=np.int64), split.test).digest())
    return FewShotResult(_provider(cfg.provider), cfg.backbone.family, accs, hashes)
