"""Label representations built from skeleton encodings, and heads that score sensor features against them."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import DiffTensor, Module, no_grad, ops, parameter
from .autodiff.checkpoint import encode as encode_arrays, load as load_arrays, save as save_arrays
from .autodiff.nn import glorot
from .errors import CheckpointError, ConfigError, ContractError, ShapeError
from .skeleton.topology import JOINT_NAMES

MODES = ("attention", "simple")


@dataclass
class LabelBank:
    """Per-activity joint representations Z [L, v, k], frozen once built."""

    names: list
    Z: np.ndarray
    cache: Optional[np.ndarray] = None    # [L, d] attention-enhanced vectors

    def __post_init__(self):
        self.names = list(self.names)
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.Z.ndim != 3 or self.Z.shape[0] != len(self.names):
            raise ShapeError(f"bank needs Z [L, v, k] for {len(self.names)} labels, got {self.Z.shape}")
        if len(set(self.names)) != len(self.names):
            raise ContractError("duplicate activity names in label bank")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def num_joints(self) -> int:
        return self.Z.shape[1]

    @property
    def k(self) -> int:
        return self.Z.shape[2]

    def joint_mean(self) -> np.ndarray:
        return self.Z.mean(axis=1)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, name in enumerate(self.names):
            out[f"bank/{name}/Z"] = self.Z[i]
        if self.cache is not None:
            for i, name in enumerate(self.names):
                out[f"bank/{name}/Zp"] = self.cache[i]
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "LabelBank":
        names, Z, cache = [], [], {}
        for key, arr in arrays.items():
            if not key.startswith("bank/"):
                continue
            name, _, kind = key[len("bank/"):].rpartition("/")
            if kind == "Z":
                names.append(name)
                Z.append(arr)
            elif kind == "Zp":
                cache[name] = arr
            else:
                raise CheckpointError(f"unexpected bank record {key!r}")
        if not names:
            raise CheckpointError("file holds no bank/<activity>/Z records")
        if cache and set(cache) != set(names):
            raise CheckpointError("cache records do not cover every activity")
        return cls(names, np.stack(Z), np.stack([cache[n] for n in names]) if cache else None)

    def to_bytes(self) -> bytes:
        return encode_arrays(self.to_arrays())

    def save(self, path) -> None:
        save_arrays(path, self.to_arrays())

    @classmethod
    def load(cls, path) -> "LabelBank":
        return cls.from_arrays(load_arrays(path))


def build_label_bank(samples: Mapping[str, Sequence], encoder, batch_size: int = 32) -> LabelBank:
    """Z_i = mean of the encodings of activity i's samples, in the order given."""
    names, Z = [], []
    for name, group in samples.items():
        group = list(group)
        if not group:
            raise ContractError(f"activity {name!r} has no samples")
        enc = encoder.encode(group, batch_size=batch_size)
        if enc.ndim == 2:
            enc = enc[None]
        names.append(name)
        Z.append(enc.mean(axis=0))
    if not names:
        raise ContractError("no activities to embed")
    return LabelBank(names, np.stack(Z))


class MatchHead(Module):
    """Projects label representations into the sensor feature space.

    ``attention`` mode runs self-attention across the joint rows of each
    Z_i and sums the outputs into one d-vector; ``simple`` mode maps the
    joint-averaged Z_i through a single [d, k] matrix.
    """

    def __init__(self, mode: str, k: int, d: int, rng: np.random.Generator):
        if mode not in MODES:
            raise ConfigError(f"unknown match mode {mode!r}; choose from {', '.join(MODES)}")
        self._mode = mode
        self._k, self._d = k, d
        if mode == "attention":
            self.W_Q = parameter(glorot(rng, k, d, (k, d)))
            self.W_K = parameter(glorot(rng, k, d, (k, d)))
            self.W_V = parameter(glorot(rng, k, d, (k, d)))
        else:
            self.W = parameter(glorot(rng, k, d, (d, k)))

    @property
    def mode(self) -> str:
        return self._mode

    @property
    def d(self) -> int:
        return self._d

    def attention_weights(self, Z) -> DiffTensor:
        """Softmax(Q K^T / sqrt(d)) over joint rows: [..., v, v]."""
        Z = Z if isinstance(Z, DiffTensor) else DiffTensor(np.asarray(Z, dtype=np.float64))
        q = ops.matmul(Z, self.W_Q)
        kk = ops.matmul(Z, self.W_K)
        s = ops.mul(ops.matmul(q, ops.swapaxes(kk, -1, -2)), 1.0 / math.sqrt(self._d))
        return ops.softmax(s, axis=-1)

    def attention_enhance(self, Z) -> DiffTensor:
        """[..., v, k] -> [..., d]: attention output rows summed over joints."""
        if self._mode != "attention":
            raise ContractError("attention_enhance needs an attention-mode head")
        Z = Z if isinstance(Z, DiffTensor) else DiffTensor(np.asarray(Z, dtype=np.float64))
        if Z.shape[-1] != self._k:
            raise ShapeError(f"label representation has {Z.shape[-1]} channels, head expects {self._k}")
        att = self.attention_weights(Z)
        v = ops.matmul(Z, self.W_V)
        return ops.sum(ops.matmul(att, v), axis=-2)

    def label_vectors(self, bank: LabelBank, use_cache: bool = True) -> DiffTensor:
        """[L, d] vectors the sensor features are scored against."""
        if self._mode == "attention":
            if use_cache and bank.cache is not None:
                return DiffTensor(bank.cache)
            return self.attention_enhance(bank.Z)
        zbar = DiffTensor(bank.joint_mean())                      # [L, k]
        return ops.transpose(ops.matmul(self.W, ops.transpose(zbar)))

    def score(self, Y, bank: LabelBank, use_cache: bool = True) -> DiffTensor:
        """Similarity logits [N, L] (or [L] for a single feature vector)."""
        if len(bank) == 0:
            raise ContractError("label bank is empty")
        Y = Y if isinstance(Y, DiffTensor) else DiffTensor(np.asarray(Y, dtype=np.float64))
        if Y.shape[-1] != self._d:
            raise ContractError(f"feature size {Y.shape[-1]} does not match head d={self._d}")
        single = Y.ndim == 1
        if single:
            Y = ops.reshape(Y, (1, self._d))
        s = ops.matmul(Y, ops.transpose(self.label_vectors(bank, use_cache)))
        return ops.reshape(s, (len(bank),)) if single else s


def cache_bank(bank: LabelBank, head: MatchHead) -> LabelBank:
    """Store each label's attention-enhanced vector so inference skips the projections."""
    if head.mode != "attention":
        return bank
    with no_grad():
        cache = head.attention_enhance(bank.Z).values.copy()
    return replace(bank, cache=cache)


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax over labels; ties go to the lowest label index."""
    return np.argmax(np.asarray(scores), axis=-1)


def joint_attention_mass(bank: LabelBank, head: MatchHead) -> np.ndarray:
    """[L, v]: total attention each joint receives, summed over query rows."""
    if head.mode != "attention":
        raise ContractError("attention mass needs an attention-mode head")
    with no_grad():
        att = head.attention_weights(bank.Z).values
    return att.sum(axis=-2)


def write_heatmap_csv(path, bank: LabelBank, head: MatchHead, joint_names: Sequence[str] = JOINT_NAMES) -> None:
    mass = joint_attention_mass(bank, head)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["activity", "joint", "attention_mass"])
        for i, name in enumerate(bank.names):
            for j in range(mass.shape[1]):
                joint = joint_names[j] if j < len(joint_names) else str(j)
                w.writerow([name, joint, repr(float(mass[i, j]))])
