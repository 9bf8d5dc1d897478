"""Spatio-temporal skeleton encoder: one k-vector per joint."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import DiffTensor, Module, no_grad, ops, parameter
from .autodiff.nn import glorot, he_normal
from .errors import ConfigError, ShapeError
from .skeleton.io import WindowedSample
from .skeleton.topology import CANONICAL, SkeletonTopology


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    kernel: int = 5
    stride: int = 2
    attention: bool = True


@dataclass(frozen=True)
class EncoderConfig:
    blocks: tuple[BlockConfig, ...] = (BlockConfig(64), BlockConfig(128), BlockConfig(256))
    groups: int = 8
    in_channels: int = 3
    num_joints: int = 21
    frames: int = 150
    center: bool = True

    @property
    def k(self) -> int:
        return self.blocks[-1].channels

    @classmethod
    def small(cls, k: int = 64) -> "EncoderConfig":
        """Narrow preset for minutes-scale CPU runs."""
        return cls(blocks=(BlockConfig(16), BlockConfig(32), BlockConfig(k)), groups=4)

    @classmethod
    def tiny(cls, k: int = 4, frames: int = 20) -> "EncoderConfig":
        """Just big enough for finite-difference gradient checks."""
        return cls(blocks=(BlockConfig(4, kernel=3, stride=2), BlockConfig(k, kernel=3, stride=2)),
                   groups=2, frames=frames)

    def lengths(self) -> list[int]:
        out = [self.frames]
        for b in self.blocks:
            out.append((out[-1] - b.kernel) // b.stride + 1)
        return out

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("encoder needs at least one block")
        for b in self.blocks:
            if b.channels % self.groups:
                raise ConfigError(f"groups={self.groups} does not divide {b.channels} channels")
        if min(self.lengths()) < 1:
            raise ConfigError(f"stride schedule reduces {self.frames} frames below 1: {self.lengths()}")

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "meta/encoder/blocks": np.array([[b.channels, b.kernel, b.stride, int(b.attention)]
                                             for b in self.blocks], dtype=np.float64),
            "meta/encoder/shape": np.array([self.groups, self.in_channels, self.num_joints,
                                            self.frames, int(self.center)], dtype=np.float64),
        }

    @classmethod
    def from_arrays(cls, arrays) -> "EncoderConfig":
        blocks = tuple(BlockConfig(int(c), int(w), int(s), bool(a)) for c, w, s, a in arrays["meta/encoder/blocks"])
        g, cin, v, t, center = (int(x) for x in arrays["meta/encoder/shape"])
        return cls(blocks=blocks, groups=g, in_channels=cin, num_joints=v, frames=t, center=bool(center))


class DecoupledGCN(Module):
    """Graph convolution with g independently trainable aggregation kernels.

    Channels of H W are split into g contiguous groups; group i is mixed
    across joints by kernel A[i]. Every kernel starts as D^-1/2 A D^1/2.
    """

    def __init__(self, c_in: int, c_out: int, groups: int, rng: np.random.Generator,
                 topology: SkeletonTopology = CANONICAL):
        if c_out % groups:
            raise ConfigError(f"groups={groups} does not divide c_out={c_out}")
        self.groups = groups
        self.W = parameter(he_normal(rng, c_in, (c_in, c_out)))
        base = topology.normalized_adjacency
        self.A = parameter(np.stack([base.copy() for _ in range(groups)]))

    def __call__(self, h: DiffTensor) -> DiffTensor:
        """[..., v, c_in] -> [..., v, c_out]"""
        hw = ops.matmul(h, self.W)
        *lead, v, c = hw.shape
        g = self.groups
        hw = ops.reshape(hw, (*lead, v, g, c // g))
        n = len(lead)
        perm = tuple(range(n)) + (n + 1, n, n + 2)  # [..., g, v, c/g]
        mixed = ops.matmul(self.A, ops.transpose(hw, perm))
        mixed = ops.transpose(mixed, perm)
        return ops.relu(ops.reshape(mixed, (*lead, v, c)))


class JointTemporalAttention(Module):
    """Single-head self-attention over time, run separately for every joint."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.Wq = parameter(glorot(rng, channels, channels, (channels, channels)))
        self.Wk = parameter(glorot(rng, channels, channels, (channels, channels)))
        self.Wv = parameter(glorot(rng, channels, channels, (channels, channels)))

    def __call__(self, x: DiffTensor) -> DiffTensor:
        """[..., v, c, t] -> [..., v, c, t]; joints never exchange information."""
        seq = ops.swapaxes(x, -1, -2)  # [..., v, t, c]
        q = ops.matmul(seq, self.Wq)
        k = ops.matmul(seq, self.Wk)
        v = ops.matmul(seq, self.Wv)
        scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(seq.shape[-1]))
        out = ops.matmul(ops.softmax(scores, axis=-1), v)
        return ops.swapaxes(out, -1, -2)


class EncoderBlock(Module):
    def __init__(self, c_in: int, cfg: BlockConfig, groups: int, rng: np.random.Generator,
                 topology: SkeletonTopology = CANONICAL):
        c = cfg.channels
        self.cfg = cfg
        self.gcn = DecoupledGCN(c_in, c, groups, rng, topology)
        self.tconv = parameter(he_normal(rng, c * cfg.kernel, (c, c, cfg.kernel)))
        self.tbias = parameter(np.zeros((c, 1)))
        self.attn = JointTemporalAttention(c, rng) if cfg.attention else None

    def __call__(self, x: DiffTensor) -> DiffTensor:
        """[B, v, c_in, t] -> [B, v, c, t']"""
        h = self.gcn(ops.transpose(x, (0, 3, 1, 2)))        # [B, t, v, c]
        h = ops.transpose(h, (0, 2, 3, 1))                  # [B, v, c, t]
        h = ops.conv1d(h, self.tconv, self.cfg.stride)
        h = ops.relu(ops.add(h, self.tbias))
        if self.attn is not None:
            h = ops.add(h, self.attn(h))
            h = ops.swapaxes(ops.layer_norm(ops.swapaxes(h, -1, -2)), -1, -2)
        return h


class SkeletonEncoder(Module):
    def __init__(self, config: Optional[EncoderConfig] = None, seed: int = 0,
                 topology: SkeletonTopology = CANONICAL):
        config = config or EncoderConfig()
        config.validate()
        self._config = config
        self._topology = topology
        rng = np.random.default_rng(seed)
        blocks = []
        c_in = config.in_channels
        for b in config.blocks:
            blocks.append(EncoderBlock(c_in, b, config.groups, rng, topology))
            c_in = b.channels
        self.blocks = blocks

    @property
    def config(self) -> EncoderConfig:
        return self._config

    @property
    def k(self) -> int:
        return self._config.k

    def prepare_input(self, coords) -> np.ndarray:
        """Stack samples into [B, v, 3, t] and optionally centre on the mean pelvis position."""
        if isinstance(coords, WindowedSample):
            coords = coords.coords
        elif isinstance(coords, (list, tuple)) and coords and isinstance(coords[0], WindowedSample):
            coords = np.stack([s.coords for s in coords])
        x = np.asarray(coords, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        cfg = self._config
        if x.ndim != 4 or x.shape[1:] != (cfg.num_joints, cfg.in_channels, cfg.frames):
            raise ShapeError(f"encoder expects [B, {cfg.num_joints}, {cfg.in_channels}, {cfg.frames}], got {x.shape}")
        if cfg.center:
            x = x - x[:, 0:1, :, :].mean(axis=3, keepdims=True)
        return x

    def __call__(self, x, mask: Optional[np.ndarray] = None) -> DiffTensor:
        """Encode a batch. ``mask`` is [B, v] with 0 for dropped joints.

        Returns Z as [B, v, k].
        """
        if not isinstance(x, DiffTensor):
            x = DiffTensor(self.prepare_input(x))
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.ndim == 1:
                mask = mask[None]
            x = ops.mul(x, mask[:, :, None, None])
        h = x
        for block in self.blocks:
            h = block(h)
        return ops.mean(h, axis=3)

    def encode(self, samples, batch_size: int = 32) -> np.ndarray:
        """Gradient-free encoding; returns [v, k] for one sample or [B, v, k] for many."""
        x = self.prepare_input(samples)
        single = (isinstance(samples, WindowedSample)
                  or (not isinstance(samples, (list, tuple)) and np.asarray(samples).ndim == 3))
        out = []
        with no_grad():
            for i in range(0, x.shape[0], batch_size):
                out.append(self(DiffTensor(x[i:i + batch_size])).values)
        z = np.concatenate(out, axis=0)
        return z[0] if single else z

    def state_arrays(self, prefix: str = "encoder/") -> dict[str, np.ndarray]:
        arrays = dict(self.state_dict(prefix))
        arrays.update(self._config.to_arrays())
        return arrays

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "encoder/") -> "SkeletonEncoder":
        enc = cls(EncoderConfig.from_arrays(arrays))
        enc.load_state_dict(arrays, prefix)
        return enc

