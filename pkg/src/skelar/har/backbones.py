"""Sensor-series feature extractors: [B, t, channels] -> [B, d]."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import DiffTensor, Linear, Module, ops, parameter
from ..autodiff.nn import glorot, he_normal
from ..errors import ConfigError, ShapeError

FAMILIES = ("resnet", "transformer")
_ALIASES = {"residual-conv-1d": "resnet", "temporal-attention": "transformer", "attention": "transformer"}


@dataclass(frozen=True)
class BackboneConfig:
    family: str = "resnet"
    d: int = 256
    width: int = 32          # channels of the first residual stage / token width
    kernel: int = 5
    patch: int = 10
    layers: int = 2

    def __post_init__(self):
        fam = _ALIASES.get(self.family, self.family)
        if fam not in FAMILIES:
            raise ConfigError(f"unknown backbone {self.family!r}; choose from {', '.join(FAMILIES)}")
        object.__setattr__(self, "family", fam)


def _same_conv(x: DiffTensor, kernel: DiffTensor, stride: int = 1) -> DiffTensor:
    w = kernel.shape[-1]
    left = (w - 1) // 2
    return ops.conv1d(ops.pad_last(x, left, w - 1 - left), kernel, stride)


class ResidualStage(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator):
        self._stride = stride
        self.conv1 = parameter(he_normal(rng, c_in * kernel, (c_out, c_in, kernel)))
        self.b1 = parameter(np.zeros((c_out, 1)))
        self.conv2 = parameter(he_normal(rng, c_out * kernel, (c_out, c_out, kernel)) * 0.5)
        self.b2 = parameter(np.zeros((c_out, 1)))
        self.skip = (parameter(he_normal(rng, c_in, (c_out, c_in, 1)))
                     if (c_in != c_out or stride != 1) else None)

    def __call__(self, x: DiffTensor) -> DiffTensor:
        h = ops.relu(ops.add(_same_conv(x, self.conv1, self._stride), self.b1))
        h = ops.add(_same_conv(h, self.conv2), self.b2)
        s = ops.conv1d(x, self.skip, self._stride) if self.skip is not None else x
        if s.shape[-1] != h.shape[-1]:
            s = ops.index(s, (Ellipsis, slice(0, h.shape[-1])))
        return ops.relu(ops.add(h, s))


class ResidualConv1d(Module):
    """Four residual stages, global average pooling, then a linear map to d."""

    def __init__(self, channels: int, cfg: BackboneConfig, rng: np.random.Generator):
        w = cfg.width
        widths = (w, w, 2 * w, 2 * w)
        strides = (1, 2, 2, 2)
        self.stem = parameter(he_normal(rng, channels * cfg.kernel, (w, channels, cfg.kernel)))
        self.stem_b = parameter(np.zeros((w, 1)))
        stages, c_in = [], w
        for c, s in zip(widths, strides):
            stages.append(ResidualStage(c_in, c, cfg.kernel, s, rng))
            c_in = c
        self.stages = stages
        self.out = Linear(c_in, cfg.d, rng)

    def __call__(self, x: DiffTensor) -> DiffTensor:
        h = ops.swapaxes(x, -1, -2)                       # [B, c, t]
        h = ops.relu(ops.add(_same_conv(h, self.stem), self.stem_b))
        for stage in self.stages:
            h = stage(h)
        return self.out(ops.mean(h, axis=-1))


class AttentionLayer(Module):
    """Single-head self-attention plus a two-layer feed-forward block, each residual and normalised."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.Wq = parameter(glorot(rng, width, width, (width, width)))
        self.Wk = parameter(glorot(rng, width, width, (width, width)))
        self.Wv = parameter(glorot(rng, width, width, (width, width)))
        self.ff1 = Linear(width, 2 * width, rng)
        self.ff2 = Linear(2 * width, width, rng)

    def __call__(self, x: DiffTensor) -> DiffTensor:
        q, k, v = ops.matmul(x, self.Wq), ops.matmul(x, self.Wk), ops.matmul(x, self.Wv)
        s = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(x.shape[-1]))
        h = ops.layer_norm(ops.add(x, ops.matmul(ops.softmax(s, axis=-1), v)))
        return ops.layer_norm(ops.add(h, self.ff2(ops.relu(self.ff1(h)))))


class TemporalAttention(Module):
    """Non-overlapping patches as tokens, learned positions, attention layers, mean pool."""

    def __init__(self, channels: int, steps: int, cfg: BackboneConfig, rng: np.random.Generator):
        if steps % cfg.patch:
            raise ConfigError(f"patch size {cfg.patch} does not divide {steps} steps")
        self._patch = cfg.patch
        self._tokens = steps // cfg.patch
        width = 2 * cfg.width
        self.embed = Linear(channels * cfg.patch, width, rng)
        self.pos = parameter(rng.normal(0.0, 0.02, (self._tokens, width)))
        self.layers = [AttentionLayer(width, rng) for _ in range(cfg.layers)]
        self.out = Linear(width, cfg.d, rng)

    def __call__(self, x: DiffTensor) -> DiffTensor:
        B, t, c = x.shape
        if t != self._tokens * self._patch:
            raise ShapeError(f"expected {self._tokens * self._patch} steps, got {t}")
        h = ops.add(self.embed(ops.reshape(x, (B, self._tokens, self._patch * c))), self.pos)
        for layer in self.layers:
            h = layer(h)
        return self.out(ops.mean(h, axis=1))


def build_backbone(cfg: BackboneConfig, channels: int, steps: int, rng: np.random.Generator) -> Module:
    if cfg.family == "resnet":
        return ResidualConv1d(channels, cfg, rng)
    return TemporalAttention(channels, steps, cfg, rng)
