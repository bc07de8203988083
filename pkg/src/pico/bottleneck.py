"""Stage II: dual-path bottleneck with learned channel gating.

Two parallel transforms of the pre-normalized tokens: a 4x channel expansion
that can keep fine detail, and a rank-limited compression that cannot. A
per-channel sigmoid gate mixes them convexly, so each output channel sits
between the two path outputs. The fused branch rides a residual connection
and is dropped stochastically during training (DropPath).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .layers import channel_conv1d, glorot_uniform, layer_norm, linear
from .tensor import Tensor


@dataclass
class BottleneckConfig:
    channels: int
    expansion_factor: int = 4
    compression_factor: int = 4
    gate_kernel: int = 3
    droppath_rate: float = 0.1

    def validate(self):
        if self.channels % self.compression_factor != 0:
            raise ParameterError(
                f"channels {self.channels} not divisible by compression factor {self.compression_factor}"
            )
        if self.gate_kernel % 2 != 1:
            raise ParameterError(f"gate kernel must be odd, got {self.gate_kernel}")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ParameterError(f"droppath rate must lie in [0, 1), got {self.droppath_rate}")


def _as_batched(z: Tensor) -> tuple[Tensor, bool]:
    if z.ndim == 2:
        return z.reshape((1,) + z.shape), True
    return z, False


class SpectralBottleneck:
    def __init__(self, cfg: BottleneckConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        C = cfg.channels
        hi = C * cfg.expansion_factor
        lo = C // cfg.compression_factor

        def lin(c_in, c_out):
            w = Tensor(glorot_uniform(rng, (c_in, c_out), c_in, c_out, dtype), requires_grad=True)
            b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
            return w, b

        self.gate_w = Tensor(glorot_uniform(rng, (cfg.gate_kernel,), cfg.gate_kernel, 1, dtype), requires_grad=True)
        self.gate_b = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        self.hi_w1, self.hi_b1 = lin(C, hi)
        self.hi_w2, self.hi_b2 = lin(hi, C)
        self.lo_w1, self.lo_b1 = lin(C, lo)
        self.lo_w2, self.lo_b2 = lin(lo, C)
        self.norm_gain = Tensor(np.ones(C, dtype=dtype), requires_grad=True)
        self.norm_bias = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {
            "bneck.gate.conv.weight": self.gate_w,
            "bneck.gate.conv.bias": self.gate_b,
            "bneck.high.w1": self.hi_w1,
            "bneck.high.b1": self.hi_b1,
            "bneck.high.w2": self.hi_w2,
            "bneck.high.b2": self.hi_b2,
            "bneck.low.w1": self.lo_w1,
            "bneck.low.b1": self.lo_b1,
            "bneck.low.w2": self.lo_w2,
            "bneck.low.b2": self.lo_b2,
            "bneck.norm.gain": self.norm_gain,
            "bneck.norm.bias": self.norm_bias,
        }

    def channel_gate(self, z: Tensor) -> Tensor:
        """Per-channel gate in (0, 1) from token-mean-pooled features.

        [N, C] -> [C]; [B, N, C] -> [B, C]. Mean pooling makes the gate
        invariant to token permutations.
        """
        zb, squeeze = _as_batched(z)
        pooled = zb.mean(axis=1)  # [B, C]
        g = channel_conv1d(pooled, self.gate_w, self.gate_b).sigmoid()
        return g.reshape(g.shape[1:]) if squeeze else g

    def path_high(self, z: Tensor) -> Tensor:
        h = linear(z, self.hi_w1, self.hi_b1).elu1()
        return linear(h, self.hi_w2, self.hi_b2)

    def path_low(self, z: Tensor) -> Tensor:
        h = linear(z, self.lo_w1, self.lo_b1).elu1()
        return linear(h, self.lo_w2, self.lo_b2)

    def forward(self, z: Tensor, training: bool = False, droppath_rng: np.random.Generator | None = None) -> Tensor:
        """Residual block: z + DropPath(gated fusion of both paths of PreNorm(z))."""
        zb, squeeze = _as_batched(z)
        h = layer_norm(zb, self.norm_gain, self.norm_bias)
        g = self.channel_gate(h)  # [B, C]
        g = g.reshape(g.shape[0], 1, g.shape[1])
        fused = g * self.path_high(h) + (1.0 - g) * self.path_low(h)

        rate = self.cfg.droppath_rate
        if training and rate > 0.0:
            if droppath_rng is None:
                raise ParameterError("training-mode forward needs a droppath rng")
            keep = (droppath_rng.uniform(size=(zb.shape[0], 1, 1)) >= rate).astype(zb.data.dtype)
            fused = fused * Tensor(keep / (1.0 - rate))

        out = zb + fused
        return out.reshape(z.shape) if squeeze else out


class PlainBottleneck:
    """Single-path stand-in with the same parameter budget as the dual path.

    Used by the ablation that switches the dual-path block off; keeps the
    PreNorm + residual wiring so only the inner transform changes.
    """

    def __init__(self, cfg: BottleneckConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        C = cfg.channels
        hi = C * cfg.expansion_factor
        lo = C // cfg.compression_factor
        dual = (C * hi + hi + hi * C + C) + (C * lo + lo + lo * C + C) + (cfg.gate_kernel + 1)
        hidden = max(1, round((dual - C) / (2 * C + 1)))
        self.w1 = Tensor(glorot_uniform(rng, (C, hidden), C, hidden, dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(glorot_uniform(rng, (hidden, C), hidden, C, dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)
        self.norm_gain = Tensor(np.ones(C, dtype=dtype), requires_grad=True)
        self.norm_bias = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {
            "bneck.plain.w1": self.w1,
            "bneck.plain.b1": self.b1,
            "bneck.plain.w2": self.w2,
            "bneck.plain.b2": self.b2,
            "bneck.norm.gain": self.norm_gain,
            "bneck.norm.bias": self.norm_bias,
        }

    def forward(self, z: Tensor, training: bool = False, droppath_rng: np.random.Generator | None = None) -> Tensor:
        zb, squeeze = _as_batched(z)
        h = layer_norm(zb, self.norm_gain, self.norm_bias)
        h = linear(h, self.w1, self.b1).elu1()
        branch = linear(h, self.w2, self.b2)
        rate = self.cfg.droppath_rate
        if training and rate > 0.0:
            if droppath_rng is None:
                raise ParameterError("training-mode forward needs a droppath rng")
            keep = (droppath_rng.uniform(size=(zb.shape[0], 1, 1)) >= rate).astype(zb.data.dtype)
            branch = branch * Tensor(keep / (1.0 - rate))
        out = zb + branch
        return out.reshape(z.shape) if squeeze else out
