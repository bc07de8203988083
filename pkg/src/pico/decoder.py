"""Stage III: decoder built from kernelized linear attention blocks.

Attention drops the softmax and uses the strictly positive feature map
phi(x) = elu(x) + 1. Associativity then allows the N x N weight matrix to be
bypassed: numerator phi(Q) (phi(K)^T V) and denominator phi(Q) (phi(K)^T 1)
cost O(N d^2) instead of O(N^2 d). The ratio is clamped as a guard (inert for
bounded values, since each output is a convex combination of value rows) and
scaled by a per-head channel gate derived from mean-pooled values.

A quadratic explicit-weight form of the same attention is kept as the
reference implementation for equivalence tests and scaling benchmarks, and a
conventional softmax attention serves as the ablation alternative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .layers import glorot_uniform, layer_norm, linear
from .tensor import Tensor


@dataclass
class DecoderConfig:
    channels: int
    tokens: int
    depth: int = 2
    heads: int = 4
    clamp_bound: float = 1e4
    eps_attn: float = 1e-6
    mlp_ratio: int = 4

    def validate(self):
        if self.channels % self.heads != 0:
            raise ParameterError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.clamp_bound <= 0:
            raise ParameterError(f"clamp bound must be > 0, got {self.clamp_bound}")
        if self.eps_attn <= 0:
            raise ParameterError(f"attention eps must be > 0, got {self.eps_attn}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def kernel_map(x: Tensor) -> Tensor:
    """phi(x) = elu(x) + 1; strictly positive (computed in fused form)."""
    return x.elu1()


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(axes)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"Q/K/V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.ndim < 2:
        raise ShapeError(f"attention needs [..., N, d] operands, got {q.shape}")


def la3_attention(q: Tensor, k: Tensor, v: Tensor, clamp_bound: float = 1e4, eps: float = 1e-6) -> Tensor:
    """Linear attention over the last two axes of [..., N, d] operands."""
    _check_qkv(q, k, v)
    phi_q = kernel_map(q)
    phi_k = kernel_map(k)
    kv = _swap_last(phi_k) @ v                       # [..., d, d]
    num = phi_q @ kv                                 # [..., N, d]
    ksum = _swap_last(phi_k.sum(axis=-2, keepdims=True))  # [..., d, 1]
    den = phi_q @ ksum                               # [..., N, 1]
    return num.div(den, eps).clamp(-clamp_bound, clamp_bound)


def kernel_attention_quadratic(q: Tensor, k: Tensor, v: Tensor, eps: float = 1e-6) -> Tensor:
    """Explicit-weight reference: materializes the N x N attention matrix."""
    _check_qkv(q, k, v)
    w = kernel_map(q) @ _swap_last(kernel_map(k))    # [..., N, N]
    den = w.sum(axis=-1, keepdims=True)
    return w.div(den, eps) @ v


def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Conventional scaled-dot-product attention (ablation decoder path)."""
    _check_qkv(q, k, v)
    d = q.shape[-1]
    scores = (q @ _swap_last(k)) * (1.0 / math.sqrt(d))
    shift = Tensor(scores.data.max(axis=-1, keepdims=True))  # constant, keeps exp bounded
    e = (scores - shift).exp()
    return e.div(e.sum(axis=-1, keepdims=True), 0.0) @ v


def cag_gate(v: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Channel gate from token-mean of the values: sigmoid(linear(mean(V))).

    v: [..., N, d]; w: [..., d, d]; b: [..., d]. Returns [..., 1, d] for
    broadcasting over tokens. Heads may be packed as leading axes of w and b.
    """
    m = v.mean(axis=-2, keepdims=True)               # [..., 1, d]
    pre = m @ w
    target = (1,) * (pre.ndim - b.ndim - 1) + b.shape[:-1] + (1, b.shape[-1])
    return (pre + b.reshape(target)).sigmoid()


class DecoderBlock:
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, index: int, use_la3: bool = True, dtype=np.float32):
        C, h, d = cfg.channels, cfg.heads, cfg.head_dim
        self.cfg = cfg
        self.index = index
        self.use_la3 = use_la3

        def proj():
            return Tensor(glorot_uniform(rng, (C, C), C, C, dtype), requires_grad=True)

        self.wq, self.wk, self.wv, self.wo = proj(), proj(), proj(), proj()
        if use_la3:
            self.cag_w = Tensor(glorot_uniform(rng, (h, d, d), d, d, dtype), requires_grad=True)
            self.cag_b = Tensor(np.zeros((h, d), dtype=dtype), requires_grad=True)
        hid = C * cfg.mlp_ratio
        self.mlp_w1 = Tensor(glorot_uniform(rng, (C, hid), C, hid, dtype), requires_grad=True)
        self.mlp_b1 = Tensor(np.zeros(hid, dtype=dtype), requires_grad=True)
        self.mlp_w2 = Tensor(glorot_uniform(rng, (hid, C), hid, C, dtype), requires_grad=True)
        self.mlp_b2 = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)
        self.norm1_gain = Tensor(np.ones(C, dtype=dtype), requires_grad=True)
        self.norm1_bias = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)
        self.norm2_gain = Tensor(np.ones(C, dtype=dtype), requires_grad=True)
        self.norm2_bias = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        i = self.index
        out = {
            f"dec.{i}.attn.wq": self.wq,
            f"dec.{i}.attn.wk": self.wk,
            f"dec.{i}.attn.wv": self.wv,
            f"dec.{i}.attn.wo": self.wo,
        }
        if self.use_la3:
            out[f"dec.{i}.cag.weight"] = self.cag_w
            out[f"dec.{i}.cag.bias"] = self.cag_b
        out.update(
            {
                f"dec.{i}.mlp.w1": self.mlp_w1,
                f"dec.{i}.mlp.b1": self.mlp_b1,
                f"dec.{i}.mlp.w2": self.mlp_w2,
                f"dec.{i}.mlp.b2": self.mlp_b2,
                f"dec.{i}.norm1.gain": self.norm1_gain,
                f"dec.{i}.norm1.bias": self.norm1_bias,
                f"dec.{i}.norm2.gain": self.norm2_gain,
                f"dec.{i}.norm2.bias": self.norm2_bias,
            }
        )
        return out

    def _split_heads(self, t: Tensor) -> Tensor:
        B, N, C = t.shape
        h, d = self.cfg.heads, self.cfg.head_dim
        return t.reshape(B, N, h, d).transpose(0, 2, 1, 3)

    def forward(self, z: Tensor) -> Tensor:
        """z: [B, N, C]. Residual attention then residual MLP, both pre-normed."""
        cfg = self.cfg
        h1 = layer_norm(z, self.norm1_gain, self.norm1_bias)
        q = self._split_heads(h1 @ self.wq)
        k = self._split_heads(h1 @ self.wk)
        v = self._split_heads(h1 @ self.wv)
        if self.use_la3:
            a = la3_attention(q, k, v, cfg.clamp_bound, cfg.eps_attn)
            a = a * cag_gate(v, self.cag_w, self.cag_b)
        else:
            a = softmax_attention(q, k, v)
        B, _, N, _ = a.shape
        merged = a.transpose(0, 2, 1, 3).reshape(B, N, cfg.channels)
        z = z + merged @ self.wo

        h2 = layer_norm(z, self.norm2_gain, self.norm2_bias)
        m = linear(h2, self.mlp_w1, self.mlp_b1).elu()
        return z + linear(m, self.mlp_w2, self.mlp_b2)


class AttentionDecoder:
    """Stack of decoder blocks plus the token-to-patch output projection."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, patch: int, use_la3: bool = True, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.patch = patch
        self.use_la3 = use_la3
        self.blocks = [DecoderBlock(cfg, rng, i, use_la3=use_la3, dtype=dtype) for i in range(cfg.depth)]
        P2 = patch * patch
        self.out_w = Tensor(glorot_uniform(rng, (cfg.channels, P2), cfg.channels, P2, dtype), requires_grad=True)
        self.out_b = Tensor(np.zeros(P2, dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for blk in self.blocks:
            out.update(blk.params())
        out["dec.out.weight"] = self.out_w
        out["dec.out.bias"] = self.out_b
        return out

    def forward_tokens(self, z: Tensor) -> Tensor:
        for blk in self.blocks:
            z = blk.forward(z)
        return z

    def decode_to_image(self, z: Tensor, height: int, width: int) -> Tensor:
        """Project tokens to P^2 pixels each and unpatchify row-major."""
        P = self.patch
        B, N, _ = z.shape
        hp, wp = height // P, width // P
        if hp * P != height or wp * P != width or hp * wp != N:
            raise ShapeError(f"token count {N} does not tile {height}x{width} with patch {P}")
        pix = linear(z, self.out_w, self.out_b)             # [B, N, P*P]
        pix = pix.reshape(B, hp, wp, P, P).transpose(0, 1, 3, 2, 4)
        return pix.reshape(B, height, width)

    def forward(self, z: Tensor, height: int, width: int) -> Tensor:
        return self.decode_to_image(self.forward_tokens(z), height, width)
