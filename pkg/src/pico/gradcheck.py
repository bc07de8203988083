"""Finite-difference verification of the reverse-mode gradients.

The checks run in float64 so that the central-difference quotient resolves
well below the tolerance budgets; the code path being verified is identical
to the float32 production path.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a scalar-valued function of `x` (it may close over other
    fixed tensors). Relative error per component is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    x.zero_grad()
    loss = f(x)
    loss.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_hi = f(x).item()
        flat[i] = orig - step
        f_lo = f(x).item()
        flat[i] = orig
        num_flat[i] = (f_hi - f_lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_components(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_components: int,
    rng: np.random.Generator,
    step: float = 1e-3,
) -> float:
    """Spot-check `n_components` random parameter entries of a zero-arg loss.

    Used for whole-model checks where perturbing every weight is too slow.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_components, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat_idx in picks:
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        p = params[k]
        i = int(flat_idx - offsets[k])
        analytic = float(p.grad.reshape(-1)[i]) if p.grad is not None else 0.0

        data = p.data.reshape(-1)
        orig = data[i]
        data[i] = orig + step
        f_hi = loss_fn().item()
        data[i] = orig - step
        f_lo = loss_fn().item()
        data[i] = orig
        numeric = (f_hi - f_lo) / (2.0 * step)

        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


def gradient_suite(n_seeds: int = 10, step: float = 3e-4) -> dict[str, float]:
    """Finite-difference audit across every layer type plus the full loss.

    Runs in float64 with a small probe step so truncation error sits well
    under the budgets (1e-4 per layer, 1e-3 for the end-to-end loss);
    returns the worst relative error per layer family over all seeds.
    """
    from .bottleneck import BottleneckConfig, SpectralBottleneck
    from .decoder import DecoderBlock, DecoderConfig, cag_gate, la3_attention, softmax_attention
    from .layers import channel_conv1d, conv2d_tokens, layer_norm
    from .model import ModelConfig, PipelineModel, reconstruction_loss

    f64 = np.float64
    out: dict[str, float] = {}

    def record(name: str, err: float):
        out[name] = max(out.get(name, 0.0), err)

    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)

        def t(shape, scale=1.0, shift=0.0):
            return Tensor(rng.normal(size=shape) * scale + shift, requires_grad=True, dtype=f64)

        a, b = t((3, 4)), t((4, 5))
        record("matmul", grad_check(lambda v: (v @ b).square().sum(), a, step))
        record("matmul", grad_check(lambda v: (a @ v).square().sum(), b, step))

        x = t((3, 5), shift=0.2)  # keep clear of the elu kink
        record("elu", grad_check(lambda v: v.elu().square().sum(), x, step))
        record("sigmoid", grad_check(lambda v: v.sigmoid().square().sum(), t((3, 5)), step))

        xc = t((2, 36, 2))
        wc = t((3, 2, 3, 3), scale=0.4)
        bc = t((3,), scale=0.1)
        record("conv", grad_check(lambda v: conv2d_tokens(v, wc, bc, 6, 6).square().sum(), xc, step))
        record("conv", grad_check(lambda v: conv2d_tokens(xc, v, bc, 6, 6).square().sum(), wc, step))

        vv = t((2, 8))
        w1 = t((3,), scale=0.5)
        b1 = t((1,), scale=0.1)
        record("gating", grad_check(lambda v: channel_conv1d(v, w1, b1).sigmoid().square().sum(), vv, step))
        record("gating", grad_check(lambda v: channel_conv1d(vv, v, b1).sigmoid().square().sum(), w1, step))

        g = t((6,), shift=1.0)
        bb = t((6,), scale=0.1)
        z = t((2, 5, 6))
        record("layernorm", grad_check(lambda v: layer_norm(v, g, bb).square().sum(), z, step))

        q, k, v_ = t((7, 4)), t((7, 4)), t((7, 4))
        record("attention", grad_check(lambda u: la3_attention(u, k, v_).square().sum(), q, step))
        record("attention", grad_check(lambda u: la3_attention(q, k, u).square().sum(), v_, step))
        record("attention", grad_check(lambda u: softmax_attention(q, u, v_).square().sum(), k, step))
        wg, bg = t((4, 4), scale=0.5), t((4,), scale=0.1)
        record("gating", grad_check(lambda u: (v_ * cag_gate(v_, u, bg)).square().sum(), wg, step))

        bneck = SpectralBottleneck(BottleneckConfig(channels=8), np.random.default_rng(seed), dtype=f64)
        zb = t((2, 5, 8))
        record("bottleneck", grad_check(lambda u: bneck.forward(u).square().sum(), zb, step))

        blk = DecoderBlock(DecoderConfig(channels=8, tokens=5, heads=2), np.random.default_rng(seed), 0, dtype=f64)
        record("decoder-block", grad_check(lambda u: blk.forward(u).square().sum(), t((2, 5, 8)), step))

    # End-to-end loss via random-parameter spot checks on a small pipeline.
    for seed in range(n_seeds):
        rng = np.random.default_rng(2000 + seed)
        cfg = ModelConfig(image_size=8, patch=4, channels=16, depth=2, heads=4)
        model = PipelineModel(cfg, np.random.default_rng(seed), dtype=f64)
        img = Tensor(rng.uniform(0.1, 0.9, size=(2, 8, 8)), dtype=f64)
        params = list(model.params().values())

        def loss_fn():
            x_norm, x_hat, _, _ = model.forward(img)
            return reconstruction_loss(x_norm, x_hat)

        record("pipeline-loss", grad_check_components(loss_fn, params, 20, rng, step))
    return out
