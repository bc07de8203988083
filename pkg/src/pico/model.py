"""Pipeline assembly: patch encoder -> bottleneck -> decoder, plus losses.

The cascade maps an input image to (x_norm, x_hat, z_in, z_out): the
illumination-normalized input, its reconstruction, and the token features
before and after the bottleneck. Ablation flags rewire individual stages
without touching the rest:

* use_photometric=False   feeds the raw image forward (x_norm := input)
* use_bottleneck_dualpath=False   swaps in a single MLP of equal budget
* use_la3=False   swaps linear attention for softmax attention (no CAG)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bottleneck import BottleneckConfig, PlainBottleneck, SpectralBottleneck
from .checkpoint import read_tensors, write_tensors
from .decoder import AttentionDecoder, DecoderConfig
from .errors import ParameterError, ShapeError
from .layers import glorot_uniform
from .photometric import PhotometricStage
from .rng import substream
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    channels: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    expansion_factor: int = 4
    compression_factor: int = 4
    gate_kernel: int = 3
    droppath_rate: float = 0.1
    l_min: float = 0.05
    eps_photo: float = 1e-6
    clamp_bound: float = 1e4
    eps_attn: float = 1e-6
    use_photometric: bool = True
    use_bottleneck_dualpath: bool = True
    use_la3: bool = True

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    def validate(self):
        if self.image_size % self.patch != 0:
            raise ParameterError(f"image size {self.image_size} not divisible by patch {self.patch}")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 16
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    weight_decay: float = 1e-4
    alpha_dir: float = 0.1
    val_fraction: float = 0.1
    # Stage-I warm-up: the field estimator is fitted self-supervised before
    # the reconstruction phase and frozen afterwards (joint training provably
    # collapses the field to its ceiling; see decisions log).
    photo_warmup_epochs: int = 40
    photo_lr: float = 3e-3

    def validate(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_end > self.lr_start:
            raise ParameterError(f"lr_end {self.lr_end} exceeds lr_start {self.lr_start}")
        if not any(math.isclose(self.alpha_dir, a) for a in (0.0, 0.1, 0.2)):
            raise ParameterError(f"alpha_dir must be one of 0, 0.1, 0.2; got {self.alpha_dir}")


VARIANTS = {
    "a": {"alpha_dir": 0.0, "use_la3": False},
    "b": {"alpha_dir": 0.1, "use_la3": False},
    "c": {"alpha_dir": 0.2, "use_la3": False},
    "d": {"alpha_dir": 0.1, "use_la3": True},
}


def apply_variant(model_cfg: ModelConfig, train_cfg: TrainConfig, variant: str) -> tuple[ModelConfig, TrainConfig]:
    """Wire one of the studied configurations (a..d) onto the configs."""
    if variant not in VARIANTS:
        raise ParameterError(f"unknown variant {variant!r}, expected one of {sorted(VARIANTS)}")
    spec = VARIANTS[variant]
    return (
        replace(model_cfg, use_la3=spec["use_la3"]),
        replace(train_cfg, alpha_dir=spec["alpha_dir"]),
    )


@dataclass
class LossBreakdown:
    recon: float
    dir: float
    alpha_dir: float

    @property
    def total(self) -> float:
        return self.recon + self.alpha_dir * self.dir


class PatchEncoder:
    """Row-major patchify, one linear projection, learned positional offsets."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        P, C, N = cfg.patch, cfg.channels, cfg.tokens
        self.cfg = cfg
        self.w = Tensor(glorot_uniform(rng, (P * P, C), P * P, C, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)
        self.pos = Tensor(np.zeros((N, C), dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"enc.proj.weight": self.w, "enc.proj.bias": self.b, "enc.pos": self.pos}

    def patch_tokens(self, x: Tensor) -> Tensor:
        """[B, H, W] -> [B, N, P*P] without projection (row-major patches)."""
        B, H, W = x.shape
        P = self.cfg.patch
        if H % P != 0 or W % P != 0:
            raise ShapeError(f"image {H}x{W} not divisible by patch size {P}")
        hp, wp = H // P, W // P
        t = x.reshape(B, hp, P, wp, P).transpose(0, 1, 3, 2, 4)
        return t.reshape(B, hp * wp, P * P)

    def forward(self, x: Tensor) -> Tensor:
        tokens = self.patch_tokens(x) @ self.w
        N, C = self.pos.shape
        return tokens + self.b.reshape(1, 1, C) + self.pos.reshape(1, N, C)


class PipelineModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.photometric = PhotometricStage(rng, l_min=cfg.l_min, eps=cfg.eps_photo, dtype=dtype) if cfg.use_photometric else None
        self.encoder = PatchEncoder(cfg, rng, dtype)
        bcfg = BottleneckConfig(
            channels=cfg.channels,
            expansion_factor=cfg.expansion_factor,
            compression_factor=cfg.compression_factor,
            gate_kernel=cfg.gate_kernel,
            droppath_rate=cfg.droppath_rate,
        )
        if cfg.use_bottleneck_dualpath:
            self.bottleneck = SpectralBottleneck(bcfg, rng, dtype)
        else:
            self.bottleneck = PlainBottleneck(bcfg, rng, dtype)
        dcfg = DecoderConfig(
            channels=cfg.channels,
            tokens=cfg.tokens,
            depth=cfg.depth,
            heads=cfg.heads,
            clamp_bound=cfg.clamp_bound,
            eps_attn=cfg.eps_attn,
            mlp_ratio=cfg.mlp_ratio,
        )
        self.decoder = AttentionDecoder(dcfg, rng, patch=cfg.patch, use_la3=cfg.use_la3, dtype=dtype)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "PipelineModel":
        return cls(cfg, substream(seed, "init"), dtype)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.photometric is not None:
            out.update(self.photometric.params())
        out.update(self.encoder.params())
        out.update(self.bottleneck.params())
        out.update(self.decoder.params())
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    # -- forward ---------------------------------------------------------------

    def _as_batch(self, image) -> tuple[Tensor, bool]:
        if isinstance(image, np.ndarray):
            image = Tensor(image.astype(self.dtype, copy=False))
        if image.ndim == 2:
            return image.reshape((1,) + image.shape), True
        if image.ndim == 3:
            return image, False
        raise ShapeError(f"expected [H, W] or [B, H, W] image, got {image.shape}")

    def forward(self, image, training: bool = False, droppath_rng=None):
        """Full cascade. Returns (x_norm, x_hat, z_in, z_out) as Tensors."""
        x, squeeze = self._as_batch(image)
        H, W = x.shape[1], x.shape[2]
        if self.photometric is not None:
            x_norm, _ = self.photometric.forward_batched(x)
        else:
            x_norm = x
        z_in = self.encoder.forward(x_norm)
        z_out = self.bottleneck.forward(z_in, training=training, droppath_rng=droppath_rng)
        x_hat = self.decoder.forward(z_out, H, W)
        if squeeze:
            return (
                x_norm.reshape(H, W),
                x_hat.reshape(H, W),
                z_in.reshape(z_in.shape[1:]),
                z_out.reshape(z_out.shape[1:]),
            )
        return x_norm, x_hat, z_in, z_out

    def encode_to_latent(self, image, training: bool = False, droppath_rng=None) -> Tensor:
        """Photometric + encoder + bottleneck only (no reconstruction)."""
        return self.forward_to_latent(image, training=training, droppath_rng=droppath_rng)[2]

    def forward_to_latent(self, image, training: bool = False, droppath_rng=None) -> tuple[Tensor, Tensor, Tensor]:
        """Run the cascade up to the bottleneck: (x_norm, z_in, z_out)."""
        x, _ = self._as_batch(image)
        if self.photometric is not None:
            x_norm, _ = self.photometric.forward_batched(x)
        else:
            x_norm = x
        z_in = self.encoder.forward(x_norm)
        z_out = self.bottleneck.forward(z_in, training=training, droppath_rng=droppath_rng)
        return x_norm, z_in, z_out

    # -- persistence ---------------------------------------------------------------

    def config_trailer(self) -> dict[str, object]:
        c = self.cfg
        return {
            "image_size": c.image_size,
            "patch": c.patch,
            "channels": c.channels,
            "depth": c.depth,
            "heads": c.heads,
            "mlp_ratio": c.mlp_ratio,
            "expansion_factor": c.expansion_factor,
            "compression_factor": c.compression_factor,
            "gate_kernel": c.gate_kernel,
            "droppath_rate": c.droppath_rate,
            "l_min": c.l_min,
            "eps_photo": c.eps_photo,
            "clamp_bound": c.clamp_bound,
            "eps_attn": c.eps_attn,
            "use_photometric": int(c.use_photometric),
            "use_bottleneck_dualpath": int(c.use_bottleneck_dualpath),
            "use_la3": int(c.use_la3),
        }

    def save(self, path, extra_trailer: dict | None = None) -> None:
        trailer = self.config_trailer()
        if extra_trailer:
            trailer.update(extra_trailer)
        write_tensors(path, {k: v.data for k, v in self.params().items()}, trailer)

    @classmethod
    def load(cls, path) -> tuple["PipelineModel", dict[str, str]]:
        tensors, trailer = read_tensors(path)
        cfg = ModelConfig(
            image_size=int(trailer["image_size"]),
            patch=int(trailer["patch"]),
            channels=int(trailer["channels"]),
            depth=int(trailer["depth"]),
            heads=int(trailer["heads"]),
            mlp_ratio=int(trailer["mlp_ratio"]),
            expansion_factor=int(trailer["expansion_factor"]),
            compression_factor=int(trailer["compression_factor"]),
            gate_kernel=int(trailer["gate_kernel"]),
            droppath_rate=float(trailer["droppath_rate"]),
            l_min=float(trailer["l_min"]),
            eps_photo=float(trailer["eps_photo"]),
            clamp_bound=float(trailer["clamp_bound"]),
            eps_attn=float(trailer["eps_attn"]),
            use_photometric=bool(int(trailer["use_photometric"])),
            use_bottleneck_dualpath=bool(int(trailer["use_bottleneck_dualpath"])),
            use_la3=bool(int(trailer["use_la3"])),
        )
        model = cls(cfg, np.random.default_rng(0))
        own = model.params()
        missing = set(own) - set(tensors)
        surplus = set(tensors) - set(own)
        if missing or surplus:
            raise ParameterError(f"checkpoint mismatch: missing {sorted(missing)}, surplus {sorted(surplus)}")
        for name, param in own.items():
            if tensors[name].shape != param.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {tensors[name].shape} vs model {param.data.shape}")
            param.data[...] = tensors[name]
        return model, trailer


def dir_loss(z_a: Tensor, z_b: Tensor) -> Tensor:
    """Mean squared latent distance between two views of the same scene."""
    if z_a.shape != z_b.shape:
        raise ShapeError(f"latent shapes differ: {z_a.shape} vs {z_b.shape}")
    return (z_a - z_b).square().mean()


def reconstruction_loss(x_norm: Tensor, x_hat: Tensor) -> Tensor:
    return (x_hat - x_norm).square().mean()
