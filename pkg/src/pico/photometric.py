"""Stage I: illumination estimation and reflectance normalization.

A small convolutional net predicts the spatial illumination field of an input
image; dividing the image by the field (with a numerical-stability epsilon)
yields an illumination-normalized reflectance map. The field is squashed to
[l_min, 1] so early-training estimates can never blow the division up.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError
from .layers import conv2d_tokens, glorot_uniform
from .tensor import Tensor


class IlluminationEstimator:
    """Three stacked 3x3 convolutions (1->8->8->1), elu between, sigmoid out.

    The raw sigmoid output is rescaled to [l_min, 1]. Mirror padding keeps a
    constant input constant through every layer. The stack is dilated
    (1, 2, 4), widening the context to 15x15 px: with the undilated 7x7
    window the surface texture cannot be averaged out and field recovery
    plateaus well short of useful accuracy, even trained supervised.
    """

    DILATIONS = (1, 2, 4)

    def __init__(self, rng: np.random.Generator, l_min: float = 0.05, hidden: int = 8, dtype=np.float32):
        if not 0.0 < l_min < 1.0:
            raise ParameterError(f"l_min must lie in (0, 1), got {l_min}")
        self.l_min = float(l_min)
        k = 3

        def conv_init(c_in, c_out):
            w = glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k, dtype)
            return Tensor(w, requires_grad=True), Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

        self.w1, self.b1 = conv_init(1, hidden)
        self.w2, self.b2 = conv_init(hidden, hidden)
        self.w3, self.b3 = conv_init(hidden, 1)

    def params(self) -> dict[str, Tensor]:
        return {
            "photo.conv1.weight": self.w1,
            "photo.conv1.bias": self.b1,
            "photo.conv2.weight": self.w2,
            "photo.conv2.bias": self.b2,
            "photo.conv3.weight": self.w3,
            "photo.conv3.bias": self.b3,
        }

    def field_batched(self, x: Tensor) -> Tensor:
        """x: [B, H, W] -> field in [l_min, 1] of the same shape."""
        B, H, W = x.shape
        d1, d2, d3 = self.DILATIONS
        h = x.reshape(B, H * W, 1)
        h = conv2d_tokens(h, self.w1, self.b1, H, W, dilation=d1).elu()
        h = conv2d_tokens(h, self.w2, self.b2, H, W, dilation=d2).elu()
        pre = conv2d_tokens(h, self.w3, self.b3, H, W, dilation=d3)
        field = pre.sigmoid() * (1.0 - self.l_min) + self.l_min
        return field.reshape(B, H, W)


def estimate_illumination(estimator: IlluminationEstimator, image: Tensor) -> Tensor:
    """Predict the illumination field of a single [H, W] image."""
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {image.shape}")
    H, W = image.shape
    return estimator.field_batched(image.reshape(1, H, W)).reshape(H, W)


def normalize(image: Tensor, field: Tensor, eps: float) -> Tensor:
    """Reflectance = image / (field + eps), elementwise."""
    if eps <= 0:
        raise ParameterError(f"normalize eps must be > 0, got {eps}")
    if image.shape != field.shape:
        raise ShapeError(f"image {image.shape} and field {field.shape} differ")
    return image.div(field, eps)


class PhotometricStage:
    def __init__(self, rng, l_min: float = 0.05, eps: float = 1e-6, dtype=np.float32):
        self.estimator = IlluminationEstimator(rng, l_min=l_min, dtype=dtype)
        self.eps = float(eps)

    def params(self) -> dict[str, Tensor]:
        return self.estimator.params()

    def forward_batched(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """[B, H, W] -> (reflectance, field)."""
        field = self.estimator.field_batched(images)
        return images.div(field, self.eps), field

    def forward(self, image: Tensor) -> Tensor:
        """Single [H, W] image -> reflectance map."""
        field = estimate_illumination(self.estimator, image)
        return normalize(image, field, self.eps)
