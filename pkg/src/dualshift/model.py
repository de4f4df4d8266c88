"""Small convolutional encoder-decoder for the toy benchmark.

Stands in for a large pretrained segmentation backbone: a frozen-able
encoder, a trainable decoder head producing per-pixel features, and a
bias-free 1x1 classifier whose weight matrix doubles as the initialization
of the learnable uncertainty projection.  With no classifier bias, the
energy score of the logits is exactly the uncertainty head's output at
initialization.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .heads import logsumexp, softmax
from .nn import Adam, Conv2d, Param, ReLU, Sequential, Upsample2x


class ToySegModel:
    """Encoder (stride 2) -> decoder (upsampled back) -> 1x1 classifier.

    Inputs are standardized per image and channel before the first
    convolution; global photometric restylings are close to per-channel
    affine maps, so this keeps the frozen encoder informative under
    covariate shift (the usual normalization trick of domain-robust
    segmenters).  The standardization has no parameters and is the input
    boundary, so nothing backpropagates through it.
    """

    stride = 2

    def __init__(self, num_classes: int, width: int = 16, feature_dim: int = 16,
                 seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x30DE1, seed)))
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.encoder = Sequential([
            Conv2d(3, width, rng=rng, name="enc0"), ReLU(),
            Conv2d(width, width, stride=2, rng=rng, name="enc1"), ReLU(),
            Conv2d(width, width, rng=rng, name="enc2"), ReLU(),
        ])
        self.decoder = Sequential([
            Conv2d(width, width, rng=rng, name="dec0"), ReLU(),
            Upsample2x(),
            Conv2d(width, feature_dim, rng=rng, name="dec1"), ReLU(),
        ])
        self.classifier = Conv2d(feature_dim, num_classes, ksize=1, bias=False,
                                 rng=rng, name="classifier")

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(B, 3, H, W) -> per-pixel features (B, F, H, W) and logits (B, C, H, W)."""
        if x.ndim != 4:
            raise ValueError("expected a batched NCHW tensor")
        if x.shape[2] % self.stride or x.shape[3] % self.stride:
            raise ValueError(f"H and W must be divisible by the model stride {self.stride}")
        mu = x.mean(axis=(2, 3), keepdims=True)
        sd = x.std(axis=(2, 3), keepdims=True) + 1e-5
        feats = self.decoder.forward(self.encoder.forward((x - mu) / sd))
        logits = self.classifier.forward(feats)
        return feats, logits

    def backward(self, d_features: np.ndarray, d_logits: np.ndarray,
                 through_encoder: bool = False) -> None:
        """Accumulate parameter gradients from feature and logit cotangents."""
        d_feats = d_features + self.classifier.backward(d_logits)
        d_mid = self.decoder.backward(d_feats)
        if through_encoder:
            self.encoder.backward(d_mid)

    @property
    def class_weights(self) -> np.ndarray:
        """Classifier weights as an (F, C) matrix."""
        return self.classifier.weight.value.reshape(self.num_classes, self.feature_dim).T

    def parameters(self, parts: tuple[str, ...] = ("encoder", "decoder", "classifier")) -> list[Param]:
        out = []
        if "encoder" in parts:
            out += self.encoder.params()
        if "decoder" in parts:
            out += self.decoder.params()
        if "classifier" in parts:
            out += self.classifier.params()
        return out

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((p.name, p.value.copy()) for p in self.parameters())

    def load_state(self, state: dict) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"checkpoint is missing parameter {p.name}")
            value = np.asarray(state[p.name], dtype=p.value.dtype)
            if value.shape != p.value.shape:
                raise ValueError(f"parameter {p.name} has shape {value.shape}, "
                                 f"expected {p.value.shape}")
            p.value[...] = value

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Argmax class map (B, H, W) over the known classes."""
        _, logits = self.forward(x)
        return logits.argmax(axis=1)


def batch_images(samples) -> np.ndarray:
    from .nn import DTYPE

    return np.stack([s.image for s in samples]).astype(DTYPE)


def pixel_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                        eligible: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel CE map over eligible pixels and the softmax probabilities.

    Returns (ce_map, probs); the map is zero at ineligible pixels.
    """
    probs = softmax(logits, axis=1)
    B, C, H, W = logits.shape
    safe = np.where(eligible, labels, 0)
    picked = np.take_along_axis(probs, safe[:, None], axis=1)[:, 0]
    tiny = np.finfo(probs.dtype).tiny
    ce = np.where(eligible, -np.log(np.maximum(picked, tiny)), 0.0)
    return ce, probs


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray, weight_map: np.ndarray) -> np.ndarray:
    """d(sum weight * ce)/d logits for softmax CE: weight * (p - onehot)."""
    weight_map = np.asarray(weight_map, dtype=probs.dtype)
    grad = probs * weight_map[:, None]
    safe = np.where(weight_map > 0, labels, 0)
    np.put_along_axis(
        grad, safe[:, None],
        np.take_along_axis(grad, safe[:, None], axis=1) - weight_map[:, None], axis=1)
    return grad


def energy_map(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-pixel logsumexp of features projected by an (F, C) matrix."""
    z = np.einsum("bfhw,fc->bchw", features, weights)
    return logsumexp(z, axis=1)
