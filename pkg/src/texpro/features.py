"""Fixed convolutional feature pyramid used for material matching and Gram losses."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from texpro import tensor as T
from texpro.tensor import Tensor

# luminance plus two colour-opponent axes
_COLOR = np.array([
    [0.2126, 0.7152, 0.0722],
    [0.5, -0.5, 0.0],
    [0.25, 0.25, -0.5],
])


def _edge_bank() -> np.ndarray:
    """Oriented first-derivative filters (0, 45, 90, 135 deg) and a Laplacian, 3x3."""
    sobel = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], float) / 8.0
    diag = np.array([[-2, -1, 0], [-1, 0, 1], [0, 1, 2]], float) / 8.0
    lap = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], float) / 4.0
    return np.stack([sobel, diag, sobel.T, np.fliplr(diag), lap])


class FeatureExtractor:
    """Four conv layers over three scales, normalized per channel.

    Layer 0 is a 1x1 colour transform (receptive field of one pixel). Layers
    1..3 are rectified 3x3 banks followed by a ``blur`` x ``blur`` box filter,
    which turns edge responses into local energy so two crops of the same
    texture at different offsets give similar maps. Layers 2 and 3 run after
    2x average pooling. Layer 1 holds signed oriented edge and Laplacian
    filters on luminance plus seeded random filters; deeper banks are seeded
    random. Each layer's output is normalized to zero mean / unit variance per
    channel over a calibration set and the normalized maps feed the next layer.

    ``features`` runs on the autodiff tape; ``features_fast`` is a numpy pass
    (float32 by default) for the matching loop.
    """

    min_size = 8
    n_layers = 4

    def __init__(self, seed: int = 0, width: int = 12, blur: int = 13):
        if blur < 1 or blur % 2 == 0:
            raise ValueError("blur must be a positive odd window")
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.blur = int(blur)
        c0 = len(_COLOR)
        edges = _edge_bank()
        # +/- of each edge filter so the rectifier keeps both polarities
        fixed = np.zeros((2 * len(edges), c0, 3, 3))
        for i, e in enumerate(edges):
            fixed[2 * i, 0], fixed[2 * i + 1, 0] = e, -e
        rand1 = rng.normal(0, 1, (max(width - len(fixed), 2), c0, 3, 3))
        rand1 -= rand1.mean(axis=(2, 3), keepdims=True)
        w1 = np.concatenate([fixed, rand1 / np.sqrt(9 * c0)])
        n1 = len(w1)
        w2 = rng.normal(0, 1, (8, n1, 3, 3)) / np.sqrt(9 * n1)
        w3 = rng.normal(0, 1, (8, 8, 3, 3)) / np.sqrt(9 * 8)
        self.weights = [_COLOR[:, :, None, None], w1, w2, w3]
        self.shift = [np.zeros(w.shape[0]) for w in self.weights]
        self.scale = [np.ones(w.shape[0]) for w in self.weights]
        self.calibrated = False

    @property
    def channels(self) -> list[int]:
        return [w.shape[0] for w in self.weights]

    # -- tape path ---------------------------------------------------------

    def _box(self, y: Tensor) -> Tensor:
        N, C, H, W = y.shape
        k = np.full((1, 1, 1, self.blur), 1.0 / self.blur)
        z = T.reshape(y, (N * C, 1, H, W))
        z = T.conv2d(z, Tensor(k, _check=False), "replicate")
        z = T.conv2d(z, Tensor(k.transpose(0, 1, 3, 2), _check=False), "replicate")
        return T.reshape(z, (N, C, H, W))

    def _layer(self, l: int, x: Tensor) -> Tensor:
        if l >= 2:
            x = _avg_pool2(x)
        y = T.conv2d(x, Tensor(self.weights[l], _check=False), "replicate")
        if l >= 1:
            y = T.relu(y)
            if self.blur > 1:
                y = self._box(y)
        shape = (-1, 1, 1)
        return (y - self.shift[l].reshape(shape)) * self.scale[l].reshape(shape)

    def features(self, x) -> list[Tensor]:
        """Normalized maps for a (C, H, W) or (N, C, H, W) image in [0, 1]."""
        x = T.as_tensor(x)
        self._check(x.shape)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1, *x.shape))
        out = []
        for l in range(self.n_layers):
            x = self._layer(l, x)
            out.append(T.reshape(x, x.shape[1:]) if single else x)
        return out

    # -- numpy path --------------------------------------------------------

    def _layer_np(self, l: int, x: np.ndarray) -> np.ndarray:
        dt = x.dtype
        if l >= 2:
            N, C, H, W = x.shape
            h2, w2 = H // 2, W // 2
            x = x[:, :, :2 * h2, :2 * w2].reshape(N, C, h2, 2, w2, 2).mean(axis=(3, 5))
        w = self.weights[l].astype(dt)
        if l == 0:
            y = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x)
        else:
            xp = np.pad(x, [(0, 0), (0, 0), (1, 1), (1, 1)], mode="edge")
            win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
            y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            y = np.maximum(y, 0)
            if self.blur > 1:
                y = ndimage.uniform_filter(y, size=(1, 1, self.blur, self.blur), mode="nearest")
        shape = (-1, 1, 1)
        return (y - self.shift[l].astype(dt).reshape(shape)) * self.scale[l].astype(dt).reshape(shape)

    def features_fast(self, x, dtype=np.float32) -> list[np.ndarray]:
        x = np.asarray(x, dtype=dtype)
        self._check(x.shape)
        single = x.ndim == 3
        if single:
            x = x[None]
        out = []
        for l in range(self.n_layers):
            x = self._layer_np(l, x)
            out.append(x[0] if single else x)
        return out

    def _check(self, shape):
        if len(shape) not in (3, 4) or shape[-3] != 3:
            raise ValueError(f"feature extractor expects (N,) 3, H, W input, got {shape}")
        if min(shape[-2:]) < self.min_size:
            raise ValueError(f"input {shape[-2:]} smaller than extractor minimum {self.min_size}")

    def calibrate(self, images) -> FeatureExtractor:
        """Fit per-channel normalization on a list of (3, H, W) arrays."""
        acts = [np.asarray(im, dtype=np.float64)[None] for im in images]
        if not acts:
            raise ValueError("calibration needs at least one image")
        for l in range(self.n_layers):
            self.shift[l] = np.zeros(self.weights[l].shape[0])
            self.scale[l] = np.ones(self.weights[l].shape[0])
            raw = [self._layer_np(l, a) for a in acts]
            flat = np.concatenate([r.transpose(1, 0, 2, 3).reshape(r.shape[1], -1)
                                   for r in raw], axis=1)
            self.shift[l] = flat.mean(axis=1)
            self.scale[l] = 1.0 / np.maximum(flat.std(axis=1), 1e-6)
            acts = [(r - self.shift[l].reshape(-1, 1, 1)) * self.scale[l].reshape(-1, 1, 1)
                    for r in raw]
        self.calibrated = True
        return self


def _avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling of (N, C, H, W); odd trailing rows/cols are dropped."""
    N, C, H, W = x.shape
    h2, w2 = H // 2, W // 2
    x = x[:, :, : 2 * h2, : 2 * w2]
    y = T.reshape(x, (N * C, 2 * h2, 2 * w2))
    y = T.box_downsample(y, 2)
    return T.reshape(y, (N, C, h2, w2))
