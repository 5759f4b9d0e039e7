"""Minimal trainable CNN in NumPy: im2col convolutions, ReLU, 2x2 max
pooling and dense layers, trained with plain minibatch SGD on softmax
cross-entropy.

Everything is float64 and bit-deterministic given (init seed, data seed,
training seed): initialization draws from one seeded generator in layer
order, batch order comes from the training seed, and no threading touches
the update order. Sparsity masks are re-applied after every update so
pruned weights stay exactly zero, and weight-constrained training projects
weights into [-w_cut, w_cut] after every step.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# ---------------------------------------------------------------- specs


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = -1          # -1 means "same-ish": kernel // 2

    def pad(self) -> int:
        return self.kernel // 2 if self.padding < 0 else self.padding


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class PoolSpec:
    """2x2 max pooling, stride 2."""


@dataclass(frozen=True)
class UnrolledLayerInfo:
    """Shape facts about one trainable layer's unrolled weight matrix."""

    name: str
    kind: str                  # "conv" | "dense"
    rows: int                  # unrolled fan-in
    cols: int                  # output units
    rows_per_channel: int      # rows per input channel group
    in_channels: int


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple[int, int, int] = (1, 8, 8)
    init_seed: int = 0

    def __post_init__(self):
        infos = self.unrolled_layers()
        if not infos:
            raise ValueError("model needs at least one trainable layer")

    def shape_walk(self):
        """Yield (layer_spec, incoming (C, H, W) or flat size) checking that
        consecutive shapes compose."""
        shape = self.input_shape
        out = []
        for spec in self.layers:
            out.append((spec, shape))
            if isinstance(spec, ConvSpec):
                if len(shape) != 3 or shape[0] != spec.in_ch:
                    raise ValueError(f"conv expects {spec.in_ch} channels, "
                                     f"incoming shape is {shape}")
                c, h, w = shape
                p, k, s = spec.pad(), spec.kernel, spec.stride
                shape = (spec.out_ch, (h + 2 * p - k) // s + 1,
                         (w + 2 * p - k) // s + 1)
            elif isinstance(spec, PoolSpec):
                c, h, w = shape
                shape = (c, h // 2, w // 2)
            elif isinstance(spec, DenseSpec):
                flat = int(np.prod(shape)) if isinstance(shape, tuple) else shape
                if flat != spec.in_features:
                    raise ValueError(f"dense expects {spec.in_features} inputs, "
                                     f"incoming size is {flat}")
                shape = spec.out_features
            elif isinstance(spec, ReluSpec):
                pass
            else:
                raise ValueError(f"unknown layer spec {spec!r}")
        return out

    def unrolled_layers(self) -> list[UnrolledLayerInfo]:
        infos = []
        counts = {"conv": 0, "dense": 0}
        for spec, incoming in self.shape_walk():
            if isinstance(spec, ConvSpec):
                counts["conv"] += 1
                infos.append(UnrolledLayerInfo(
                    name=f"conv{counts['conv']}", kind="conv",
                    rows=spec.in_ch * spec.kernel ** 2, cols=spec.out_ch,
                    rows_per_channel=spec.kernel ** 2, in_channels=spec.in_ch))
            elif isinstance(spec, DenseSpec):
                counts["dense"] += 1
                if isinstance(incoming, tuple):
                    c, h, w = incoming
                    rpc, in_ch = h * w, c
                else:
                    rpc, in_ch = 1, spec.in_features
                infos.append(UnrolledLayerInfo(
                    name=f"dense{counts['dense']}", kind="dense",
                    rows=spec.in_features, cols=spec.out_features,
                    rows_per_channel=rpc, in_channels=in_ch))
        return infos

    def to_dict(self) -> dict:
        out = []
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                out.append({"kind": "conv", "in_ch": spec.in_ch, "out_ch": spec.out_ch,
                            "kernel": spec.kernel, "stride": spec.stride,
                            "padding": spec.padding})
            elif isinstance(spec, DenseSpec):
                out.append({"kind": "dense", "in_features": spec.in_features,
                            "out_features": spec.out_features})
            elif isinstance(spec, ReluSpec):
                out.append({"kind": "relu"})
            else:
                out.append({"kind": "pool"})
        return {"layers": out, "input_shape": list(self.input_shape),
                "init_seed": self.init_seed}

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        layers = []
        for item in d["layers"]:
            kind = item["kind"]
            if kind == "conv":
                layers.append(ConvSpec(item["in_ch"], item["out_ch"], item["kernel"],
                                       item.get("stride", 1), item.get("padding", -1)))
            elif kind == "dense":
                layers.append(DenseSpec(item["in_features"], item["out_features"]))
            elif kind == "relu":
                layers.append(ReluSpec())
            elif kind == "pool":
                layers.append(PoolSpec())
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return ModelSpec(tuple(layers), tuple(d.get("input_shape", (1, 8, 8))),
                         d.get("init_seed", 0))


def reference_model_spec(init_seed: int = 0) -> ModelSpec:
    """Default desk-scale CNN for 8x8 single-channel inputs, 4 classes.

    Channel widths are chosen so the middle layers unroll to matrices much
    larger than a 32x32 crossbar in both dimensions (576x128, 1152x128);
    narrower nets make tile-count ratios degenerate.
    """
    return ModelSpec(
        layers=(
            ConvSpec(1, 64, 3), ReluSpec(), PoolSpec(),
            ConvSpec(64, 128, 3), ReluSpec(), PoolSpec(),
            ConvSpec(128, 128, 3), ReluSpec(),
            DenseSpec(512, 4),
        ),
        input_shape=(1, 8, 8),
        init_seed=init_seed,
    )


def tiny_model_spec(init_seed: int = 0) -> ModelSpec:
    """Two trainable layers; handy for fast tests."""
    return ModelSpec(
        layers=(ConvSpec(1, 8, 3), ReluSpec(), PoolSpec(), DenseSpec(128, 4)),
        input_shape=(1, 8, 8),
        init_seed=init_seed,
    )


# ------------------------------------------------------------ unrolling


@dataclass(frozen=True)
class UnrollInfo:
    conv_shape: tuple[int, int, int, int]   # (out_ch, in_ch, k, k)


def unroll_conv(w: np.ndarray):
    """(out_ch, in_ch, k, k) -> (in_ch*k*k, out_ch) matrix, rows ordered
    in_channel-major then kernel row then kernel column."""
    out_ch, in_ch, k, k2 = w.shape
    if k != k2:
        raise ValueError(f"kernels must be square, got {w.shape}")
    mat = w.transpose(1, 2, 3, 0).reshape(in_ch * k * k, out_ch)
    return mat, UnrollInfo(w.shape)


def reroll_conv(mat: np.ndarray, info: UnrollInfo) -> np.ndarray:
    out_ch, in_ch, k, _ = info.conv_shape
    if mat.shape != (in_ch * k * k, out_ch):
        raise ValueError(f"matrix shape {mat.shape} does not re-roll to "
                         f"{info.conv_shape}")
    return mat.reshape(in_ch, k, k, out_ch).transpose(3, 0, 1, 2).copy()


def im2col(x: np.ndarray, k: int, stride: int, padding: int):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def col2im(dcols: np.ndarray, x_shape, k: int, stride: int, padding: int,
           ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    d6 = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for kr in range(k):
        for kc in range(k):
            dxp[:, :, kr:kr + stride * ho:stride,
                kc:kc + stride * wo:stride] += d6[:, :, kr, kc]
    if padding == 0:
        return dxp
    return dxp[:, :, padding:padding + h, padding:padding + w]


# --------------------------------------------------------------- layers


class Conv2d:
    kind = "conv"

    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        fan_in = spec.in_ch * spec.kernel ** 2
        self.spec = spec
        self.w = rng.standard_normal((spec.out_ch, spec.in_ch, spec.kernel,
                                      spec.kernel)) * math.sqrt(2.0 / fan_in)
        self.grad_w = None
        self._cache = None

    def forward(self, x):
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.pad()
        cols, ho, wo = im2col(x, k, s, p)
        wmat, _ = unroll_conv(self.w)
        out = cols @ wmat
        self._cache = (cols, x.shape, ho, wo)
        n = x.shape[0]
        return out.reshape(n, ho, wo, self.spec.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dout):
        cols, x_shape, ho, wo = self._cache
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.pad()
        dmat = dout.transpose(0, 2, 3, 1).reshape(-1, self.spec.out_ch)
        grad_mat = cols.T @ dmat
        self.grad_w = reroll_conv(grad_mat, UnrollInfo(self.w.shape))
        dcols = dmat @ unroll_conv(self.w)[0].T
        return col2im(dcols, x_shape, k, s, p, ho, wo)


class Dense:
    kind = "dense"

    def __init__(self, spec: DenseSpec, rng: np.random.Generator):
        self.spec = spec
        self.w = rng.standard_normal((spec.in_features, spec.out_features)) \
            * math.sqrt(2.0 / spec.in_features)
        self.grad_w = None
        self._cache = None

    def forward(self, x):
        self._cache = x
        return x @ self.w

    def backward(self, dout):
        self.grad_w = self._cache.T @ dout
        return dout @ self.w.T


class ReLU:
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class MaxPool2:
    kind = "pool"

    def forward(self, x):
        n, c, h, w = x.shape
        hh, ww = h // 2, w // 2
        blocks = x[:, :, :2 * hh, :2 * ww].reshape(n, c, hh, 2, ww, 2)
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww, 4)
        self._idx = flat.argmax(axis=-1)          # ties go to the first entry
        self._x_shape = x.shape
        return np.take_along_axis(flat, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        n, c, h, w = self._x_shape
        hh, ww = h // 2, w // 2
        dflat = np.zeros((n, c, hh, ww, 4))
        np.put_along_axis(dflat, self._idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros((n, c, h, w))
        dx[:, :, :2 * hh, :2 * ww] = dflat.reshape(n, c, hh, ww, 2, 2) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * ww)
        return dx


class Flatten:
    kind = "flatten"

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Network:
    """Layer stack built from a ModelSpec; trainable layers are named
    conv1.., dense1.. in order."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.init_seed)
        self.layers = []
        self.trainable: list[tuple[str, object]] = []
        counts = {"conv": 0, "dense": 0}
        flat = False
        for layer_spec, incoming in spec.shape_walk():
            if isinstance(layer_spec, ConvSpec):
                counts["conv"] += 1
                layer = Conv2d(layer_spec, rng)
                self.layers.append(layer)
                self.trainable.append((f"conv{counts['conv']}", layer))
            elif isinstance(layer_spec, DenseSpec):
                if not flat and isinstance(incoming, tuple):
                    self.layers.append(Flatten())
                    flat = True
                counts["dense"] += 1
                layer = Dense(layer_spec, rng)
                self.layers.append(layer)
                self.trainable.append((f"dense{counts['dense']}", layer))
            elif isinstance(layer_spec, ReluSpec):
                self.layers.append(ReLU())
            elif isinstance(layer_spec, PoolSpec):
                self.layers.append(MaxPool2())
        self._unroll_infos = {name: UnrollInfo(layer.w.shape)
                              for name, layer in self.trainable
                              if layer.kind == "conv"}

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def weights(self) -> dict[str, np.ndarray]:
        return {name: layer.w for name, layer in self.trainable}

    def unrolled_weights(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.trainable:
            out[name] = unroll_conv(layer.w)[0] if layer.kind == "conv" else layer.w.copy()
        return out

    def set_unrolled_weights(self, matrices: dict[str, np.ndarray]):
        for name, layer in self.trainable:
            if name not in matrices:
                raise ValueError(f"missing weights for layer {name}")
            mat = np.asarray(matrices[name], dtype=float)
            if layer.kind == "conv":
                layer.w = reroll_conv(mat, self._unroll_infos[name])
            else:
                if mat.shape != layer.w.shape:
                    raise ValueError(f"{name}: shape {mat.shape} != {layer.w.shape}")
                layer.w = mat.copy()

    def copy(self) -> "Network":
        return copy.deepcopy(self)


# ------------------------------------------------------------- training


@dataclass
class WctConfig:
    percentile: float = 90.0
    epochs: int = 2

    def __post_init__(self):
        if not 0 < self.percentile <= 100:
            raise ValueError(f"percentile must be in (0, 100], got {self.percentile}")
        if self.epochs < 1:
            raise ValueError("wct epochs must be >= 1")


@dataclass
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 32
    epochs: int = 15
    seed: int = 0
    pattern: object | None = None          # SparsityPattern (needs .masks)
    wct: WctConfig | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("hyperparameters must be positive")


@dataclass
class Dataset:
    images: np.ndarray         # (n, 1, 8, 8) in [0, 1]
    labels: np.ndarray         # (n,) ints
    split: str = "train"

    def __len__(self):
        return self.images.shape[0]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def _masks_4d(model: Network, pattern) -> dict[str, np.ndarray]:
    """Unrolled masks converted to each layer's native weight shape."""
    out = {}
    for name, layer in model.trainable:
        if name not in pattern.masks:
            continue
        mask = np.asarray(pattern.masks[name], dtype=float)
        if layer.kind == "conv":
            out[name] = reroll_conv(mask, UnrollInfo(layer.w.shape))
        else:
            if mask.shape != layer.w.shape:
                raise ValueError(f"mask for {name} has shape {mask.shape}, "
                                 f"weights are {layer.w.shape}")
            out[name] = mask
    return out


def _sgd_epochs(model, dataset, config, epochs, masks, w_cut, rng):
    losses = []
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits = model.forward(dataset.images[idx])
            loss, dlogits = softmax_cross_entropy(logits, dataset.labels[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"training diverged: loss = {loss}")
            model.backward(dlogits)
            for name, layer in model.trainable:
                layer.w -= config.lr * layer.grad_w
                if w_cut is not None:
                    layer.w = wct_clamp(layer.w, w_cut)
                if name in masks:
                    layer.w = layer.w * masks[name]
            total += loss * idx.size
            seen += idx.size
        losses.append(total / seen)
    return losses


def train(model: Network, dataset: Dataset, config: TrainConfig):
    """Minibatch SGD with cross-entropy; pruned weights stay exactly zero.
    Returns (model, per-epoch mean loss)."""
    masks = _masks_4d(model, config.pattern) if config.pattern is not None else {}
    for name, layer in model.trainable:
        if name in masks:
            layer.w = layer.w * masks[name]
    rng = np.random.default_rng(config.seed)
    losses = _sgd_epochs(model, dataset, config, config.epochs, masks, None, rng)
    return model, losses


def wct_cutoff(model: Network, percentile: float, per_layer: bool = False):
    """Nearest-rank percentile of |w| pooled over all trainable weights
    (or per layer with per_layer=True)."""
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    if not model.trainable:
        raise ValueError("model has no trainable layers")

    def nearest_rank(values):
        v = np.sort(np.abs(values.ravel()))
        rank = math.ceil(percentile / 100.0 * v.size)
        return float(v[rank - 1])

    if per_layer:
        return {name: nearest_rank(layer.w) for name, layer in model.trainable}
    pooled = np.concatenate([layer.w.ravel() for _, layer in model.trainable])
    return nearest_rank(pooled)


def wct_clamp(w: np.ndarray, w_cut: float) -> np.ndarray:
    """min(|W|, w_cut) * sign(W); the result lies in [-w_cut, w_cut]."""
    if w_cut <= 0:
        raise ValueError(f"w_cut must be positive, got {w_cut}")
    return np.minimum(np.abs(w), w_cut) * np.sign(w)


def wct_train(model: Network, dataset: Dataset, config: TrainConfig,
              w_cut: float | None = None):
    """Short retraining with weights projected into [-w_cut, w_cut] after
    every step (and masks re-applied); returns (model, w_cut)."""
    wct = config.wct if config.wct is not None else WctConfig()
    if w_cut is None:
        w_cut = wct_cutoff(model, wct.percentile)
    masks = _masks_4d(model, config.pattern) if config.pattern is not None else {}
    for name, layer in model.trainable:
        layer.w = wct_clamp(layer.w, w_cut)
        if name in masks:
            layer.w = layer.w * masks[name]
    rng = np.random.default_rng([config.seed, 1])
    _sgd_epochs(model, dataset, config, wct.epochs, masks, w_cut, rng)
    return model, w_cut


def evaluate(model: Network, dataset: Dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, n, batch_size):
        logits = model.forward(dataset.images[start:start + batch_size])
        correct += int((logits.argmax(axis=1)
                        == dataset.labels[start:start + batch_size]).sum())
    return correct / n


def inject_nonideal_weights(model: Network, matrices: dict[str, np.ndarray]) -> Network:
    """New model whose forward pass uses the given unrolled weight matrices;
    the original model is untouched."""
    out = model.copy()
    out.set_unrolled_weights(matrices)
    return out


# -------------------------------------------------------------- dataset


PATTERN_VALUE = 0.9
BACKGROUND_VALUE = 0.1
NOISE_SIGMA = 0.15


def _draw_image(rng: np.random.Generator, label: int) -> np.ndarray:
    img = np.full((8, 8), BACKGROUND_VALUE)
    if label == 0:                            # horizontal bar
        img[int(rng.integers(1, 7)), :] = PATTERN_VALUE
    elif label == 1:                          # vertical bar
        img[:, int(rng.integers(1, 7))] = PATTERN_VALUE
    elif label == 2:                          # diagonal
        idx = np.arange(8)
        if rng.integers(2):
            img[idx, idx] = PATTERN_VALUE
        else:
            img[idx, 7 - idx] = PATTERN_VALUE
    else:                                     # blob
        cy, cx = rng.integers(2, 6, size=2)
        img[cy - 1:cy + 2, cx - 1:cx + 2] = PATTERN_VALUE
    img = img + rng.normal(0.0, NOISE_SIGMA, size=(8, 8))
    return np.clip(img, 0.0, 1.0)


def _gen_split(seed_list, n: int, split: str) -> Dataset:
    rng = np.random.default_rng(seed_list)
    labels = np.arange(n) % 4                 # balanced to within one image
    labels = rng.permutation(labels)
    images = np.stack([_draw_image(rng, int(lab)) for lab in labels])
    return Dataset(images[:, None, :, :], labels.astype(np.int64), split)


def gen_synthetic_dataset(seed: int, n_train: int, n_test: int):
    """Four-class 8x8 shape dataset (horizontal bar, vertical bar, diagonal,
    blob) with Gaussian pixel noise; deterministic given the seed."""
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one sample per split")
    return (_gen_split([seed, 0], n_train, "train"),
            _gen_split([seed, 1], n_test, "test"))
