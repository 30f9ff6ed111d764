"""Small U-Net for per-pixel target segmentation, written directly in numpy.

Layout is NHWC. Convolutions use same padding so every skip connection
concatenates without cropping. The decoder upsamples by nearest neighbour
and follows with a 3x3 convolution. Training runs in float32; the layer
functions accept float64 as well, which the gradient checks rely on.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .detect import PredictionImage
from .hypercube import ClassMask, Hypercube, Label

MAGIC = b"HSIUNET\x00"
FORMAT_VERSION = 1


class UNetError(ValueError):
    pass


# ------------------------------------------------------------------- specs

@dataclass(frozen=True)
class UNetSpec:
    in_channels: int
    base_filters: int = 64
    depth: int = 3
    n_classes: int = 2

    def __post_init__(self):
        for name in ("in_channels", "base_filters", "depth", "n_classes"):
            if int(getattr(self, name)) < 1:
                raise UNetError(f"{name} must be >= 1")
        if self.n_classes != 2:
            raise UNetError("only two-class heads are supported")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    def check_input(self, h: int, w: int) -> None:
        m = self.multiple
        if h % m or w % m or h < m or w < m:
            raise UNetError(f"input {h}x{w} not divisible by 2**depth = {m}")

    def layers(self) -> list[tuple[str, int, int, int]]:
        """``(name, kernel, in_channels, out_channels)`` in storage order."""
        f, d = self.base_filters, self.depth
        out = []
        cin = self.in_channels
        for lvl in range(d):
            c = f * 2 ** lvl
            out += [(f"enc{lvl}_a", 3, cin, c), (f"enc{lvl}_b", 3, c, c)]
            cin = c
        c = f * 2 ** d
        out += [("bott_a", 3, cin, c), ("bott_b", 3, c, c)]
        for lvl in reversed(range(d)):
            c = f * 2 ** lvl
            out += [(f"dec{lvl}_up", 3, 2 * c, c), (f"dec{lvl}_a", 3, 2 * c, c),
                    (f"dec{lvl}_b", 3, c, c)]
        out.append(("head", 1, f, self.n_classes))
        return out

    def receptive_margin(self) -> int:
        """Pixels of context on each side that can influence an output pixel."""
        # per level: two encoder convs, the pooling window, the upsampling
        # step and three decoder convs; then the two bottleneck convs
        d = self.depth
        return sum(7 * 2 ** lvl for lvl in range(d)) + 2 * 2 ** d


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    class_weights: tuple | None = None      # (w_bg, w_fg); None -> from masks
    clip_norm: float | None = 5.0           # global gradient-norm cap; None disables

    def __post_init__(self):
        if not self.lr > 0:
            raise UNetError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise UNetError("momentum must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise UNetError("epochs must be >= 0 and batch_size >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise UNetError("clip_norm must be positive or None")
        if self.class_weights is not None:
            if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
                raise UNetError("class weights must be two positive numbers")


@dataclass(frozen=True, eq=False)
class UNetModel:
    spec: UNetSpec
    params: dict                      # name -> array; "<layer>.W" and "<layer>.b"
    seed: int = 0
    epoch: int = 0
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    history: tuple = ()               # (epoch, loss, pixel accuracy)
    bands: tuple | None = None        # input band indices when trained on a subset

    def __post_init__(self):
        for name, k, cin, cout in self.spec.layers():
            W, b = self.params.get(f"{name}.W"), self.params.get(f"{name}.b")
            if W is None or b is None:
                raise UNetError(f"missing tensors for layer {name}")
            if W.shape != (k, k, cin, cout) or b.shape != (cout,):
                raise UNetError(f"layer {name}: shapes {W.shape}, {b.shape} do not match spec")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise UNetError(f"layer {name} has non-finite weights")
        if (self.norm_mean is None) != (self.norm_std is None):
            raise UNetError("normalisation needs both mean and std")
        if self.bands is not None and len(self.bands) != self.spec.in_channels:
            raise UNetError(f"{len(self.bands)} band indices for {self.spec.in_channels} channels")

    def first_layer_weight_count(self) -> int:
        return int(self.params["enc0_a.W"].size)


def build_unet(spec: UNetSpec, seed: int = 0) -> UNetModel:
    """He-uniform weights, zero biases, drawn in layer order from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, k, cin, cout in spec.layers():
        lim = math.sqrt(6.0 / (k * k * cin))
        params[f"{name}.W"] = rng.uniform(-lim, lim, size=(k, k, cin, cout)).astype(np.float32)
        params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)
    return UNetModel(spec, params, seed)


# ------------------------------------------------------------------ layers

def conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Same-padded cross-correlation. x: (N, H, W, C), W: (k, k, C, F).

    Each pixel is projected onto all k*k kernel taps at once and the taps
    are then summed with spatial shifts, which avoids an im2col copy.
    """
    n, h, w, c = x.shape
    k, _, _, f = W.shape
    p = k // 2
    xf = x.reshape(-1, c)
    if k == 1:
        return (xf @ W[0, 0] + b).reshape(n, h, w, f), (x, W)
    Wm = W.transpose(2, 0, 1, 3).reshape(c, k * k * f)
    Z = (xf @ Wm).reshape(n, h, w, k * k, f)
    Zp = np.zeros((n, h + 2 * p, w + 2 * p, k * k, f), dtype=Z.dtype)
    Zp[:, p:p + h, p:p + w] = Z
    y = np.zeros((n, h, w, f), dtype=Z.dtype)
    for i in range(k):
        for j in range(k):
            y += Zp[:, i:i + h, j:j + w, i * k + j]
    y += b
    return y, (x, W)


def conv_backward(dy: np.ndarray, cache, need_dx: bool = True):
    x, W = cache
    n, h, w, c = x.shape
    k, _, _, f = W.shape
    p = k // 2
    xf = x.reshape(-1, c)
    db = dy.sum(axis=(0, 1, 2))
    if k == 1:
        dyf = dy.reshape(-1, f)
        dW = (xf.T @ dyf)[None, None]
        dx = (dyf @ W[0, 0].T).reshape(x.shape) if need_dx else None
        return dx, dW, db
    dZp = np.zeros((n, h + 2 * p, w + 2 * p, k * k, f), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dZp[:, i:i + h, j:j + w, i * k + j] = dy
    dZ = dZp[:, p:p + h, p:p + w].reshape(-1, k * k * f)
    dW = (xf.T @ dZ).reshape(c, k, k, f).transpose(1, 2, 0, 3)
    dx = None
    if need_dx:
        Wm = W.transpose(2, 0, 1, 3).reshape(c, k * k * f)
        dx = (dZ @ Wm.T).reshape(x.shape)
    return dx, dW, db


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def maxpool_forward(x: np.ndarray):
    """2x2 max pooling; ties go to the first element in row-major order."""
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    idx = np.argmax(blocks, axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool_backward(dy, cache):
    idx, shape = cache
    n, h, w, c = shape
    onehot = idx[..., None] == np.arange(4)
    d = (onehot * dy[..., None]).reshape(n, h // 2, w // 2, c, 2, 2)
    return d.transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def upsample_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dy):
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ----------------------------------------------------------------- network

def _forward(params: dict, spec: UNetSpec, x: np.ndarray, keep: bool = True):
    """Logits (N, H, W, 2) and the tape needed by ``_backward``."""
    tape = []

    def conv(name, h, relu=True):
        y, cc = conv_forward(h, params[f"{name}.W"], params[f"{name}.b"])
        rc = None
        if relu:
            y, rc = relu_forward(y)
        if keep:
            tape.append(("conv", name, cc, rc))
        return y

    h = x
    skips = []
    for lvl in range(spec.depth):
        h = conv(f"enc{lvl}_b", conv(f"enc{lvl}_a", h))
        skips.append(h)
        h, pc = maxpool_forward(h)
        if keep:
            tape.append(("pool", lvl, pc, None))
    h = conv("bott_b", conv("bott_a", h))
    for lvl in reversed(range(spec.depth)):
        if keep:
            tape.append(("up", lvl, None, None))
        h = conv(f"dec{lvl}_up", upsample_forward(h))
        c_skip = skips[lvl].shape[-1]
        h = np.concatenate([skips[lvl], h], axis=-1)
        if keep:
            tape.append(("cat", lvl, c_skip, None))
        h = conv(f"dec{lvl}_b", conv(f"dec{lvl}_a", h))
    logits = conv("head", h, relu=False)
    return logits, tape


def _backward(tape, dlogits: np.ndarray) -> dict:
    grads = {}
    skip_grads = {}
    g = dlogits
    for kind, key, c1, c2 in reversed(tape):
        if kind == "conv":
            if c2 is not None:
                g = relu_backward(g, c2)
            first = key == "enc0_a"
            g, dW, db = conv_backward(g, c1, need_dx=not first)
            grads[f"{key}.W"], grads[f"{key}.b"] = dW, db
        elif kind == "cat":
            skip_grads[key] = g[..., :c1]
            g = g[..., c1:]
        elif kind == "up":
            g = upsample_backward(g)
        elif kind == "pool":
            g = maxpool_backward(g, c1) + skip_grads.pop(key)
    return grads


def _network_grads(params, spec, x, labels, weights):
    logits, tape = _forward(params, spec, x)
    loss, dl = weighted_ce_loss(logits, labels, weights)
    return loss, _backward(tape, dl), logits


def _normalise(model: UNetModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if model.norm_mean is None:
        return x
    return (x - model.norm_mean) / model.norm_std


def forward(model: UNetModel, cube_patch) -> np.ndarray:
    """Logits for one (H, W, C) patch or a (N, H, W, C) batch."""
    x = cube_patch.data if isinstance(cube_patch, Hypercube) else np.asarray(cube_patch)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != model.spec.in_channels:
        raise UNetError(f"expected (..., H, W, {model.spec.in_channels}) input, got {x.shape}")
    model.spec.check_input(x.shape[1], x.shape[2])
    logits, _ = _forward(model.params, model.spec, _normalise(model, x), keep=False)
    return logits[0] if single else logits


# -------------------------------------------------------------------- loss

def class_weights_from_masks(masks) -> tuple[float, float]:
    """``(1, (N_bg / N_fg) / 4)`` from the annotated pixels of ``masks``."""
    n_bg = n_fg = 0
    for m in masks:
        lab = m.labels if hasattr(m, "labels") else np.asarray(m)
        n_bg += int(np.sum(lab == Label.BACKGROUND))
        n_fg += int(np.sum(lab == Label.TARGET))
    if n_fg == 0:
        raise UNetError("no target pixels: foreground weight is undefined")
    return 1.0, (n_bg / n_fg) / 4.0


def weighted_ce_loss(logits: np.ndarray, labels: np.ndarray, weights=(1.0, 1.0)):
    """Softmax cross-entropy weighted by the true class, averaged over
    annotated pixels. Returns ``(loss, dloss/dlogits)``.

    ``labels`` holds mask codes; only BACKGROUND and TARGET pixels count.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape or logits.shape[-1] != 2:
        raise UNetError(f"logits {logits.shape} do not match labels {labels.shape}")
    valid = (labels == Label.BACKGROUND) | (labels == Label.TARGET)
    n_valid = int(valid.sum())
    grad = np.zeros_like(logits)
    if n_valid == 0:
        return 0.0, grad
    cls = (labels == Label.TARGET).astype(np.intp)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    w = np.where(cls == 1, weights[1], weights[0]).astype(logits.dtype) * valid
    picked = np.take_along_axis(logp, cls[..., None], axis=-1)[..., 0]
    loss = float(-(w * picked).sum() / n_valid)
    prob = np.exp(logp)
    onehot = np.stack([cls == 0, cls == 1], axis=-1)
    grad = (prob - onehot) * (w / n_valid)[..., None]
    return loss, grad.astype(logits.dtype)


# ------------------------------------------------------------ augmentation

def rot90(img: np.ndarray, k: int = 1) -> np.ndarray:
    return np.rot90(img, k, axes=(0, 1)).copy()


def flip_h(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def flip_v(img: np.ndarray) -> np.ndarray:
    return img[::-1].copy()


def _resample_index(shape, angle_deg: float, scale: float):
    """Nearest source pixel for every output pixel of a rotation+scaling
    about the image centre, clamped to the border (edge replication)."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    a = math.radians(angle_deg)
    ca, sa = math.cos(a), math.sin(a)
    dy, dx = yy - cy, xx - cx
    sy = (ca * dy - sa * dx) / scale + cy
    sx = (sa * dy + ca * dx) / scale + cx
    iy = np.floor(sy + 0.5).astype(int)
    ix = np.floor(sx + 0.5).astype(int)
    return np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)


def transform_pair(data: np.ndarray, labels: np.ndarray, k90: int = 0, hflip: bool = False,
                   vflip: bool = False, angle: float = 0.0, scale: float = 1.0):
    """Apply one geometric transform to an image and its mask.

    Pixels mapped from outside the frame replicate the nearest border
    pixel, so the mask never gains a label the source lacks.
    """
    if k90 % 2 and data.shape[0] != data.shape[1]:
        raise UNetError("odd quarter turns need a square image")
    d, m = rot90(data, k90), rot90(labels, k90)
    if hflip:
        d, m = flip_h(d), flip_h(m)
    if vflip:
        d, m = flip_v(d), flip_v(m)
    if angle != 0.0 or scale != 1.0:
        iy, ix = _resample_index(m.shape, angle, scale)
        d, m = d[iy, ix], m[iy, ix]
    return d, m


def augment(hc: Hypercube, mask: ClassMask, n: int = 10, seed=0,
            max_angle: float = 15.0, scale_range=(0.8, 1.2)) -> list:
    """The original pair followed by ``n`` randomly transformed copies.

    Each copy gets a random quarter turn, horizontal and vertical flips, a
    small rotation in [-max_angle, max_angle] degrees and a scaling in
    ``scale_range``. Image size is kept, so divisibility is preserved.
    Cubes are returned in float32.
    """
    rng = np.random.default_rng(seed)
    square = hc.height == hc.width
    base = np.asarray(hc.data, dtype=np.float32)
    out = [(hc.with_data(base), mask)]
    for _ in range(n):
        k90 = int(rng.integers(4)) if square else 2 * int(rng.integers(2))
        hf, vf = bool(rng.integers(2)), bool(rng.integers(2))
        angle = float(rng.uniform(-max_angle, max_angle))
        scale = float(rng.uniform(*scale_range))
        d, m = transform_pair(base, mask.labels, k90, hf, vf, angle, scale)
        out.append((hc.with_data(d), ClassMask(m)))
    return out


def augment_dataset(pairs, n: int = 10, seed=0, **kw) -> list:
    """Augment every pair with its own child seed; size becomes (n + 1) * len(pairs)."""
    pairs = list(pairs)
    children = np.random.SeedSequence(seed).spawn(len(pairs))
    out = []
    for (hc, mask), ch in zip(pairs, children):
        out += augment(hc, mask, n, ch, **kw)
    return out


# ---------------------------------------------------------------- training

def fit_normalisation(dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over the annotated pixels of ``dataset``."""
    s = s2 = None
    count = 0
    for hc, mask in dataset:
        valid = (mask.labels == Label.BACKGROUND) | (mask.labels == Label.TARGET)
        x = np.asarray(hc.data, dtype=np.float64)[valid]
        s = x.sum(axis=0) if s is None else s + x.sum(axis=0)
        s2 = (x ** 2).sum(axis=0) if s2 is None else s2 + (x ** 2).sum(axis=0)
        count += len(x)
    if count == 0:
        raise UNetError("no annotated pixels to normalise with")
    mean = s / count
    std = np.sqrt(np.maximum(s2 / count - mean ** 2, 0.0))
    std[std < 1e-8] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def train(model: UNetModel, dataset, config: TrainConfig = TrainConfig(),
          progress=None) -> UNetModel:
    """SGD with momentum over ``dataset`` (a sequence of (Hypercube, ClassMask)).

    Gradients whose global norm exceeds ``config.clip_norm`` are rescaled
    to that norm before the update.

    Deterministic for a given (seed, dataset order). Normalisation
    statistics are fitted on the first call and kept afterwards. Raises
    UNetError if the loss becomes non-finite.
    """
    dataset = list(dataset)
    if not dataset:
        raise UNetError("empty training set")
    spec = model.spec
    for hc, mask in dataset:
        if hc.n_bands != spec.in_channels:
            raise UNetError(f"cube {hc.image_id!r} has {hc.n_bands} bands, "
                            f"model expects {spec.in_channels}")
        spec.check_input(hc.height, hc.width)
        if mask.labels.shape != (hc.height, hc.width):
            raise UNetError(f"mask and cube shapes differ for {hc.image_id!r}")
    if model.norm_mean is None:
        mean, std = fit_normalisation(dataset)
        model = replace(model, norm_mean=mean, norm_std=std)
    weights = config.class_weights or class_weights_from_masks(m for _, m in dataset)
    params = {k: v.astype(np.float32).copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(config.seed)
    history = list(model.history)
    epoch = model.epoch
    lr, mom = np.float32(config.lr), np.float32(config.momentum)
    for _ in range(config.epochs):
        epoch += 1
        order = rng.permutation(len(dataset))
        tot_loss = 0.0
        n_pix = n_correct = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = _normalise(model, np.stack([dataset[i][0].data for i in idx]))
            lab = np.stack([dataset[i][1].labels for i in idx])
            loss, grads, logits = _network_grads(params, spec, x, lab, weights)
            if not math.isfinite(loss):
                raise UNetError(f"training diverged at epoch {epoch}: loss is {loss}")
            valid = (lab == Label.BACKGROUND) | (lab == Label.TARGET)
            nv = int(valid.sum())
            tot_loss += loss * nv
            n_pix += nv
            pred = np.argmax(logits, axis=-1)
            n_correct += int(np.sum((pred == (lab == Label.TARGET)) & valid))
            scale = np.float32(1.0)
            if config.clip_norm is not None:
                gnorm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
                if gnorm > config.clip_norm:
                    scale = np.float32(config.clip_norm / gnorm)
            for k in params:
                velocity[k] = mom * velocity[k] - lr * scale * grads[k].astype(np.float32)
                params[k] += velocity[k]
        mean_loss = tot_loss / max(n_pix, 1)
        if not math.isfinite(mean_loss):
            raise UNetError(f"training diverged at epoch {epoch}")
        acc = n_correct / max(n_pix, 1)
        history.append((epoch, mean_loss, acc))
        if progress is not None:
            progress(epoch, mean_loss, acc)
    return replace(model, params=params, epoch=epoch, history=tuple(history))


def pixel_accuracy(model: UNetModel, dataset) -> float:
    correct = total = 0
    for hc, mask in dataset:
        pred = np.argmax(forward(model, hc.data), axis=-1)
        valid = (mask.labels == Label.BACKGROUND) | (mask.labels == Label.TARGET)
        correct += int(np.sum((pred == (mask.labels == Label.TARGET)) & valid))
        total += int(valid.sum())
    return correct / total if total else float("nan")


def write_training_log(model: UNetModel, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "pixel_accuracy"])
        for e, loss, acc in model.history:
            w.writerow([e, f"{loss:.8g}", f"{acc:.6f}"])
    return p


# -------------------------------------------------------------- prediction

def _tiles(n: int, tile: int, margin: int, align: int):
    """Core intervals of aligned length covering [0, n)."""
    core = tile - 2 * margin
    core -= core % align
    if core < align:
        raise UNetError(f"tile {tile} leaves no room inside a {margin}-pixel margin")
    return [(s, min(n, s + core)) for s in range(0, n, core)]


def predict_image(model: UNetModel, hc: Hypercube, exclusion: ClassMask | None = None,
                  tile: int | None = None, model_id: str = "unet") -> PredictionImage:
    """Argmax class per pixel; EXCLUDED pixels of ``exclusion`` are preserved.

    The cube is zero-padded at the bottom and right to a multiple of
    2**depth. With ``tile`` set, windows of at most ``tile`` pixels are
    evaluated separately; each window extends its core by the receptive
    margin and starts on the pooling grid, so the labels equal those of a
    single pass over the whole image.
    """
    spec = model.spec
    if hc.n_bands != spec.in_channels:
        raise UNetError(f"cube has {hc.n_bands} bands, model expects {spec.in_channels}")
    h, w = hc.height, hc.width
    mult = spec.multiple
    margin = spec.receptive_margin()
    margin += (-margin) % mult
    x = np.pad(np.asarray(hc.data, dtype=np.float32),
               ((0, (-h) % mult), (0, (-w) % mult), (0, 0)))
    H, W = x.shape[:2]
    if tile is None or (H <= tile and W <= tile):
        cls = np.argmax(forward(model, x), axis=-1)
    else:
        if tile % mult:
            raise UNetError(f"tile size must be a multiple of {mult}")
        cls = np.zeros((H, W), dtype=np.intp)
        for y0, y1 in _tiles(H, tile, margin, mult):
            for x0, x1 in _tiles(W, tile, margin, mult):
                a0, b0 = max(0, y0 - margin), max(0, x0 - margin)
                a1, b1 = min(H, y1 + margin), min(W, x1 + margin)
                out = np.argmax(forward(model, x[a0:a1, b0:b1]), axis=-1)
                cls[y0:y1, x0:x1] = out[y0 - a0:y1 - a0, x0 - b0:x1 - b0]
    labels = np.where(cls[:h, :w] == 1, Label.TARGET, Label.BACKGROUND).astype(np.uint8)
    if exclusion is not None:
        labels[exclusion.labels == Label.EXCLUDED] = Label.EXCLUDED
    return PredictionImage(labels, hc.image_id, model_id)


# -------------------------------------------------------------- model file

def save_model(model: UNetModel, path) -> Path:
    """Binary file: magic, uint32 header length, JSON header, float32 tensors.

    Tensors follow ``UNetSpec.layers()`` order, weight then bias per layer,
    then the normalisation mean and std when present. All little-endian.
    """
    layers = model.spec.layers()
    tensors = []
    for name, *_ in layers:
        tensors += [(f"{name}.W", model.params[f"{name}.W"]), (f"{name}.b", model.params[f"{name}.b"])]
    if model.norm_mean is not None:
        tensors += [("norm.mean", model.norm_mean), ("norm.std", model.norm_std)]
    header = {
        "format": "hsipest.unet", "version": FORMAT_VERSION,
        "spec": {"in_channels": model.spec.in_channels, "base_filters": model.spec.base_filters,
                 "depth": model.spec.depth, "n_classes": model.spec.n_classes},
        "seed": int(model.seed), "epoch": int(model.epoch),
        "history": [[int(e), float(l), float(a)] for e, l, a in model.history],
        "bands": None if model.bands is None else [int(b) for b in model.bands],
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return p


def load_model(path) -> UNetModel:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise UNetError(f"{path}: not a U-Net model file")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    off = len(MAGIC) + 4
    try:
        header = json.loads(raw[off:off + hlen])
    except ValueError as e:
        raise UNetError(f"{path}: corrupt header ({e})") from None
    if header.get("version") != FORMAT_VERSION:
        raise UNetError(f"{path}: unsupported version {header.get('version')}")
    off += hlen
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        end = off + 4 * n
        if end > len(raw):
            raise UNetError(f"{path}: truncated at tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(raw[off:end], dtype="<f4").reshape(t["shape"]).astype(np.float32)
        off = end
    if off != len(raw):
        raise UNetError(f"{path}: {len(raw) - off} trailing bytes")
    spec = UNetSpec(**header["spec"])
    mean, std = arrays.pop("norm.mean", None), arrays.pop("norm.std", None)
    bands = header.get("bands")
    return UNetModel(spec, arrays, header["seed"], header["epoch"], mean, std,
                     tuple(tuple(h) for h in header["history"]),
                     None if bands is None else tuple(bands))
