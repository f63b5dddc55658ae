"""A small dense 3D convolution engine: valid-mode convolutions, ReLU, MSE,
He initialisation and Adam, plus the fully convolutional heatmap network.

Public functions take channels-first tensors ``(c, x, y, z)``, or
``(batch, c, x, y, z)`` for batches.

Convolutions are lowered to matrix products over im2col columns. For
inference the product is evaluated in fixed-size column blocks (zero padded at the tail)
so every output voxel is computed by exactly the same BLAS call shape and
summation order, no matter how large the region being evaluated is. That is
what makes tiled and whole-volume inference agree bit for bit.
"""
from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

GEMM_ROWS = 2048
SLAB_BYTES = 64 << 20
MAGIC = b"FCNW1"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class ConvLayer:
    weights: np.ndarray  # (out, in, kx, ky, kz)
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.weights.ndim != 5 or len(set(self.weights.shape[2:])) != 1:
            raise ValueError(f"weights must be (out, in, k, k, k), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal the number of output channels")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    def weight_matrix(self) -> np.ndarray:
        # rows: output channel; columns: (dz, dy, dx, in channel)
        return self.weights.transpose(0, 4, 3, 2, 1).reshape(self.out_channels, -1)


def he_init(fan_in: int, shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Gaussian He initialisation, variance ``2 / fan_in``."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def filter_counts(base_filters: int, depth: int = 6) -> list:
    return [base_filters * 2**level for level in range(depth)]


@dataclass
class FcnModel:
    """Stack of valid 3x3x3 ReLU convolutions followed by a linear 1x1x1
    regression layer with one output channel per landmark."""

    layers: list
    in_channels: int
    n_landmarks: int
    base_filters: int = 12

    def __post_init__(self):
        channels = self.in_channels
        for i, layer in enumerate(self.layers):
            if layer.in_channels != channels:
                raise ValueError(f"layer {i} expects {layer.in_channels} inputs, previous layer gives {channels}")
            channels = layer.out_channels
        if channels != self.n_landmarks:
            raise ValueError("final layer must have one output channel per landmark")

    @classmethod
    def build(
        cls,
        in_channels: int,
        n_landmarks: int,
        base_filters: int = 12,
        depth: int = 6,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> "FcnModel":
        rng = np.random.default_rng() if rng is None else rng
        layers = []
        prev = in_channels
        for out in filter_counts(base_filters, depth):
            w = he_init(prev * 27, (out, prev, 3, 3, 3), rng, dtype)
            layers.append(ConvLayer(w, np.zeros(out, dtype), "relu"))
            prev = out
        w = he_init(prev, (n_landmarks, prev, 1, 1, 1), rng, dtype)
        layers.append(ConvLayer(w, np.zeros(n_landmarks, dtype), "linear"))
        return cls(layers, in_channels, n_landmarks, base_filters)

    @property
    def margin(self) -> int:
        """Voxels consumed per side by the valid convolutions."""
        return sum((layer.kernel - 1) // 2 for layer in self.layers)

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            layer.weights = params[2 * i]
            layer.bias = params[2 * i + 1]

    def astype(self, dtype) -> "FcnModel":
        layers = [ConvLayer(l.weights.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers]
        return FcnModel(layers, self.in_channels, self.n_landmarks, self.base_filters)

    def copy(self) -> "FcnModel":
        return copy.deepcopy(self)

    def output_shape(self, spatial) -> tuple:
        return tuple(int(s) - 2 * self.margin for s in spatial)


# ---------------------------------------------------------------------------
# Convolution kernels. Internal layout is (channel, batch, x, y, z) so that
# im2col rows are long contiguous runs and the GEMM output lands directly in
# the next layer's layout.


def _offsets(k: int):
    return [(kx, ky, kz) for kz in range(k) for ky in range(k) for kx in range(k)]


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Columns are output voxels; rows run over (kernel offset, channel)."""
    c, b, nx, ny, nz = x.shape
    if k == 1:
        return x.reshape(c, -1)
    ox, oy, oz = nx - k + 1, ny - k + 1, nz - k + 1
    cols = np.empty((k**3, c, b, ox, oy, oz), dtype=x.dtype)
    for j, (kx, ky, kz) in enumerate(_offsets(k)):
        cols[j] = x[:, :, kx : kx + ox, ky : ky + oy, kz : kz + oz]
    return cols.reshape(k**3 * c, -1)


def _gemm(wm: np.ndarray, cols: np.ndarray, block: int | None) -> np.ndarray:
    if block is None:
        return wm @ cols
    n = cols.shape[1]
    out = np.empty((wm.shape[0], n), dtype=np.result_type(wm, cols))
    for start in range(0, n, block):
        stop = min(start + block, n)
        if stop - start == block:
            out[:, start:stop] = wm @ cols[:, start:stop]
        else:
            tail = np.zeros((cols.shape[0], block), dtype=cols.dtype)
            tail[:, : stop - start] = cols[:, start:stop]
            out[:, start:stop] = (wm @ tail)[:, : stop - start]
    return out


def _conv_forward(x: np.ndarray, layer: ConvLayer, block: int | None, keep: bool):
    k = layer.kernel
    c, b, nx, ny, nz = x.shape
    if c != layer.in_channels:
        raise ValueError(f"input has {c} channels, layer expects {layer.in_channels}")
    if min(nx, ny, nz) < k:
        raise ValueError(f"input spatial dims {(nx, ny, nz)} smaller than kernel {k}")
    if not keep and block is not None:
        return _conv_forward_slabs(x, layer, block), None
    cols = _im2col(x, k)
    z = _gemm(layer.weight_matrix(), cols, block)
    z += layer.bias[:, None]
    z = z.reshape(layer.out_channels, b, nx - k + 1, ny - k + 1, nz - k + 1)
    a = np.maximum(z, 0) if layer.activation == "relu" else z
    cache = (x.shape, cols, z) if keep else None
    return a, cache


def _conv_forward_slabs(x: np.ndarray, layer: ConvLayer, block: int) -> np.ndarray:
    # inference only: bounded im2col buffer, one x slab at a time
    k = layer.kernel
    c, b, nx, ny, nz = x.shape
    ox, oy, oz = nx - k + 1, ny - k + 1, nz - k + 1
    wm = layer.weight_matrix()
    per_plane = k**3 * c * b * oy * oz * x.itemsize
    step = int(max(1, min(ox, SLAB_BYTES // max(per_plane, 1))))
    out = np.empty((layer.out_channels, b, ox, oy, oz), dtype=np.result_type(wm, x))
    for x0 in range(0, ox, step):
        x1 = min(x0 + step, ox)
        cols = _im2col(x[:, :, x0 : x1 + k - 1], k)
        zs = _gemm(wm, cols, block)
        zs += layer.bias[:, None]
        if layer.activation == "relu":
            np.maximum(zs, 0, out=zs)
        out[:, :, x0:x1] = zs.reshape(layer.out_channels, b, x1 - x0, oy, oz)
    return out


def _conv_backward(layer: ConvLayer, cache, grad_out: np.ndarray):
    in_shape, cols, z = cache
    k = layer.kernel
    if layer.activation == "relu":
        grad_out = grad_out * (z > 0)
    g = grad_out.reshape(layer.out_channels, -1)
    wm = layer.weight_matrix()
    dw = (g @ cols.T).reshape(layer.out_channels, k, k, k, layer.in_channels).transpose(0, 4, 3, 2, 1)
    db = g.sum(axis=1)
    dcols = wm.T @ g
    c, b, nx, ny, nz = in_shape
    if k == 1:
        dx = dcols.reshape(in_shape)
    else:
        ox, oy, oz = nx - k + 1, ny - k + 1, nz - k + 1
        dcols = dcols.reshape(k**3, c, b, ox, oy, oz)
        dx = np.zeros(in_shape, dtype=dcols.dtype)
        for j, (kx, ky, kz) in enumerate(_offsets(k)):
            dx[:, :, kx : kx + ox, ky : ky + oy, kz : kz + oz] += dcols[j]
    return np.ascontiguousarray(dw), db, dx


def _to_internal(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.swapaxes(0, 1))


_to_external = _to_internal


# ---------------------------------------------------------------------------
# Public API


def conv3d_valid_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Valid convolution of a ``(c, x, y, z)`` tensor."""
    if x.ndim != 4:
        raise ValueError("expected a (channels, x, y, z) tensor")
    out, _ = _conv_forward(x[:, None], layer, GEMM_ROWS, keep=False)
    return out[:, 0]


def forward_batch(model: FcnModel, x: np.ndarray, block: int | None = GEMM_ROWS, keep: bool = False):
    """Forward a ``(b, c, x, y, z)`` batch. Returns the channels-first output
    and, with ``keep``, the per-layer caches needed by :func:`backward_batch`."""
    if x.ndim != 5 or x.shape[1] != model.in_channels:
        raise ValueError(f"expected (batch, {model.in_channels}, x, y, z), got {x.shape}")
    if min(x.shape[2:]) < 2 * model.margin + 1:
        raise ValueError(f"patch {x.shape[2:]} smaller than the network footprint {2 * model.margin + 1}")
    a = _to_internal(x.astype(model.dtype, copy=False))
    caches = []
    for layer in model.layers:
        a, cache = _conv_forward(a, layer, block, keep)
        caches.append(cache)
    return _to_external(a), (caches if keep else None)


def backward_batch(model: FcnModel, caches, loss_grad: np.ndarray):
    """Back-propagate a channels-first output gradient; returns parameter
    gradients in :meth:`FcnModel.parameters` order and the input gradient."""
    g = _to_internal(loss_grad)
    grads = [None] * (2 * len(model.layers))
    for i in range(len(model.layers) - 1, -1, -1):
        dw, db, g = _conv_backward(model.layers[i], caches[i], g)
        grads[2 * i] = dw
        grads[2 * i + 1] = db
    return grads, _to_external(g)


def model_forward(model: FcnModel, patch: np.ndarray) -> np.ndarray:
    """Forward a single ``(c, x, y, z)`` patch; output shrinks by ``2 * margin``."""
    out, _ = forward_batch(model, patch[None])
    return out[0]


def model_backward(model: FcnModel, patch: np.ndarray, loss_grad: np.ndarray):
    """Exact gradients for one patch (forward recomputed)."""
    out, caches = forward_batch(model, patch[None], keep=True)
    if loss_grad.shape != out.shape[1:]:
        raise ValueError(f"loss gradient shape {loss_grad.shape} != output shape {out.shape[1:]}")
    grads, dx = backward_batch(model, caches, loss_grad[None].astype(out.dtype, copy=False))
    return grads, dx[0]


def mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Mean squared error and its gradient.

    ``mask`` (broadcastable, e.g. ``(b, channels, 1, 1, 1)``) zeroes the
    contribution of excluded channels; the mean still runs over every element.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    if mask is not None:
        diff = diff * mask
    n = diff.size
    loss = float(np.sum(np.square(diff, dtype=np.float64)) / n)
    return loss, (2.0 / n) * diff


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list, grads: list, state: AdamState):
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainSchedule:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class BestSnapshot:
    """Keeps the parameters from the epoch with the lowest validation error.
    Ties keep the earlier epoch."""

    def __init__(self):
        self.epoch = None
        self.loss = np.inf
        self.model = None

    def offer(self, epoch: int, loss: float, model: FcnModel) -> bool:
        if loss < self.loss:
            self.epoch, self.loss, self.model = epoch, loss, model.copy()
            return True
        return False


PatchSet = tuple  # (inputs (b, c, x, y, z), targets (b, n, x', y', z'), channel mask (b, n) or None)


def _mask5(mask, dtype):
    if mask is None:
        return None
    return mask.astype(dtype)[:, :, None, None, None]


def evaluate_loss(model: FcnModel, patches: PatchSet, batch_size: int = 64) -> float:
    x, y, mask = patches
    total = 0.0
    for s in range(0, len(x), batch_size):
        pred, _ = forward_batch(model, x[s : s + batch_size], block=None)
        m = None if mask is None else _mask5(mask[s : s + batch_size], pred.dtype)
        loss, _ = mse_loss(pred, y[s : s + batch_size].astype(pred.dtype, copy=False), m)
        total += loss * len(pred)
    return total / len(x)


def train_step(model: FcnModel, x, y, mask, state: AdamState) -> float:
    pred, caches = forward_batch(model, x, block=None, keep=True)
    loss, grad = mse_loss(pred, y.astype(pred.dtype, copy=False), _mask5(mask, pred.dtype))
    grads, _ = backward_batch(model, caches, grad)
    adam_step(model.parameters(), grads, state)
    return loss


def train_model(
    model: FcnModel,
    patches: PatchSet | Callable[[int], PatchSet],
    val_patches: PatchSet,
    schedule: TrainSchedule,
    rng: np.random.Generator,
    on_epoch: Callable | None = None,
):
    """Adam training with per-epoch shuffling; returns ``(best_model, history)``.

    ``patches`` is either a fixed patch set or a callable producing the patch
    set for a given epoch (so background patches and augmentations can be
    redrawn). The returned model holds the weights of the epoch with the
    lowest validation loss.
    """
    if len(val_patches[0]) == 0:
        raise ValueError("validation set is empty")
    state = AdamState(schedule.learning_rate, schedule.beta1, schedule.beta2, schedule.eps)
    best = BestSnapshot()
    history = []
    for epoch in range(1, schedule.epochs + 1):
        x, y, mask = patches(epoch) if callable(patches) else patches
        if len(x) == 0:
            raise ValueError("training set is empty")
        order = rng.permutation(len(x))
        losses = []
        for s in range(0, len(x), schedule.batch_size):
            idx = np.sort(order[s : s + schedule.batch_size])
            loss = train_step(model, x[idx], y[idx], None if mask is None else mask[idx], state)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / len(x))
        val_loss = evaluate_loss(model, val_patches)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch, val_loss)
        best.offer(epoch, val_loss, model)
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        history.append(record)
        log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(record, model)
    return best.model, history


# ---------------------------------------------------------------------------
# Weights file


def weights_bytes(model: FcnModel) -> bytes:
    parts = [MAGIC, struct.pack("<4i", model.in_channels, model.n_landmarks, model.base_filters, len(model.layers))]
    for layer in model.layers:
        parts.append(layer.weights.astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
    return b"".join(parts)


def save_weights(model: FcnModel, path) -> None:
    """``path`` may also be a binary file object."""
    if hasattr(path, "write"):
        path.write(weights_bytes(model))
        return
    with open(path, "wb") as fh:
        fh.write(weights_bytes(model))


def load_weights(path) -> FcnModel:
    if hasattr(path, "read"):
        blob = path.read()
    else:
        with open(path, "rb") as fh:
            blob = fh.read()
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 16:
        raise ValueError(f"{path}: not an FCNW1 weights file")
    in_ch, n_lm, a, n_layers = struct.unpack_from("<4i", blob, len(MAGIC))
    if min(in_ch, n_lm, a) < 1 or n_layers < 2:
        raise ValueError(f"{path}: invalid header")
    template = FcnModel.build(in_ch, n_lm, a, depth=n_layers - 1, rng=np.random.default_rng(0))
    offset = len(MAGIC) + 16
    for layer in template.layers:
        for attr in ("weights", "bias"):
            ref = getattr(layer, attr)
            nbytes = ref.size * 4
            if offset + nbytes > len(blob):
                raise ValueError(f"{path}: truncated weights")
            arr = np.frombuffer(blob, "<f4", ref.size, offset).reshape(ref.shape).astype(np.float32)
            setattr(layer, attr, arr)
            offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: trailing data after weights")
    return template
