"""FP32 layers, loss and first-order optimizers.

This is the backprop half of the hybrid trainer: a small fixed layer zoo
(Conv2d 5x5/pad 2, FC, ReLU, MaxPool 2x2, Flatten), a forward pass that
can cache activations from a chosen boundary onward, and a backward pass
that propagates errors only down to that boundary.  The cache discipline
matters: during hybrid training nothing below the partition point is ever
retained, which is where the memory savings come from.

Convolutions are implemented with im2col + matmul.  All arrays are
float32, row-major, batch-first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prng import SeededGenerator, gaussian_vector


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network.

    kind is one of "conv", "fc", "relu", "maxpool", "flatten".  Conv is
    fixed to 5x5 kernels with padding 2 (stride 1); maxpool to 2x2/2.
    """

    kind: str
    in_ch: int = 0
    out_ch: int = 0
    in_dim: int = 0
    out_dim: int = 0

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "fc")

    def param_count(self, bias: bool = True) -> int:
        if self.kind == "conv":
            n = self.out_ch * self.in_ch * 25
            return n + (self.out_ch if bias else 0)
        if self.kind == "fc":
            n = self.out_dim * self.in_dim
            return n + (self.out_dim if bias else 0)
        return 0


def conv(in_ch: int, out_ch: int) -> LayerSpec:
    return LayerSpec("conv", in_ch=in_ch, out_ch=out_ch)


def fc(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("fc", in_dim=in_dim, out_dim=out_dim)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool() -> LayerSpec:
    return LayerSpec("maxpool")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def lenet5_layers() -> list[LayerSpec]:
    """The padded LeNet-5 variant: 107,786 parameters with biases.

    Conv(1->6) - ReLU - Pool - Conv(6->16) - ReLU - Pool - Flatten -
    FC(784->120) - ReLU - FC(120->84) - ReLU - FC(84->10).
    """
    return [
        conv(1, 6), relu(), maxpool(),
        conv(6, 16), relu(), maxpool(),
        flatten(),
        fc(784, 120), relu(),
        fc(120, 84), relu(),
        fc(84, 10),
    ]


# Partition presets: layers 1..C are perturbation-trained, C+1..L get BP.
# cls1/cls2 put the last one / two FC layers on the BP side.
def resolve_partition(layers: list[LayerSpec], mode) -> int:
    L = len(layers)
    if isinstance(mode, int):
        if not 0 <= mode <= L:
            raise ValueError(f"partition {mode} out of range [0, {L}]")
        return mode
    trainable = [i for i, l in enumerate(layers) if l.has_params]
    table = {
        "full_bp": 0,
        "full_zo": L,
        "cls1": trainable[-1],
        "cls2": trainable[-2],
    }
    if mode not in table:
        raise ValueError(f"unknown partition mode {mode!r}")
    return table[mode]


class Network:
    """Ordered layer list with per-trainable-layer weight/bias arrays.

    Layer indices are 1-based in the math (a_0 is the input, layer l maps
    a_{l-1} to a_l); storage is 0-based internally.
    """

    def __init__(self, layers: list[LayerSpec], params: dict | None = None,
                 bias: bool = True, init_seed: int | None = None):
        self.layers = list(layers)
        self.bias = bias
        self.forward_count = 0  # instrumentation: forward passes executed
        if params is not None:
            self.params = params
        else:
            self.params = {}
            gen = SeededGenerator(init_seed if init_seed is not None else 0)
            for i, spec in enumerate(self.layers):
                if not spec.has_params:
                    continue
                if spec.kind == "conv":
                    shape = (spec.out_ch, spec.in_ch, 5, 5)
                    fan_in = spec.in_ch * 25
                    nb = spec.out_ch
                else:
                    shape = (spec.out_dim, spec.in_dim)
                    fan_in = spec.in_dim
                    nb = spec.out_dim
                # He-style init from the replayable stream
                scale = np.sqrt(2.0 / fan_in)
                w = gaussian_vector(gen, int(np.prod(shape))).reshape(shape)
                self.params[i] = {
                    "W": (w * scale).astype(np.float32),
                    "b": np.zeros(nb, dtype=np.float32) if bias else None,
                }

    @property
    def L(self) -> int:
        return len(self.layers)

    def trainable_indices(self) -> list[int]:
        return sorted(self.params.keys())

    def param_vector_size(self, i: int) -> int:
        p = self.params[i]
        n = p["W"].size
        if p["b"] is not None:
            n += p["b"].size
        return n

    def copy(self) -> "Network":
        params = {
            i: {"W": p["W"].copy(), "b": None if p["b"] is None else p["b"].copy()}
            for i, p in self.params.items()
        }
        return Network(self.layers, params=params, bias=self.bias)


class ActivationCache:
    """Activations a_C..a_L plus backward bookkeeping (pool argmax).

    ``acts[l]`` holds a_l (a_0 is the network input); only indices >= C
    are populated during hybrid training.
    """

    def __init__(self, start: int):
        self.start = start
        self.acts: dict[int, np.ndarray] = {}
        self.pool_idx: dict[int, np.ndarray] = {}

    def indices(self) -> set[int]:
        return set(self.acts.keys())


def _pad2(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H*W, C*25) patch matrix for 5x5/pad 2 conv."""
    B, C, H, W = x.shape
    xp = _pad2(x)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (5, 5), axis=(2, 3))
    # windows: (B, C, H, W, 5, 5) -> (B, H*W, C*25)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(B, H * W, C * 25)


def _col2im(cols: np.ndarray, shape: tuple) -> np.ndarray:
    """Adjoint of _im2col: fold (B, H*W, C*25) back into (B, C, H, W)."""
    B, C, H, W = shape
    out = np.zeros((B, C, H + 4, W + 4), dtype=cols.dtype)
    cols = cols.reshape(B, H, W, C, 5, 5)
    for di in range(5):
        for dj in range(5):
            out[:, :, di:di + H, dj:dj + W] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out[:, :, 2:2 + H, 2:2 + W]


def conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    B, C, H, Wd = x.shape
    out_ch = W.shape[0]
    cols = _im2col(x)
    wmat = W.reshape(out_ch, -1)
    out = cols @ wmat.T  # (B, H*W, out_ch)
    if b is not None:
        out += b
    return out.transpose(0, 2, 1).reshape(B, out_ch, H, Wd)


def conv_backward(x: np.ndarray, W: np.ndarray, e_out: np.ndarray):
    """Returns (gW, gb, e_in) for the 5x5/pad 2 convolution."""
    B, C, H, Wd = x.shape
    out_ch = W.shape[0]
    cols = _im2col(x)  # (B, HW, C*25)
    e_mat = e_out.reshape(B, out_ch, H * Wd)  # (B, out_ch, HW)
    gW = np.einsum("boh,bhc->oc", e_mat, cols).reshape(W.shape)
    gb = e_mat.sum(axis=(0, 2))
    e_cols = e_mat.transpose(0, 2, 1) @ W.reshape(out_ch, -1)  # (B, HW, C*25)
    e_in = _col2im(e_cols, x.shape)
    return gW, gb, e_in


def maxpool_forward(x: np.ndarray):
    """2x2/2 max pooling; returns (out, argmax) with first-index ties."""
    B, C, H, W = x.shape
    r = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    r = r.reshape(B, C, H // 2, W // 2, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(e_out: np.ndarray, idx: np.ndarray, in_shape: tuple) -> np.ndarray:
    B, C, H, W = in_shape
    r = np.zeros((B, C, H // 2, W // 2, 4), dtype=e_out.dtype)
    np.put_along_axis(r, idx[..., None], e_out[..., None], axis=-1)
    return r.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)


def forward(net: Network, x: np.ndarray, cache_from: int | None = None):
    """Run the network; returns (logits, cache).

    ``cache_from=C`` retains a_C..a_L (and pool argmax for layers > C);
    ``None`` retains nothing.  a_0 is the input itself.
    """
    net.forward_count += 1
    cache = ActivationCache(cache_from) if cache_from is not None else None
    a = np.asarray(x, dtype=np.float32)
    if cache is not None and cache_from <= 0:
        cache.acts[0] = a
    for i, spec in enumerate(net.layers):
        l = i + 1  # 1-based layer index
        if spec.kind == "conv":
            p = net.params[i]
            a = conv_forward(a, p["W"], p["b"])
        elif spec.kind == "fc":
            p = net.params[i]
            if a.ndim != 2 or a.shape[1] != spec.in_dim:
                raise ValueError(
                    f"layer {l}: expected input (B, {spec.in_dim}), got {a.shape}")
            a = a @ p["W"].T
            if p["b"] is not None:
                a = a + p["b"]
        elif spec.kind == "relu":
            a = np.maximum(a, 0.0)
        elif spec.kind == "maxpool":
            a, idx = maxpool_forward(a)
            if cache is not None and l > cache_from:
                cache.pool_idx[l] = idx
        elif spec.kind == "flatten":
            a = a.reshape(a.shape[0], -1)
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        if cache is not None and l >= cache_from:
            cache.acts[l] = a
    return a, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(B), labels]))


def backward_partial(net: Network, cache: ActivationCache, labels: np.ndarray) -> dict:
    """Backprop from the loss down to (but not below) layer C+1.

    Returns {layer_index: (gW, gb)} for trainable layers >= C+1, using the
    mean-reduced cross-entropy.  Requires the cache from the most recent
    forward with cache_from == C.
    """
    C = cache.start
    L = net.L
    if L not in cache.acts:
        raise ValueError("cache does not hold the network output; stale or missing")
    grads: dict[int, tuple] = {}
    logits = cache.acts[L]
    B = logits.shape[0]
    e = (softmax(logits) - np.eye(logits.shape[1], dtype=np.float32)[labels]) / B
    e = e.astype(np.float32)
    for i in range(L - 1, C - 1, -1):
        spec = net.layers[i]
        l = i + 1
        a_in = cache.acts.get(l - 1)
        if spec.has_params and a_in is None:
            raise ValueError(f"cache missing a_{l - 1} needed by layer {l}")
        if spec.kind == "fc":
            p = net.params[i]
            gW = e.T @ a_in
            gb = e.sum(axis=0) if p["b"] is not None else None
            grads[i] = (gW, gb)
            e = e @ p["W"]
        elif spec.kind == "conv":
            p = net.params[i]
            gW, gb, e = conv_backward(a_in, p["W"], e)
            grads[i] = (gW, gb if p["b"] is not None else None)
        elif spec.kind == "relu":
            e = e * (cache.acts[l] > 0)
        elif spec.kind == "maxpool":
            e = maxpool_backward(e, cache.pool_idx[l], a_in.shape)
        elif spec.kind == "flatten":
            e = e.reshape(a_in.shape)
    return grads


def sgd_step(net: Network, grads: dict, lr: float) -> None:
    """In-place theta <- theta - lr * g."""
    for i, (gW, gb) in grads.items():
        p = net.params[i]
        p["W"] -= np.float32(lr) * gW.astype(np.float32)
        if gb is not None and p["b"] is not None:
            p["b"] -= np.float32(lr) * gb.astype(np.float32)


class AdamState:
    """First/second moment tensors per trainable layer, plus step count."""

    def __init__(self, net: Network, indices=None):
        self.t = 0
        self.m = {}
        self.v = {}
        for i in (indices if indices is not None else net.trainable_indices()):
            p = net.params[i]
            self.m[i] = {"W": np.zeros_like(p["W"]),
                         "b": None if p["b"] is None else np.zeros_like(p["b"])}
            self.v[i] = {"W": np.zeros_like(p["W"]),
                         "b": None if p["b"] is None else np.zeros_like(p["b"])}


def adam_step(net: Network, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard Adam update with bias correction, in place."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for i, (gW, gb) in grads.items():
        p = net.params[i]
        for key, g in (("W", gW), ("b", gb)):
            if g is None or p[key] is None:
                continue
            g = g.astype(np.float32)
            m = state.m[i][key]
            v = state.v[i][key]
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            p[key] -= np.float32(lr) * (m / bc1) / (np.sqrt(v / bc2) + eps)
