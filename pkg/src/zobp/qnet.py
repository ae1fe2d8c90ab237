"""INT8 forward and backward passes.

Values travel as (int8 data, power-of-two exponent) pairs.  A trainable
layer multiplies int8 parameters with int8 activations into an int32
accumulator, adds the exponents, and requantizes back to 8 bits with
pseudo-stochastic rounding.  Parameter exponents are set once at
initialization and never change; the bitwidth to which updates are
rounded acts as the learning rate.

The output-gradient for cross-entropy is approximated entirely in
integers with the shared power-of-two softmax core (see
:func:`softmax_pow2`): exponents are rescaled with the
log2(e) ~= 47274 * 2**-15 multiply-and-shift, offset so every retained
term is at most 2**10, and normalized with integer division.

Everything here is integer arithmetic; no bias parameters exist.
"""

from __future__ import annotations

import numpy as np

from .fpnet import LayerSpec, resolve_partition
from .floatops import assert_integer
from .prng import SeededGenerator, uniform_int8_vector
from .qtensor import Accum32, QuantTensor, clamp_int8, requantize, round_to_bits

LOG2E_Q15 = 47274  # log2(e) * 2**15, rounded
INPUT_EXP = -7
PARAM_EXP = -7
PARAM_INIT_RANGE = 64

# Forward accumulators must fit int32: products are <= 127^2 and we allow
# fan-ins up to this bound (784 * 127^2 ~= 1.26e7 << 2^31).
MAX_FAN_IN = 2**16


class QuantNetwork:
    """Layer list plus per-trainable-layer (int8 weights, fixed exponent)."""

    def __init__(self, layers: list[LayerSpec], params: dict | None = None,
                 init_seed: int | None = None):
        self.layers = list(layers)
        self.forward_count = 0
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
                else:
                    shape = (spec.out_dim, spec.in_dim)
                w = uniform_int8_vector(gen, int(np.prod(shape)), PARAM_INIT_RANGE)
                self.params[i] = QuantTensor(w.reshape(shape), PARAM_EXP)

    @property
    def L(self) -> int:
        return len(self.layers)

    def trainable_indices(self) -> list[int]:
        return sorted(self.params.keys())

    def copy(self) -> "QuantNetwork":
        params = {i: QuantTensor(p.data.copy(), p.exponent)
                  for i, p in self.params.items()}
        return QuantNetwork(self.layers, params=params)


class QuantCache:
    """int8 activations a_C..a_L plus pool argmax for the backward pass."""

    def __init__(self, start: int):
        self.start = start
        self.acts: dict[int, QuantTensor] = {}
        self.pool_idx: dict[int, np.ndarray] = {}


def quantize_input(image: np.ndarray) -> QuantTensor:
    """Map real pixels in [0, 1] to int8 * 2**-7 (round half-up).

    This is the only float-touching entry point of the INT8 pipeline;
    datasets are expected to be quantized once, outside the training loop
    (it reports to the float-op counter accordingly).
    """
    from . import floatops

    image = np.asarray(image)
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("input pixels must lie in [0, 1]")
    floatops.note(image.size)
    data = np.floor(image * 127.0 + 0.5).astype(np.int8)
    return QuantTensor(data, INPUT_EXP)


def quantize_input_u8(pixels: np.ndarray) -> QuantTensor:
    """Integer-only ingestion of raw uint8 pixels (0..255).

    round(p * 127 / 255) computed as (p * 254 + 255) // 510, which is
    exact round-half-up; matches quantize_input(p / 255) bit for bit.
    """
    pixels = np.asarray(pixels)
    assert_integer(pixels, "pixels")
    p = pixels.astype(np.int32)
    data = ((p * 254 + 255) // 510).astype(np.int8)
    return QuantTensor(data, INPUT_EXP)


def _pad2_int(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))


def _im2col_int(x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    xp = _pad2_int(x)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (5, 5), axis=(2, 3))
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(B, H * W, C * 25)


def _col2im_int(cols: np.ndarray, shape: tuple) -> np.ndarray:
    B, C, H, W = shape
    out = np.zeros((B, C, H + 4, W + 4), dtype=np.int32)
    cols = cols.reshape(B, H, W, C, 5, 5)
    for di in range(5):
        for dj in range(5):
            out[:, :, di:di + H, dj:dj + W] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out[:, :, 2:2 + H, 2:2 + W]


def _check_fan_in(fan_in: int, l: int) -> None:
    if fan_in > MAX_FAN_IN:
        raise OverflowError(
            f"layer {l}: fan-in {fan_in} exceeds the int32 accumulator budget")


def q_forward(qnet: QuantNetwork, x: QuantTensor, cache_from: int | None = None):
    """Integer forward pass; returns (logits QuantTensor, cache)."""
    qnet.forward_count += 1
    assert_integer(x.data, "input")
    cache = QuantCache(cache_from) if cache_from is not None else None
    a = x
    if cache is not None and cache_from <= 0:
        cache.acts[0] = a
    for i, spec in enumerate(qnet.layers):
        l = i + 1
        if spec.kind == "conv":
            p = qnet.params[i]
            _check_fan_in(spec.in_ch * 25, l)
            B, C, H, W = a.data.shape
            cols = _im2col_int(a.data).astype(np.int32)
            wmat = p.data.reshape(spec.out_ch, -1).astype(np.int32)
            acc = cols @ wmat.T  # (B, HW, out_ch) int32
            acc = acc.transpose(0, 2, 1).reshape(B, spec.out_ch, H, W)
            a = requantize(Accum32(acc, p.exponent + a.exponent))
        elif spec.kind == "fc":
            p = qnet.params[i]
            _check_fan_in(spec.in_dim, l)
            if a.data.ndim != 2 or a.data.shape[1] != spec.in_dim:
                raise ValueError(
                    f"layer {l}: expected input (B, {spec.in_dim}), got {a.data.shape}")
            acc = a.data.astype(np.int32) @ p.data.T.astype(np.int32)
            a = requantize(Accum32(acc, p.exponent + a.exponent))
        elif spec.kind == "relu":
            a = QuantTensor(np.maximum(a.data, 0), a.exponent)
        elif spec.kind == "maxpool":
            # Same exponent across the tensor, so raw int8 compare is valid.
            B, C, H, W = a.data.shape
            r = a.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            r = r.reshape(B, C, H // 2, W // 2, 4)
            idx = r.argmax(axis=-1)
            out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
            a = QuantTensor(out, a.exponent)
            if cache is not None and l > cache_from:
                cache.pool_idx[l] = idx
        elif spec.kind == "flatten":
            a = QuantTensor(a.data.reshape(a.data.shape[0], -1), a.exponent)
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        if cache is not None and l >= cache_from:
            cache.acts[l] = a
    return a, cache


def pow2_exponents(logits: np.ndarray, exponent: int, ref: np.ndarray) -> np.ndarray:
    """Exponents h such that exp((logit - ref) * 2**s) ~= 2**h.

    ``ref`` is the per-row reference logit (int32, shape (B, 1)).  The
    exp -> power-of-two conversion multiplies by log2(e) in Q15
    (47274 * 2**-15) and folds 2**s into the shift; the arithmetic right
    shift floors, matching the truncation of the integer pipeline.
    """
    assert_integer(logits, "logits")
    d = logits.astype(np.int64) - ref.astype(np.int64)
    prod = LOG2E_Q15 * d
    shift = 15 - exponent
    if shift >= 0:
        if shift > 62:
            # Exponent so small every term collapses toward 2**0.
            return np.zeros_like(prod)
        return prod >> shift
    return prod << (-shift)


def softmax_pow2(logits: QuantTensor) -> np.ndarray:
    """Integer softmax in 1/127 units: rows of q_j = (2**x_j * 127) / sum.

    x_j is the rescaled, offset exponent clipped to [0, 10], so every
    power-of-two term fits comfortably in int64.
    """
    data = logits.data.astype(np.int32)
    ref = data.max(axis=1, keepdims=True)
    h = pow2_exponents(data, logits.exponent, ref)
    x = np.clip(h + 10, 0, 10)  # offset p = max(h) - 10 = -10 since max(h) = 0
    p = (np.int64(1) << x.astype(np.int64))
    s = p.sum(axis=1, keepdims=True)
    return ((p * 127) // s).astype(np.int32)


def int_ce_output_grad(logits: QuantTensor, labels: np.ndarray) -> QuantTensor:
    """int8 error approximating softmax(logits) - onehot, exponent -7."""
    labels = np.asarray(labels)
    B, K = logits.data.shape
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError("label out of range")
    q = softmax_pow2(logits)
    onehot = np.zeros((B, K), dtype=np.int32)
    onehot[np.arange(B), labels] = 127
    return QuantTensor(clamp_int8(q - onehot).astype(np.int8), -7)


def q_backward_partial(qnet: QuantNetwork, cache: QuantCache, labels: np.ndarray,
                       b_bp: int) -> None:
    """Integer backprop and in-place update of layers C+1..L.

    Errors propagate as int8 QuantTensors through the requantize
    machinery; each parameter update is the gradient accumulator rounded
    so its magnitude fits ``b_bp`` bits, then subtracted and clamped.
    Gradient accumulators sum over the batch in int64 (a 256-sample batch
    can overflow int32 for conv layers) before rounding.
    """
    C = cache.start
    L = qnet.L
    if C >= L:
        return
    if L not in cache.acts:
        raise ValueError("cache does not hold the network output")
    e = int_ce_output_grad(cache.acts[L], labels)
    for i in range(L - 1, C - 1, -1):
        spec = qnet.layers[i]
        l = i + 1
        a_in = cache.acts.get(l - 1)
        if spec.kind == "fc":
            p = qnet.params[i]
            g_acc = e.data.astype(np.int64).T @ a_in.data.astype(np.int64)
            upd = round_to_bits(g_acc, b_bp)
            e_acc = e.data.astype(np.int32) @ p.data.astype(np.int32)
            p.data = clamp_int8(p.data.astype(np.int32) - upd).astype(np.int8)
            e = requantize(Accum32(e_acc, e.exponent + p.exponent))
        elif spec.kind == "conv":
            p = qnet.params[i]
            B, Cin, H, W = a_in.data.shape
            out_ch = spec.out_ch
            cols = _im2col_int(a_in.data).astype(np.int64)
            e_mat = e.data.reshape(B, out_ch, H * W)
            g_acc = np.einsum("boh,bhc->oc", e_mat.astype(np.int64), cols)
            upd = round_to_bits(g_acc, b_bp).reshape(p.data.shape)
            e_cols = e_mat.transpose(0, 2, 1).astype(np.int32) @ \
                p.data.reshape(out_ch, -1).astype(np.int32)
            e_acc = _col2im_int(e_cols, a_in.data.shape)
            p.data = clamp_int8(p.data.astype(np.int32) - upd).astype(np.int8)
            e = requantize(Accum32(e_acc, e.exponent + p.exponent))
        elif spec.kind == "relu":
            e = QuantTensor(e.data * (cache.acts[l].data > 0), e.exponent)
        elif spec.kind == "maxpool":
            B, Cc, H, W = a_in.data.shape
            r = np.zeros((B, Cc, H // 2, W // 2, 4), dtype=e.data.dtype)
            np.put_along_axis(r, cache.pool_idx[l][..., None], e.data[..., None], axis=-1)
            e = QuantTensor(
                r.reshape(B, Cc, H // 2, W // 2, 2, 2)
                 .transpose(0, 1, 2, 4, 3, 5).reshape(B, Cc, H, W),
                e.exponent)
        elif spec.kind == "flatten":
            e = QuantTensor(e.data.reshape(a_in.data.shape), e.exponent)


def q_predict(qnet: QuantNetwork, x: QuantTensor) -> np.ndarray:
    """Class predictions from integer argmax of the logits."""
    logits, _ = q_forward(qnet, x)
    return logits.data.argmax(axis=1)
