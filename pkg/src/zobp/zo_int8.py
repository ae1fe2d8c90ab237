"""INT8 hybrid training step and the integer loss-difference sign.

The perturbation is a sparse uniform int8 vector z = m * u (Bernoulli
mask times U(-r_max, r_max)), replayed from a per-step seed exactly like
the FP32 path.  Because the eventual update is rounded to b_zo bits, the
magnitude of the projected gradient is irrelevant; only the sign of the
loss difference is needed, and it is computed from the two int8 logit
tensors without ever evaluating a loss value:

  * both tensors are rescaled to the smaller of the two exponents;
  * exp(x) terms become powers of two via log2(e) ~= 47274 * 2**-15;
  * exponents are offset by p = p_max - 10 so retained terms are <= 2**10
    (anything below the offset is at least 2**10 smaller than the max and
    is dropped);
  * for B = 1 the two power sums are compared directly; for B > 1 the
    per-sample floor-log2 of each power sum (a leading-zero count) is
    summed and the two totals compared.

Ties return 0, making the update a no-op, hence the ternary gradient
g in {-1, 0, +1}.  A float-reference mode (sign of the float CE
difference on dequantized logits) exists for A/B comparison; it is the
only float-touching path and reports to the float-op counter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import floatops, qnet
from .prng import SeededGenerator, bernoulli_mask, uniform_int8_vector
from .qnet import QuantNetwork, QuantTensor, q_backward_partial, q_forward, pow2_exponents
from .qtensor import clamp_int8, round_to_bits

R_MAX_GRID = (1, 3, 7, 15, 31, 63)
MAX_EXPONENT_GAP = 16


@dataclass
class ZOInt8Config:
    r_max: int = 7
    p_zero: float = 0.33
    b_zo: int = 1
    b_bp: int = 5
    partition: int = 0
    sign_mode: str = "integer"  # or "float_reference"

    def __post_init__(self):
        if not 1 <= self.r_max <= 127:
            raise ValueError("r_max must be in [1, 127]")
        if not 0.0 <= self.p_zero <= 1.0:
            raise ValueError("p_zero must be in [0, 1]")
        if not 1 <= self.b_zo <= 7 or not 1 <= self.b_bp <= 7:
            raise ValueError("update bitwidths must be in [1, 7]")
        if self.sign_mode not in ("integer", "float_reference"):
            raise ValueError(f"unknown sign_mode {self.sign_mode!r}")


@dataclass
class StepMetricsInt8:
    g: int


def _sparse_vector(gen: SeededGenerator, n: int, r_max: int, p_zero: float) -> np.ndarray:
    """Mask first, then the uniform vector, as two fixed-order passes."""
    m = bernoulli_mask(gen, n, p_zero)
    u = uniform_int8_vector(gen, n, r_max)
    return (m.astype(np.int16) * u.astype(np.int16)).astype(np.int8)


def perturb_parameters_int8(qnet_: QuantNetwork, C: int, seed: int, k: int,
                            r_max: int, p_zero: float) -> None:
    """theta_l <- clamp(theta_l + k * z_l) for trainable layers l <= C.

    Integer adds are exact, so a (+1, -2, +1) cycle restores parameters
    exactly unless the clamp saturates.
    """
    gen = SeededGenerator(seed)
    for i in qnet_.trainable_indices():
        if i + 1 > C:
            break
        p = qnet_.params[i]
        z = _sparse_vector(gen, p.data.size, r_max, p_zero).reshape(p.data.shape)
        p.data = clamp_int8(p.data.astype(np.int32) + k * z.astype(np.int32)).astype(np.int8)


def _rescaled(pos: QuantTensor, neg: QuantTensor):
    """Bring both logit tensors to the shared exponent min(s+, s-)."""
    gap = abs(pos.exponent - neg.exponent)
    if gap > MAX_EXPONENT_GAP:
        raise ValueError(
            f"logit exponent gap {gap} exceeds {MAX_EXPONENT_GAP}; degenerate input")
    s = min(pos.exponent, neg.exponent)
    a = pos.data.astype(np.int32) << (pos.exponent - s)
    b = neg.data.astype(np.int32) << (neg.exponent - s)
    return a, b, s


def _power_sums(a: np.ndarray, b: np.ndarray, s: int, labels: np.ndarray):
    """Per-sample sums of 2**x for both tensors, with a shared offset.

    The offset p = p_max - 10 is shared between the two tensors within a
    sample (it cancels in the per-sample log ratio) but is free to differ
    across samples.
    """
    B = a.shape[0]
    rows = np.arange(B)
    ref_a = a[rows, labels][:, None]
    ref_b = b[rows, labels][:, None]
    ha = pow2_exponents(a, s, ref_a)
    hb = pow2_exponents(b, s, ref_b)
    p_max = np.maximum(ha.max(axis=1), hb.max(axis=1))[:, None]
    xa = np.maximum(ha - (p_max - 10), 0)
    xb = np.maximum(hb - (p_max - 10), 0)
    sum_a = (np.int64(1) << xa.astype(np.int64)).sum(axis=1)
    sum_b = (np.int64(1) << xb.astype(np.int64)).sum(axis=1)
    return sum_a, sum_b


def _floor_log2(n: np.ndarray) -> np.ndarray:
    """floor(log2(n)) for n >= 1 via bit length (a leading-zero count)."""
    out = np.empty(n.shape, dtype=np.int64)
    flat = n.reshape(-1)
    of = out.reshape(-1)
    for i in range(flat.size):
        of[i] = int(flat[i]).bit_length() - 1
    return out


def sign_loss_diff(logits_pos: QuantTensor, logits_neg: QuantTensor,
                   labels: np.ndarray) -> int:
    """Sign of CE(logits+) - CE(logits-), integer arithmetic only."""
    labels = np.asarray(labels)
    a, b, s = _rescaled(logits_pos, logits_neg)
    sum_a, sum_b = _power_sums(a, b, s, labels)
    if len(labels) == 1:
        diff = int(sum_a[0]) - int(sum_b[0])
    else:
        diff = int(_floor_log2(sum_a).sum()) - int(_floor_log2(sum_b).sum())
    return (diff > 0) - (diff < 0)


def sign_loss_diff_float(logits_pos: QuantTensor, logits_neg: QuantTensor,
                         labels: np.ndarray) -> int:
    """Float-reference sign: CE on dequantized logits.  Not integer-only."""
    from .fpnet import cross_entropy

    lp = logits_pos.dequantize()
    ln = logits_neg.dequantize()
    diff = cross_entropy(lp, labels) - cross_entropy(ln, labels)
    return (diff > 0) - (diff < 0)


def zo_update_int8(qnet_: QuantNetwork, C: int, seed: int, g: int,
                   b_zo: int, r_max: int, p_zero: float) -> None:
    """Regenerate z from the seed, round g*z to b_zo bits, subtract."""
    if g == 0:
        return
    gen = SeededGenerator(seed)
    for i in qnet_.trainable_indices():
        if i + 1 > C:
            break
        p = qnet_.params[i]
        z = _sparse_vector(gen, p.data.size, r_max, p_zero).reshape(p.data.shape)
        upd = round_to_bits(g * z.astype(np.int32), b_zo)
        p.data = clamp_int8(p.data.astype(np.int32) - upd).astype(np.int8)


def train_step_int8(qnet_: QuantNetwork, x: QuantTensor, labels: np.ndarray,
                    cfg: ZOInt8Config, seed: int, timer=None) -> StepMetricsInt8:
    """One full INT8 hybrid step on a quantized minibatch."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    if timer is None:
        from .timing import NullTimer
        timer = NullTimer()
    C = cfg.partition
    with timer.phase("zo_perturb"):
        perturb_parameters_int8(qnet_, C, seed, +1, cfg.r_max, cfg.p_zero)
    with timer.phase("forward"):
        logits_pos, _ = q_forward(qnet_, x)
    with timer.phase("zo_perturb"):
        perturb_parameters_int8(qnet_, C, seed, -2, cfg.r_max, cfg.p_zero)
    with timer.phase("forward"):
        logits_neg, cache = q_forward(qnet_, x, cache_from=C)
    with timer.phase("loss"):
        if cfg.sign_mode == "integer":
            g = sign_loss_diff(logits_pos, logits_neg, labels)
        else:
            g = sign_loss_diff_float(logits_pos, logits_neg, labels)
    with timer.phase("zo_perturb"):
        perturb_parameters_int8(qnet_, C, seed, +1, cfg.r_max, cfg.p_zero)
    with timer.phase("zo_update"):
        zo_update_int8(qnet_, C, seed, g, cfg.b_zo, cfg.r_max, cfg.p_zero)
    with timer.phase("bp_backward"):
        q_backward_partial(qnet_, cache, labels, cfg.b_bp)
    return StepMetricsInt8(g=g)
