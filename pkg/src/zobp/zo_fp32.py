"""FP32 hybrid training step: seed-replayed perturbation + partial BP.

One step runs exactly two forward passes.  Parameters of layers 1..C are
perturbed with a Gaussian direction z regenerated from a per-step seed,
the projected gradient g = (l+ - l-) / 2eps is computed from the two
losses, and layers <= C are updated along z while layers > C get a plain
SGD backprop update from the cached activations of the second forward.

The perturb(+1) restore and the ZO update are merged by default
(theta <- theta + (eps - lr*g) z applied to the still-negatively-perturbed
parameters); the unmerged two-pass path exists for restore-fidelity
checks and A/B testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fpnet
from .fpnet import Network
from .prng import SeededGenerator, gaussian_vector

DEFAULT_G_CLIP = 10.0


@dataclass
class ZOConfig:
    epsilon: float = 1e-3
    lr: float = 1e-2
    partition: int = 0
    g_clip: float | None = DEFAULT_G_CLIP
    merge_perturb_update: bool = True
    three_pass_exact: bool = False  # extra forward at unperturbed theta for BP

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class StepMetrics:
    loss_pos: float
    loss_neg: float
    g: float
    bp_loss: float | None
    skipped: bool = False


def _perturb(net: Network, C: int, seed: int, coeff: float) -> None:
    """theta_l += coeff * z_l for trainable layers l <= C, layer order."""
    if coeff == 0.0:
        # Still a defined operation, but nothing to add.
        return
    gen = SeededGenerator(seed)
    for i in net.trainable_indices():
        if i + 1 > C:
            break
        p = net.params[i]
        n = net.param_vector_size(i)
        z = gaussian_vector(gen, n)
        nw = p["W"].size
        p["W"] += np.float32(coeff) * z[:nw].reshape(p["W"].shape).astype(np.float32)
        if p["b"] is not None:
            p["b"] += np.float32(coeff) * z[nw:].reshape(p["b"].shape).astype(np.float32)


def perturb_parameters(net: Network, C: int, seed: int, k: int, epsilon: float) -> None:
    """theta_l <- theta_l + k * eps * z_l, z replayed from the seed."""
    _perturb(net, C, seed, k * epsilon)


def zo_gradient(loss_pos: float, loss_neg: float, epsilon: float,
                g_clip: float | None = DEFAULT_G_CLIP) -> float:
    """Projected gradient (l+ - l-) / 2eps, optionally clipped."""
    if not (np.isfinite(loss_pos) and np.isfinite(loss_neg)):
        raise ValueError("non-finite loss in projected-gradient computation")
    g = (loss_pos - loss_neg) / (2.0 * epsilon)
    if g_clip is not None:
        g = float(np.clip(g, -g_clip, g_clip))
    return g


def zo_update(net: Network, C: int, seed: int, lr: float, g: float,
              epsilon: float, merged: bool = True) -> None:
    """Apply theta_l <- theta_l - lr * g * z_l for layers <= C.

    merged=True expects parameters currently at theta - eps*z (post second
    forward) and applies the restore and update as one (eps - lr*g) z add;
    merged=False expects the restore to have been applied already.
    """
    if merged:
        _perturb(net, C, seed, epsilon - lr * g)
    else:
        _perturb(net, C, seed, -lr * g)


def train_step(net: Network, x: np.ndarray, labels: np.ndarray,
               cfg: ZOConfig, seed: int,
               bp_optimizer=None, timer=None) -> StepMetrics:
    """One full hybrid step on a minibatch.  Exactly two forward passes.

    ``bp_optimizer`` is a callable (net, grads) -> None; defaults to SGD
    with cfg.lr.  A non-finite loss from a perturbed forward aborts the
    step with parameters restored (skip-step policy).
    """
    if len(labels) == 0:
        raise ValueError("empty batch")
    if timer is None:
        from .timing import NullTimer
        timer = NullTimer()
    C = cfg.partition
    with timer.phase("zo_perturb"):
        perturb_parameters(net, C, seed, +1, cfg.epsilon)
    with timer.phase("forward"):
        logits_pos, _ = fpnet.forward(net, x)
    with timer.phase("loss"):
        loss_pos = fpnet.cross_entropy(logits_pos, labels)

    with timer.phase("zo_perturb"):
        perturb_parameters(net, C, seed, -2, cfg.epsilon)
    with timer.phase("forward"):
        logits_neg, cache = fpnet.forward(net, x, cache_from=C)
    with timer.phase("loss"):
        loss_neg = fpnet.cross_entropy(logits_neg, labels)

    if not (np.isfinite(loss_pos) and np.isfinite(loss_neg)):
        perturb_parameters(net, C, seed, +1, cfg.epsilon)  # restore
        return StepMetrics(loss_pos, loss_neg, 0.0, None, skipped=True)

    g = zo_gradient(loss_pos, loss_neg, cfg.epsilon, cfg.g_clip)

    if cfg.three_pass_exact:
        # Restore first, rerun the forward at the unperturbed parameters so
        # BP sees exact activations, then update.  Three passes total.
        with timer.phase("zo_perturb"):
            perturb_parameters(net, C, seed, +1, cfg.epsilon)
        if C < net.L:
            with timer.phase("forward"):
                _, cache = fpnet.forward(net, x, cache_from=C)
        with timer.phase("zo_update"):
            zo_update(net, C, seed, cfg.lr, g, cfg.epsilon, merged=False)
    elif cfg.merge_perturb_update:
        with timer.phase("zo_update"):
            zo_update(net, C, seed, cfg.lr, g, cfg.epsilon, merged=True)
    else:
        with timer.phase("zo_perturb"):
            perturb_parameters(net, C, seed, +1, cfg.epsilon)
        with timer.phase("zo_update"):
            zo_update(net, C, seed, cfg.lr, g, cfg.epsilon, merged=False)

    bp_loss = None
    if C < net.L:
        with timer.phase("loss"):
            bp_loss = fpnet.cross_entropy(cache.acts[net.L], labels)
        with timer.phase("bp_backward"):
            grads = fpnet.backward_partial(net, cache, labels)
            if bp_optimizer is not None:
                bp_optimizer(net, grads)
            else:
                fpnet.sgd_step(net, grads, cfg.lr)
    return StepMetrics(loss_pos, loss_neg, g, bp_loss)
