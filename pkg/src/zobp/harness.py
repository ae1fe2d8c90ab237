"""Config-driven training orchestration.

A run is a pure function of (config, data files): one master seed feeds a
splitmix stream from which the parameter-init seed, each epoch's shuffle
seed and each step's perturbation seed are drawn in a fixed order.

Hyperparameter schedules follow the training protocol used throughout:
the FP32 learning rate decays by 0.8 every 10 epochs; the INT8 BP update
bitwidth steps 5 -> 4 -> 3 at epochs 20 and 50 while the perturbation
sparsity steps 0.33 -> 0.5 -> 0.9 at the same epochs.

Metrics are written as one CSV row per epoch with a versioned header.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint, fpnet, zo_fp32, zo_int8
from .data import Dataset, batches
from .fpnet import Network, lenet5_layers, resolve_partition
from .prng import SeededGenerator
from .qnet import QuantNetwork, q_forward, quantize_input
from .timing import PhaseTimer
from .zo_fp32 import ZOConfig
from .zo_int8 import ZOInt8Config

CSV_HEADER = "# zobp metrics v1"
CSV_COLUMNS = ("epoch,lr,b_bp,p_zero,train_loss,test_loss,test_acc,"
               "t_forward,t_zo_perturb,t_zo_update,t_bp_backward,t_loss")

DEFAULT_B_BP_SCHEDULE = ((0, 5), (20, 4), (50, 3))
DEFAULT_P_ZERO_SCHEDULE = ((0, 0.33), (20, 0.5), (50, 0.9))


@dataclass
class RunConfig:
    precision: str = "fp32"  # fp32 | int8
    partition: object = "full_bp"  # full_bp | full_zo | cls1 | cls2 | int
    epochs: int = 20
    batch: int = 32
    seed: int = 0
    lr: float = 1e-2
    lr_decay: float = 0.8
    lr_decay_every: int = 10
    epsilon: float = 1e-3
    g_clip: float = 10.0
    r_max: int = 7
    b_zo: int = 1
    b_bp_schedule: tuple = DEFAULT_B_BP_SCHEDULE
    p_zero_schedule: tuple = DEFAULT_P_ZERO_SCHEDULE
    sign_mode: str = "integer"
    optimizer: str = "sgd"  # BP-side optimizer: sgd | adam

    def validate(self):
        errors = []
        if self.precision not in ("fp32", "int8"):
            errors.append("precision: must be fp32 or int8")
        if self.epochs < 0:
            errors.append("epochs: must be >= 0")
        if self.batch < 1:
            errors.append("batch: must be >= 1")
        if self.epsilon <= 0:
            errors.append("epsilon: must be > 0")
        if self.lr <= 0:
            errors.append("lr: must be > 0")
        if not 1 <= self.r_max <= 127:
            errors.append("r_max: must be in [1, 127]")
        if self.sign_mode not in ("integer", "float_reference"):
            errors.append("sign_mode: must be integer or float_reference")
        if self.optimizer not in ("sgd", "adam"):
            errors.append("optimizer: must be sgd or adam")
        if errors:
            raise ValueError("invalid config: " + "; ".join(errors))


_CONFIG_TYPES = {
    "epochs": int, "batch": int, "seed": int, "r_max": int, "b_zo": int,
    "lr": float, "lr_decay": float, "lr_decay_every": int,
    "epsilon": float, "g_clip": float,
}


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Flat key=value config text plus command-line overrides."""
    values: dict = {}
    for raw in text.splitlines():
        line = raw.split("#")[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (want key=value): {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    if overrides:
        values.update(overrides)
    kwargs: dict = {}
    for key, val in values.items():
        if key in ("b_bp_schedule", "p_zero_schedule"):
            pairs = []
            for item in str(val).split(";"):
                ep, v = item.split(":")
                pairs.append((int(ep), float(v) if key == "p_zero_schedule" else int(v)))
            kwargs[key] = tuple(sorted(pairs))
        elif key == "partition":
            kwargs[key] = int(val) if str(val).lstrip("-").isdigit() else val
        elif key in _CONFIG_TYPES:
            kwargs[key] = _CONFIG_TYPES[key](val)
        elif key in RunConfig.__dataclass_fields__:
            kwargs[key] = val
        else:
            raise ValueError(f"unknown config key {key!r}")
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def schedule_value(schedule, epoch: int):
    """Value of an (epoch, value) step schedule at a given epoch."""
    current = schedule[0][1]
    for ep, val in schedule:
        if epoch >= ep:
            current = val
    return current


def lr_at(cfg: RunConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    b_bp: int
    p_zero: float
    train_loss: float
    test_loss: float
    test_acc: float
    times: dict = field(default_factory=dict)

    def csv_row(self) -> str:
        t = self.times
        return (f"{self.epoch},{self.lr:.8g},{self.b_bp},{self.p_zero:.4g},"
                f"{self.train_loss:.8g},{self.test_loss:.8g},{self.test_acc:.6g},"
                f"{t.get('forward', 0.0):.6g},{t.get('zo_perturb', 0.0):.6g},"
                f"{t.get('zo_update', 0.0):.6g},{t.get('bp_backward', 0.0):.6g},"
                f"{t.get('loss', 0.0):.6g}")


def evaluate_fp32(net: Network, ds: Dataset, batch: int = 256) -> tuple[float, float]:
    """(accuracy, mean loss) over a dataset with a single forward sweep."""
    correct = 0
    losses = []
    for x, y in batches(ds, batch):
        logits, _ = fpnet.forward(net, x)
        correct += int((logits.argmax(axis=1) == y).sum())
        losses.append(fpnet.cross_entropy(logits, y) * len(y))
    return correct / len(ds), float(np.sum(losses) / len(ds))


def evaluate_int8(qnet_: QuantNetwork, ds: Dataset, batch: int = 256,
                  with_loss: bool = True) -> tuple[float, float]:
    """(accuracy, loss).  Accuracy is integer argmax; the loss is a float
    diagnostic on dequantized logits (skippable for integer-only runs)."""
    correct = 0
    losses = []
    for x, y in batches(ds, batch):
        logits, _ = q_forward(qnet_, quantize_input(x))
        correct += int((logits.data.argmax(axis=1) == y).sum())
        if with_loss:
            losses.append(fpnet.cross_entropy(logits.dequantize(), y) * len(y))
    loss = float(np.sum(losses) / len(ds)) if with_loss else float("nan")
    return correct / len(ds), loss


def run_epoch_fp32(net: Network, train: Dataset, cfg: RunConfig, epoch: int,
                   master: SeededGenerator, timer: PhaseTimer,
                   adam_state=None) -> float:
    """One FP32 training epoch; returns the mean step loss."""
    C = resolve_partition(net.layers, cfg.partition)
    lr = lr_at(cfg, epoch)
    zo_cfg = ZOConfig(epsilon=cfg.epsilon, lr=lr, partition=C, g_clip=cfg.g_clip)
    bp_opt = None
    if cfg.optimizer == "adam":
        bp_opt = lambda n, g: fpnet.adam_step(n, g, adam_state, lr)
    shuffle_seed = master.next_uint32()
    losses = []
    for x, y in batches(train, cfg.batch, shuffle_seed=shuffle_seed):
        step_seed = master.next_uint32()
        m = zo_fp32.train_step(net, x, y, zo_cfg, step_seed,
                               bp_optimizer=bp_opt, timer=timer)
        losses.append(0.5 * (m.loss_pos + m.loss_neg))
    return float(np.mean(losses))


def run_epoch_int8(qnet_: QuantNetwork, train: Dataset, cfg: RunConfig, epoch: int,
                   master: SeededGenerator, timer: PhaseTimer,
                   quantized_cache: dict | None = None) -> None:
    """One INT8 training epoch.  Float-free when sign_mode == integer and
    the quantized batch cache is pre-populated."""
    C = resolve_partition(qnet_.layers, cfg.partition)
    zo_cfg = ZOInt8Config(
        r_max=cfg.r_max,
        p_zero=schedule_value(cfg.p_zero_schedule, epoch),
        b_zo=cfg.b_zo,
        b_bp=schedule_value(cfg.b_bp_schedule, epoch),
        partition=C,
        sign_mode=cfg.sign_mode,
    )
    shuffle_seed = master.next_uint32()
    for x, y in batches(train, cfg.batch, shuffle_seed=shuffle_seed):
        step_seed = master.next_uint32()
        if quantized_cache is not None:
            key = id(x)  # batches yields views; quantize once per epoch pass
            qx = quantized_cache.get(key)
            if qx is None:
                qx = quantize_input(x)
        else:
            qx = quantize_input(x)
        zo_int8.train_step_int8(qnet_, qx, y, zo_cfg, step_seed, timer=timer)


def train_run(cfg: RunConfig, train: Dataset, test: Dataset,
              net=None, metrics_out: io.TextIOBase | None = None,
              eval_each_epoch: bool = True, log=None) -> tuple[object, list]:
    """Full training run; returns (network, [EpochMetrics])."""
    cfg.validate()
    master = SeededGenerator(cfg.seed)
    init_seed = master.next_uint32()
    if net is None:
        if cfg.precision == "fp32":
            net = Network(lenet5_layers(), init_seed=init_seed)
        else:
            net = QuantNetwork(lenet5_layers(), init_seed=init_seed)
    adam_state = None
    if cfg.precision == "fp32" and cfg.optimizer == "adam":
        C = resolve_partition(net.layers, cfg.partition)
        bp_idx = [i for i in net.trainable_indices() if i + 1 > C]
        adam_state = fpnet.AdamState(net, indices=bp_idx)

    if metrics_out is not None:
        metrics_out.write(CSV_HEADER + "\n" + CSV_COLUMNS + "\n")
    history = []
    for epoch in range(cfg.epochs):
        timer = PhaseTimer()
        if cfg.precision == "fp32":
            train_loss = run_epoch_fp32(net, train, cfg, epoch, master, timer,
                                        adam_state=adam_state)
            b_bp, p_zero = 0, 0.0
        else:
            run_epoch_int8(net, train, cfg, epoch, master, timer)
            train_loss = float("nan")
            b_bp = schedule_value(cfg.b_bp_schedule, epoch)
            p_zero = schedule_value(cfg.p_zero_schedule, epoch)
        if eval_each_epoch:
            if cfg.precision == "fp32":
                test_acc, test_loss = evaluate_fp32(net, test)
            else:
                test_acc, test_loss = evaluate_int8(net, test)
        else:
            test_acc, test_loss = float("nan"), float("nan")
        m = EpochMetrics(epoch=epoch, lr=lr_at(cfg, epoch), b_bp=b_bp,
                         p_zero=p_zero, train_loss=train_loss,
                         test_loss=test_loss, test_acc=test_acc,
                         times=dict(timer.totals))
        history.append(m)
        if metrics_out is not None:
            metrics_out.write(m.csv_row() + "\n")
            metrics_out.flush()
        if log is not None:
            log(f"epoch {epoch}: test_acc={test_acc:.4f} test_loss={test_loss:.4f}")
    return net, history


def finetune_run(cfg: RunConfig, base_ckpt_path, train: Dataset, test: Dataset,
                 n: int = 1024, angle_deg: float = 45.0, subset_seed: int = 0,
                 metrics_out=None, log=None):
    """Fine-tune a checkpointed model on rotated n-sample subsets."""
    from .data import make_rotated_subset

    net = checkpoint.load(base_ckpt_path)
    rot_train = make_rotated_subset(train, n=n, angle_deg=angle_deg, seed=subset_seed)
    rot_test = make_rotated_subset(test, n=min(n, len(test)), angle_deg=angle_deg,
                                   seed=subset_seed + 1)
    net, history = train_run(cfg, rot_train, rot_test, net=net,
                             metrics_out=metrics_out, log=log)
    return net, history, rot_train, rot_test
