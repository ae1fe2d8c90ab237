"""Closed-form memory accounting for every training mode.

The model reports the static-allocation upper bound: every buffer that
the training mode needs at any point is counted for the whole run, with
no lifetime-based reuse.  Per-layer quantities are element counts; the
report converts to bytes (4 per FP32/int32 element, 1 per int8 element).

Category index sets, with C the partition point, T the trainable set:

  FP32:  params over T; activations over all layers; gradients over
         trainable l >= C+1; errors over all l >= C+1.  Adam adds twice
         the parameter count of the BP-trained layers.
  INT8:  the same four categories at 1 byte/element, plus int32 scratch:
         forward accumulators for every trainable layer, gradient
         accumulators for trainable l >= C+1, and error accumulators
         e_{l-1} for trainable l > C+1.

Flatten contributes a zero-element activation (it aliases its input);
all other layers, including ReLU and pooling, count their outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fpnet import LayerSpec

FP32_BYTES = 4
INT8_BYTES = 1
INT32_BYTES = 4


@dataclass(frozen=True)
class LayerShape:
    kind: str
    param_count: int  # element count of theta_l (0 for parameterless)
    act_count: int  # per-sample element count of a_l
    trainable: bool


@dataclass
class ShapeSpec:
    """Per-layer parameter and activation element counts."""

    layers: list[LayerShape]

    @property
    def L(self) -> int:
        return len(self.layers)

    @classmethod
    def from_layers(cls, layers: list[LayerSpec], input_hw: int = 28,
                    bias: bool = True) -> "ShapeSpec":
        """Derive counts from a layer list fed with (1, input_hw, input_hw)."""
        shapes = []
        c, h, w = 1, input_hw, input_hw
        dim = None  # set after flatten
        for spec in layers:
            if spec.kind == "conv":
                c = spec.out_ch
                shapes.append(LayerShape("conv", spec.param_count(bias), c * h * w, True))
            elif spec.kind == "maxpool":
                h //= 2
                w //= 2
                shapes.append(LayerShape("maxpool", 0, c * h * w, False))
            elif spec.kind == "relu":
                n = dim if dim is not None else c * h * w
                shapes.append(LayerShape("relu", 0, n, False))
            elif spec.kind == "flatten":
                dim = c * h * w
                shapes.append(LayerShape("flatten", 0, 0, False))
            elif spec.kind == "fc":
                dim = spec.out_dim
                shapes.append(LayerShape("fc", spec.param_count(bias), dim, True))
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
        return cls(shapes)


@dataclass
class MemoryReport:
    mode: str
    params: int = 0
    activations: int = 0
    grads: int = 0
    errors: int = 0
    int32_scratch: int = 0
    optimizer_state: int = 0

    @property
    def total(self) -> int:
        return (self.params + self.activations + self.grads + self.errors
                + self.int32_scratch + self.optimizer_state)

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "params": self.params,
            "activations": self.activations,
            "grads": self.grads,
            "errors": self.errors,
            "int32_scratch": self.int32_scratch,
            "optimizer_state": self.optimizer_state,
            "total": self.total,
        }


def _resolve_c(spec: ShapeSpec, mode) -> tuple[str, int]:
    if mode == "full_bp":
        return "full_bp", 0
    if mode == "full_zo":
        return "full_zo", spec.L
    if isinstance(mode, tuple) and mode[0] == "elastic":
        c = mode[1]
    elif isinstance(mode, int):
        c = mode
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not 0 <= c <= spec.L:
        raise ValueError(f"partition {c} out of range [0, {spec.L}]")
    return f"elastic(C={c})", c


def mem_fp32(spec: ShapeSpec, batch: int, mode, optimizer: str = "sgd") -> MemoryReport:
    """FP32 byte accounting; mode is "full_bp", "full_zo", or ("elastic", C)."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    name, c = _resolve_c(spec, mode)
    rep = MemoryReport(mode=name)
    for l, layer in enumerate(spec.layers, start=1):
        if layer.trainable:
            rep.params += layer.param_count * FP32_BYTES
            if l >= c + 1:
                rep.grads += layer.param_count * FP32_BYTES
        rep.activations += layer.act_count * batch * FP32_BYTES
        if l >= c + 1:
            rep.errors += layer.act_count * batch * FP32_BYTES
    if optimizer == "adam":
        state = sum(layer.param_count for l, layer in enumerate(spec.layers, start=1)
                    if layer.trainable and l >= c + 1)
        rep.optimizer_state = 2 * state * FP32_BYTES
    elif optimizer != "sgd":
        raise ValueError(f"unknown optimizer {optimizer!r}")
    return rep


def mem_int8(spec: ShapeSpec, batch: int, mode) -> MemoryReport:
    """INT8 byte accounting, including the int32 scratch buffers."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    name, c = _resolve_c(spec, mode)
    rep = MemoryReport(mode=name)
    prev_act = 0  # per-sample element count of a_{l-1}
    for l, layer in enumerate(spec.layers, start=1):
        if layer.trainable:
            rep.params += layer.param_count * INT8_BYTES
            rep.int32_scratch += layer.act_count * batch * INT32_BYTES
            if l >= c + 1:
                rep.grads += layer.param_count * INT8_BYTES
                rep.int32_scratch += layer.param_count * INT32_BYTES
            if l > c + 1:
                rep.int32_scratch += prev_act * batch * INT32_BYTES
        rep.activations += layer.act_count * batch * INT8_BYTES
        if l >= c + 1:
            rep.errors += layer.act_count * batch * INT8_BYTES
        if layer.act_count > 0:
            prev_act = layer.act_count
    return rep


def partition_sweep(spec: ShapeSpec, batch: int, precision: str = "fp32",
                    optimizer: str = "sgd") -> list[MemoryReport]:
    """MemoryReport for every C = 0..L; totals weakly decrease in C."""
    out = []
    for c in range(spec.L + 1):
        if precision == "fp32":
            out.append(mem_fp32(spec, batch, ("elastic", c), optimizer))
        elif precision == "int8":
            out.append(mem_int8(spec, batch, ("elastic", c)))
        else:
            raise ValueError(f"unknown precision {precision!r}")
    return out


def parse_shape_file(text: str) -> ShapeSpec:
    """Parse a shape-spec file: one layer per line, kind plus dims.

    Grammar (blank lines and #-comments ignored)::

        conv <in_ch> <out_ch>
        fc <in_dim> <out_dim>
        relu | maxpool | flatten
        input <hw>          # optional, default 28
        bias on|off         # optional, default on

    Counts are derived exactly as for the built-in layer lists.
    """
    from . import fpnet

    layers = []
    input_hw = 28
    bias = True
    for raw in text.splitlines():
        line = raw.split("#")[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0].lower()
        if kind == "input":
            input_hw = int(parts[1])
        elif kind == "bias":
            bias = parts[1].lower() in ("on", "true", "1")
        elif kind == "conv":
            layers.append(fpnet.conv(int(parts[1]), int(parts[2])))
        elif kind == "fc":
            layers.append(fpnet.fc(int(parts[1]), int(parts[2])))
        elif kind in ("relu", "maxpool", "flatten"):
            layers.append(LayerSpec(kind))
        else:
            raise ValueError(f"unknown layer kind {kind!r} in shape file")
    return ShapeSpec.from_layers(layers, input_hw=input_hw, bias=bias)
