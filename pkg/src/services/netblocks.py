"""ConvLSTM building blocks and the PredNet / DANet architectures.

A network is a stack of ConvLSTM layers (optional batchnorm after every layer but the last)
followed by a 3x3x3 convolution over (time, H, W) mapping hidden channels to outputs.
Gate order inside every ConvLSTM kernel is (i, f, g, o).
"""
import logging
import math
import torch
from torch import nn
from dataclasses import dataclass
from typing import List, Optional, Tuple
from src.models.enums import Activation, NormMode, Precision
from src.models.schemas import NetworkSpec
from src.utils.errors import ShapeMismatchError
from src.utils.tensorcore import (
    BatchNormParams,
    apply_activation,
    batchnorm,
    conv2d,
    conv3d,
    dtype_for,
)

logger = logging.getLogger(__name__)

GATE_ORDER = ("i", "f", "g", "o")


def convlstm_parameter_count(in_channels: int, hidden_channels: int, kernel_size: int) -> int:
    return 4 * hidden_channels * (in_channels + hidden_channels) * kernel_size ** 2 + 4 * hidden_channels


def head_parameter_count(hidden_channels: int, out_channels: int, kernel_size: int = 3) -> int:
    return hidden_channels * out_channels * kernel_size ** 3 + out_channels


@dataclass(frozen=True)
class ParamCount:
    total: int
    trainable: int
    non_trainable: int


class ConvLSTMCell(nn.Module):
    """One ConvLSTM layer without peephole terms"""

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ShapeMismatchError(f"ConvLSTM kernel size must be odd, got {kernel_size}")
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        k = kernel_size
        self.input_kernel = nn.Parameter(torch.zeros(4 * hidden_channels, in_channels, k, k, dtype=dtype))
        self.recurrent_kernel = nn.Parameter(torch.zeros(4 * hidden_channels, hidden_channels, k, k, dtype=dtype))
        self.gate_bias = nn.Parameter(torch.zeros(4 * hidden_channels, dtype=dtype))

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def reset_parameters(self, generator: torch.Generator) -> None:
        # uniform fan-in over the concatenated [x, h] receptive field
        bound = 1.0 / math.sqrt((self.in_channels + self.hidden_channels) * self.kernel_size ** 2)
        with torch.no_grad():
            self.input_kernel.uniform_(-bound, bound, generator=generator)
            self.recurrent_kernel.uniform_(-bound, bound, generator=generator)
            self.gate_bias.zero_()
            hid = self.hidden_channels
            self.gate_bias[hid:2 * hid] = 1.0  # forget gate

    def init_state(self, height: int, width: int) -> Tuple[torch.Tensor, torch.Tensor]:
        shape = (self.hidden_channels, height, width)
        dtype = self.input_kernel.dtype
        return torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype)


def convlstm_step(
    cell: ConvLSTMCell,
    x: torch.Tensor,
    h: torch.Tensor,
    c: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Advance one ConvLSTM layer by one time step; returns (h', c')"""
    if x.dim() != 3 or x.shape[0] != cell.in_channels:
        raise ShapeMismatchError(f"ConvLSTM input must be [{cell.in_channels},H,W], got {tuple(x.shape)}")
    expected = (cell.hidden_channels,) + tuple(x.shape[1:])
    if tuple(h.shape) != expected or tuple(c.shape) != expected:
        raise ShapeMismatchError(f"ConvLSTM state must be {expected}, got h={tuple(h.shape)} c={tuple(c.shape)}")

    gates = conv2d(x, cell.input_kernel, cell.gate_bias) + conv2d(h, cell.recurrent_kernel)
    i, f, g, o = torch.chunk(gates, 4, dim=0)
    i = apply_activation(i, Activation.SIGMOID)
    f = apply_activation(f, Activation.SIGMOID)
    g = apply_activation(g, Activation.TANH)
    o = apply_activation(o, Activation.SIGMOID)
    c_next = f * c + i * g
    h_next = o * apply_activation(c_next, Activation.TANH)
    return h_next, c_next


class SpatialBatchNorm(nn.Module):
    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-3, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(channels, dtype=dtype))
        self.shift = nn.Parameter(torch.zeros(channels, dtype=dtype))
        self.register_buffer("moving_mean", torch.zeros(channels, dtype=dtype))
        self.register_buffer("moving_var", torch.ones(channels, dtype=dtype))

    @property
    def params(self) -> BatchNormParams:
        return BatchNormParams(self.scale, self.shift, self.moving_mean, self.moving_var)

    def forward(self, x: torch.Tensor, mode: NormMode) -> torch.Tensor:
        return batchnorm(x, self.params, mode, momentum=self.momentum, eps=self.eps)


class Conv3dHead(nn.Module):
    def __init__(self, hidden_channels: int, out_channels: int, kernel_size: int = 3, dtype: torch.dtype = torch.float32):
        super().__init__()
        k = kernel_size
        self.kernel = nn.Parameter(torch.zeros(out_channels, hidden_channels, k, k, k, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=dtype))

    def reset_parameters(self, generator: torch.Generator) -> None:
        fan_in = self.kernel.shape[1] * self.kernel.shape[2] ** 3
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            self.kernel.uniform_(-bound, bound, generator=generator)
            self.bias.zero_()

    def forward(self, hidden_sequence: torch.Tensor) -> torch.Tensor:
        return conv3d(hidden_sequence, self.kernel, self.bias)


class DDNetwork(nn.Module):
    """ConvLSTM stack + 3-D convolution head, configured by a NetworkSpec.

    Sub-modules are named ``convlstm_<n>``, ``batchnorm_<n>`` and ``conv3d`` so parameter
    names in checkpoints read like ``convlstm_1.input_kernel``.
    """

    def __init__(self, spec: NetworkSpec, precision: Precision = Precision.FLOAT32):
        super().__init__()
        self.spec = spec
        self.precision = Precision(precision)
        dtype = dtype_for(self.precision)
        self.layer_names: List[str] = []
        n_layers = len(spec.kernel_sizes)
        in_channels = spec.in_channels
        for index, k in enumerate(spec.kernel_sizes, start=1):
            name = f"convlstm_{index}"
            self.add_module(name, ConvLSTMCell(in_channels, spec.hidden_channels, k, dtype=dtype))
            self.layer_names.append(name)
            if spec.batchnorm and index < n_layers:
                bn_name = f"batchnorm_{index}"
                self.add_module(bn_name, SpatialBatchNorm(spec.hidden_channels, spec.bn_momentum, spec.bn_eps, dtype=dtype))
                self.layer_names.append(bn_name)
            in_channels = spec.hidden_channels
        self.add_module("conv3d", Conv3dHead(spec.hidden_channels, spec.out_channels, spec.head_kernel, dtype=dtype))
        self.layer_names.append("conv3d")

    @property
    def dtype(self) -> torch.dtype:
        return dtype_for(self.precision)

    def cells(self) -> List[ConvLSTMCell]:
        return [m for m in self.children() if isinstance(m, ConvLSTMCell)]

    def norm_after(self, layer_index: int) -> Optional[SpatialBatchNorm]:
        return getattr(self, f"batchnorm_{layer_index}", None)

    def reset_parameters(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        for cell in self.cells():
            cell.reset_parameters(generator)
        self.conv3d.reset_parameters(generator)

    def forward(self, sequence: torch.Tensor, mode: NormMode = NormMode.INFER) -> torch.Tensor:
        return forward_net(self, sequence, mode)


def forward_net(network: DDNetwork, sequence: torch.Tensor, mode: NormMode = NormMode.INFER) -> torch.Tensor:
    """
    Run the network over an input sequence with fresh zero states.

    Args:
        network: PredNet or DANet
        sequence: [L, C_in, H, W]
        mode: batchnorm mode; TRAIN updates the moving statistics

    Returns:
        [L, C_out, H, W], one output per input step
    """
    spec = network.spec
    if sequence.dim() != 4 or sequence.shape[1] != spec.in_channels:
        raise ShapeMismatchError(
            f"{spec.name} expects [L,{spec.in_channels},H,W] input, got {tuple(sequence.shape)}"
        )
    if sequence.shape[0] < 1:
        raise ShapeMismatchError(f"{spec.name} needs at least one input step")
    height, width = int(sequence.shape[2]), int(sequence.shape[3])

    layer_input = list(sequence.to(network.dtype).unbind(0))
    for index, cell in enumerate(network.cells(), start=1):
        h, c = cell.init_state(height, width)
        norm = network.norm_after(index)
        outputs = []
        for x in layer_input:
            h, c = convlstm_step(cell, x, h, c)
            # the recurrence carries the raw h; only the layer output is normalized
            outputs.append(norm(h, mode) if norm is not None else h)
        layer_input = outputs
    return network.conv3d(torch.stack(layer_input, dim=0))


def _build(spec: NetworkSpec, seed: int, precision: Precision) -> DDNetwork:
    network = DDNetwork(spec, precision)
    network.reset_parameters(seed)
    counts = count_params(network)
    logger.info(
        f"Built {spec.name}: hidden={spec.hidden_channels} kernels={spec.kernel_sizes} "
        f"total={counts.total:,} trainable={counts.trainable:,}"
    )
    return network


def build_prednet(spec: NetworkSpec, seed: int = 0, precision: Precision = Precision.FLOAT32) -> DDNetwork:
    if spec.out_channels != 2:
        raise ShapeMismatchError(f"PredNet emits [pm25, aod550]; spec has {spec.out_channels} outputs")
    return _build(spec, seed, precision)


def build_danet(spec: NetworkSpec, seed: int = 0, precision: Precision = Precision.FLOAT32) -> DDNetwork:
    if (spec.in_channels, spec.out_channels) != (2, 1):
        raise ShapeMismatchError(
            f"DANet maps [aod_forecast, discrepancy] to one error channel; spec is {spec.in_channels}->{spec.out_channels}"
        )
    return _build(spec, seed, precision)


def count_params(network: nn.Module) -> ParamCount:
    trainable = sum(p.numel() for p in network.parameters() if p.requires_grad)
    frozen = sum(p.numel() for p in network.parameters() if not p.requires_grad)
    buffers = sum(b.numel() for b in network.buffers())
    return ParamCount(total=trainable + frozen + buffers, trainable=trainable, non_trainable=frozen + buffers)


def layer_param_counts(network: DDNetwork) -> List[Tuple[str, int]]:
    """(layer name, parameter count) in layer order, matching a Keras-style summary table"""
    rows = []
    for name in network.layer_names:
        module = getattr(network, name)
        count = sum(p.numel() for p in module.parameters()) + sum(b.numel() for b in module.buffers())
        rows.append((name, count))
    return rows


def expected_param_counts(spec: NetworkSpec) -> ParamCount:
    """Closed-form parameter count for a spec, independent of any built network"""
    trainable = 0
    non_trainable = 0
    in_channels = spec.in_channels
    n_layers = len(spec.kernel_sizes)
    for index, k in enumerate(spec.kernel_sizes, start=1):
        trainable += convlstm_parameter_count(in_channels, spec.hidden_channels, k)
        if spec.batchnorm and index < n_layers:
            trainable += 2 * spec.hidden_channels
            non_trainable += 2 * spec.hidden_channels
        in_channels = spec.hidden_channels
    trainable += head_parameter_count(spec.hidden_channels, spec.out_channels, spec.head_kernel)
    return ParamCount(total=trainable + non_trainable, trainable=trainable, non_trainable=non_trainable)
