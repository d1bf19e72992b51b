"""Architecture and gradient oracles run by the ``verify`` command."""
import logging
import pandas as pd
import torch
from typing import Callable, Dict, List, Tuple
from src.models.enums import Activation, NormMode, Precision
from src.models.schemas import NetworkSpec
from src.services.netblocks import (
    ConvLSTMCell,
    SpatialBatchNorm,
    build_danet,
    build_prednet,
    convlstm_step,
    count_params,
    forward_net,
    layer_param_counts,
)
from src.utils.errors import VerificationError
from src.utils.tensorcore import apply_activation, conv2d, grad_check, mse_loss

logger = logging.getLogger(__name__)

REFERENCE_PREDNET_LAYERS = [903_424, 256, 819_456, 256, 295_168, 256, 33_024, 3_458]
REFERENCE_PREDNET_TOTALS = (2_055_298, 2_054_914, 384)
REFERENCE_DANET_LAYERS = [422_656, 256, 295_168, 256, 33_024, 1_729]
REFERENCE_DANET_TOTALS = (753_089, 752_833, 256)

GRAD_TOLERANCE = 1e-4


def architecture_report() -> pd.DataFrame:
    """Per-layer and total parameter counts of the reference networks against the reference values"""
    rows = []
    checks = [
        ("prednet", build_prednet(NetworkSpec.reference_prednet()), REFERENCE_PREDNET_LAYERS, REFERENCE_PREDNET_TOTALS),
        ("danet", build_danet(NetworkSpec.reference_danet()), REFERENCE_DANET_LAYERS, REFERENCE_DANET_TOTALS),
    ]
    for name, network, layers, totals in checks:
        for (layer, count), expected in zip(layer_param_counts(network), layers):
            rows.append({"network": name, "item": layer, "actual": count, "expected": expected})
        counts = count_params(network)
        for item, count, expected in zip(("total", "trainable", "non_trainable"), (counts.total, counts.trainable, counts.non_trainable), totals):
            rows.append({"network": name, "item": item, "actual": count, "expected": expected})
    frame = pd.DataFrame(rows, columns=["network", "item", "actual", "expected"])
    frame["ok"] = frame["actual"] == frame["expected"]
    return frame


def _conv2d_case(generator: torch.Generator) -> Tuple[Callable[[], torch.Tensor], List[torch.Tensor]]:
    x = torch.randn(3, 6, 6, generator=generator, dtype=torch.float64)
    kernel = torch.randn(2, 3, 3, 3, generator=generator, dtype=torch.float64, requires_grad=True)
    bias = torch.randn(2, generator=generator, dtype=torch.float64, requires_grad=True)
    target = torch.randn(2, 6, 6, generator=generator, dtype=torch.float64)
    return lambda: mse_loss(apply_activation(conv2d(x, kernel, bias), Activation.TANH), target), [kernel, bias]


def _batchnorm_case(generator: torch.Generator) -> Tuple[Callable[[], torch.Tensor], List[torch.Tensor]]:
    norm = SpatialBatchNorm(3, dtype=torch.float64)
    with torch.no_grad():
        norm.scale.copy_(torch.rand(3, generator=generator, dtype=torch.float64) + 0.5)
        norm.shift.copy_(torch.randn(3, generator=generator, dtype=torch.float64))
    x = torch.randn(3, 5, 5, generator=generator, dtype=torch.float64)
    target = torch.randn(3, 5, 5, generator=generator, dtype=torch.float64)
    return lambda: mse_loss(norm(x, NormMode.TRAIN), target), list(norm.parameters())


def _convlstm_case(generator: torch.Generator) -> Tuple[Callable[[], torch.Tensor], List[torch.Tensor]]:
    cell = ConvLSTMCell(2, 3, 3, dtype=torch.float64)
    cell.reset_parameters(generator)
    x = torch.randn(2, 5, 5, generator=generator, dtype=torch.float64)
    h = torch.randn(3, 5, 5, generator=generator, dtype=torch.float64)
    c = torch.randn(3, 5, 5, generator=generator, dtype=torch.float64)

    def fn() -> torch.Tensor:
        h_next, c_next = convlstm_step(cell, x, h, c)
        return (h_next ** 2).sum() + (c_next ** 2).sum()
    return fn, list(cell.parameters())


def _prednet_case(generator: torch.Generator) -> Tuple[Callable[[], torch.Tensor], List[torch.Tensor]]:
    spec = NetworkSpec.desk_prednet(hidden=4)
    network = build_prednet(spec, seed=0, precision=Precision.FLOAT64)
    x = torch.randn(2, spec.in_channels, 6, 6, generator=generator, dtype=torch.float64)
    target = torch.randn(spec.out_channels, 6, 6, generator=generator, dtype=torch.float64)
    return lambda: mse_loss(forward_net(network, x, NormMode.INFER)[-1], target), list(network.parameters())


GRADIENT_CASES: Dict[str, Callable[[torch.Generator], Tuple[Callable[[], torch.Tensor], List[torch.Tensor]]]] = {
    "conv2d": _conv2d_case,
    "batchnorm": _batchnorm_case,
    "convlstm_cell": _convlstm_case,
    "prednet_hidden4": _prednet_case,
}


def gradient_report(seed: int = 0, num_checks: int = 24) -> pd.DataFrame:
    rows = []
    for name, build in GRADIENT_CASES.items():
        fn, parameters = build(torch.Generator().manual_seed(seed))
        error = grad_check(fn, parameters, num_checks=num_checks, seed=seed)
        rows.append({"case": name, "max_rel_error": error, "tolerance": GRAD_TOLERANCE, "ok": error <= GRAD_TOLERANCE})
        logger.info(f"grad_check {name}: max relative error {error:.3e}")
    return pd.DataFrame(rows, columns=["case", "max_rel_error", "tolerance", "ok"])


def run_verification(seed: int = 0) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Both oracles; raises VerificationError listing every failed row"""
    architecture = architecture_report()
    gradients = gradient_report(seed)
    failures = [f"{r.network}.{r.item}: {r.actual} != {r.expected}" for r in architecture.itertuples() if not r.ok]
    failures += [f"grad_check {r.case}: {r.max_rel_error:.3e} > {r.tolerance:.0e}" for r in gradients.itertuples() if not r.ok]
    if failures:
        raise VerificationError("; ".join(failures))
    return architecture, gradients
