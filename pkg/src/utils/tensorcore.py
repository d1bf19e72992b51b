"""Tensor operations the networks are built from.

Thin, validated wrappers over torch: same-padded convolutions, gate activations,
spatial batch normalization, MSE, Adam and a finite-difference gradient checker.
Every op works on unbatched tensors; batch size is always 1 (one full grid per sample).
"""
import logging
import torch
import torch.nn.functional as F
from torch import nn
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple
from src.models.enums import Activation, NormMode, Precision
from src.utils.errors import NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

_DTYPES = {Precision.FLOAT32: torch.float32, Precision.FLOAT64: torch.float64}


def dtype_for(precision: Precision) -> torch.dtype:
    return _DTYPES[Precision(precision)]


def ensure_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return tensor


def _check_kernel(kernel: torch.Tensor, spatial_dims: int) -> int:
    k = kernel.shape[-1]
    if any(kernel.shape[-i] != k for i in range(1, spatial_dims)):
        raise ShapeMismatchError(f"kernel must be square in space, got {tuple(kernel.shape)}")
    if k % 2 == 0:
        raise ShapeMismatchError(f"kernel size must be odd for same padding, got {k}")
    return k


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Same-padded cross-correlation: [C_in,H,W] * [C_out,C_in,k,k] -> [C_out,H,W]"""
    if x.dim() != 3 or kernel.dim() != 4:
        raise ShapeMismatchError(f"conv2d expects [C,H,W] input and 4-D kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    if kernel.shape[1] != x.shape[0]:
        raise ShapeMismatchError(f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[0]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeMismatchError(f"bias shape {tuple(bias.shape)} does not match {kernel.shape[0]} output channels")
    k = _check_kernel(kernel, 2)
    return F.conv2d(x.unsqueeze(0), kernel, bias, padding=k // 2).squeeze(0)


def conv3d(sequence: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Same-padded (time, H, W) convolution over a sequence: [L,C_in,H,W] -> [L,C_out,H,W]"""
    if sequence.dim() != 4 or kernel.dim() != 5:
        raise ShapeMismatchError(f"conv3d expects [L,C,H,W] input and 5-D kernel, got {tuple(sequence.shape)} and {tuple(kernel.shape)}")
    if kernel.shape[1] != sequence.shape[1]:
        raise ShapeMismatchError(f"kernel expects {kernel.shape[1]} input channels, sequence has {sequence.shape[1]}")
    k = _check_kernel(kernel, 3)
    volume = sequence.permute(1, 0, 2, 3).unsqueeze(0)  # [1, C, L, H, W]
    out = F.conv3d(volume, kernel, bias, padding=k // 2)
    return out.squeeze(0).permute(1, 0, 2, 3)


def apply_activation(x: torch.Tensor, kind: Activation) -> torch.Tensor:
    if Activation(kind) is Activation.SIGMOID:
        return torch.sigmoid(x)
    return torch.tanh(x)


@dataclass
class BatchNormParams:
    scale: torch.Tensor  # trainable
    shift: torch.Tensor  # trainable
    moving_mean: torch.Tensor  # non-trainable
    moving_var: torch.Tensor  # non-trainable


def batchnorm(
    x: torch.Tensor,
    params: BatchNormParams,
    mode: NormMode,
    momentum: float = 0.99,
    eps: float = 1e-3,
) -> torch.Tensor:
    """Normalize a [C,H,W] field per channel.

    Train mode uses the spatial statistics of ``x`` and updates the moving statistics
    in place (moving = momentum*moving + (1-momentum)*batch). Infer mode uses the moving
    statistics only.
    """
    if eps <= 0:
        raise ValueError(f"batchnorm epsilon must be positive, got {eps}")
    if x.dim() != 3 or params.scale.shape != (x.shape[0],):
        raise ShapeMismatchError(f"batchnorm over {tuple(x.shape)} with {tuple(params.scale.shape)} channel parameters")
    out = F.batch_norm(
        x.unsqueeze(0),
        params.moving_mean,
        params.moving_var,
        params.scale,
        params.shift,
        training=NormMode(mode) is NormMode.TRAIN,
        momentum=1.0 - momentum,  # torch weights the new batch statistic
        eps=eps,
    )
    return out.squeeze(0)


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse_loss shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target)


class AdamState:
    """Adam moments and step counter for one weight set.

    Wraps ``torch.optim.Adam`` (bias-corrected, single-tensor implementation so that
    results do not depend on kernel fusion). ``step_count`` advances by exactly one per
    ``adam_step``.
    """

    def __init__(
        self,
        named_parameters: Iterable[Tuple[str, nn.Parameter]],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.names: List[str] = []
        params: List[nn.Parameter] = []
        for name, param in named_parameters:
            if param.requires_grad:
                self.names.append(name)
                params.append(param)
        self.parameters = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.optimizer = torch.optim.Adam(
            params, lr=learning_rate, betas=(beta1, beta2), eps=eps, foreach=False
        )

    def moments(self) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
        """First and second moments per parameter name; zeros before the first step"""
        result = {}
        for name, param in zip(self.names, self.parameters):
            state = self.optimizer.state.get(param, {})
            first = state.get("exp_avg", torch.zeros_like(param))
            second = state.get("exp_avg_sq", torch.zeros_like(param))
            result[name] = (first.detach(), second.detach())
        return result

    def restore(self, step_count: int, moments: Dict[str, Tuple[torch.Tensor, torch.Tensor]]) -> None:
        self.step_count = step_count
        if step_count == 0:
            return
        for name, param in zip(self.names, self.parameters):
            first, second = moments[name]
            self.optimizer.state[param] = {
                "step": torch.tensor(float(step_count)),
                "exp_avg": first.to(param.dtype).clone(),
                "exp_avg_sq": second.to(param.dtype).clone(),
            }

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=False)


def adam_step(state: AdamState) -> None:
    """Apply one Adam update in place to the parameters ``state`` was built over.

    Aborts without touching any weight if a gradient holds NaN/Inf.
    """
    for name, param in zip(state.names, state.parameters):
        if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
            raise NonFiniteError(f"gradient of '{name}' contains NaN or Inf at step {state.step_count + 1}")
    state.optimizer.step()
    state.step_count += 1


def grad_check(
    fn: Callable[[], torch.Tensor],
    parameters: Iterable[torch.Tensor],
    num_checks: int = 24,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` re-evaluates a scalar from the current parameter values. Entries are drawn
    from a seeded random subset across all parameters; every parameter must be float64.
    """
    params = [p for p in parameters if p.requires_grad]
    if not params:
        raise ValueError("grad_check needs at least one parameter requiring grad")
    if any(p.dtype != torch.float64 for p in params):
        raise ValueError("grad_check runs in 64-bit mode only")

    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    generator = torch.Generator().manual_seed(seed)
    if total <= num_checks:
        picks = torch.arange(total)
    else:
        picks = torch.randperm(total, generator=generator)[:num_checks]

    offsets = torch.tensor([0] + sizes).cumsum(0)
    worst = 0.0
    with torch.no_grad():
        for flat_index in picks.tolist():
            which = int(torch.searchsorted(offsets, torch.tensor(flat_index), right=True)) - 1
            local = flat_index - int(offsets[which])
            view = params[which].detach().view(-1)
            original = float(view[local])
            view[local] = original + step
            f_plus = float(fn())
            view[local] = original - step
            f_minus = float(fn())
            view[local] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = float(analytic[which].view(-1)[local])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)
    logger.debug(f"grad_check over {len(picks)} entries: max relative error {worst:.3e}")
    return worst
