import math
import pytest
import torch
from src.models.enums import Activation, NormMode
from src.utils.errors import NonFiniteError, ShapeMismatchError
from src.utils.tensorcore import (
    AdamState,
    BatchNormParams,
    adam_step,
    apply_activation,
    batchnorm,
    conv2d,
    conv3d,
    grad_check,
    mse_loss,
)


def _param(values, dtype=torch.float64):
    return torch.nn.Parameter(torch.tensor(values, dtype=dtype))


def test_conv2d_identity_kernel():
    x = torch.randn(3, 5, 6, dtype=torch.float64)
    kernel = torch.zeros(3, 3, 1, 1, dtype=torch.float64)
    for c in range(3):
        kernel[c, c] = 1.0
    assert torch.allclose(conv2d(x, kernel, torch.zeros(3, dtype=torch.float64)), x)


def test_conv2d_zero_padding_sums():
    x = torch.full((1, 4, 4), 2.0, dtype=torch.float64)
    out = conv2d(x, torch.ones(1, 1, 3, 3, dtype=torch.float64))
    assert out[0, 1, 1] == pytest.approx(18.0)
    assert out[0, 0, 0] == pytest.approx(8.0)
    assert out[0, 0, 1] == pytest.approx(12.0)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        conv2d(torch.zeros(2, 4, 4), torch.zeros(1, 3, 3, 3))


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ShapeMismatchError):
        conv2d(torch.zeros(1, 4, 4), torch.zeros(1, 1, 2, 2))


def test_conv3d_preserves_sequence_shape():
    seq = torch.randn(4, 3, 5, 5)
    out = conv3d(seq, torch.randn(2, 3, 3, 3, 3), torch.zeros(2))
    assert out.shape == (4, 2, 5, 5)


def test_activations_at_zero():
    zeros = torch.zeros(2, 3)
    assert torch.all(apply_activation(zeros, Activation.SIGMOID) == 0.5)
    assert torch.all(apply_activation(zeros, Activation.TANH) == 0.0)


def test_batchnorm_infer_identity_with_unit_statistics():
    x = torch.randn(2, 4, 4, dtype=torch.float64)
    params = BatchNormParams(
        scale=torch.ones(2, dtype=torch.float64),
        shift=torch.zeros(2, dtype=torch.float64),
        moving_mean=torch.zeros(2, dtype=torch.float64),
        moving_var=torch.ones(2, dtype=torch.float64),
    )
    out = batchnorm(x, params, NormMode.INFER, eps=1e-3)
    assert torch.allclose(out, x / math.sqrt(1.0 + 1e-3))


def test_batchnorm_train_on_constant_field_returns_shift():
    x = torch.full((2, 3, 3), 7.0, dtype=torch.float64)
    shift = torch.tensor([0.5, -1.0], dtype=torch.float64)
    params = BatchNormParams(torch.ones(2, dtype=torch.float64), shift,
                             torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64))
    out = batchnorm(x, params, NormMode.TRAIN)
    assert torch.allclose(out[0], torch.full((3, 3), 0.5, dtype=torch.float64))
    assert torch.allclose(out[1], torch.full((3, 3), -1.0, dtype=torch.float64))


def test_batchnorm_train_updates_moving_mean_keras_style():
    x = torch.full((1, 2, 2), 10.0, dtype=torch.float64)
    params = BatchNormParams(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64),
                             torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    batchnorm(x, params, NormMode.TRAIN, momentum=0.99)
    assert float(params.moving_mean[0]) == pytest.approx(0.1)


def test_mse_loss_values():
    x = torch.randn(3, 3)
    assert float(mse_loss(x, x)) == 0.0
    assert float(mse_loss(torch.tensor([0.0]), torch.tensor([2.0]))) == 4.0


def test_adam_zero_gradient_leaves_weights():
    w = _param([1.0, -2.0])
    state = AdamState([("w", w)], learning_rate=0.1)
    w.grad = torch.zeros_like(w)
    adam_step(state)
    assert torch.equal(w.detach(), torch.tensor([1.0, -2.0], dtype=torch.float64))
    assert state.step_count == 1


def test_adam_first_step_moves_by_learning_rate():
    w = _param([0.0, 0.0])
    state = AdamState([("w", w)], learning_rate=0.01)
    w.grad = torch.tensor([3.0, -0.5], dtype=torch.float64)
    adam_step(state)
    assert torch.allclose(w.detach(), torch.tensor([-0.01, 0.01], dtype=torch.float64), atol=1e-9)


def test_adam_matches_scalar_reference_trace():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    w = _param([1.5])
    state = AdamState([("w", w)], lr, b1, b2, eps)
    ref, m, v = 1.5, 0.0, 0.0
    for step in (1, 2):
        g = 2.0 * float(w)  # d/dw of w^2
        w.grad = torch.tensor([g], dtype=torch.float64)
        adam_step(state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat, v_hat = m / (1 - b1 ** step), v / (1 - b2 ** step)
        ref -= lr * m_hat / (math.sqrt(v_hat) + eps)
    assert float(w) == pytest.approx(ref, abs=1e-12)


def test_adam_rejects_nan_gradient_without_update():
    w = _param([1.0])
    state = AdamState([("w", w)])
    w.grad = torch.tensor([float("nan")], dtype=torch.float64)
    with pytest.raises(NonFiniteError):
        adam_step(state)
    assert float(w) == 1.0
    assert state.step_count == 0


def test_grad_check_linear_function_is_exact():
    w = _param([0.3, -1.2, 2.0])
    coeffs = torch.tensor([1.0, 2.0, -3.0], dtype=torch.float64)
    assert grad_check(lambda: (coeffs * w).sum(), [w]) < 1e-8


def test_grad_check_conv_tanh_mse():
    generator = torch.Generator().manual_seed(3)
    x = torch.randn(2, 5, 5, generator=generator, dtype=torch.float64)
    kernel = torch.nn.Parameter(torch.randn(2, 2, 3, 3, generator=generator, dtype=torch.float64) * 0.3)
    bias = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))
    target = torch.randn(2, 5, 5, generator=generator, dtype=torch.float64)
    fn = lambda: mse_loss(apply_activation(conv2d(x, kernel, bias), Activation.TANH), target)
    assert grad_check(fn, [kernel, bias]) < 1e-4


def test_grad_check_refuses_float32():
    w = torch.nn.Parameter(torch.ones(2))
    with pytest.raises(ValueError):
        grad_check(lambda: w.sum(), [w])
