"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from services.tensor import Tensor, default_dtype, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradCheckResult:
    max_relative_error: float
    worst_input: int
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckResult:
    """Compare the backward pass of `fn` against central differences.

    `fn` maps the input tensors to a scalar. Inputs may be arrays or tensors
    (for example module parameters captured by `fn`); each is perturbed one
    coordinate at a time with step `step * max(1, |x|)`. The relative error
    of a coordinate is |a - n| / max(|a|, |n|, 1e-3).

    Tensor inputs are promoted to float64 for the check and get their data,
    `requires_grad` and `grad` back afterwards.
    """
    tensors = [value if isinstance(value, Tensor) else Tensor(value) for value in inputs]
    saved = [(t.data, t.requires_grad, t.grad) for t in tensors]
    try:
        return _check(fn, tensors, tolerance, step)
    finally:
        for tensor, (data, requires_grad, grad) in zip(tensors, saved):
            tensor.data, tensor.requires_grad, tensor.grad = data, requires_grad, grad


def _check(fn: Callable[..., Tensor], tensors: list[Tensor], tolerance: float, step: float) -> GradCheckResult:
    with default_dtype(np.float64):
        for tensor in tensors:
            tensor.data = np.array(tensor.data, dtype=np.float64)
            tensor.requires_grad = True
            tensor.grad = None

        fn(*tensors).backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def evaluate() -> float:
            with no_grad():
                return fn(*tensors).item()

        worst = GradCheckResult(0.0, -1, (), 0.0, 0.0)
        for which, tensor in enumerate(tensors):
            original = tensor.data
            for index in np.ndindex(original.shape):
                h = step * max(1.0, abs(float(original[index])))
                shifted = original.copy()
                shifted[index] = original[index] + h
                tensor.data = shifted
                plus = evaluate()
                shifted = original.copy()
                shifted[index] = original[index] - h
                tensor.data = shifted
                minus = evaluate()
                tensor.data = original
                numeric = (plus - minus) / (2.0 * h)
                exact = float(analytic[which][index])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-3)
                if error > worst.max_relative_error or worst.worst_input < 0:
                    worst = GradCheckResult(error, which, tuple(int(i) for i in index), exact, numeric)

    level = logging.DEBUG if worst.max_relative_error < tolerance else logging.WARNING
    logger.log(
        level,
        f"gradcheck: max relative error {worst.max_relative_error:.3e} at input {worst.worst_input} "
        f"index {worst.worst_index} (analytic {worst.analytic:.6g}, numeric {worst.numeric:.6g})",
    )
    return worst
