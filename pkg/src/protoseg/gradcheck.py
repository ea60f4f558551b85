"""Finite-difference verification of backpropagated gradients.

`gradient_check` compares the analytic gradient of a scalar-valued function
against central differences, elementwise. For large parameter sets the check
can subsample a fixed number of elements per input (seeded, reproducible)
instead of perturbing every coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolationError


@dataclass
class GradientReport:
    """Outcome of one finite-difference comparison."""

    passed: bool
    max_rel_error: float
    worst_input: str
    worst_index: tuple
    checked_elements: int
    per_input: dict[str, float] = field(default_factory=dict)

    def __str__(self):
        status = "OK" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_error:.3e} "
            f"at {self.worst_input}{list(self.worst_index)} "
            f"({self.checked_elements} elements)"
        )


def _rel_err(analytic: float, fd: float) -> float:
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)


def gradient_check(
    fn,
    inputs,
    step: float = 1e-5,
    tolerance: float = 1e-3,
    names=None,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradientReport:
    """Compare fn's backpropagated gradients with central differences.

    `fn` takes the given Tensors and returns a scalar Tensor. Inputs must be
    float64: float32 rounding swamps an O(step**2) difference scheme. When
    `max_elements` is set, at most that many coordinates per input are
    perturbed, chosen by `rng` (default: fresh seeded generator).
    """
    inputs = list(inputs)
    if names is None:
        names = [f"input{i}" for i in range(len(inputs))]
    if len(names) != len(inputs):
        raise ContractViolationError("gradient_check: names and inputs length mismatch")
    for name, t in zip(names, inputs):
        if not isinstance(t, Tensor):
            raise ContractViolationError(f"gradient_check: {name} must be a Tensor")
        if t.data.dtype != np.float64:
            raise ContractViolationError(
                f"gradient_check: {name} must be float64, got {t.data.dtype}"
            )
        t.requires_grad = True
        t.zero_grad()

    out = fn(*inputs)
    if out.size != 1:
        raise ContractViolationError(f"gradient_check: fn must return a scalar, got {out.shape}")
    out.backward()

    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    worst_input = names[0] if names else ""
    worst_index: tuple = ()
    checked = 0
    per_input: dict[str, float] = {}

    for name, t in zip(names, inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat_indices = np.arange(t.size)
        if max_elements is not None and t.size > max_elements:
            flat_indices = rng.choice(t.size, size=max_elements, replace=False)
        input_worst = 0.0
        for flat in flat_indices:
            idx = np.unravel_index(flat, t.shape) if t.ndim else ()
            orig = t.data[idx]
            t.data[idx] = orig + step
            f_plus = float(fn(*inputs).data)
            t.data[idx] = orig - step
            f_minus = float(fn(*inputs).data)
            t.data[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = _rel_err(float(analytic[idx]), fd)
            checked += 1
            if err > input_worst:
                input_worst = err
            if err > worst:
                worst = err
                worst_input = name
                worst_index = idx
        per_input[name] = input_worst

    return GradientReport(
        passed=worst <= tolerance,
        max_rel_error=worst,
        worst_input=worst_input,
        worst_index=worst_index,
        checked_elements=checked,
        per_input=per_input,
    )
