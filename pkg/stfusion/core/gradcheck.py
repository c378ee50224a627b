"""
Central finite-difference check of autodiff gradients.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel

from stfusion.core.entities import ContractError, DomainError, NumericError
from stfusion.core.tensor import Tensor, backward, debug_mode, no_grad

DEFAULT_STEP = 1e-5
KINK_TOLERANCE = 1e-2
ERROR_FLOOR = 1e-5


class GradCheckReport(BaseModel):
    name: str = "grad_check"
    rtol: float
    max_rel_error: float = 0.0
    worst: str | None = None
    checked: int = 0
    skipped_kinks: list[str] = []
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error <= self.rtol

    def row(self) -> list:
        status = "pass" if self.passed else "FAIL"
        return [self.name, status, f"{self.max_rel_error:.2e}", self.rtol, self.checked, len(self.skipped_kinks), self.failure or ""]


REPORT_HEADERS = ["case", "status", "max rel err", "rtol", "checked", "kinks", "failure"]


def _scalar(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    with no_grad():
        return f(*inputs).item()


def _coordinates(size: int, max_coords: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    rtol: float = 1e-4,
    step: float = DEFAULT_STEP,
    max_coords: int | None = None,
    seed: int = 0,
    name: str = "grad_check",
) -> GradCheckReport:
    """
    Compare d f(*inputs) / d inputs from backward() with central differences.

    Coordinates where the forward and backward one-sided differences disagree are treated
    as non-differentiable points (|x| at 0, relu at 0, sort ties) and skipped. At most
    max_coords coordinates per input are sampled, seeded.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    report = GradCheckReport(name=name, rtol=rtol)
    for x in inputs:
        if not x.requires_grad:
            raise ContractError(f"{name}: every checked input needs requires_grad=True")
        if x.dtype != np.float64:
            logger.warning(f"{name}: checking a {x.dtype} input, finite differences will be noisy")
        x.zero_grad()
    try:
        with debug_mode(True):
            loss = f(*inputs)
            if loss.size != 1:
                raise ContractError(f"{name}: f must return a scalar, got shape {loss.shape}")
            backward(loss)
            base = loss.item()
    except (NumericError, DomainError) as e:
        source = getattr(e, "source", None) or type(e).__name__
        logger.error(f"{name}: non-finite intermediate in {source}: {e}")
        report.failure = f"{source}: {e}"
        return report

    rng = np.random.default_rng(seed)
    for index, x in enumerate(inputs):
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        x.data = np.ascontiguousarray(x.data)
        flat = x.data.reshape(-1)
        for coord in _coordinates(flat.size, max_coords, rng):
            original = flat[coord]
            flat[coord] = original + step
            plus = _scalar(f, inputs)
            flat[coord] = original - step
            minus = _scalar(f, inputs)
            flat[coord] = original
            central = (plus - minus) / (2 * step)
            forward_diff = (plus - base) / step
            backward_diff = (base - minus) / step
            where = f"input {index}[{np.unravel_index(coord, x.shape)}]"
            if abs(forward_diff - backward_diff) > KINK_TOLERANCE * max(1.0, abs(central)):
                report.skipped_kinks.append(where)
                continue
            a = float(analytic.reshape(-1)[coord])
            error = abs(a - central) / max(abs(a), abs(central), ERROR_FLOOR)
            report.checked += 1
            if error > report.max_rel_error:
                report.max_rel_error = error
                report.worst = f"{where}: autodiff {a:.6e} vs numeric {central:.6e}"
    if report.skipped_kinks:
        logger.debug(f"{name}: skipped {len(report.skipped_kinks)} non-differentiable coordinates")
    if not report.passed:
        logger.warning(f"{name}: max relative error {report.max_rel_error:.3e} > {rtol} at {report.worst}")
    return report
