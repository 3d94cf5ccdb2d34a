"""
Finite-difference gradient checking
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from autograd.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

MAX_ENTRIES = 1000


@dataclass
class GradCheckReport:
    tolerance: float
    per_parameter: Dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return 0.0 if scale == 0.0 else float(diff / scale)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """
    Compare tape gradients of `loss_fn()` against central differences.

    `loss_fn` must rebuild the graph from `params` on every call. Cost is
    two forwards per parameter entry, capped at MAX_ENTRIES entries.
    Results are keyed by name; repeated or missing names fall back to the index.
    """
    entries = sum(p.data.size for p in params)
    if entries > MAX_ENTRIES:
        raise ValueError(f"grad_check over {entries} entries; the limit is {MAX_ENTRIES}")
    report = GradCheckReport(tolerance=tolerance)
    if not params:
        return report

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    for index, p in enumerate(params):
        analytic = p.grad_or_zeros().copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = loss_fn().item()
            flat[i] = original - step
            minus = loss_fn().item()
            flat[i] = original
            numeric_flat[i] = (plus - minus) / (2.0 * step)
        key = p.name if p.name and p.name not in report.per_parameter else f"{p.name or 'param'}#{index}"
        report.per_parameter[key] = relative_error(analytic, numeric)

    logger.debug(f"grad_check max relative error {report.max_rel_error:.3e} over {len(params)} params")
    return report
