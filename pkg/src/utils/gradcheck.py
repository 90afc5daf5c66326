"""Central finite-difference verification of analytic gradients."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional

import numpy as np

from src.models.layers import ParamLeaf
from src.utils.errors import GradCheckFailure
from src.utils.rng import named_rng

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_SAMPLE = 200
# relative errors are measured against max(|analytic|, |numeric|, SCALE_FLOOR)
SCALE_FLOOR = 1e-4


@dataclass
class LeafResult:
    name: str
    checked: int
    worst_index: tuple
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    leaves: List[LeafResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.leaves)

    @property
    def worst(self) -> Optional[LeafResult]:
        return max(self.leaves, key=lambda r: r.rel_error, default=None)

    def failures(self) -> List[LeafResult]:
        return [r for r in self.leaves if not r.passed]

    def lines(self) -> List[str]:
        out = []
        for r in self.leaves:
            status = 'ok' if r.passed else 'FAIL'
            out.append(f"{status} leaf={r.name} checked={r.checked} index={list(r.worst_index)} "
                       f"analytic={r.analytic:.10e} numeric={r.numeric:.10e} rel_err={r.rel_error:.3e}")
        return out


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), SCALE_FLOOR)


def grad_check(closure: Callable[[bool], float], params: Iterable[ParamLeaf], tolerance: float,
               step: float = DEFAULT_STEP, sample: int = DEFAULT_SAMPLE, seed: int = 0,
               raise_on_failure: bool = False) -> GradCheckReport:
    """Compare each leaf's analytic gradient with central differences.

    ``closure(backward)`` must return the scalar loss at the current parameter
    values and, when ``backward`` is true, leave fresh gradients in every
    leaf's ``grad``. Leaves larger than ``sample`` are checked on a seeded
    random subset of ``sample`` indices.
    """
    leaves = list(params)
    closure(True)
    analytic = {leaf.name: leaf.grad.copy() for leaf in leaves}
    rng = named_rng(seed, 'gradcheck')
    report = GradCheckReport(tolerance=tolerance)

    for leaf in leaves:
        flat = leaf.value.reshape(-1)
        if flat.size > sample:
            indices = np.sort(rng.choice(flat.size, size=sample, replace=False))
        else:
            indices = np.arange(flat.size)
        grad = analytic[leaf.name].reshape(-1)

        worst = None
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + step
            plus = closure(False)
            flat[idx] = original - step
            minus = closure(False)
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            err = relative_error(grad[idx], numeric)
            if worst is None or err > worst[3]:
                worst = (int(idx), float(grad[idx]), float(numeric), err)

        idx, a, num, err = worst
        report.leaves.append(LeafResult(
            name=leaf.name, checked=len(indices),
            worst_index=tuple(int(i) for i in np.unravel_index(idx, leaf.shape)),
            analytic=a, numeric=num, rel_error=err, passed=err <= tolerance))
        logger.debug(f"gradcheck {leaf.name}: worst rel_err={err:.3e}")

    if not report.passed:
        worst = report.worst
        message = (f"gradient check failed at tolerance {tolerance:g}: leaf {worst.name} "
                   f"index {list(worst.worst_index)} analytic={worst.analytic:.6e} "
                   f"numeric={worst.numeric:.6e} rel_err={worst.rel_error:.3e}")
        logger.warning(message)
        if raise_on_failure:
            raise GradCheckFailure(message, report)
    return report
