"""Stationarity and feasibility metrics, plus the reference value-function solver."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .const import OPTFOM_MAX_GRAD_CALLS, REFERENCE_TOL
from .optfom import SaddleProblem, optfom
from .prox import ProxFunction, Zero

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class InnerObjective:
    """A smooth convex (sense="min") or concave (sense="max") objective."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    L_grad: float
    sense: str = "min"
    modulus: float = 0.0  # known strong convexity / concavity
    closed_form: Optional[Callable[[], float]] = None


@dataclass(frozen=True)
class ReferenceValue:
    value: float
    error_bound: float
    converged: bool
    argument: Optional[np.ndarray] = None

    def __float__(self) -> float:
        return self.value


class _RegularizedObjective(SaddleProblem):
    """min_x sign*phi(x) + mu/2 |x - c|^2 posed as a saddle with an empty y-block."""

    def __init__(self, objective, domain, mu, center) -> None:
        sigma = objective.modulus + mu
        super().__init__(
            domain, Zero(0), sigma, sigma, max(objective.L_grad + mu, sigma)
        )
        self._objective = objective
        self._sign = 1.0 if objective.sense == "min" else -1.0
        self._mu = mu
        self._center = center

    def grad(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        g = self._sign * np.asarray(self._objective.grad(x), dtype=float)
        return g + self._mu * (x - self._center), np.zeros(0)


def reference_value(
    objective: InnerObjective,
    domain: ProxFunction,
    tol: float = REFERENCE_TOL,
    max_grad_calls: int = OPTFOM_MAX_GRAD_CALLS,
) -> ReferenceValue:
    """Return the optimal value of `objective` over `domain` to absolute tolerance tol.

    Without a known modulus the objective is regularized by mu/2 |x - c|^2 with
    mu = tol / (2 D^2); the reported error bound adds the regularization bias
    mu D^2 / 2 and the certificate term cert * D.
    """
    if objective.sense not in ("min", "max"):
        raise ValueError(f"sense={objective.sense!r} must be 'min' or 'max'")
    if objective.closed_form is not None:
        return ReferenceValue(float(objective.closed_form()), 0.0, True)

    center = domain.center()
    diameter = domain.diameter()
    if not math.isfinite(diameter):
        raise ValueError(f"reference solve needs a bounded domain, got {domain!r}")
    if diameter == 0.0:
        return ReferenceValue(float(objective.value(center)), 0.0, True, center)

    mu = 0.0 if objective.modulus > 0 else tol / (2.0 * diameter**2)
    sub = _RegularizedObjective(objective, domain, mu, center)
    eps_bar = tol / (4.0 * diameter)

    result = optfom(eps_bar, center, np.zeros(0), sub, max_grad_calls=max_grad_calls)
    bound = 0.5 * mu * diameter**2 + result.certificate * diameter
    converged = bound <= tol and not result.diverged

    _LOGGER.debug(
        "reference_value: %s over %r, %s grads, bound=%.3e",
        objective.sense,
        domain,
        result.grad_calls,
        bound,
    )
    return ReferenceValue(
        float(objective.value(result.x)), bound, converged, result.x
    )


@dataclass
class ConstrainedKktReport:
    stationarity_xy: float
    stationarity_z1: float
    z1_infeasibility: float
    z1_complementarity: float
    y1_suboptimality: float
    y1_infeasibility: float
    y1_complementarity: float
    multipliers: Tuple[np.ndarray, np.ndarray]  # (lambda, lambda_bar)
    warnings: List[str] = field(default_factory=list)

    @property
    def max_entry(self) -> float:
        return max(
            self.stationarity_xy,
            self.stationarity_z1,
            self.z1_infeasibility,
            self.z1_complementarity,
            self.y1_suboptimality,
            self.y1_infeasibility,
            self.y1_complementarity,
        )

    def as_dict(self) -> Dict:
        result = asdict(self)
        lam, lam_bar = self.multipliers
        result["multipliers"] = {
            "lambda": np.asarray(lam).tolist(),
            "lambda_bar": np.asarray(lam_bar).tolist(),
        }
        return result


@dataclass
class KktReport:
    primal_block_residual: float
    x2_residual: float
    z1_residual: float
    z2_residual: float
    dual_block_residual: float
    feasibility_gap: float
    rho_used: float
    constrained: Optional[ConstrainedKktReport] = None

    @property
    def max_residual(self) -> float:
        """Return the largest of the stationarity residuals."""
        return max(
            self.primal_block_residual,
            self.x2_residual,
            self.z1_residual,
            self.z2_residual,
        )

    def as_dict(self) -> Dict:
        result = {k: v for k, v in asdict(self).items() if k != "constrained"}
        result["max_residual"] = self.max_residual
        result["constrained"] = (
            self.constrained.as_dict() if self.constrained is not None else None
        )
        return result


def pd_stationarity(penalty, primal, dual) -> Tuple[float, float]:
    """Return the primal and dual block residuals of the penalty saddle."""
    g_u, g_v = penalty.grad_P1(primal, dual, exact=True)
    return (
        penalty.prox_primal.normal_cone_distance(primal, g_u),
        penalty.prox_dual.normal_cone_distance(dual, -g_v),
    )


def kkt_report(
    problem, penalty, primal, dual, rho: Optional[float] = None
) -> KktReport:
    """Return every stationarity residual of (primal, dual) plus the lower gap.

    rho defaults to the penalty parameter; rho = 0 is accepted and zeroes the
    z-block residuals.
    """
    rho = penalty.rho if rho is None else float(rho)
    lay = problem.layout
    x1, y1, y2 = lay.split_primal(primal)
    x2, z1, z2 = lay.split_dual(dual)

    fx1, fx2, fy1, fy2 = lay.split_f1(problem.grad_f1(x1, x2, y1, y2))
    ax1, ay1, ay2 = lay.split_ftilde1(problem.grad_ftilde1(x1, y1, z2))
    bx1, by1, by2 = lay.split_ftilde1(problem.grad_ftilde1(x1, z1, y2))

    g_u = np.concatenate([fx1 + rho * (ax1 - bx1), fy1 + rho * ay1, fy2 - rho * by2])
    g_v = np.concatenate([fx2, -rho * by1, rho * ay2])

    constrained = None
    if problem.constrained is not None:
        constrained = problem.constrained.kkt(x1, y1, z1, y2, z2, rho)

    return KktReport(
        primal_block_residual=problem.primal_domain.normal_cone_distance(primal, g_u),
        x2_residual=problem.prox_f3.normal_cone_distance(x2, -fx2),
        z1_residual=rho * problem.prox_ftilde2.normal_cone_distance(z1, by1),
        z2_residual=rho * problem.prox_ftilde3.normal_cone_distance(z2, -ay2),
        dual_block_residual=problem.dual_domain.normal_cone_distance(dual, -g_v),
        feasibility_gap=problem.lower_gap(x1, y1, y2),
        rho_used=rho,
        constrained=constrained,
    )


def nearly_kkt_distance(candidate_primal, certified_primal) -> float:
    """Return the distance between a candidate primal block and a certified one."""
    a = np.asarray(candidate_primal, dtype=float).reshape(-1)
    b = np.asarray(certified_primal, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"primal blocks differ in length: {a.size} != {b.size}")
    return float(np.linalg.norm(a - b))


def max_dual_penalty(penalty, primal) -> float:
    """Return max over (x2, z1, z2) of P(primal, .) = max_x2 f + rho * (p - d)."""
    base = penalty.base
    x1, y1, y2 = base.layout.split_primal(primal)
    return base.upper_max(x1, y1, y2) + penalty.rho * base.lower_gap(x1, y1, y2)
