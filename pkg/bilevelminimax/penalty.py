"""The penalty objective P = P1 + P2 - P3 and its proximal SCSC subproblems."""

import logging
from typing import Optional, Tuple

import numpy as np

from .optfom import SaddleProblem
from .problem import BilevelMinimaxProblem, GradientOracle
from .prox import SeparableSum

_LOGGER = logging.getLogger(__name__)


class PenaltyProblem:
    """The penalized saddle problem min_u max_v P1(u, v) + P2(u) - P3(v).

    u = (x1, y1, y2), v = (x2, z1, z2) and

        P1 = f1(x1, x2, y1, y2) + rho * (f~1(x1, y1, z2) - f~1(x1, z1, y2))
        P2 = f2(x1) + rho * f~2(y1) + rho * f~3(y2)
        P3 = f3(x2) + rho * f~2(z1) + rho * f~3(z2)
    """

    def __init__(
        self,
        base: BilevelMinimaxProblem,
        rho: float,
        oracle: Optional[GradientOracle] = None,
        L_override: Optional[float] = None,
    ) -> None:
        if not rho > 0:
            raise ValueError(f"rho={rho} must be positive")

        self.base = base
        self.layout = base.layout
        self.rho = float(rho)
        self.oracle = oracle if oracle is not None else base.oracle()

        if L_override is not None:
            self.L_grad_P1 = float(L_override)
        else:
            self.L_grad_P1 = base.L_grad_f1 + 2.0 * self.rho * base.L_grad_ftilde1
        if not self.L_grad_P1 > 0:
            raise ValueError(f"L_grad_P1={self.L_grad_P1} must be positive")
        self.dual_modulus = base.dual_modulus(self.rho)

        self.prox_primal = SeparableSum(
            [
                (base.prox_f2, 1.0),
                (base.prox_ftilde2, self.rho),
                (base.prox_ftilde3, self.rho),
            ]
        )
        self.prox_dual = SeparableSum(
            [
                (base.prox_f3, 1.0),
                (base.prox_ftilde2, self.rho),
                (base.prox_ftilde3, self.rho),
            ]
        )

    def __repr__(self) -> str:
        return f"{type(self).__name__}(rho={self.rho:g}, L_grad_P1={self.L_grad_P1:g})"

    @property
    def counter(self):
        return self.oracle.counter

    def grad_P1(self, u, v, exact: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """Return the gradient of P1 over the primal and the dual block.

        Costs one f1 call and two f~1 calls on the oracle; `exact` bypasses the
        oracle (no noise, no counting) for metric evaluations.
        """
        lay, rho = self.layout, self.rho
        x1, y1, y2 = lay.split_primal(u)
        x2, z1, z2 = lay.split_dual(v)

        if exact:
            grad_f1, grad_ft1 = self.base.grad_f1, self.base.grad_ftilde1
        else:
            grad_f1, grad_ft1 = self.oracle.grad_f1, self.oracle.grad_ftilde1

        fx1, fx2, fy1, fy2 = lay.split_f1(grad_f1(x1, x2, y1, y2))
        ax1, ay1, ay2 = lay.split_ftilde1(grad_ft1(x1, y1, z2))  # at (x1, y1, z2)
        bx1, by1, by2 = lay.split_ftilde1(grad_ft1(x1, z1, y2))  # at (x1, z1, y2)

        g_u = np.concatenate(
            [fx1 + rho * (ax1 - bx1), fy1 + rho * ay1, fy2 - rho * by2]
        )
        g_v = np.concatenate([fx2, -rho * by1, rho * ay2])
        return g_u, g_v

    def value_P1(self, u, v) -> float:
        x1, y1, y2 = self.layout.split_primal(u)
        x2, z1, z2 = self.layout.split_dual(v)
        base = self.base
        return base.eval_f1(x1, x2, y1, y2) + self.rho * (
            base.eval_ftilde1(x1, y1, z2) - base.eval_ftilde1(x1, z1, y2)
        )

    def value(self, u, v) -> float:
        """Return P(u, v) = P1 + P2 - P3."""
        p2 = self.prox_primal.value(u)
        p3 = self.prox_dual.value(v)
        return self.value_P1(u, v) + p2 - p3


class ScscSubproblem(SaddleProblem):
    """The proximal subproblem around (center_primal, center_dual).

    h(u, v) = P1(u, v) + rho1/2 |u - center_primal|^2 - rho2/2 |v - center_dual|^2
    with p = P2 and q = P3.
    """

    def __init__(
        self,
        penalty: PenaltyProblem,
        rho1: float,
        rho2: float,
        center_primal,
        center_dual,
        sigma_x: float,
        sigma_y: float,
        L_grad_hbar: float,
    ) -> None:
        super().__init__(
            penalty.prox_primal, penalty.prox_dual, sigma_x, sigma_y, L_grad_hbar
        )
        self.penalty = penalty
        self.rho1 = float(rho1)
        self.rho2 = float(rho2)
        self.center_primal = np.array(center_primal, dtype=float).reshape(-1)
        self.center_dual = np.array(center_dual, dtype=float).reshape(-1)

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(rho1={self.rho1:g}, rho2={self.rho2:g}, "
            f"sigma_x={self.sigma_x:g}, sigma_y={self.sigma_y:g})"
        )

    def grad(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        g_u, g_v = self.penalty.grad_P1(x, y)
        return (
            g_u + self.rho1 * (x - self.center_primal),
            g_v - self.rho2 * (y - self.center_dual),
        )

    def grad_exact(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        g_u, g_v = self.penalty.grad_P1(x, y, exact=True)
        return (
            g_u + self.rho1 * (x - self.center_primal),
            g_v - self.rho2 * (y - self.center_dual),
        )

    def value(self, x, y) -> float:
        du, dv = x - self.center_primal, y - self.center_dual
        return (
            self.penalty.value_P1(x, y)
            + 0.5 * self.rho1 * float(du @ du)
            - 0.5 * self.rho2 * float(dv @ dv)
        )


class ExactScscSubproblem(ScscSubproblem):
    """The same subproblem, evaluated without oracle noise or counting."""

    def grad(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        return self.grad_exact(x, y)


def assemble_penalty(
    problem: BilevelMinimaxProblem,
    rho: float,
    oracle: Optional[GradientOracle] = None,
    L_override: Optional[float] = None,
) -> PenaltyProblem:
    """Return the penalty reformulation of `problem` with parameter rho."""
    return PenaltyProblem(problem, rho, oracle, L_override)


def build_subproblem(
    penalty: PenaltyProblem,
    center_primal,
    center_dual,
    eps: float,
    D2: float,
    exact: bool = False,
) -> ScscSubproblem:
    """Return the proximal subproblem of one outer iteration."""
    if not eps > 0:
        raise ValueError(f"eps={eps} must be positive")
    if not D2 > 0:
        raise ValueError(f"D2={D2} must be positive")

    L = penalty.L_grad_P1
    rho1, rho2 = 2.0 * L, eps / (2.0 * D2)
    # h is (rho2 + dual_modulus)-strongly concave in v
    cls = ExactScscSubproblem if exact else ScscSubproblem
    return cls(
        penalty,
        rho1=rho1,
        rho2=rho2,
        center_primal=center_primal,
        center_dual=center_dual,
        sigma_x=L,
        sigma_y=rho2 + penalty.dual_modulus,
        L_grad_hbar=L + max(rho1, rho2),
    )
