"""Bilevel problems with an inequality-constrained convex lower level.

The lower level  min_{y1 in Y1} fbar(x1, y1)  s.t.  gbar(x1, y1) <= 0  is
replaced by its Lagrangian saddle over the multiplier box [0, B]^l, which
turns the problem into a bilevel-minimax one.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.optimize import linprog

from .const import REFERENCE_TOL
from .kkt import ConstrainedKktReport
from .optfom import SaddleProblem, optfom
from .problem import BilevelMinimaxProblem, BlockLayout
from .prox import BoxIndicator, ProxFunction, SeparableSum

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class AffineLowerLevel:
    """fbar1(x1, y1) = d_tilde . y1 and gbar(x1, y1) = A x1 + B y1 - b."""

    d_tilde: np.ndarray
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray


class ConstrainedBilevelProblem:
    """The class for a bilevel problem with a Slater-feasible constrained lower level.

    Gradients of f1 and fbar1 are flat over (x1, y1); `g_bar` returns the l
    constraint values and their (l, n_x1 + n_y1) Jacobian.
    """

    def __init__(
        self,
        n_x1: int,
        n_y1: int,
        n_constraints: int,
        grad_f1: Callable,
        eval_f1: Callable,
        grad_fbar1: Callable,
        eval_fbar1: Callable,
        g_bar: Callable,
        prox_f2: ProxFunction,
        prox_fbar2: ProxFunction,
        L_grad_f1: float,
        L_fbar: float,
        L_grad_fbar1: float,
        L_grad_gbar: float,
        L_gbar: float,
        f_low: float,
        slater_margin: Optional[float] = None,
        slater_point: Optional[Callable] = None,
        dual_bound: Optional[float] = None,
        fbar_star: Optional[Callable] = None,
        affine: Optional[AffineLowerLevel] = None,
        lower_solution: Optional[Callable] = None,
        name: str = "constrained",
    ) -> None:
        if prox_f2.dim != n_x1 or prox_fbar2.dim != n_y1:
            raise ValueError("domain dimensions do not match n_x1 / n_y1")
        if n_constraints < 0:
            raise ValueError(f"n_constraints={n_constraints} must be nonnegative")
        if dual_bound is None and n_constraints > 0:
            if slater_margin is None:
                raise ValueError("either slater_margin or dual_bound is required")
            if not slater_margin > 0:
                raise ValueError(f"slater_margin={slater_margin} must be positive")

        self.n_x1, self.n_y1, self.n_constraints = n_x1, n_y1, n_constraints
        self.grad_f1 = grad_f1
        self.eval_f1 = eval_f1
        self.grad_fbar1 = grad_fbar1
        self.eval_fbar1 = eval_fbar1
        self.g_bar = g_bar
        self.prox_f2 = prox_f2
        self.prox_fbar2 = prox_fbar2
        self.L_grad_f1 = float(L_grad_f1)
        self.L_fbar = float(L_fbar)
        self.L_grad_fbar1 = float(L_grad_fbar1)
        self.L_grad_gbar = float(L_grad_gbar)
        self.L_gbar = float(L_gbar)
        self.f_low = float(f_low)
        self.slater_margin = slater_margin
        self.slater_point = slater_point
        self._dual_bound = dual_bound
        self._fbar_star = fbar_star
        self.affine = affine
        self.lower_solution = lower_solution
        self.name = name

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(name={self.name!r}, n_x1={self.n_x1}, "
            f"n_y1={self.n_y1}, l={self.n_constraints}, B={self.B:g})"
        )

    @property
    def D_Y1(self) -> float:
        return self.prox_fbar2.diameter()

    @property
    def B(self) -> float:
        """Return the multiplier bound 2 * L_fbar * D_Y1 / G (or the configured one)."""
        if self._dual_bound is not None:
            return float(self._dual_bound)
        if self.n_constraints == 0:
            return 0.0
        return 2.0 * self.L_fbar * self.D_Y1 / self.slater_margin

    @property
    def effective_margin(self) -> float:
        """Return G, implied by B when only the bound is configured."""
        if self.slater_margin is not None:
            return float(self.slater_margin)
        return 2.0 * self.L_fbar * self.D_Y1 / self.B if self.B > 0 else math.inf

    def fbar(self, x1, y1) -> float:
        return self.eval_fbar1(x1, y1) + self.prox_fbar2.value(y1)

    def fbar_star(self, x1, tol: float = REFERENCE_TOL) -> float:
        """Return the lower-level optimal value min { fbar(x1, y1) : gbar <= 0 }."""
        if self._fbar_star is not None:
            return float(self._fbar_star(x1))
        if self.affine is not None and isinstance(self.prox_fbar2, BoxIndicator):
            return self._fbar_star_lp(x1)
        return self._fbar_star_reference(x1, tol)

    def _fbar_star_lp(self, x1) -> float:
        aff = self.affine
        res = linprog(
            c=aff.d_tilde,
            A_ub=aff.B if self.n_constraints else None,
            b_ub=(aff.b - aff.A @ x1) if self.n_constraints else None,
            bounds=list(zip(self.prox_fbar2.lo, self.prox_fbar2.hi)),
            method="highs",
        )
        if res.status != 0:
            raise ValueError(f"lower-level LP failed at x1: {res.message}")
        return float(res.fun)

    def _fbar_star_reference(self, x1, tol: float) -> float:
        sub = _LagrangianSaddle(self, x1, tol)
        result = optfom(tol / (4.0 * sub.diameter), sub.center_z, sub.center_lam, sub)
        values, _ = self.g_bar(x1, result.x)
        return self.fbar(x1, result.x) + self.B * float(np.maximum(values, 0.0).sum())

    def kkt_mapping_holds(self, eps: float, rho: float) -> bool:
        """Return True if eps <= min(rho * L_fbar / 4, rho * G / 4)."""
        return eps <= min(rho * self.L_fbar / 4.0, rho * self.effective_margin / 4.0)

    def kkt(self, x1, y1, z1, y2, z2, rho: float) -> ConstrainedKktReport:
        """Return the constrained KKT quantities at lambda_bar = y2, lambda = rho*z2."""
        n = self.n_x1
        lam_bar = np.asarray(y2, dtype=float)
        lam = rho * np.asarray(z2, dtype=float)

        g_y, jac_y = self.g_bar(x1, y1)
        g_z, jac_z = self.g_bar(x1, z1)
        gf = self.grad_f1(x1, y1)
        gfb_y = self.grad_fbar1(x1, y1)
        gfb_z = self.grad_fbar1(x1, z1)

        grad_x = (
            gf[:n]
            + rho * (gfb_y[:n] - gfb_z[:n] - jac_z[:, :n].T @ lam_bar)
            + jac_y[:, :n].T @ lam
        )
        grad_y = gf[n:] + rho * gfb_y[n:] + jac_y[:, n:].T @ lam
        domain = SeparableSum([(self.prox_f2, 1.0), (self.prox_fbar2, 1.0)])

        warnings = []
        if np.any(lam_bar > self.B + 1e-9) or np.any(lam < -1e-9):
            warnings.append("multipliers outside [0, B]")

        return ConstrainedKktReport(
            stationarity_xy=domain.normal_cone_distance(
                np.concatenate([x1, y1]), np.concatenate([grad_x, grad_y])
            ),
            stationarity_z1=rho
            * self.prox_fbar2.normal_cone_distance(
                z1, gfb_z[n:] + jac_z[:, n:].T @ lam_bar
            ),
            z1_infeasibility=float(np.linalg.norm(np.maximum(g_z, 0.0))),
            z1_complementarity=abs(float(lam_bar @ g_z)),
            y1_suboptimality=self.fbar(x1, y1) - self.fbar_star(x1),
            y1_infeasibility=float(np.linalg.norm(np.maximum(g_y, 0.0))),
            y1_complementarity=abs(float(lam @ g_y)),
            multipliers=(lam, lam_bar),
            warnings=warnings,
        )


class _LagrangianSaddle(SaddleProblem):
    """min_z max_{lam in [0,B]} fbar1(x1, z) + lam . gbar(x1, z), regularized."""

    def __init__(self, cp: ConstrainedBilevelProblem, x1, tol: float) -> None:
        lam_box = BoxIndicator.uniform(cp.n_constraints, 0.0, cp.B)
        self.diameter = math.hypot(cp.D_Y1, lam_box.diameter()) or 1.0
        mu = tol / self.diameter**2
        L = (
            cp.L_grad_fbar1
            + cp.B * math.sqrt(cp.n_constraints) * cp.L_grad_gbar
            + 2.0 * cp.L_gbar
            + mu
        )
        super().__init__(cp.prox_fbar2, lam_box, mu, mu, L)
        self._cp, self._x1, self._mu = cp, x1, mu
        self.center_z = cp.prox_fbar2.center()
        self.center_lam = lam_box.center()

    def grad(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        n = self._cp.n_x1
        values, jac = self._cp.g_bar(self._x1, x)
        gz = self._cp.grad_fbar1(self._x1, x)[n:] + jac[:, n:].T @ y
        return (
            gz + self._mu * (x - self.center_z),
            values - self._mu * (y - self.center_lam),
        )


def _affine_closed_forms(cp: ConstrainedBilevelProblem, B: float):
    aff = cp.affine
    box = cp.prox_fbar2

    def primal(x1, y1) -> float:
        values = aff.A @ x1 + aff.B @ y1 - aff.b
        return float(aff.d_tilde @ y1) + B * float(np.maximum(values, 0.0).sum())

    def dual(x1, y2) -> float:
        coef = aff.d_tilde + aff.B.T @ y2
        inner = np.minimum(coef * box.lo, coef * box.hi).sum()
        return float(y2 @ (aff.A @ x1 - aff.b)) + float(inner)

    return primal, dual


def reformulate(cp: ConstrainedBilevelProblem) -> BilevelMinimaxProblem:
    """Return the bilevel-minimax reformulation over the multiplier box [0, B]^l."""
    n, m, l = cp.n_x1, cp.n_y1, cp.n_constraints
    B = cp.B
    if l > 0 and not (B > 0 and math.isfinite(B)):
        raise ValueError(f"multiplier bound B={B} must be finite and positive")

    layout = BlockLayout(n, 0, m, l)
    empty = np.zeros(0)

    def grad_f1(x1, x2, y1, y2):
        g = cp.grad_f1(x1, y1)
        return np.concatenate([g[:n], empty, g[n:], np.zeros(l)])

    def eval_f1(x1, x2, y1, y2):
        return cp.eval_f1(x1, y1)

    def grad_ftilde1(x1, y1, y2):
        g = cp.grad_fbar1(x1, y1)
        values, jac = cp.g_bar(x1, y1)
        return np.concatenate(
            [g[:n] + jac[:, :n].T @ y2, g[n:] + jac[:, n:].T @ y2, values]
        )

    def eval_ftilde1(x1, y1, y2):
        values, _ = cp.g_bar(x1, y1)
        return cp.eval_fbar1(x1, y1) + float(y2 @ values)

    closed_form_pd = None
    if cp.affine is not None and isinstance(cp.prox_fbar2, BoxIndicator):
        closed_form_pd = _affine_closed_forms(cp, B)

    lower_solution = None
    if cp.lower_solution is not None:
        lower_solution = cp.lower_solution

    problem = BilevelMinimaxProblem(
        layout=layout,
        grad_f1=grad_f1,
        grad_ftilde1=grad_ftilde1,
        eval_f1=eval_f1,
        eval_ftilde1=eval_ftilde1,
        prox_f2=cp.prox_f2,
        prox_f3=BoxIndicator(empty, empty),
        prox_ftilde2=cp.prox_fbar2,
        prox_ftilde3=BoxIndicator.uniform(l, 0.0, B),
        L_grad_f1=cp.L_grad_f1,
        L_grad_ftilde1=cp.L_grad_fbar1
        + B * math.sqrt(l) * cp.L_grad_gbar
        + 2.0 * cp.L_gbar,
        f_low=cp.f_low,
        closed_form_pd=closed_form_pd,
        lower_solution=lower_solution,
        name=cp.name,
    )
    problem.constrained = cp
    _LOGGER.debug("reformulated %r", cp)
    return problem


def constrained_kkt(
    cp: ConstrainedBilevelProblem, x1, y1, z1, y2, z2, rho: float
) -> ConstrainedKktReport:
    """Return the constrained KKT report of a point of the reformulated problem."""
    return cp.kkt(x1, y1, z1, y2, z2, rho)
