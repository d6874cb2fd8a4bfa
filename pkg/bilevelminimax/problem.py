"""The bilevel-minimax problem model and its gradient oracles.

A problem couples an upper level

    min_{x1} max_{x2}  f(x1, x2, y1, y2) = f1 + f2(x1) - f3(x2)

with a lower-level saddle (y1, y2) of

    min_{z1} max_{z2}  f~(x1, z1, z2) = f~1 + f~2(z1) - f~3(z2).

Gradients are exchanged as flat vectors: grad_f1 is ordered (x1, x2, y1, y2)
and grad_ftilde1 is ordered (x1, y1, y2). The solvers work on a primal block
u = (x1, y1, y2) and a dual block v = (x2, z1, z2).
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Tuple

import numpy as np

from .const import REFERENCE_TOL
from .kkt import InnerObjective, reference_value
from .prox import ProxFunction, SeparableSum

_LOGGER = logging.getLogger(__name__)

Vector = np.ndarray


@dataclass(frozen=True)
class BlockLayout:
    n_x1: int
    n_x2: int
    n_y1: int
    n_y2: int

    def __post_init__(self) -> None:
        if min(self.n_x1, self.n_x2, self.n_y1, self.n_y2) < 0:
            raise ValueError(f"block sizes must be nonnegative: {self}")
        if self.n_x1 < 1 or self.n_y1 < 1:
            raise ValueError(f"x1 and y1 need at least one coordinate: {self}")

    @property
    def primal_size(self) -> int:
        return self.n_x1 + self.n_y1 + self.n_y2

    @property
    def dual_size(self) -> int:
        return self.n_x2 + self.n_y1 + self.n_y2

    @staticmethod
    def _split(vec, sizes, name) -> Tuple[Vector, ...]:
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.size != sum(sizes):
            raise ValueError(f"{name} has length {vec.size}, expected {sum(sizes)}")
        return tuple(np.split(vec, np.cumsum(sizes)[:-1]))

    def split_primal(self, u) -> Tuple[Vector, Vector, Vector]:
        """Return (x1, y1, y2) from a primal block."""
        return self._split(u, (self.n_x1, self.n_y1, self.n_y2), "primal block")

    def split_dual(self, v) -> Tuple[Vector, Vector, Vector]:
        """Return (x2, z1, z2) from a dual block."""
        return self._split(v, (self.n_x2, self.n_y1, self.n_y2), "dual block")

    def split_f1(self, g) -> Tuple[Vector, Vector, Vector, Vector]:
        """Return the (x1, x2, y1, y2) parts of an f1 gradient."""
        sizes = (self.n_x1, self.n_x2, self.n_y1, self.n_y2)
        return self._split(g, sizes, "f1 gradient")

    def split_ftilde1(self, g) -> Tuple[Vector, Vector, Vector]:
        """Return the (x1, y1, y2) parts of an f~1 gradient."""
        sizes = (self.n_x1, self.n_y1, self.n_y2)
        return self._split(g, sizes, "f~1 gradient")

    @staticmethod
    def join(*blocks) -> Vector:
        return np.concatenate([np.asarray(b, dtype=float).reshape(-1) for b in blocks])

    def to_dict(self) -> dict:
        return {
            "n_x1": self.n_x1,
            "n_x2": self.n_x2,
            "n_y1": self.n_y1,
            "n_y2": self.n_y2,
        }


@dataclass
class OracleCounter:
    calls_f1: int = 0
    calls_ftilde1: int = 0

    @property
    def total(self) -> int:
        return self.calls_f1 + self.calls_ftilde1

    def snapshot(self) -> Tuple[int, int]:
        return self.calls_f1, self.calls_ftilde1


class GradientOracle:
    """Exact first-order oracle for a problem, counting every gradient call."""

    delta_f = 0.0
    delta_ftilde = 0.0

    def __init__(self, problem: "BilevelMinimaxProblem") -> None:
        self.problem = problem
        self.counter = OracleCounter()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(calls={self.counter.total})"

    def grad_f1(self, x1, x2, y1, y2) -> Vector:
        """Return a (possibly noisy) gradient of f1 over (x1, x2, y1, y2)."""
        self.counter.calls_f1 += 1
        return self._perturb(self.problem.grad_f1(x1, x2, y1, y2), self.delta_f)

    def grad_ftilde1(self, x1, y1, y2) -> Vector:
        """Return a (possibly noisy) gradient of f~1 over (x1, y1, y2)."""
        self.counter.calls_ftilde1 += 1
        return self._perturb(self.problem.grad_ftilde1(x1, y1, y2), self.delta_ftilde)

    def _perturb(self, grad: Vector, delta: float) -> Vector:
        return grad


class StochasticOracle(GradientOracle):
    """Gradient oracle with additive isotropic Gaussian noise of variance delta^2."""

    def __init__(
        self,
        problem: "BilevelMinimaxProblem",
        delta_f: float,
        delta_ftilde: float,
        rng_seed: int,
    ) -> None:
        if delta_f < 0 or delta_ftilde < 0:
            raise ValueError(
                f"noise levels must be nonnegative: {delta_f}, {delta_ftilde}"
            )
        super().__init__(problem)
        self.delta_f = float(delta_f)
        self.delta_ftilde = float(delta_ftilde)
        self.rng_seed = int(rng_seed)
        self.rng = np.random.default_rng(self.rng_seed)

    def _perturb(self, grad: Vector, delta: float) -> Vector:
        if delta == 0 or grad.size == 0:
            return grad
        return grad + (delta / math.sqrt(grad.size)) * self.rng.standard_normal(
            grad.size
        )


class BilevelMinimaxProblem:
    """The class for a bilevel problem whose lower level is a convex-concave saddle."""

    def __init__(
        self,
        layout: BlockLayout,
        grad_f1: Callable[..., Vector],
        grad_ftilde1: Callable[..., Vector],
        eval_f1: Callable[..., float],
        eval_ftilde1: Callable[..., float],
        prox_f2: ProxFunction,
        prox_f3: ProxFunction,
        prox_ftilde2: ProxFunction,
        prox_ftilde3: ProxFunction,
        L_grad_f1: float,
        L_grad_ftilde1: float,
        f_low: float,
        closed_form_pd: Optional[Tuple[Optional[Callable], Optional[Callable]]] = None,
        upper_max_closed_form: Optional[Callable] = None,
        lower_solution: Optional[Callable] = None,
        lower_moduli: Tuple[float, float] = (0.0, 0.0),
        upper_concavity: float = 0.0,
        name: str = "bilevel",
    ) -> None:
        for prox, size, label in (
            (prox_f2, layout.n_x1, "f2"),
            (prox_f3, layout.n_x2, "f3"),
            (prox_ftilde2, layout.n_y1, "f~2"),
            (prox_ftilde3, layout.n_y2, "f~3"),
        ):
            if prox.dim != size:
                raise ValueError(f"{label} acts on {prox.dim} coordinates, not {size}")
        if L_grad_f1 < 0 or L_grad_ftilde1 < 0:
            raise ValueError("Lipschitz constants must be nonnegative")
        if min(lower_moduli) < 0 or upper_concavity < 0:
            raise ValueError("strong convexity moduli must be nonnegative")

        self.layout = layout
        self.grad_f1 = grad_f1
        self.grad_ftilde1 = grad_ftilde1
        self.eval_f1 = eval_f1
        self.eval_ftilde1 = eval_ftilde1
        self.prox_f2 = prox_f2
        self.prox_f3 = prox_f3
        self.prox_ftilde2 = prox_ftilde2
        self.prox_ftilde3 = prox_ftilde3
        self.L_grad_f1 = float(L_grad_f1)
        self.L_grad_ftilde1 = float(L_grad_ftilde1)
        self.f_low = float(f_low)
        self.closed_form_pd = closed_form_pd
        self.upper_max_closed_form = upper_max_closed_form
        self.lower_solution = lower_solution
        self.lower_moduli = tuple(float(m) for m in lower_moduli)
        self.upper_concavity = float(upper_concavity)
        self.name = name

        self.constrained = None  # set by constrained.reformulate()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r}, layout={self.layout})"

    @cached_property
    def primal_domain(self) -> SeparableSum:
        """Return dom f2 x dom f~2 x dom f~3 as a ProxFunction."""
        return SeparableSum(
            [(self.prox_f2, 1.0), (self.prox_ftilde2, 1.0), (self.prox_ftilde3, 1.0)]
        )

    @cached_property
    def dual_domain(self) -> SeparableSum:
        """Return dom f3 x dom f~2 x dom f~3 as a ProxFunction."""
        return SeparableSum(
            [(self.prox_f3, 1.0), (self.prox_ftilde2, 1.0), (self.prox_ftilde3, 1.0)]
        )

    @cached_property
    def D1(self) -> float:
        return self.primal_domain.diameter()

    @cached_property
    def D2(self) -> float:
        return self.dual_domain.diameter()

    def dual_modulus(self, rho: float) -> float:
        """Return the strong concavity modulus of P1 in the dual block (x2, z1, z2).

        -f~1 contributes rho times the convexity of f~1 in y1 on z1, f~1 its
        concavity in y2 on z2. Empty blocks do not count.
        """
        lay = self.layout
        moduli = [
            m
            for size, m in (
                (lay.n_x2, self.upper_concavity),
                (lay.n_y1, rho * self.lower_moduli[0]),
                (lay.n_y2, rho * self.lower_moduli[1]),
            )
            if size > 0
        ]
        return min(moduli, default=0.0)

    def oracle(self) -> GradientOracle:
        """Return a fresh exact oracle with its own call counter."""
        return GradientOracle(self)

    def eval_f(self, x1, x2, y1, y2) -> float:
        return (
            self.eval_f1(x1, x2, y1, y2)
            + self.prox_f2.value(x1)
            - self.prox_f3.value(x2)
        )

    def eval_ftilde(self, x1, y1, y2) -> float:
        return (
            self.eval_ftilde1(x1, y1, y2)
            + self.prox_ftilde2.value(y1)
            - self.prox_ftilde3.value(y2)
        )

    def primal_value(self, x1, y1, tol: float = REFERENCE_TOL) -> float:
        """Return p(x1, y1) = max_{z2} f~(x1, y1, z2)."""
        if self.closed_form_pd is not None and self.closed_form_pd[0] is not None:
            return float(self.closed_form_pd[0](x1, y1))
        split = self.layout.split_ftilde1
        objective = InnerObjective(
            value=lambda z2: self.eval_ftilde1(x1, y1, z2),
            grad=lambda z2: split(self.grad_ftilde1(x1, y1, z2))[2],
            L_grad=self.L_grad_ftilde1,
            sense="max",
            modulus=self.lower_moduli[1],
        )
        return self._reference(objective, self.prox_ftilde3, tol, "p")

    def dual_value(self, x1, y2, tol: float = REFERENCE_TOL) -> float:
        """Return d(x1, y2) = min_{z1} f~(x1, z1, y2)."""
        if self.closed_form_pd is not None and self.closed_form_pd[1] is not None:
            return float(self.closed_form_pd[1](x1, y2))
        split = self.layout.split_ftilde1
        objective = InnerObjective(
            value=lambda z1: self.eval_ftilde1(x1, z1, y2),
            grad=lambda z1: split(self.grad_ftilde1(x1, z1, y2))[1],
            L_grad=self.L_grad_ftilde1,
            sense="min",
            modulus=self.lower_moduli[0],
        )
        return self._reference(objective, self.prox_ftilde2, tol, "d")

    def lower_gap(self, x1, y1, y2, tol: float = REFERENCE_TOL) -> float:
        """Return the lower-level duality gap p(x1, y1) - d(x1, y2)."""
        return self.primal_value(x1, y1, tol) - self.dual_value(x1, y2, tol)

    def upper_max(self, x1, y1, y2, tol: float = REFERENCE_TOL) -> float:
        """Return max_{x2} f(x1, x2, y1, y2)."""
        if self.upper_max_closed_form is not None:
            return float(self.upper_max_closed_form(x1, y1, y2))
        if self.layout.n_x2 == 0:
            return float(self.eval_f1(x1, np.zeros(0), y1, y2))
        split = self.layout.split_f1
        objective = InnerObjective(
            value=lambda x2: self.eval_f1(x1, x2, y1, y2),
            grad=lambda x2: split(self.grad_f1(x1, x2, y1, y2))[1],
            L_grad=self.L_grad_f1,
            sense="max",
        )
        return self._reference(objective, self.prox_f3, tol, "max f")

    @staticmethod
    def _reference(objective, domain, tol, label) -> float:
        result = reference_value(objective, domain, tol)
        if not result.converged:
            _LOGGER.warning(
                "%s: reference solve not converged (error bound %.3e > %.3e)",
                label,
                result.error_bound,
                tol,
            )
        return result.value


def make_noisy(
    problem: BilevelMinimaxProblem, delta_f: float, delta_ftilde: float, seed: int
) -> StochasticOracle:
    """Return a seeded stochastic oracle for `problem`."""
    return StochasticOracle(problem, delta_f, delta_ftilde, seed)


def lower_gap(problem: BilevelMinimaxProblem, x1, y1, y2) -> float:
    """Return p(x1, y1) - d(x1, y2) for the lower level of `problem`."""
    return problem.lower_gap(x1, y1, y2)
