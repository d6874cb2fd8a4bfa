"""Instance families: bilevel linear programs, analytic toys and SCSC quadratics.

Every family object exposes `family`, `seed`, `dims`, `to_dict()`,
`bilevel_problem()`, `initial_x1()` and `initial_point()` (a full start, or
None to initialize the lower level from `initial_x1()`); constrained families
also expose `constrained_problem()`. Instances serialize to JSON files whose SHA-256
digest is stable for a fixed seed.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Optional, Tuple

import numpy as np

from .const import (
    FAMILY,
    LINEAR_DUAL_BOUND,
    LINEAR_MATRIX_STD,
    LINEAR_MAX_DRAWS,
    LINEAR_YHAT_STD,
    TOY_VARIANT,
)
from .constrained import AffineLowerLevel, ConstrainedBilevelProblem, reformulate
from .optfom import SaddleProblem
from .problem import BilevelMinimaxProblem, BlockLayout
from .prox import BoxIndicator

_LOGGER = logging.getLogger(__name__)

PLANTED_TOL = 1e-10


@dataclass
class LinearInstance:
    """min c.x + d.y over x in [-1,1]^n, y solving the lower-level LP.

    The lower level is min { d~.z : A~x + B~z <= b~, z in [-1,1]^m }.
    """

    c: np.ndarray
    d: np.ndarray
    d_tilde: np.ndarray
    A_tilde: np.ndarray
    B_tilde: np.ndarray
    b_tilde: np.ndarray
    y_hat: np.ndarray
    lambda_hat: np.ndarray
    B_dual: float = LINEAR_DUAL_BOUND
    seed: int = 0
    metadata: Dict = field(default_factory=dict)

    family = FAMILY.Linear

    def __post_init__(self) -> None:
        n, m, l = self.c.size, self.d.size, self.b_tilde.size
        if self.A_tilde.shape != (l, n) or self.B_tilde.shape != (l, m):
            raise ValueError(
                f"constraint matrices have shapes {self.A_tilde.shape} and "
                f"{self.B_tilde.shape}, expected ({l}, {n}) and ({l}, {m})"
            )
        if self.d_tilde.size != m or self.y_hat.size != m:
            raise ValueError("d_tilde and y_hat must have length m")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.c.size, self.d.size, self.b_tilde.size

    def planted_certificate(self) -> Dict[str, float]:
        """Return the LP KKT residuals of (y_hat, lambda_hat) at x = 0."""
        box = BoxIndicator.uniform(self.d.size, -1.0, 1.0)
        slack = self.B_tilde @ self.y_hat - self.b_tilde
        return {
            "stationarity": box.normal_cone_distance(
                self.y_hat, self.d_tilde + self.B_tilde.T @ self.lambda_hat
            ),
            "feasibility": float(np.linalg.norm(np.maximum(slack, 0.0))),
            "complementarity": float(np.abs(self.lambda_hat * slack).max(initial=0.0)),
        }

    @cached_property
    def _constrained(self) -> ConstrainedBilevelProblem:
        n, m, _ = self.dims
        c, d, d_tilde = self.c, self.d, self.d_tilde
        A, B, b = self.A_tilde, self.B_tilde, self.b_tilde
        jac = np.hstack([A, B])
        grad_f1 = np.concatenate([c, d])
        grad_fbar1 = np.concatenate([np.zeros(n), d_tilde])
        return ConstrainedBilevelProblem(
            n_x1=n,
            n_y1=m,
            n_constraints=b.size,
            grad_f1=lambda x1, y1: grad_f1,
            eval_f1=lambda x1, y1: float(c @ x1 + d @ y1),
            grad_fbar1=lambda x1, y1: grad_fbar1,
            eval_fbar1=lambda x1, y1: float(d_tilde @ y1),
            g_bar=lambda x1, y1: (A @ x1 + B @ y1 - b, jac),
            prox_f2=BoxIndicator.uniform(n, -1.0, 1.0),
            prox_fbar2=BoxIndicator.uniform(m, -1.0, 1.0),
            L_grad_f1=0.0,
            L_fbar=float(np.linalg.norm(d_tilde)),
            L_grad_fbar1=0.0,
            L_grad_gbar=0.0,
            L_gbar=float(np.linalg.norm(jac, 2)),
            f_low=-float(np.abs(c).sum() + np.abs(d).sum()),
            dual_bound=self.B_dual,
            affine=AffineLowerLevel(d_tilde, A, B, b),
            name=f"linear-{n}x{m}x{b.size}-s{self.seed}",
        )

    def constrained_problem(self) -> ConstrainedBilevelProblem:
        return self._constrained

    def bilevel_problem(self) -> BilevelMinimaxProblem:
        return reformulate(self._constrained)

    def initial_x1(self) -> np.ndarray:
        return np.zeros(self.c.size)

    def initial_point(self) -> Tuple[np.ndarray, np.ndarray]:
        """Return the all-zero (primal, dual) start of the linear experiments."""
        layout = self.bilevel_problem().layout
        return np.zeros(layout.primal_size), np.zeros(layout.dual_size)

    def to_dict(self) -> Dict:
        n, m, l = self.dims
        return {
            "family": self.family,
            "seed": self.seed,
            "dims": {"n": n, "m": m, "l": l},
            "c": self.c.tolist(),
            "d": self.d.tolist(),
            "d_tilde": self.d_tilde.tolist(),
            "A_tilde": self.A_tilde.tolist(),
            "B_tilde": self.B_tilde.tolist(),
            "b_tilde": self.b_tilde.tolist(),
            "y_hat": self.y_hat.tolist(),
            "lambda_hat": self.lambda_hat.tolist(),
            "constants": {"B_dual": self.B_dual},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "LinearInstance":
        n, m, l = (data["dims"][k] for k in ("n", "m", "l"))

        def matrix(key, rows, cols):
            return np.asarray(data[key], dtype=float).reshape(rows, cols)

        return cls(
            c=np.asarray(data["c"], dtype=float),
            d=np.asarray(data["d"], dtype=float),
            d_tilde=np.asarray(data["d_tilde"], dtype=float),
            A_tilde=matrix("A_tilde", l, n),
            B_tilde=matrix("B_tilde", l, m),
            b_tilde=np.asarray(data["b_tilde"], dtype=float),
            y_hat=np.asarray(data["y_hat"], dtype=float),
            lambda_hat=np.asarray(data["lambda_hat"], dtype=float),
            B_dual=float(data["constants"]["B_dual"]),
            seed=int(data["seed"]),
            metadata=dict(data.get("metadata", {})),
        )


def gen_linear(
    n: int, m: int, l: int, seed: int, dual_bound: float = LINEAR_DUAL_BOUND
) -> LinearInstance:
    """Return a random linear instance whose lower level is solved by y_hat at x = 0.

    An active set of ceil(l/2) constraints is made tight at y_hat with positive
    multipliers, the others get a positive slack, and d~ is chosen so that the
    LP stationarity condition holds with a normal-cone term on the box bounds
    y_hat touches.
    """
    if min(n, m, l) < 1:
        raise ValueError(f"(n, m, l)=({n}, {m}, {l}) must all be at least 1")

    rng = np.random.default_rng(seed)
    for attempt in range(LINEAR_MAX_DRAWS):
        c = rng.normal(size=n)
        d = rng.normal(size=m)
        A = rng.normal(scale=LINEAR_MATRIX_STD, size=(l, n))
        B = rng.normal(scale=LINEAR_MATRIX_STD, size=(l, m))
        y_hat = np.clip(rng.normal(scale=LINEAR_YHAT_STD, size=m), -1.0, 1.0)

        active = np.sort(rng.choice(l, size=math.ceil(l / 2), replace=False))
        at_hi, at_lo = y_hat >= 1.0, y_hat <= -1.0
        if active.size == 0 and not (at_hi.any() or at_lo.any()):
            _LOGGER.debug("gen_linear: degenerate draw %s, redrawing", attempt)
            continue

        slack = np.abs(rng.normal(size=l)) + 0.1
        slack[active] = 0.0
        b = B @ y_hat + slack

        lam = np.zeros(l)
        lam[active] = np.abs(rng.normal(size=active.size)) + 0.1

        magnitude = np.abs(rng.normal(size=m))
        nu = np.zeros(m)
        nu[at_hi] = magnitude[at_hi]
        nu[at_lo] = -magnitude[at_lo]
        d_tilde = -B.T @ lam - nu

        instance = LinearInstance(
            c=c,
            d=d,
            d_tilde=d_tilde,
            A_tilde=A,
            B_tilde=B,
            b_tilde=b,
            y_hat=y_hat,
            lambda_hat=lam,
            B_dual=float(dual_bound),
            seed=int(seed),
            metadata={"y_hat_std": LINEAR_YHAT_STD, "active_set": active.tolist()},
        )
        worst = max(instance.planted_certificate().values())
        if worst > PLANTED_TOL:
            raise ValueError(f"planted certificate residual {worst:.3e} is too large")
        _LOGGER.info("gen_linear: (n, m, l)=(%s, %s, %s), seed=%s", n, m, l, seed)
        return instance

    raise ValueError(f"no nondegenerate draw after {LINEAR_MAX_DRAWS} attempts")


def toy_penalized_kkt(rho: float) -> Tuple[np.ndarray, np.ndarray]:
    """Return the stationary (primal, dual) blocks of the unconstrained toy penalty."""
    x1 = 0.3 * (2.0 + rho) / (2.0 + 2.0 * rho)
    y1 = rho * x1 / (2.0 + rho)
    return np.array([x1, y1, 0.0]), np.array([0.0, x1, 0.0])


def make_toy_unconstrained() -> Tuple[BilevelMinimaxProblem, np.ndarray]:
    """Return the analytic unconstrained toy and its bilevel optimum (0.15, 0.15, 0).

    f = (x1 - 0.3)^2 + y1^2 - x2^2 and f~ = (y1 - x1)^2/2 - y2^2/2, every
    block on [-1, 1].
    """

    def grad_f1(x1, x2, y1, y2):
        return np.concatenate([2.0 * (x1 - 0.3), -2.0 * x2, 2.0 * y1, np.zeros(1)])

    def eval_f1(x1, x2, y1, y2):
        return float((x1[0] - 0.3) ** 2 + y1[0] ** 2 - x2[0] ** 2)

    def grad_ftilde1(x1, y1, y2):
        return np.concatenate([x1 - y1, y1 - x1, -y2])

    def eval_ftilde1(x1, y1, y2):
        return float(0.5 * (y1[0] - x1[0]) ** 2 - 0.5 * y2[0] ** 2)

    unit = BoxIndicator.uniform(1, -1.0, 1.0)
    problem = BilevelMinimaxProblem(
        layout=BlockLayout(1, 1, 1, 1),
        grad_f1=grad_f1,
        grad_ftilde1=grad_ftilde1,
        eval_f1=eval_f1,
        eval_ftilde1=eval_ftilde1,
        prox_f2=unit,
        prox_f3=unit,
        prox_ftilde2=unit,
        prox_ftilde3=unit,
        L_grad_f1=2.0,
        L_grad_ftilde1=2.0,
        f_low=-1.0,
        closed_form_pd=(
            lambda x1, y1: 0.5 * float(y1[0] - x1[0]) ** 2,
            lambda x1, y2: -0.5 * float(y2[0]) ** 2,
        ),
        upper_max_closed_form=lambda x1, y1, y2: float(
            (x1[0] - 0.3) ** 2 + y1[0] ** 2
        ),
        lower_solution=lambda x1: (np.array(x1, dtype=float), np.zeros(1)),
        lower_moduli=(1.0, 1.0),
        upper_concavity=2.0,
        name=FAMILY.ToyUnconstrained,
    )
    return problem, np.array([0.15, 0.15, 0.0])


def make_toy_constrained() -> Tuple[ConstrainedBilevelProblem, np.ndarray]:
    """Return the scalar constrained toy and its optimum (x1, y1) = (0.5, 0.5).

    min (y1 - 1)^2 over x1 in [0, 0.5], with y1 in
    argmin { z1 : x1 - z1 <= 0, z1 in [-1, 1] }.
    """
    cp = ConstrainedBilevelProblem(
        n_x1=1,
        n_y1=1,
        n_constraints=1,
        grad_f1=lambda x1, y1: np.array([0.0, 2.0 * (y1[0] - 1.0)]),
        eval_f1=lambda x1, y1: float((y1[0] - 1.0) ** 2),
        grad_fbar1=lambda x1, y1: np.array([0.0, 1.0]),
        eval_fbar1=lambda x1, y1: float(y1[0]),
        g_bar=lambda x1, y1: (np.array([x1[0] - y1[0]]), np.array([[1.0, -1.0]])),
        prox_f2=BoxIndicator.uniform(1, 0.0, 0.5),
        prox_fbar2=BoxIndicator.uniform(1, -1.0, 1.0),
        L_grad_f1=2.0,
        L_fbar=1.0,
        L_grad_fbar1=0.0,
        L_grad_gbar=0.0,
        L_gbar=math.sqrt(2.0),
        f_low=0.0,
        slater_margin=0.5,
        slater_point=lambda x1: np.ones(1),
        fbar_star=lambda x1: float(x1[0]),
        affine=AffineLowerLevel(
            np.ones(1), np.ones((1, 1)), -np.ones((1, 1)), np.zeros(1)
        ),
        lower_solution=lambda x1: (np.array(x1, dtype=float), np.ones(1)),
        name=FAMILY.ToyConstrained,
    )
    return cp, np.array([0.5, 0.5])


@dataclass
class ToyInstance:
    variant: str
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variant not in (
            TOY_VARIANT.UnconstrainedSaddle,
            TOY_VARIANT.ConstrainedScalar,
        ):
            raise ValueError(f"{self.variant!r} is not a toy variant")

    @property
    def family(self) -> str:
        if self.variant == TOY_VARIANT.UnconstrainedSaddle:
            return FAMILY.ToyUnconstrained
        return FAMILY.ToyConstrained

    @property
    def dims(self) -> Dict:
        return {"n_x1": 1, "n_x2": 1 if self.is_unconstrained else 0, "n_y1": 1}

    @property
    def is_unconstrained(self) -> bool:
        return self.variant == TOY_VARIANT.UnconstrainedSaddle

    @cached_property
    def _built(self):
        if self.is_unconstrained:
            return make_toy_unconstrained()
        return make_toy_constrained()

    @property
    def analytic_solution(self) -> np.ndarray:
        return self._built[1]

    def constrained_problem(self) -> Optional[ConstrainedBilevelProblem]:
        return None if self.is_unconstrained else self._built[0]

    def bilevel_problem(self) -> BilevelMinimaxProblem:
        if self.is_unconstrained:
            return self._built[0]
        return reformulate(self._built[0])

    def initial_x1(self) -> np.ndarray:
        return np.zeros(1)

    def initial_point(self) -> None:
        return None

    def to_dict(self) -> Dict:
        return {
            "family": self.family,
            "seed": self.seed,
            "dims": self.dims,
            "variant": self.variant,
            "constants": {},
            "analytic_solution": self.analytic_solution.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ToyInstance":
        return cls(variant=data["variant"], seed=int(data["seed"]))


class QuadraticSaddle(SaddleProblem):
    """h(x, y) = sx/2 |x - x*|^2 + (x - x*).C(y - y*) - sy/2 |y - y*|^2 on boxes.

    Gradients carry isotropic Gaussian noise of total variance delta^2 when
    delta > 0. `calls` counts gradient evaluations.
    """

    def __init__(
        self,
        sigma_x: float,
        sigma_y: float,
        coupling,
        x_star,
        y_star,
        bound: float = 1.0,
        delta: float = 0.0,
        seed: Optional[int] = None,
    ) -> None:
        self.x_star = np.asarray(x_star, dtype=float).reshape(-1)
        self.y_star = np.asarray(y_star, dtype=float).reshape(-1)
        n, m = self.x_star.size, self.y_star.size
        self.C = np.broadcast_to(np.asarray(coupling, dtype=float), (n, m)).copy()

        jac = np.block(
            [[sigma_x * np.eye(n), self.C], [self.C.T, -sigma_y * np.eye(m)]]
        )
        super().__init__(
            BoxIndicator.uniform(n, -bound, bound),
            BoxIndicator.uniform(m, -bound, bound),
            sigma_x,
            sigma_y,
            float(np.linalg.norm(jac, 2)),
        )
        inside = self.prox_p.contains(self.x_star) and self.prox_q.contains(self.y_star)
        if not inside:
            raise ValueError("the saddle point must lie inside the box")
        if delta < 0:
            raise ValueError(f"delta={delta} must be nonnegative")

        self.delta = float(delta)
        self.rng = np.random.default_rng(seed)
        self.calls = 0

    @classmethod
    def scalar(
        cls, sigma: float, L: float, dim: int = 1, **kwargs
    ) -> "QuadraticSaddle":
        """Return sigma_x = sigma_y = sigma and C = c*I with gradient constant L."""
        if not L > sigma > 0:
            raise ValueError(f"need L > sigma > 0, got L={L}, sigma={sigma}")
        kwargs.setdefault("x_star", np.zeros(dim))
        kwargs.setdefault("y_star", np.zeros(dim))
        return cls(sigma, sigma, math.sqrt(L**2 - sigma**2) * np.eye(dim), **kwargs)

    def grad(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        self.calls += 1
        dx, dy = x - self.x_star, y - self.y_star
        gx = self.sigma_x * dx + self.C @ dy
        gy = self.C.T @ dx - self.sigma_y * dy
        if self.delta > 0:
            size = gx.size + gy.size
            noise = (self.delta / math.sqrt(size)) * self.rng.standard_normal(size)
            gx, gy = gx + noise[: gx.size], gy + noise[gx.size :]
        return gx, gy

    def distance_sq(self, x, y) -> float:
        """Return sigma_x |x - x*|^2 + sigma_y |y - y*|^2."""
        dx, dy = x - self.x_star, y - self.y_star
        return self.sigma_x * float(dx @ dx) + self.sigma_y * float(dy @ dy)


def _dumps(data) -> str:
    """Return canonical JSON: sorted keys, no spaces, floats as %.17g."""
    if isinstance(data, dict):
        items = (
            f"{json.dumps(str(key))}:{_dumps(value)}"
            for key, value in sorted(data.items(), key=lambda kv: str(kv[0]))
        )
        return "{" + ",".join(items) + "}"
    if isinstance(data, (list, tuple)):
        return "[" + ",".join(_dumps(value) for value in data) + "]"
    if data is None or isinstance(data, (bool, str)):
        return json.dumps(data)
    if isinstance(data, (int, np.integer)):
        return str(int(data))
    if isinstance(data, (float, np.floating)):
        if not math.isfinite(data):
            raise ValueError(f"{data} has no JSON form")
        return format(float(data), ".17g")
    raise TypeError(f"{type(data).__name__} is not JSON serializable")


def instance_digest(data: Dict) -> str:
    """Return the SHA-256 hex digest of an instance's canonical JSON form."""
    return hashlib.sha256(_dumps(data).encode("utf-8")).hexdigest()


def instance_from_dict(data: Dict):
    """Return the instance object described by `data`."""
    try:
        family = data["family"]
    except KeyError:
        raise KeyError("instance data has no 'family' entry")

    if family == FAMILY.Linear:
        return LinearInstance.from_dict(data)
    if family in (FAMILY.ToyUnconstrained, FAMILY.ToyConstrained):
        return ToyInstance.from_dict(data)
    if family == FAMILY.Dro:
        from .dro import DroInstance

        return DroInstance.from_dict(data)
    raise ValueError(f"{family!r} is not a known instance family")


def save_instance(instance, path) -> str:
    """Write `instance` as canonical JSON to `path` and return its digest."""
    data = instance.to_dict()
    with open(path, mode="w") as fh:
        fh.write(_dumps(data) + "\n")
    return instance_digest(data)


def load_instance(path):
    """Return the instance stored at `path`."""
    with open(path, mode="r") as fh:
        data = json.loads(fh.read())
    return instance_from_dict(data)
