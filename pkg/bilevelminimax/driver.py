"""The outer inexact proximal-point loop, deterministic and stochastic.

Each outer iteration solves the SCSC subproblem

    min_u max_v  P(u, v) + rho1/2 |u - u_k|^2 - rho2/2 |v - v_k|^2

with OptFOM (exact oracle) or SAPD (stochastic oracle).
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .const import (
    ATTRS_RESULT,
    COMPOSITE_EPS_K_TOL,
    COMPOSITE_INFEASIBILITY_TOL,
    COMPOSITE_LOWER_GAP_TOL,
    INIT_REFINEMENTS,
    MAX_ORACLE_CALLS,
    MAX_OUTER_ITERS,
    MODE,
    OPTFOM_MAX_GRAD_CALLS,
    SAPD_MAX_T,
    TERMINATED_BY,
)
from .kkt import KktReport, kkt_report, max_dual_penalty, nearly_kkt_distance
from .optfom import SaddleProblem, optfom
from .penalty import PenaltyProblem, assemble_penalty, build_subproblem
from .problem import BilevelMinimaxProblem, GradientOracle, StochasticOracle
from .sapd import sapd, sapd_params
from .trace import TraceRecord

_LOGGER = logging.getLogger(__name__)

# one subproblem gradient costs one f1 and two f~1 oracle calls
CALLS_PER_GRAD = 3


class InitializationError(RuntimeError):
    """The lower-level initialization did not reach the required gap."""

    def __init__(self, gap: float, eps: float) -> None:
        super().__init__(
            f"initialization failed: lower gap {gap:.3e} > eps={eps:.3e} "
            f"after {INIT_REFINEMENTS} refinements"
        )
        self.gap = gap


@dataclass
class SolverConfig:
    eps: float
    rho: Optional[float] = None
    eps_hat: Optional[float] = None
    K: Optional[int] = None
    mode: str = MODE.Deterministic
    max_oracle_calls: int = MAX_ORACLE_CALLS
    seed: int = 0
    L_override: Optional[float] = None
    max_outer_iters: int = MAX_OUTER_ITERS
    optfom_max_iters: Optional[int] = None
    optfom_max_grad_calls: int = OPTFOM_MAX_GRAD_CALLS
    sapd_max_T: int = SAPD_MAX_T
    sapd_T_override: Optional[int] = None
    composite_rule: bool = False
    eps_k_tol: float = COMPOSITE_EPS_K_TOL
    infeasibility_tol: float = COMPOSITE_INFEASIBILITY_TOL
    lower_gap_tol: float = COMPOSITE_LOWER_GAP_TOL
    checkpoints: Tuple[int, ...] = (1, 10, 100)
    certify_sample: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.eps <= 0.25:
            raise ValueError(f"eps={self.eps} must lie in (0, 1/4]")
        if self.rho is None:
            self.rho = 1.0 / self.eps
        if self.eps_hat is None:
            self.eps_hat = self.eps**1.5
        if not (self.rho > 0 and self.eps_hat > 0):
            raise ValueError(f"rho={self.rho}, eps_hat={self.eps_hat} must be positive")
        if self.K is not None and self.K < 1:
            raise ValueError(f"K={self.K} must be at least 1")
        if self.mode not in (MODE.Deterministic, MODE.Stochastic):
            raise ValueError(f"mode={self.mode!r} must be 'det' or 'stoch'")
        if self.max_oracle_calls < 1 or self.max_outer_iters < 1:
            raise ValueError("budgets must be positive")
        if self.L_override is not None and not self.L_override > 0:
            raise ValueError(f"L_override={self.L_override} must be positive")


@dataclass
class SolveResult:
    primal: np.ndarray
    dual: np.ndarray
    kkt: KktReport
    trace: List[TraceRecord]
    terminated_by: str
    sampled_k: Optional[int] = None
    nearly_kkt: Optional[float] = None
    oracle_calls: int = 0
    upper_objective: float = math.nan
    metadata: Dict = field(default_factory=dict)

    @property
    def outer_iters(self) -> int:
        return sum(1 for r in self.trace if not r.is_checkpoint)

    def as_dict(self, verbosity: int = 1) -> Dict:
        """Return the summary keys, plus the detail keys when verbosity > 0."""
        keys = list(ATTRS_RESULT["summary_keys"])
        if verbosity > 0:
            keys += ATTRS_RESULT["detail_keys"]

        result = {}
        for key in keys:
            value = getattr(self, key)
            if isinstance(value, np.ndarray):
                value = value.tolist()
            elif isinstance(value, KktReport):
                value = value.as_dict()
            result[key] = value
        return result


class _LowerSaddle(SaddleProblem):
    """min_{y1} max_{y2} f~(x1, y1, y2) + mu/2 |y1 - c1|^2 - mu/2 |y2 - c2|^2."""

    def __init__(self, problem: BilevelMinimaxProblem, x1, mu: float) -> None:
        mod1, mod2 = problem.lower_moduli
        super().__init__(
            problem.prox_ftilde2,
            problem.prox_ftilde3,
            mod1 + mu,
            mod2 + mu,
            max(problem.L_grad_ftilde1 + mu, mod1 + mu, mod2 + mu),
        )
        self.problem, self.x1, self.mu = problem, x1, mu
        self.c1 = problem.prox_ftilde2.center()
        self.c2 = problem.prox_ftilde3.center()

    def grad(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        split = self.problem.layout.split_ftilde1
        _, g1, g2 = split(self.problem.grad_ftilde1(self.x1, x, y))
        return g1 + self.mu * (x - self.c1), g2 - self.mu * (y - self.c2)


def initialize(
    problem: BilevelMinimaxProblem, x1_0, eps: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Return (y1_0, y2_0) with p(x1_0, y1_0) - d(x1_0, y2_0) <= eps.

    A lower-level hint or the domain centers are accepted when they already
    meet the gap; otherwise the regularized lower saddle is solved by OptFOM,
    halving the certificate tolerance after every failed attempt.
    """
    x1_0 = np.asarray(x1_0, dtype=float).reshape(-1)
    if not problem.prox_f2.contains(x1_0):
        raise ValueError("x1_0 is outside the domain of f2")

    candidates = []
    if problem.lower_solution is not None:
        candidates.append(problem.lower_solution(x1_0))
    candidates.append((problem.prox_ftilde2.center(), problem.prox_ftilde3.center()))

    gap = math.inf
    for y1, y2 in candidates:
        gap = problem.lower_gap(x1_0, y1, y2)
        if gap <= eps:
            _LOGGER.debug("initialize: candidate accepted with gap %.3e", gap)
            return np.asarray(y1, dtype=float), np.asarray(y2, dtype=float)

    D2t, D3t = problem.prox_ftilde2.diameter(), problem.prox_ftilde3.diameter()
    mu = eps / (4.0 * max(D2t, D3t) ** 2)
    eps_bar = eps / (4.0 * (D2t + D3t))
    sub = _LowerSaddle(problem, x1_0, mu)

    y1, y2 = sub.c1, sub.c2
    for attempt in range(INIT_REFINEMENTS + 1):
        y1, y2, _ = optfom(eps_bar, y1, y2, sub)
        gap = problem.lower_gap(x1_0, y1, y2)
        _LOGGER.debug(
            "initialize: attempt %s, eps_bar=%.3e, gap=%.3e", attempt, eps_bar, gap
        )
        if gap <= eps:
            return y1, y2
        eps_bar /= 2.0

    raise InitializationError(gap, eps)


def compute_stochastic_K(
    f0_max_estimate: float, f_low: float, eps: float, D2: float
) -> int:
    """Return ceil((f0_max + 1 - f_low + eps*D2/4) / eps^2)."""
    if not eps > 0:
        raise ValueError(f"eps={eps} must be positive")
    if D2 < 0 or f0_max_estimate < f_low:
        raise ValueError(
            f"need D2 >= 0 and f0_max >= f_low, got D2={D2}, "
            f"f0_max={f0_max_estimate}, f_low={f_low}"
        )
    value = (f0_max_estimate + 1.0 - f_low + eps * D2 / 4.0) / eps**2
    return max(1, math.ceil(round(value, 9)))


def lower_metrics(problem: BilevelMinimaxProblem, primal) -> Tuple[float, float, float]:
    """Return (upper objective, lower optimality gap, infeasibility) at a primal block.

    Constrained families report fbar - fbar* and |[gbar]_+|; the others report
    the lower duality gap for both.
    """
    x1, y1, y2 = problem.layout.split_primal(primal)
    upper = problem.upper_max(x1, y1, y2) + problem.prox_f2.value(x1)
    cp = problem.constrained
    if cp is None:
        gap = problem.lower_gap(x1, y1, y2)
        return upper, gap, max(gap, 0.0)
    values, _ = cp.g_bar(x1, y1)
    infeasibility = float(np.linalg.norm(np.maximum(values, 0.0)))
    return upper, cp.fbar(x1, y1) - cp.fbar_star(x1), infeasibility


class _Run:
    """Bookkeeping shared by both branches: trace, descent checks and budgets."""

    def __init__(
        self,
        problem: BilevelMinimaxProblem,
        penalty: PenaltyProblem,
        config: SolverConfig,
        primal,
        on_record: Optional[Callable[[TraceRecord], None]],
    ) -> None:
        self.problem, self.penalty, self.config = problem, penalty, config
        self.on_record = on_record
        self.trace: List[TraceRecord] = []
        self.started = time.perf_counter()
        self.metadata: Dict = {
            "descent_checks": [],
            "warnings": [],
            "uncertified_inner_solves": 0,
        }

        D2, L = problem.D2, penalty.L_grad_P1
        self.initial_penalty = max_dual_penalty(penalty, primal)
        self.descent_slack = config.eps * D2 / 4.0 + 2.0 * config.eps_hat**2 * (
            1.0 / L + 4.0 * D2**2 * L / config.eps**2
        )

        cp = problem.constrained
        if cp is not None and not cp.kkt_mapping_holds(config.eps, config.rho):
            message = (
                f"eps={config.eps} exceeds min(rho*L_fbar/4, rho*G/4); the KKT "
                f"mapping to the constrained problem is not guaranteed"
            )
            _LOGGER.warning(message)
            self.metadata["warnings"].append(message)

    @property
    def remaining_calls(self) -> int:
        return self.config.max_oracle_calls - self.penalty.counter.total

    def record(self, k, eps_k, step_norm, inner_steps, primal) -> TraceRecord:
        upper, gap, infeasibility = lower_metrics(self.problem, primal)
        counter = self.penalty.counter
        record = TraceRecord(
            outer_k=k,
            oracle_calls_total=counter.total,
            oracle_calls_f1=counter.calls_f1,
            oracle_calls_ftilde1=counter.calls_ftilde1,
            upper_objective=upper,
            lower_optimality_gap=gap,
            infeasibility=infeasibility,
            eps_k=eps_k,
            primal_step_norm=step_norm,
            wall_ms=int(1000.0 * (time.perf_counter() - self.started)),
            inner_steps=inner_steps,
        )
        self._emit(record)
        _LOGGER.debug(
            "outer %s: calls=%s, step=%.3e, upper=%.6g, gap=%.3e, infeas=%.3e",
            k,
            counter.total,
            step_norm,
            upper,
            gap,
            infeasibility,
        )
        return record

    def checkpoint(self, k: int, primal, dual, last: TraceRecord) -> None:
        """Check the max-dual-penalty descent bound and log a KKT checkpoint."""
        if k not in self.config.checkpoints:
            return
        value = max_dual_penalty(self.penalty, primal)
        bound = self.initial_penalty + self.descent_slack
        holds = value <= bound + 1e-8 * max(1.0, abs(bound))
        self.metadata["descent_checks"].append(
            {"k": k, "value": value, "bound": bound, "holds": holds}
        )
        if not holds:
            _LOGGER.warning(
                "descent check at k=%s: max_v P = %.6g exceeds %.6g", k, value, bound
            )

        report = kkt_report(self.problem, self.penalty, primal, dual)
        self._emit(
            TraceRecord(
                outer_k=last.outer_k,
                oracle_calls_total=last.oracle_calls_total,
                oracle_calls_f1=last.oracle_calls_f1,
                oracle_calls_ftilde1=last.oracle_calls_ftilde1,
                upper_objective=last.upper_objective,
                lower_optimality_gap=last.lower_optimality_gap,
                infeasibility=last.infeasibility,
                eps_k=last.eps_k,
                primal_step_norm=last.primal_step_norm,
                wall_ms=last.wall_ms,
                inner_steps=last.inner_steps,
                kkt=dict(report.as_dict(), max_dual_penalty=value),
            )
        )

    def composite_met(self, eps_k: float, last: TraceRecord) -> bool:
        cfg = self.config
        return (
            cfg.composite_rule
            and self.problem.constrained is not None
            and eps_k <= cfg.eps_k_tol
            and last.infeasibility <= cfg.infeasibility_tol
            and last.lower_optimality_gap <= cfg.lower_gap_tol
        )

    def finish(self, primal, dual, terminated_by, **extra) -> SolveResult:
        report = kkt_report(self.problem, self.penalty, primal, dual)
        upper, _, _ = lower_metrics(self.problem, primal)
        self.metadata.update(
            rho=self.penalty.rho,
            L_grad_P1=self.penalty.L_grad_P1,
            eps=self.config.eps,
            eps_hat=self.config.eps_hat,
        )
        _LOGGER.info(
            "%s: terminated by %s after %s outer iterations, %s oracle calls",
            self.problem.name,
            terminated_by,
            sum(1 for r in self.trace if not r.is_checkpoint),
            self.penalty.counter.total,
        )
        return SolveResult(
            primal=primal,
            dual=dual,
            kkt=report,
            trace=self.trace,
            terminated_by=terminated_by,
            oracle_calls=self.penalty.counter.total,
            upper_objective=upper,
            metadata=self.metadata,
            **extra,
        )

    def _emit(self, record: TraceRecord) -> None:
        self.trace.append(record)
        if self.on_record is not None:
            self.on_record(record)


def _starting_point(problem, config, x1_0, start) -> Tuple[np.ndarray, np.ndarray]:
    lay = problem.layout
    if start is not None:
        primal, dual = (np.asarray(b, dtype=float).reshape(-1) for b in start)
        x1, y1, y2 = lay.split_primal(primal)
        lay.split_dual(dual)
        gap = problem.lower_gap(x1, y1, y2)
        if gap > config.eps:
            _LOGGER.warning("start point has lower gap %.3e > eps", gap)
        return primal, dual

    x1 = problem.prox_f2.center() if x1_0 is None else np.asarray(x1_0, dtype=float)
    y1, y2 = initialize(problem, x1, config.eps)
    primal = lay.join(x1, y1, y2)
    dual = lay.join(problem.prox_f3.center(), y1, y2)
    return primal, dual


def solve_deterministic(
    problem: BilevelMinimaxProblem,
    config: SolverConfig,
    x1_0=None,
    start=None,
    oracle: Optional[GradientOracle] = None,
    on_record: Optional[Callable[[TraceRecord], None]] = None,
) -> SolveResult:
    """Run the deterministic outer loop until the primal step is at most eps/(4 L).

    `start` = (primal, dual) skips the lower-level initialization; otherwise
    the run starts at x1_0 (default: the center of dom f2).
    """
    penalty = assemble_penalty(problem, config.rho, oracle, config.L_override)
    primal, dual = _starting_point(problem, config, x1_0, start)
    run = _Run(problem, penalty, config, primal, on_record)

    D2, L = problem.D2, penalty.L_grad_P1
    threshold = config.eps / (4.0 * L)
    _LOGGER.info(
        "%s: deterministic solve, eps=%.3g, rho=%.3g, L_grad_P1=%.3g",
        problem.name,
        config.eps,
        config.rho,
        L,
    )

    terminated_by = TERMINATED_BY.OuterBudget
    for k in range(config.max_outer_iters):
        grad_budget = min(
            config.optfom_max_grad_calls, run.remaining_calls // CALLS_PER_GRAD
        )
        if grad_budget < 1:
            terminated_by = TERMINATED_BY.OracleBudget
            break

        eps_k = config.eps_hat / (k + 1)
        sub = build_subproblem(penalty, primal, dual, config.eps, D2)
        result = optfom(
            eps_k,
            primal,
            dual,
            sub,
            max_grad_calls=grad_budget,
            max_iters=config.optfom_max_iters,
        )
        if result.certificate > eps_k:
            run.metadata["uncertified_inner_solves"] += 1
            _LOGGER.debug(
                "outer %s: inner certificate %.3e > eps_k=%.3e",
                k,
                result.certificate,
                eps_k,
            )

        step = float(np.linalg.norm(result.x - primal))
        primal, dual = result.x, result.y
        last = run.record(k, eps_k, step, result.iters, primal)
        run.checkpoint(k + 1, primal, dual, last)

        # a call cut short by the budget returns a barely moved iterate
        if run.remaining_calls < CALLS_PER_GRAD:
            terminated_by = TERMINATED_BY.OracleBudget
            break
        if step <= threshold:
            terminated_by = TERMINATED_BY.StepNorm
            break
        if run.composite_met(eps_k, last):
            terminated_by = TERMINATED_BY.CompositeRule
            break

    return run.finish(primal, dual, terminated_by)


def solve_stochastic(
    problem_noisy: StochasticOracle,
    config: SolverConfig,
    x1_0=None,
    start=None,
    on_record: Optional[Callable[[TraceRecord], None]] = None,
) -> SolveResult:
    """Run K outer SAPD iterations and return the iterate of a random index k'.

    k' is drawn up front from {1, ..., K} with the run's seed and only that
    iterate is kept.
    """
    problem = problem_noisy.problem
    penalty = assemble_penalty(problem, config.rho, problem_noisy, config.L_override)
    primal, dual = _starting_point(problem, config, x1_0, start)
    run = _Run(problem, penalty, config, primal, on_record)

    D2 = problem.D2
    K = config.K
    if K is None:
        x1, y1, y2 = problem.layout.split_primal(primal)
        f0_max = problem.upper_max(x1, y1, y2)
        K = compute_stochastic_K(f0_max, problem.f_low, config.eps, D2)
        run.metadata["f0_max_estimate"] = f0_max

    rng = np.random.default_rng(config.seed)
    sampled_k = int(rng.integers(1, K + 1))
    rho = penalty.rho
    delta_f, delta_ft = problem_noisy.delta_f, problem_noisy.delta_ftilde
    delta_sq = 3.0 * delta_f**2 + 6.0 * rho**2 * delta_ft**2
    run.metadata.update(K=K, delta_P_sq=delta_sq, sampled_k_drawn_up_front=True)
    _LOGGER.info(
        "%s: stochastic solve, eps=%.3g, K=%s, k'=%s, delta_P^2=%.3g",
        problem.name,
        config.eps,
        K,
        sampled_k,
        delta_sq,
    )

    kept = center = None
    terminated_by = TERMINATED_BY.K_reached
    for k in range(K):
        sub = build_subproblem(penalty, primal, dual, config.eps, D2)
        params = sapd_params(
            config.eps_hat,
            sub.sigma_x,
            sub.sigma_y,
            sub.L_grad_hbar,
            delta_sq,
            sub.prox_p.diameter(),
            sub.prox_q.diameter(),
            max_T=config.sapd_max_T,
            T_override=config.sapd_T_override,
        )
        if (2 * params.T + 1) * CALLS_PER_GRAD > run.remaining_calls:
            terminated_by = TERMINATED_BY.OracleBudget
            break

        previous = (primal, dual)
        result = sapd(config.eps_hat, primal, dual, sub, delta_sq, params)
        step = float(np.linalg.norm(result.x - primal))
        primal, dual = result.x, result.y
        last = run.record(k, config.eps_hat, step, result.iters, primal)
        run.checkpoint(k + 1, primal, dual, last)

        if k + 1 == sampled_k:
            kept, center = (primal.copy(), dual.copy()), previous

    if kept is None:
        _LOGGER.warning("k'=%s was not reached; returning the last iterate", sampled_k)
        run.metadata["sampled_k_reached"] = False
        kept = (primal, dual)

    nearly = None
    if config.certify_sample and center is not None:
        nearly = _certify_sample(penalty, center, kept, config, D2, run)

    return run.finish(
        kept[0], kept[1], terminated_by, sampled_k=sampled_k, nearly_kkt=nearly
    )


def _certify_sample(penalty, center, kept, config, D2, run) -> float:
    """Return max(distance to the exactly re-solved subproblem, its KKT residual)."""
    sub = build_subproblem(penalty, center[0], center[1], config.eps, D2, exact=True)
    result = optfom(config.eps_hat, kept[0], kept[1], sub)
    report = kkt_report(run.problem, penalty, result.x, result.y)
    distance = nearly_kkt_distance(kept[0], result.x)
    run.metadata["certified_kkt_residual"] = report.max_residual
    return max(distance, report.max_residual)


def solve(
    problem: BilevelMinimaxProblem,
    config: SolverConfig,
    oracle: Optional[GradientOracle] = None,
    **kwargs,
) -> SolveResult:
    """Dispatch on config.mode; the stochastic branch needs a StochasticOracle."""
    if config.mode == MODE.Deterministic:
        return solve_deterministic(problem, config, oracle=oracle, **kwargs)
    if not isinstance(oracle, StochasticOracle):
        raise ValueError("the stochastic branch needs a StochasticOracle")
    return solve_stochastic(oracle, config, **kwargs)
