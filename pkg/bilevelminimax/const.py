"""Bilevel-minimax solver library."""
from types import SimpleNamespace

ENV_THREADS = "BIMAX_THREADS"
ENV_SLOW_TESTS = "BIMAX_SLOW_TESTS"

# tolerances
DOMAIN_TOL = 1e-9  # membership slack for "x in domain" checks
SIMPLEX_TOL = 1e-12  # water-filling bisection
REFERENCE_TOL = 1e-8
EXACT_DIAMETER_MAX_DIM = 64

# budgets
OPTFOM_MAX_GRAD_CALLS = 10**6
OPTFOM_MAX_INNER = 10**5
OPTFOM_DIVERGENCE_FACTOR = 10.0
OPTFOM_EXPERIMENT_ITERS = 200  # the experiments cap each inner solve at 200 iterations
SAPD_MAX_T = 10**7
MAX_ORACLE_CALLS = 10**7
MAX_OUTER_ITERS = 10**4
INIT_REFINEMENTS = 5

# linear family
LINEAR_DUAL_BOUND = 200.0
LINEAR_MATRIX_STD = 0.01
LINEAR_YHAT_STD = 0.1
LINEAR_MAX_DRAWS = 100

# composite stopping rule of the linear experiments
COMPOSITE_EPS_K_TOL = 0.01
COMPOSITE_INFEASIBILITY_TOL = 0.01
COMPOSITE_LOWER_GAP_TOL = 0.01
# inner tolerance of the linear experiments; eps_k = eps_hat / (k + 1) reaches
# COMPOSITE_EPS_K_TOL after 24 outer iterations
LINEAR_EXPERIMENT_EPS_HAT = 0.25

MODE = SimpleNamespace(Deterministic="det", Stochastic="stoch")

TERMINATED_BY = SimpleNamespace(
    StepNorm="step_norm",
    CompositeRule="composite_rule",
    OuterBudget="outer_budget",
    OracleBudget="oracle_budget",
    K_reached="k_reached",
)

# terminations that count as "stopped by a criterion" for the CLI
CRITERION_TERMINATIONS = (
    TERMINATED_BY.StepNorm,
    TERMINATED_BY.CompositeRule,
    TERMINATED_BY.K_reached,
)

PROX_KIND = SimpleNamespace(
    Box="box", TruncatedSimplex="truncated_simplex", Zero="zero", Sum="separable_sum"
)

FAMILY = SimpleNamespace(
    Linear="linear",
    ToyUnconstrained="toy-unconstrained",
    ToyConstrained="toy-constrained",
    Dro="dro",
)

TOY_VARIANT = SimpleNamespace(
    UnconstrainedSaddle="unconstrained_saddle",
    ConstrainedScalar="constrained_scalar",
    GroupDro="group_dro",
)

EXIT_CODE = SimpleNamespace(Success=0, Error=1, Budget=2)

ATTRS_RESULT = {
    "summary_keys": [
        "terminated_by",
        "outer_iters",
        "oracle_calls",
        "upper_objective",
    ],
    "detail_keys": [
        "primal",
        "dual",
        "sampled_k",
        "nearly_kkt",
        "kkt",
        "metadata",
    ],
}

# columns of the `report` command
REPORT_COLUMNS = [
    "family",
    "instance",
    "seed",
    "terminated_by",
    "outer_iters",
    "upper_objective",
    "lower_optimality_gap",
    "infeasibility",
    "oracle_calls",
    "wall_ms",
]
