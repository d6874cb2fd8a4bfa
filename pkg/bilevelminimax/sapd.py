"""The stochastic accelerated primal-dual method (SAPD) for SCSC saddles."""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .const import SAPD_MAX_T
from .optfom import SaddleProblem

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class SapdParams:
    tau: float
    sigma: float
    theta: float
    T: int
    beta: float
    psi: float
    xi_x: float
    xi_y: float
    theta_bar_1: float
    theta_bar_2: float
    theta_dbar_1: float
    theta_dbar_2: float
    T_uncapped: int = 0
    T_clamped: bool = False


def sapd_params(
    eps_hat: float,
    sigma_x: float,
    sigma_y: float,
    L_grad_hbar: float,
    delta_sq: float,
    Dp: float,
    Dq: float,
    max_T: int = SAPD_MAX_T,
    T_override: Optional[int] = None,
) -> SapdParams:
    """Return the SAPD step sizes, momentum and iteration count.

    With delta_sq = 0 the noise-driven momentum terms vanish and the schedule
    reduces to the deterministic accelerated rate.
    """
    for name, val in (
        ("eps_hat", eps_hat),
        ("sigma_x", sigma_x),
        ("sigma_y", sigma_y),
        ("L_grad_hbar", L_grad_hbar),
    ):
        if not val > 0:
            raise ValueError(f"{name}={val} must be positive")
    if delta_sq < 0:
        raise ValueError(f"delta_sq={delta_sq} must be nonnegative")
    if not (math.isfinite(Dp) and math.isfinite(Dq)):
        raise ValueError(f"domain diameters must be finite, got Dp={Dp}, Dq={Dq}")

    L, sx, sy = L_grad_hbar, sigma_x, sigma_y
    beta = min(0.5, sy / sx, sx / sy)
    psi = min(math.sqrt(beta * sx / (2.0 * sy)), (1.0 - beta) / 4.0)
    xi_x = 1.0 + psi
    xi_y = (27.0 + 3.0 * beta) / 2.0 + (sy / sx) * psi

    theta_bar_1 = 1.0 - beta * (L + sx) * sy / (4.0 * L**2) * (
        math.sqrt(1.0 + 8.0 * sx * L**2 / (beta * sy * (L + sx) ** 2)) - 1.0
    )
    theta_bar_2 = 1.0 - (1.0 - beta) ** 2 / 32.0 * sy**2 / L**2 * (
        math.sqrt(1.0 + 64.0 * L**2 / ((1.0 - beta) ** 2 * sy**2)) - 1.0
    )
    if delta_sq > 0:
        theta_dbar_1 = max(0.0, 1.0 - sx * eps_hat**2 / (12.0 * xi_x * delta_sq))
        theta_dbar_2 = max(0.0, 1.0 - sy * eps_hat**2 / (12.0 * xi_y * delta_sq))
    else:
        theta_dbar_1 = theta_dbar_2 = 0.0

    theta = max(theta_bar_1, theta_bar_2, theta_dbar_1, theta_dbar_2)
    if not 0.0 < theta < 1.0:
        raise ValueError(f"invalid SAPD configuration: theta={theta}")

    rate = max(
        1.0 / (1.0 - th)
        for th in (theta_bar_1, theta_bar_2, theta_dbar_1, theta_dbar_2)
    )
    log_term = math.log((6.0 * sx * Dp**2 + 6.0 * sy * Dq**2) / eps_hat**2)
    T_uncapped = max(1, math.ceil(1.0 + log_term * rate))

    T_clamped = T_uncapped > max_T
    if T_override is not None:
        T = int(T_override)
    else:
        T = min(T_uncapped, max_T)
    if T_clamped and T_override is None:
        _LOGGER.warning("sapd: T=%s clamped to %s", T_uncapped, max_T)

    return SapdParams(
        tau=(1.0 - theta) / (sx * theta),
        sigma=(1.0 - theta) / (sy * theta),
        theta=theta,
        T=T,
        beta=beta,
        psi=psi,
        xi_x=xi_x,
        xi_y=xi_y,
        theta_bar_1=theta_bar_1,
        theta_bar_2=theta_bar_2,
        theta_dbar_1=theta_dbar_1,
        theta_dbar_2=theta_dbar_2,
        T_uncapped=T_uncapped,
        T_clamped=T_clamped,
    )


@dataclass
class SapdResult:
    x: np.ndarray
    y: np.ndarray
    iters: int
    grad_calls: int
    params: SapdParams

    def __iter__(self):
        return iter((self.x, self.y))


def sapd(
    eps_hat: float,
    x0,
    y0,
    sub: SaddleProblem,
    delta_sq: float = 0.0,
    params: Optional[SapdParams] = None,
    callback: Optional[Callable[[int, int], None]] = None,
) -> SapdResult:
    """Run SAPD for params.T iterations on `sub` (whose gradients may be noisy).

    The y-gradient drawn at the end of an iteration is reused as the
    subtrahend of the next momentum correction, so an iteration consumes one
    x-gradient and one y-gradient after the initial draw.
    """
    if params is None:
        params = sapd_params(
            eps_hat,
            sub.sigma_x,
            sub.sigma_y,
            sub.L_grad_hbar,
            delta_sq,
            sub.prox_p.diameter(),
            sub.prox_q.diameter(),
        )
    _LOGGER.debug(
        "sapd: T=%s, tau=%.3e, sigma=%.3e, theta=%.6f",
        params.T,
        params.tau,
        params.sigma,
        params.theta,
    )

    tau, sigma, theta = params.tau, params.sigma, params.theta
    x = sub.prox_p.prox(np.asarray(x0, dtype=float).reshape(-1), tau)
    y = sub.prox_q.prox(np.asarray(y0, dtype=float).reshape(-1), sigma)

    _, gy = sub.grad(x, y)
    calls = 1
    q_tilde = np.zeros_like(y)

    for k in range(params.T):
        s = gy + theta * q_tilde
        y_next = sub.prox_q.prox(y + sigma * s, sigma)
        gx, _ = sub.grad(x, y_next)
        x_next = sub.prox_p.prox(x - tau * gx, tau)
        _, gy_next = sub.grad(x_next, y_next)
        calls += 2

        q_tilde = gy_next - gy
        x, y, gy = x_next, y_next, gy_next
        if callback:
            callback(k + 1, calls)

    return SapdResult(x=x, y=y, iters=params.T, grad_calls=calls, params=params)
