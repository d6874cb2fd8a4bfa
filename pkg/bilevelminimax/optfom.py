"""The optimal first-order method for strongly-convex-strongly-concave saddles.

Solves min_x max_y  h(x, y) + p(x) - q(y), where h is smooth, sigma_x-strongly
convex in x and sigma_y-strongly concave in y, and p, q are prox-friendly.
"""

import logging
import math
from abc import abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .const import OPTFOM_DIVERGENCE_FACTOR, OPTFOM_MAX_GRAD_CALLS, OPTFOM_MAX_INNER
from .prox import ProxFunction

_LOGGER = logging.getLogger(__name__)


class SaddleProblem:
    """The base class for a composite SCSC saddle problem."""

    def __init__(
        self,
        prox_p: ProxFunction,
        prox_q: ProxFunction,
        sigma_x: float,
        sigma_y: float,
        L_grad_hbar: float,
    ) -> None:
        if not (sigma_x > 0 and sigma_y > 0):
            raise ValueError(f"sigma_x={sigma_x}, sigma_y={sigma_y} must be positive")
        if not L_grad_hbar > 0:
            raise ValueError(f"L_grad_hbar={L_grad_hbar} must be positive")

        self.prox_p = prox_p
        self.prox_q = prox_q
        self.sigma_x = float(sigma_x)
        self.sigma_y = float(sigma_y)
        self.L_grad_hbar = float(L_grad_hbar)

    @abstractmethod
    def grad(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return (grad_x h(x, y), grad_y h(x, y))."""


@dataclass(frozen=True)
class OptFomParams:
    alpha_bar: float
    eta_z: float
    eta_y: float
    zeta: float
    gamma_x: float
    gamma_y: float
    zeta_hat: float

    @classmethod
    def from_constants(
        cls, sigma_x: float, sigma_y: float, L_grad_hbar: float
    ) -> "OptFomParams":
        """Derive the step sizes from the strong convexity/concavity moduli and L."""
        alpha_bar = min(1.0, math.sqrt(8.0 * sigma_y / sigma_x))
        return cls(
            alpha_bar=alpha_bar,
            eta_z=sigma_x / 2.0,
            eta_y=min(1.0 / (2.0 * sigma_y), 4.0 / (alpha_bar * sigma_x)),
            zeta=1.0 / (2.0 * math.sqrt(5.0) * (1.0 + 8.0 * L_grad_hbar / sigma_x)),
            gamma_x=8.0 / sigma_x,
            gamma_y=8.0 / sigma_x,
            zeta_hat=min(sigma_x, sigma_y) / L_grad_hbar**2,
        )


@dataclass
class OptFomResult:
    x: np.ndarray
    y: np.ndarray
    iters: int
    certificate: float
    grad_calls: int
    inner_iters: int = 0
    budget_exceeded: bool = False
    diverged: bool = False

    def __iter__(self):
        return iter((self.x, self.y, self.iters))


class _BudgetExceeded(Exception):
    pass


class _Diverged(Exception):
    pass


class _CountingGrad:
    """Route gradient calls to the saddle problem, enforcing a call budget."""

    def __init__(self, sub: SaddleProblem, max_calls: Optional[int]) -> None:
        self._sub = sub
        self._max_calls = max_calls
        self.calls = 0

    def __call__(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        if self._max_calls is not None and self.calls >= self._max_calls:
            raise _BudgetExceeded
        self.calls += 1
        return self._sub.grad(x, y)


def _certify(sub: SaddleProblem, zeta_hat: float, x, y, grad) -> Tuple:
    gx, gy = grad(x, y)
    x_hat = sub.prox_p.prox(x - zeta_hat * gx, zeta_hat)
    y_hat = sub.prox_q.prox(y + zeta_hat * gy, zeta_hat)
    gx_hat, gy_hat = grad(x_hat, y_hat)

    res_x = (x - x_hat) / zeta_hat - (gx - gx_hat)
    res_y = (y_hat - y) / zeta_hat - (gy - gy_hat)
    value = math.sqrt(float(res_x @ res_x) + float(res_y @ res_y))
    return value, x_hat, y_hat


def certificate(sub: SaddleProblem, x, y) -> float:
    """Return the prox-gradient stationarity certificate of the saddle at (x, y)."""
    zeta_hat = min(sub.sigma_x, sub.sigma_y) / sub.L_grad_hbar**2
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return _certify(sub, zeta_hat, x, y, sub.grad)[0]


def optfom(
    eps_bar: float,
    x0,
    y0,
    sub: SaddleProblem,
    max_grad_calls: Optional[int] = OPTFOM_MAX_GRAD_CALLS,
    max_iters: Optional[int] = None,
    max_inner: int = OPTFOM_MAX_INNER,
    callback: Optional[Callable[[int, float, int], None]] = None,
) -> OptFomResult:
    """Return an eps_bar-certified saddle point of `sub`, started from (x0, y0).

    On a hit of the gradient budget, the iteration cap or a detected
    divergence of the inner loop, the best certified iterate is returned and
    the result is flagged instead.
    """
    if not eps_bar > 0:
        raise ValueError(f"eps_bar={eps_bar} must be positive")

    par = OptFomParams.from_constants(sub.sigma_x, sub.sigma_y, sub.L_grad_hbar)
    _LOGGER.debug("optfom: eps_bar=%.3e, params=%s", eps_bar, par)

    sx, sy = sub.sigma_x, sub.sigma_y
    ab = par.alpha_bar
    step_x, step_y = par.zeta * par.gamma_x, par.zeta * par.gamma_y

    grad = _CountingGrad(sub, max_grad_calls)
    x = np.array(x0, dtype=float).reshape(-1)
    y = np.array(y0, dtype=float).reshape(-1)

    best = None  # (certificate, x_hat, y_hat)
    k = inner_total = 0
    budget_exceeded = diverged = False

    try:
        best = _certify(sub, par.zeta_hat, x, y, grad)
        if callback:
            callback(0, best[0], grad.calls)

        z = -sx * x
        z_f, y_f = z.copy(), y.copy()

        while best[0] > eps_bar:
            if max_iters is not None and k >= max_iters:
                budget_exceeded = True
                break

            z_g = ab * z + (1.0 - ab) * z_f
            y_g = ab * y + (1.0 - ab) * y_f
            x_m, y_m = -z_g / sx, y_g

            def a_map(xx, yy):
                gx, gy = grad(xx, yy)
                ax = gx - 0.5 * sx * xx - 0.5 * z_g
                ay = -gy + 0.125 * sx * (yy - y_g)
                return ax, ay, gx, gy

            ax, ay, _, _ = a_map(x_m, y_m)
            wx, wy = x_m - step_x * ax, y_m - step_y * ay
            x_0 = sub.prox_p.prox(wx, step_x)
            y_0 = sub.prox_q.prox(wy, step_y)
            bx, by = (wx - x_0) / step_x, (wy - y_0) / step_y

            xt, yt = x_0, y_0
            t, entry = 0, None
            while True:
                ax, ay, gx, gy = a_map(xt, yt)
                rx, ry = ax + bx, ay + by
                lhs = par.gamma_x * float(rx @ rx) + par.gamma_y * float(ry @ ry)
                dx, dy = xt - x_m, yt - y_m
                rhs = float(dx @ dx) / par.gamma_x + float(dy @ dy) / par.gamma_y
                if lhs <= rhs:
                    break

                residual = math.sqrt(lhs)
                if entry is None:
                    entry = residual
                elif residual > OPTFOM_DIVERGENCE_FACTOR * entry or t >= max_inner:
                    raise _Diverged

                beta = 2.0 / (t + 3.0)
                xh = xt + beta * (x_0 - xt) - step_x * rx
                yh = yt + beta * (y_0 - yt) - step_y * ry
                axh, ayh, _, _ = a_map(xh, yh)

                wx = xt + beta * (x_0 - xt) - step_x * axh
                wy = yt + beta * (y_0 - yt) - step_y * ayh
                xt = sub.prox_p.prox(wx, step_x)
                yt = sub.prox_q.prox(wy, step_y)
                bx, by = (wx - xt) / step_x, (wy - yt) / step_y
                t += 1

            inner_total += t
            x_f, y_f = xt, yt
            z_f = gx - sx * x_f + bx  # grad_x of h-hat plus the b-correction
            w_f = -(gy + sy * y_f) + by

            z = z + (par.eta_z / sx) * (z_f - z) - par.eta_z * (x_f + z_f / sx)
            y = y + par.eta_y * sy * (y_f - y) - par.eta_y * (w_f + sy * y_f)
            x = -z / sx
            k += 1

            cert = _certify(sub, par.zeta_hat, x, y, grad)
            if cert[0] < best[0] or cert[0] <= eps_bar:
                best = cert
            if callback:
                callback(k, cert[0], grad.calls)

    except _BudgetExceeded:
        budget_exceeded = True
    except _Diverged:
        diverged = True

    if best is None:  # the budget did not even cover the entry certificate
        x_in = sub.prox_p.prox(x, 1.0)
        y_in = sub.prox_q.prox(y, 1.0)
        best = (math.inf, x_in, y_in)

    if budget_exceeded:
        _LOGGER.debug(
            "optfom: budget exhausted after %s iterations (%s grads), cert=%.3e",
            k,
            grad.calls,
            best[0],
        )
    if diverged:
        _LOGGER.warning(
            "optfom: inner loop diverged at iteration %s, cert=%.3e", k, best[0]
        )

    return OptFomResult(
        x=best[1],
        y=best[2],
        iters=k,
        certificate=best[0],
        grad_calls=grad.calls,
        inner_iters=inner_total,
        budget_exceeded=budget_exceeded,
        diverged=diverged,
    )
