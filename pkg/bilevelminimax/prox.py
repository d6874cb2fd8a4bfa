"""Proximal operators for the convex parts of a bilevel-minimax problem.

Every nonsmooth part that appears in a problem (the f2, f3, f~2 and f~3 of the
model, the multiplier box [0, B]^l and the truncated simplex) is represented
by a ProxFunction. Indicator kinds return Euclidean projections, so `step` is
ignored by them.
"""

import logging
import math
from abc import abstractmethod
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .const import DOMAIN_TOL, EXACT_DIAMETER_MAX_DIM, PROX_KIND, SIMPLEX_TOL

_LOGGER = logging.getLogger(__name__)

_BISECTION_MAX_ITERS = 200


def _as_vector(v, dim: int, name: str = "v") -> np.ndarray:
    vec = np.asarray(v, dtype=float).reshape(-1)
    if vec.size != dim:
        raise ValueError(f"{name} has dimension {vec.size}, expected {dim}")
    return vec


class ProxFunction:
    """The base class for a prox-friendly convex function."""

    kind = None

    def __init__(self, dim: int) -> None:
        if dim < 0:
            raise ValueError(f"dim={dim} must be nonnegative")
        self._dim = int(dim)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim})"

    @property
    def dim(self) -> int:
        """Return the dimension of the function's domain."""
        return self._dim

    @abstractmethod
    def prox(self, v, step: float) -> np.ndarray:
        """Return argmin_x { 0.5*|x - v|^2 + step*fn(x) }."""

    @abstractmethod
    def diameter(self) -> float:
        """Return the Euclidean diameter of the domain (inf if unbounded)."""

    @abstractmethod
    def contains(self, x, tol: float = DOMAIN_TOL) -> bool:
        """Return True if x lies in the domain, up to tol."""

    @abstractmethod
    def normal_cone_distance(self, x, g) -> float:
        """Return dist(0, g + N(x)), N the normal cone of the domain at x."""

    @abstractmethod
    def center(self) -> np.ndarray:
        """Return a central point of the domain."""

    @abstractmethod
    def to_dict(self) -> Dict:
        """Return a JSON-friendly description of the function."""

    def value(self, x) -> float:
        """Return the function value: 0 on the domain, inf outside of it."""
        return 0.0 if self.contains(x) else math.inf

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Return a random point of the domain."""
        return self.prox(self.center() + rng.normal(size=self.dim), 1.0)

    def _check_step(self, step: float) -> None:
        if not step > 0:
            raise ValueError(f"step={step} must be positive")

    def _check_member(self, x: np.ndarray) -> None:
        if not self.contains(x):
            raise ValueError(f"point is outside the domain of {self!r}")


class BoxIndicator(ProxFunction):
    """The indicator of the box [lo, hi]."""

    kind = PROX_KIND.Box

    def __init__(self, lo, hi) -> None:
        lo = np.atleast_1d(np.asarray(lo, dtype=float)).reshape(-1)
        hi = np.atleast_1d(np.asarray(hi, dtype=float)).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError(f"lo has shape {lo.shape} but hi has shape {hi.shape}")
        if np.any(lo > hi):
            raise ValueError("box bounds must satisfy lo <= hi componentwise")
        super().__init__(lo.size)
        self.lo, self.hi = lo, hi

    @classmethod
    def uniform(cls, dim: int, lo: float, hi: float) -> "BoxIndicator":
        """Return the box [lo, hi]^dim."""
        return cls(np.full(dim, float(lo)), np.full(dim, float(hi)))

    def prox(self, v, step: float) -> np.ndarray:
        self._check_step(step)
        return np.clip(_as_vector(v, self.dim), self.lo, self.hi)

    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def contains(self, x, tol: float = DOMAIN_TOL) -> bool:
        x = _as_vector(x, self.dim, "x")
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def normal_cone_distance(self, x, g) -> float:
        x, g = _as_vector(x, self.dim, "x"), _as_vector(g, self.dim, "g")
        self._check_member(x)

        at_hi = x >= self.hi - DOMAIN_TOL
        at_lo = x <= self.lo + DOMAIN_TOL

        # N(x) is [0, inf) at an upper bound and (-inf, 0] at a lower bound
        residual = g.copy()
        residual[at_hi] = np.maximum(g[at_hi], 0.0)
        residual[at_lo] = np.minimum(g[at_lo], 0.0)
        residual[at_hi & at_lo] = 0.0  # degenerate coordinate, lo == hi
        return float(np.linalg.norm(residual))

    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi)

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "lo": self.lo.tolist(), "hi": self.hi.tolist()}


class TruncatedSimplexIndicator(ProxFunction):
    """The indicator of {x : 0 <= x <= cap, sum(x) = 1}."""

    kind = PROX_KIND.TruncatedSimplex

    def __init__(self, dim: int, cap: float = 1.0) -> None:
        super().__init__(dim)
        if dim < 1:
            raise ValueError("a truncated simplex needs at least one coordinate")
        if not cap > 0 or dim * cap < 1.0 - SIMPLEX_TOL:
            raise ValueError(f"truncated simplex is empty: dim={dim}, cap={cap}")
        self.cap = float(cap)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim}, cap={self.cap})"

    def prox(self, v, step: float) -> np.ndarray:
        self._check_step(step)
        return project_capped_simplex(_as_vector(v, self.dim), self.cap)

    def diameter(self) -> float:
        if self.dim > EXACT_DIAMETER_MAX_DIM:
            return math.sqrt(2.0)
        return _capped_simplex_diameter(self.dim, self.cap)

    def contains(self, x, tol: float = DOMAIN_TOL) -> bool:
        x = _as_vector(x, self.dim, "x")
        return bool(
            np.all(x >= -tol)
            and np.all(x <= self.cap + tol)
            and abs(x.sum() - 1.0) <= tol * max(1, self.dim)
        )

    def normal_cone_distance(self, x, g) -> float:
        # unit-step projected-gradient residual, an upper surrogate of the cone distance
        x, g = _as_vector(x, self.dim, "x"), _as_vector(g, self.dim, "g")
        self._check_member(x)
        return float(np.linalg.norm(x - project_capped_simplex(x - g, self.cap)))

    def center(self) -> np.ndarray:
        return np.full(self.dim, 1.0 / self.dim)

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "dim": self.dim, "cap": self.cap}


class Zero(ProxFunction):
    """The zero function on R^dim (an unbounded domain)."""

    kind = PROX_KIND.Zero

    def prox(self, v, step: float) -> np.ndarray:
        self._check_step(step)
        return _as_vector(v, self.dim).copy()

    def diameter(self) -> float:
        return 0.0 if self.dim == 0 else math.inf

    def contains(self, x, tol: float = DOMAIN_TOL) -> bool:
        _as_vector(x, self.dim, "x")
        return True

    def normal_cone_distance(self, x, g) -> float:
        _as_vector(x, self.dim, "x")
        return float(np.linalg.norm(_as_vector(g, self.dim, "g")))

    def center(self) -> np.ndarray:
        return np.zeros(self.dim)

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "dim": self.dim}


class SeparableSum(ProxFunction):
    """A sum of scaled functions acting on consecutive coordinate blocks."""

    kind = PROX_KIND.Sum

    def __init__(self, parts: Sequence[Tuple[ProxFunction, float]]) -> None:
        blocks, offset = [], 0
        for fn, scale in parts:
            if scale < 0:
                raise ValueError(f"scale={scale} must be nonnegative")
            blocks.append((slice(offset, offset + fn.dim), fn, float(scale)))
            offset += fn.dim
        super().__init__(offset)
        self._blocks = blocks

    def __repr__(self) -> str:
        inner = ", ".join(f"{fn!r}*{s:g}" for _, fn, s in self._blocks)
        return f"{type(self).__name__}({inner})"

    @property
    def blocks(self) -> List[Tuple[slice, ProxFunction, float]]:
        """Return the (block-range, function, scale) triples."""
        return list(self._blocks)

    def prox(self, v, step: float) -> np.ndarray:
        self._check_step(step)
        v = _as_vector(v, self.dim)
        out = np.empty_like(v)
        for rng, fn, scale in self._blocks:
            out[rng] = fn.prox(v[rng], step * scale) if scale > 0 else v[rng]
        return out

    def diameter(self) -> float:
        return math.sqrt(sum(fn.diameter() ** 2 for _, fn, _ in self._blocks))

    def contains(self, x, tol: float = DOMAIN_TOL) -> bool:
        x = _as_vector(x, self.dim, "x")
        return all(fn.contains(x[rng], tol) for rng, fn, _ in self._blocks)

    def normal_cone_distance(self, x, g) -> float:
        x, g = _as_vector(x, self.dim, "x"), _as_vector(g, self.dim, "g")
        return math.sqrt(
            sum(
                fn.normal_cone_distance(x[rng], g[rng]) ** 2
                for rng, fn, _ in self._blocks
            )
        )

    def center(self) -> np.ndarray:
        return _concat([fn.center() for _, fn, _ in self._blocks])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return _concat([fn.sample(rng) for _, fn, _ in self._blocks])

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "parts": [
                {"fn": fn.to_dict(), "scale": scale} for _, fn, scale in self._blocks
            ],
        }


def _concat(parts: List[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts) if parts else np.zeros(0)


def project_capped_simplex(v: np.ndarray, cap: float) -> np.ndarray:
    """Project v onto {x : 0 <= x <= cap, sum(x) = 1}.

    The projection is clip(v - tau, 0, cap) for the unique shift tau making
    the coordinates sum to one. The shift is bracketed by bisection, then
    refined exactly on the coordinates left strictly inside (0, cap).
    """
    v = np.asarray(v, dtype=float)
    n = v.size
    if n == 0 or n * cap < 1.0 - SIMPLEX_TOL:
        raise ValueError(f"truncated simplex is empty: dim={n}, cap={cap}")

    lo, hi = float(v.min()) - cap, float(v.max())
    for _ in range(_BISECTION_MAX_ITERS):
        if hi - lo <= SIMPLEX_TOL * max(1.0, abs(lo), abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        if np.clip(v - mid, 0.0, cap).sum() > 1.0:
            lo = mid
        else:
            hi = mid

    x = np.clip(v - 0.5 * (lo + hi), 0.0, cap)
    free = (x > 0.0) & (x < cap)
    if free.any():
        x[free] += (1.0 - x.sum()) / free.sum()
        np.clip(x, 0.0, cap, out=x)
    return x


def _capped_simplex_diameter(n: int, cap: float) -> float:
    """Return the exact diameter of the truncated simplex by vertex-pair search.

    A vertex has k = floor(1/cap) coordinates at cap, possibly one coordinate
    at the remainder r = 1 - k*cap and zeros elsewhere. Up to permutation a
    pair of vertices is fixed by the overlap of their cap sets and by where
    each remainder coordinate falls in the other vertex.
    """
    k = min(int(math.floor(1.0 / cap + SIMPLEX_TOL)), n)
    r = 1.0 - k * cap
    if r <= SIMPLEX_TOL or k == n:
        r = 0.0
    has_r = 1 if r > 0 else 0
    zeros = n - k - has_r

    places = ("p", "r", "0") if has_r else (None,)
    best = 0.0
    for overlap in range(k + 1):
        for a in places:  # position of u's remainder coordinate within w
            for b in places:  # position of w's remainder coordinate within u
                if (a == "r") != (b == "r"):
                    continue
                n_p0 = k - overlap - (b == "p")
                n_0p = k - overlap - (a == "p")
                n_00 = zeros - n_0p - (b == "0")
                if min(n_p0, n_0p, n_00) < 0:
                    continue
                dist_sq = (n_p0 + n_0p) * cap**2
                for place in (a, b):
                    if place == "p":
                        dist_sq += (cap - r) ** 2
                    elif place == "0":
                        dist_sq += r**2
                best = max(best, dist_sq)
    return math.sqrt(best)


def prox(fn: ProxFunction, v, step: float) -> np.ndarray:
    """Return the proximal point of fn at v with the given step."""
    return fn.prox(v, step)


def domain_diameter(fn: ProxFunction) -> float:
    """Return the diameter of dom fn (inf for unbounded domains)."""
    return fn.diameter()


def normal_cone_distance(fn: ProxFunction, x, g) -> float:
    """Return dist(0, g + N(x)) over the domain of fn."""
    return fn.normal_cone_distance(x, g)


def prox_from_dict(data: Dict) -> ProxFunction:
    """Rebuild a ProxFunction from its to_dict() form."""
    kind = data["kind"]
    if kind == PROX_KIND.Box:
        return BoxIndicator(data["lo"], data["hi"])
    if kind == PROX_KIND.TruncatedSimplex:
        return TruncatedSimplexIndicator(data["dim"], data["cap"])
    if kind == PROX_KIND.Zero:
        return Zero(data["dim"])
    if kind == PROX_KIND.Sum:
        return SeparableSum(
            [(prox_from_dict(p["fn"]), p["scale"]) for p in data["parts"]]
        )
    raise KeyError(f"unknown prox kind: {kind}")
