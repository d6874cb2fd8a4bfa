"""Hyperparameter tuning of a group-DRO classifier, as a bilevel-minimax problem.

A linear encoder W maps unit-norm inputs to features on which a linear head y1
is trained. The lower level is the group-DRO training saddle

    min_{y1} max_{y2 in simplex}  y2 . L_train(W, y1) - eta/2 |y2 - 1/G|^2 + l2 |y1|^2

and the upper level tunes x1 = (W, eta) for the worst validation group:

    min_{x1} max_{x2 in capped simplex}  x2 . L_val(W, y1) + l2 |W|^2.

Data are synthetic Gaussian clusters: the label is carried by a core feature,
a spurious feature agrees with the label on the first two groups and
disagrees on the others, and the last group is the training minority.
"""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from .const import FAMILY
from .problem import BilevelMinimaxProblem, BlockLayout, StochasticOracle
from .prox import (
    BoxIndicator,
    SeparableSum,
    TruncatedSimplexIndicator,
    project_capped_simplex,
)

_LOGGER = logging.getLogger(__name__)

VARIANCE_DRAWS = 32


@dataclass(frozen=True)
class DroConfig:
    n_groups: int = 4
    minority: float = 0.03
    n_train: int = 2000
    n_val_per_group: int = 100
    input_dim: int = 6
    feature_dim: int = 3
    l2: float = 0.1
    eta_min: float = 0.1
    eta_max: float = 10.0
    eta_init: float = 1.0
    val_cap: float = 1.0
    minibatch: int = 128
    encoder_bound: float = 1.0
    head_bound: float = 5.0
    core_strength: float = 1.0
    spurious_strength: float = 1.5
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_groups < 2:
            raise ValueError(f"n_groups={self.n_groups} must be at least 2")
        if not 0.0 < self.minority < 1.0:
            raise ValueError(f"minority={self.minority} must lie in (0, 1)")
        if self.input_dim < 2 or self.feature_dim < 1:
            raise ValueError("input_dim must be at least 2 and feature_dim at least 1")
        if not 0.0 < self.eta_min <= self.eta_init <= self.eta_max:
            raise ValueError(
                f"need 0 < eta_min <= eta_init <= eta_max, got "
                f"{self.eta_min}, {self.eta_init}, {self.eta_max}"
            )
        if self.val_cap * self.n_groups < 1.0 or self.val_cap <= 0.0:
            raise ValueError(
                f"val_cap={self.val_cap} is infeasible for {self.n_groups} groups"
            )
        if self.minibatch < 1 or self.n_train < self.minibatch:
            raise ValueError(
                f"minibatch={self.minibatch} must lie in [1, n_train={self.n_train}]"
            )
        if self.n_val_per_group < 1:
            raise ValueError("n_val_per_group must be positive")

    @property
    def train_sizes(self) -> np.ndarray:
        """Return per-group training sizes; the last group holds the minority share."""
        G = self.n_groups
        minor = max(1, int(round(self.minority * self.n_train)))
        rest = self.n_train - minor
        if rest < G - 1:
            raise ValueError(f"n_train={self.n_train} is too small for {G} groups")
        sizes = np.full(G - 1, rest // (G - 1))
        sizes[: rest % (G - 1)] += 1
        return np.append(sizes, minor)


@dataclass
class _Split:
    features: np.ndarray  # (N, input_dim), unit rows
    labels: np.ndarray  # (N,) in {-1, +1}
    groups: np.ndarray  # (N,) group ids

    def subset(self, idx: Optional[np.ndarray]) -> "_Split":
        if idx is None:
            return self
        return _Split(self.features[idx], self.labels[idx], self.groups[idx])


def _make_split(config: DroConfig, sizes, rng, offsets) -> _Split:
    d = config.input_dim
    features, labels, groups = [], [], []
    for g, size in enumerate(sizes):
        label = 1.0 if g % 2 == 0 else -1.0
        attr = label if g < 2 else -label
        mean = offsets[g].copy()
        mean[0] = config.core_strength * label
        mean[1] = config.spurious_strength * attr
        a = mean + config.noise_std * rng.normal(size=(size, d))
        features.append(a / np.linalg.norm(a, axis=1, keepdims=True))
        labels.append(np.full(size, label))
        groups.append(np.full(size, g))
    return _Split(np.vstack(features), np.concatenate(labels), np.concatenate(groups))


def capped_simplex_max(values, cap: float) -> float:
    """Return max { w . values : w in the simplex with entries <= cap }."""
    remaining, total = 1.0, 0.0
    for v in np.sort(np.asarray(values, dtype=float))[::-1]:
        take = min(cap, remaining)
        total += take * v
        remaining -= take
        if remaining <= 0.0:
            break
    return total


class DroInstance:
    """A generated group-DRO tuning instance; unpacks as (problem, oracle)."""

    family = FAMILY.Dro

    def __init__(self, config: DroConfig) -> None:
        self.config = config
        self.seed = config.seed

        rng = np.random.default_rng(config.seed)
        G, d, k = config.n_groups, config.input_dim, config.feature_dim
        offsets = np.zeros((G, d))
        offsets[:, 2:] = rng.normal(scale=0.5, size=(G, d - 2))

        self.train = _make_split(config, config.train_sizes, rng, offsets)
        self.val = _make_split(config, np.full(G, config.n_val_per_group), rng, offsets)

        W0 = rng.normal(scale=1.0 / math.sqrt(d), size=(k, d))
        W0 = np.clip(W0, -config.encoder_bound, config.encoder_bound)
        self._x1_0 = np.append(W0.reshape(-1), config.eta_init)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(config={self.config})"

    def __iter__(self):
        return iter((self.problem, self.oracle))

    @property
    def dims(self) -> Dict:
        c = self.config
        return {
            "n_groups": c.n_groups,
            "input_dim": c.input_dim,
            "feature_dim": c.feature_dim,
            "n_train": c.n_train,
        }

    def initial_x1(self) -> np.ndarray:
        return self._x1_0.copy()

    def initial_point(self) -> None:
        return None

    def constrained_problem(self):
        return None

    def bilevel_problem(self) -> BilevelMinimaxProblem:
        return self.problem

    def unpack_x1(self, x1) -> Tuple[np.ndarray, float]:
        """Return (W, eta) from the upper-level variable."""
        k, d = self.config.feature_dim, self.config.input_dim
        return np.asarray(x1[:-1]).reshape(k, d), float(x1[-1])

    def group_terms(self, W, y1, split: _Split, weights) -> Tuple:
        """Return per-group losses with the weighted W- and y1-gradients.

        Group losses are means over the members of `split`, so a stratified
        subset gives unbiased estimates.
        """
        G = self.config.n_groups
        proj = split.features @ W.T
        s = split.labels * (proj @ y1)
        loss = np.logaddexp(0.0, -s)
        counts = np.bincount(split.groups, minlength=G).astype(float)
        counts[counts == 0] = 1.0
        losses = np.bincount(split.groups, weights=loss, minlength=G) / counts

        r = (np.asarray(weights) / counts)[split.groups] * (-expit(-s) * split.labels)
        grad_W = np.outer(y1, split.features.T @ r)
        grad_y1 = proj.T @ r
        return losses, grad_W, grad_y1

    def grad_ftilde1(self, x1, y1, y2, split: Optional[_Split] = None):
        split = self.train if split is None else split
        W, eta = self.unpack_x1(x1)
        G = self.config.n_groups
        losses, gW, gy = self.group_terms(W, y1, split, y2)
        centered = y2 - 1.0 / G
        return np.concatenate(
            [
                gW.reshape(-1),
                [-0.5 * float(centered @ centered)],
                gy + 2.0 * self.config.l2 * y1,
                losses - eta * centered,
            ]
        )

    def eval_ftilde1(self, x1, y1, y2) -> float:
        W, eta = self.unpack_x1(x1)
        losses, _, _ = self.group_terms(W, y1, self.train, y2)
        centered = y2 - 1.0 / self.config.n_groups
        return (
            float(y2 @ losses)
            - 0.5 * eta * float(centered @ centered)
            + self.config.l2 * float(y1 @ y1)
        )

    def grad_f1(self, x1, x2, y1, y2, split: Optional[_Split] = None):
        split = self.val if split is None else split
        W, _ = self.unpack_x1(x1)
        losses, gW, gy = self.group_terms(W, y1, split, x2)
        return np.concatenate(
            [
                (gW + 2.0 * self.config.l2 * W).reshape(-1),
                [0.0],
                losses,
                gy,
                np.zeros(y2.size),
            ]
        )

    def eval_f1(self, x1, x2, y1, y2) -> float:
        W, _ = self.unpack_x1(x1)
        losses, _, _ = self.group_terms(W, y1, self.val, x2)
        return float(x2 @ losses) + self.config.l2 * float(np.sum(W * W))

    def train_losses(self, x1, y1) -> np.ndarray:
        W, _ = self.unpack_x1(x1)
        return self.group_terms(W, y1, self.train, np.zeros(self.config.n_groups))[0]

    def val_losses(self, x1, y1) -> np.ndarray:
        W, _ = self.unpack_x1(x1)
        return self.group_terms(W, y1, self.val, np.zeros(self.config.n_groups))[0]

    def _lipschitz(self) -> Tuple[float, float]:
        c = self.config
        head = c.head_bound**2 * c.feature_dim
        enc = c.encoder_bound**2 * c.feature_dim * c.input_dim
        L_loss = (head + enc) / 4.0 + 1.0
        G_loss = math.sqrt(head + enc)
        coupling = 2.0 * math.sqrt(c.n_groups) * G_loss
        L_f1 = L_loss + 2.0 * c.l2 + coupling
        L_ft1 = L_loss + 2.0 * c.l2 + c.eta_max + coupling + 2.0 * math.sqrt(2.0)
        return L_f1, L_ft1

    @cached_property
    def problem(self) -> BilevelMinimaxProblem:
        c = self.config
        G, k, d = c.n_groups, c.feature_dim, c.input_dim
        L_f1, L_ft1 = self._lipschitz()

        def primal_value(x1, y1):
            _, eta = self.unpack_x1(x1)
            losses = self.train_losses(x1, y1)
            y2 = project_capped_simplex(1.0 / G + losses / eta, 1.0)
            return self.eval_ftilde1(x1, y1, y2)

        def upper_max(x1, y1, y2):
            W, _ = self.unpack_x1(x1)
            worst = capped_simplex_max(self.val_losses(x1, y1), c.val_cap)
            return worst + c.l2 * float(np.sum(W * W))

        prox_f2 = SeparableSum(
            [
                (BoxIndicator.uniform(k * d, -c.encoder_bound, c.encoder_bound), 1.0),
                (BoxIndicator.uniform(1, c.eta_min, c.eta_max), 1.0),
            ]
        )
        return BilevelMinimaxProblem(
            layout=BlockLayout(k * d + 1, G, k, G),
            grad_f1=self.grad_f1,
            grad_ftilde1=self.grad_ftilde1,
            eval_f1=self.eval_f1,
            eval_ftilde1=self.eval_ftilde1,
            prox_f2=prox_f2,
            prox_f3=TruncatedSimplexIndicator(G, c.val_cap),
            prox_ftilde2=BoxIndicator.uniform(k, -c.head_bound, c.head_bound),
            prox_ftilde3=TruncatedSimplexIndicator(G, 1.0),
            L_grad_f1=L_f1,
            L_grad_ftilde1=L_ft1,
            f_low=0.0,
            closed_form_pd=(primal_value, None),
            upper_max_closed_form=upper_max,
            lower_moduli=(2.0 * c.l2, c.eta_min),
            name=f"dro-G{G}-s{c.seed}",
        )

    @cached_property
    def oracle(self) -> "MinibatchOracle":
        return self.minibatch_oracle(self.config.seed)

    def minibatch_oracle(self, seed: int) -> "MinibatchOracle":
        """Return a stratified minibatch oracle drawing from its own seeded stream."""
        return MinibatchOracle(self, seed)

    def stratified_indices(self, split: _Split, rng: np.random.Generator) -> np.ndarray:
        """Return ceil(b/G) indices per group (the whole group if it is smaller).

        A minibatch at least as large as the split returns the whole split.
        """
        if self.config.minibatch >= split.groups.size:
            return np.arange(split.groups.size)
        per_group = math.ceil(self.config.minibatch / self.config.n_groups)
        picks = []
        for g in range(self.config.n_groups):
            members = np.flatnonzero(split.groups == g)
            if members.size <= per_group:
                picks.append(members)
            else:
                picks.append(rng.choice(members, size=per_group, replace=False))
        return np.concatenate(picks)

    def evaluate(self, x1, y1) -> Dict[str, float]:
        """Return worst-group and average validation loss and accuracy."""
        W, _ = self.unpack_x1(x1)
        G = self.config.n_groups
        losses = self.val_losses(x1, y1)
        correct = (self.val.labels * (self.val.features @ W.T @ y1)) > 0
        counts = np.bincount(self.val.groups, minlength=G)
        hits = np.bincount(self.val.groups, weights=correct.astype(float), minlength=G)
        accuracy = hits / counts
        return {
            "worst_group_loss": float(losses.max()),
            "average_loss": float(losses.mean()),
            "worst_group_accuracy": float(accuracy.min()),
            "average_accuracy": float(accuracy.mean()),
        }

    def baseline(self, eps: float = 1e-3) -> Dict[str, float]:
        """Return the validation metrics of the head trained at the initial (W, eta)."""
        from .driver import initialize

        x1 = self.initial_x1()
        y1, _ = initialize(self.problem, x1, eps)
        return self.evaluate(x1, y1)

    def data_digest(self) -> str:
        h = hashlib.sha256()
        for split in (self.train, self.val):
            for arr in (split.features, split.labels, split.groups):
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> Dict:
        return {
            "family": self.family,
            "seed": self.seed,
            "dims": self.dims,
            "constants": asdict(self.config),
            "metadata": {
                "train_sizes": self.config.train_sizes.tolist(),
                "data_digest": self.data_digest(),
            },
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DroInstance":
        instance = cls(DroConfig(**data["constants"]))
        expected = data.get("metadata", {}).get("data_digest")
        if expected is not None and expected != instance.data_digest():
            raise ValueError("regenerated DRO data do not match the stored digest")
        return instance


class MinibatchOracle(StochasticOracle):
    """Stratified-minibatch gradient oracle for a DroInstance.

    The noise levels (delta_f, delta_ftilde) are measured at construction as
    root-mean-square deviations from the full-batch gradients at the initial
    point.
    """

    def __init__(self, instance: DroInstance, rng_seed: int) -> None:
        super().__init__(instance.problem, 0.0, 0.0, rng_seed)
        self.instance = instance
        self.delta_f, self.delta_ftilde = self._measure_deltas()

    def _batch(self, split: _Split, rng: np.random.Generator) -> _Split:
        return split.subset(self.instance.stratified_indices(split, rng))

    def grad_f1(self, x1, x2, y1, y2):
        self.counter.calls_f1 += 1
        batch = self._batch(self.instance.val, self.rng)
        return self.instance.grad_f1(x1, x2, y1, y2, batch)

    def grad_ftilde1(self, x1, y1, y2):
        self.counter.calls_ftilde1 += 1
        return self.instance.grad_ftilde1(
            x1, y1, y2, self._batch(self.instance.train, self.rng)
        )

    def _measure_deltas(self) -> Tuple[float, float]:
        inst, problem = self.instance, self.problem
        rng = np.random.default_rng(self.rng_seed)
        x1 = inst.initial_x1()
        x2 = problem.prox_f3.center()
        y1 = problem.prox_ftilde2.center() + 0.1
        y2 = problem.prox_ftilde3.center()

        exact_f = inst.grad_f1(x1, x2, y1, y2)
        exact_ft = inst.grad_ftilde1(x1, y1, y2)
        dev_f = dev_ft = 0.0
        for _ in range(VARIANCE_DRAWS):
            g = inst.grad_f1(x1, x2, y1, y2, self._batch(inst.val, rng))
            dev_f += float(np.sum((g - exact_f) ** 2))
            g = inst.grad_ftilde1(x1, y1, y2, self._batch(inst.train, rng))
            dev_ft += float(np.sum((g - exact_ft) ** 2))

        delta_f = math.sqrt(dev_f / VARIANCE_DRAWS)
        delta_ft = math.sqrt(dev_ft / VARIANCE_DRAWS)
        _LOGGER.debug(
            "minibatch oracle: delta_f=%.3e, delta_ftilde=%.3e", delta_f, delta_ft
        )
        return delta_f, delta_ft


def gen_dro(config: DroConfig) -> DroInstance:
    """Return the DRO instance for `config`; it unpacks as (problem, oracle)."""
    instance = DroInstance(config)
    _LOGGER.info(
        "gen_dro: %s groups, train sizes %s, seed=%s",
        config.n_groups,
        config.train_sizes.tolist(),
        config.seed,
    )
    return instance
