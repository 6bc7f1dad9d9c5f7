"""Tabular sanity experiments: a hiring dataset where one feature proxies
for gender, and a threshold task for sweeping a Lipschitz bound.

In the hiring data a classifier never sees gender directly, so its gradient
with respect to gender is recovered through the chain rule, using
difference quotients estimated from the data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .models import LabeledExample, TrainConfig, train_lipschitz
from .sensitivity import abs_jacobian, accumulated_sensitivity


class UndefinedDerivative(ValueError):
    pass


@dataclass(frozen=True)
class HiringRecord:
    x1: float  # years of education
    x2: float  # hair length
    x3: int  # gender indicator


@dataclass(frozen=True)
class HiringData:
    """Column view of hiring records."""

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[HiringRecord]) -> HiringData:
        return cls(
            np.array([r.x1 for r in records], dtype=np.float64),
            np.array([r.x2 for r in records], dtype=np.float64),
            np.array([r.x3 for r in records], dtype=np.float64),
        )

    def __len__(self) -> int:
        return self.x1.size


def gen_hiring(n: int, seed: int = 0, hair_means: tuple[float, float] = (2.0, 10.0),
               hair_var: float = 10.0) -> list[HiringRecord]:
    if n < 2:
        raise ValueError("need at least two records")
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(0.0, 10.0, n)
    x3 = rng.integers(0, 2, n)
    x2 = np.where(x3 == 1, hair_means[1], hair_means[0]) + np.sqrt(hair_var) * rng.standard_normal(n)
    return [HiringRecord(float(a), float(b), int(c)) for a, b, c in zip(x1, x2, x3)]


# -- difference quotients ------------------------------------------------------

_WEIGHTINGS = ("uniform", "squared")


def _partners(n: int, m: int, max_pairs: int | None, rng) -> np.ndarray:
    others = np.delete(np.arange(n), m)
    if max_pairs is not None and max_pairs < others.size:
        others = rng.choice(others, size=max_pairs, replace=False)
    return others


def _quotient_sums(da: np.ndarray, db: np.ndarray, weighting: str) -> tuple[float, float]:
    """(numerator, denominator) whose ratio is the weighted mean quotient."""
    ok = db != 0
    if weighting == "uniform":
        return float(np.sum(da[ok] / db[ok])), float(ok.sum())
    return float(np.sum(da * db)), float(np.sum(db * db))


def diff_quotient(a, b, at: int, max_pairs: int | None = None, seed: int = 0,
                  weighting: str = "uniform") -> float:
    """Mean of ``(a[at] - a[n]) / (b[at] - b[n])`` over partners with ``b[n] != b[at]``.

    ``weighting="squared"`` weights each quotient by ``(b[at] - b[n])**2``,
    i.e. a least-squares slope through the pairs; for a binary ``b`` every
    nonzero denominator has the same size and both weightings agree.
    ``max_pairs`` caps the partners drawn per point.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D and equally long")
    if weighting not in _WEIGHTINGS:
        raise ValueError(f"weighting must be one of {_WEIGHTINGS}")
    if not 0 <= at < a.size:
        raise IndexError(f"index {at} out of range for {a.size} points")
    others = _partners(a.size, at, max_pairs, np.random.default_rng([seed, at]))
    num, den = _quotient_sums(a[at] - a[others], b[at] - b[others], weighting)
    if den == 0:
        raise UndefinedDerivative("no partner differs in the denominator feature")
    return num / den


def pooled_diff_quotient(a, b, max_pairs: int | None = None, seed: int = 0,
                         weighting: str = "uniform", chunk: int = 256) -> float:
    """Difference quotient pooled over every point's partner set.

    With all partners this is the mean over all ordered pairs with distinct
    ``b``; for binary ``b`` it equals the gap in group means of ``a``, and
    with squared weighting it equals ``cov(a, b) / var(b)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D and equally long")
    if weighting not in _WEIGHTINGS:
        raise ValueError(f"weighting must be one of {_WEIGHTINGS}")
    n = a.size
    num = den = 0.0
    if max_pairs is None or max_pairs >= n - 1:
        for start in range(0, n, chunk):
            rows = slice(start, min(start + chunk, n))
            da = a[rows, None] - a[None, :]
            db = b[rows, None] - b[None, :]
            s, c = _quotient_sums(da.ravel(), db.ravel(), weighting)
            num, den = num + s, den + c
    else:
        for m in range(n):
            others = _partners(n, m, max_pairs, np.random.default_rng([seed, m]))
            s, c = _quotient_sums(a[m] - a[others], b[m] - b[others], weighting)
            num, den = num + s, den + c
    if den == 0:
        raise UndefinedDerivative("denominator feature is constant")
    return num / den


# -- parity cases --------------------------------------------------------------


@dataclass(frozen=True)
class ParityResult:
    p_case1: float
    p_case2: float
    dx2_dx3: float
    dx1_dx3: float
    dx1_dx2: float
    v_case1: tuple[float, ...]
    v_case2: tuple[float, ...]


def _row_abs_grads(f, data: np.ndarray) -> np.ndarray:
    """Per-row ``|df/dx|`` for a row-wise ``f``.

    Rows are independent, so one backward pass of ``sum(f)`` recovers every
    row's gradient at once.
    """
    out = ad.forward(lambda x: ad.sum(f(x)), [data])
    return np.abs(ad.grad(out))


def _case_outputs_p(per_row_jac: np.ndarray, v: np.ndarray) -> float:
    # outputs are [f, 1 - f]: both rows of J carry the same magnitudes
    w = np.array([0.5, 0.5])
    vals = [accumulated_sensitivity(w, np.stack([row, row]), v) for row in per_row_jac]
    return float(np.mean(vals))


def run_parity_cases(records: Sequence[HiringRecord] | HiringData, max_pairs: int | None = None,
                     seed: int = 0) -> ParityResult:
    """Sensitivity to gender for two hiring classifiers that never read it.

    Case 1 scores ``sigmoid((x1 - 5) + (x2 - 6))`` and weights only x3;
    ``df/dx3 = df/dx2 * dx2/dx3``. Case 2 scores ``sigmoid(x1 - 5)`` and
    weights x2 and x3 equally, chaining through ``dx1/dx2`` and ``dx1/dx3``.
    P is averaged over every point in the data.
    """
    d = records if isinstance(records, HiringData) else HiringData.from_records(records)
    q23 = pooled_diff_quotient(d.x2, d.x3, max_pairs, seed)
    q13 = pooled_diff_quotient(d.x1, d.x3, max_pairs, seed)
    # x2 is continuous: near-equal pairs make plain quotients heavy-tailed
    q12 = pooled_diff_quotient(d.x1, d.x2, max_pairs, seed, weighting="squared")

    xs = np.stack([d.x1, d.x2], axis=1)
    g1 = _row_abs_grads(lambda x: ad.sigmoid(ad.sum(x, axis=1) - 11.0), xs)
    jac1 = np.column_stack([g1[:, 0], g1[:, 1], g1[:, 1] * abs(q23)])
    v1 = np.array([0.0, 0.0, 1.0])

    g2 = _row_abs_grads(lambda x: ad.sigmoid(ad.reshape(x, (-1,)) - 5.0), d.x1[:, None])[:, 0]
    jac2 = np.column_stack([g2, g2 * abs(q12), g2 * abs(q13)])
    v2 = np.array([0.0, 0.5, 0.5])

    return ParityResult(_case_outputs_p(jac1, v1), _case_outputs_p(jac2, v2), q23, q13, q12,
                        tuple(map(float, v1)), tuple(map(float, v2)))


# -- Lipschitz sweep -----------------------------------------------------------


def gen_threshold(n: int, seed: int = 0, threshold: float = 5.0) -> list[LabeledExample]:
    if n < 2:
        raise ValueError("need at least two points")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 10.0, n)
    return [LabeledExample(int(v >= threshold), features=(float(v),)) for v in x]


def unconstrained_slope(data: Sequence[LabeledExample]) -> float:
    """Least-squares ``theta`` for ``y = theta * x``: ``sum(x y) / sum(x^2)``."""
    x = np.array([ex.features[0] for ex in data])
    y = np.array([ex.label for ex in data], dtype=np.float64)
    return float(x @ y / (x @ x))


@dataclass(frozen=True)
class SweepPoint:
    L: float
    theta: float
    P: float


def lipschitz_sweep(l_values: Sequence[float], data: Sequence[LabeledExample], probe_x: float = 1.0,
                    lr: float = 0.01, steps: int = 2000) -> list[SweepPoint]:
    """Fit ``f = theta x`` under ``|theta| <= L`` for each L and measure P at the probe.

    With ``w = v = [1]`` the metric is ``|df/dx| = |theta|``.
    """
    if any(L <= 0 for L in l_values):
        raise ValueError("every L must be positive")
    one = np.ones(1)
    points = []
    for L in l_values:
        cfg = TrainConfig(architecture="linear", lipschitz=float(L), norm=1, lr=lr, epochs=steps)
        model = train_lipschitz(data, cfg)
        jac = abs_jacobian(model, [probe_x])
        points.append(SweepPoint(float(L), float(model.theta[0]), accumulated_sensitivity(one, jac, one)))
    return points


def sweep_to_tsv(points: Sequence[SweepPoint]) -> str:
    rows = ["L\tP"] + [f"{p.L!r}\t{p.P!r}" for p in points]
    return "\n".join(rows) + "\n"


def save_sweep(points: Sequence[SweepPoint], path: str | Path) -> None:
    Path(path).write_text(sweep_to_tsv(points), encoding="utf-8")
