"""Association between metric scores and binary bias annotations."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class UndefinedStatistic(ValueError):
    pass


def point_biserial(labels, scores) -> float:
    """Point-biserial r: ``(M1 - M0) / s * sqrt(p q)`` with population s.

    Algebraically the Pearson correlation of ``scores`` against 0/1 labels.
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ValueError("labels and scores differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    ones = y == 1
    n1 = int(ones.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedStatistic("point-biserial needs both label classes")
    sd = s.std()
    if sd == 0:
        raise UndefinedStatistic("point-biserial undefined for constant scores")
    p = n1 / y.size
    return float((s[ones].mean() - s[~ones].mean()) / sd * np.sqrt(p * (1 - p)))


def quantile_bins(scores, bins: int) -> np.ndarray:
    """Equal-frequency bin index per score; ties share a bin (depends only on ranks)."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    # rank of the first occurrence of each value
    first = np.searchsorted(sorted_s, s, side="left")
    return np.minimum(first * bins // s.size, bins - 1)


def mutual_information(labels, scores, bins: int = 8) -> float:
    """Plug-in MI (nats) between labels and quantile-binned scores."""
    y = np.asarray(labels)
    if bins < 2:
        raise ValueError("need at least two bins")
    if y.size < bins:
        raise ValueError(f"{y.size} samples cannot fill {bins} bins")
    if y.shape != np.shape(scores):
        raise ValueError("labels and scores differ in length")
    b = quantile_bins(scores, bins)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((yi.max() + 1, bins))
    np.add.at(joint, (yi, b), 1.0)
    joint /= y.size
    py = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (py @ pb)[nz])))


@dataclass
class BootstrapResult:
    p_value: float
    resamples: int
    skipped: int
    observed_a: float
    observed_b: float


def bootstrap_significance(labels, scores_a, scores_b, resamples: int = 1000, seed: int = 0,
                           max_retries: int = 20) -> BootstrapResult:
    """One-sided paired bootstrap: how often metric A fails to beat metric B.

    Each resample draws n indices with replacement and compares
    ``point_biserial(labels*, a*)`` with ``point_biserial(labels*, b*)``.
    The p-value is the fraction of resamples where A <= B, with exact ties
    counted as one half. Resample ``i`` uses generator ``[seed, i]`` so any
    subset can be recomputed independently. Resamples where either
    correlation is undefined are redrawn up to ``max_retries`` times, then
    skipped.
    """
    y = np.asarray(labels)
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if not (y.shape == a.shape == b.shape):
        raise ValueError("labels and both score vectors must have equal length")
    if resamples < 100:
        raise ValueError("use at least 100 resamples")
    n = y.size
    losses = 0.0
    used = skipped = 0
    for i in range(resamples):
        rng = np.random.default_rng([seed, i])
        for _ in range(max_retries):
            idx = rng.integers(0, n, n)
            try:
                ra = point_biserial(y[idx], a[idx])
                rb = point_biserial(y[idx], b[idx])
            except UndefinedStatistic:
                continue
            losses += 1.0 if ra < rb else 0.5 if ra == rb else 0.0
            used += 1
            break
        else:
            skipped += 1
    if used == 0:
        raise UndefinedStatistic("every bootstrap resample was degenerate")
    return BootstrapResult(losses / used, used, skipped, point_biserial(y, a), point_biserial(y, b))


def fleiss_kappa(counts, raters: int | None = None) -> float:
    """Fleiss' kappa for an examples x categories matrix of rater counts."""
    m = np.asarray(counts, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError("counts must be a non-empty 2-D matrix")
    row_sums = m.sum(axis=1)
    r = row_sums[0] if raters is None else raters
    if r < 2:
        raise ValueError("need at least two raters")
    if not np.all(row_sums == r):
        raise ValueError(f"every row must sum to the rater count {r}")
    n = m.shape[0]
    p_j = m.sum(axis=0) / (n * r)
    p_i = (np.sum(m * m, axis=1) - r) / (r * (r - 1))
    p_bar = p_i.mean()
    p_e = np.sum(p_j * p_j)
    if p_e == 1:
        # every rating in one category: agreement is perfect and chance is total
        return 1.0
    return float((p_bar - p_e) / (1 - p_e))


# -- annotations ---------------------------------------------------------------


@dataclass
class AnnotationSet:
    ids: list[str]
    labels: np.ndarray  # examples x raters, 0/1

    @property
    def raters(self) -> int:
        return self.labels.shape[1]

    def majority(self) -> tuple[np.ndarray, np.ndarray]:
        """Majority label per example, and a mask of ties (resolved as biased)."""
        ones = self.labels.sum(axis=1)
        zeros = self.raters - ones
        ties = ones == zeros
        return (ones >= zeros).astype(int), ties

    def count_matrix(self) -> np.ndarray:
        ones = self.labels.sum(axis=1)
        return np.stack([self.raters - ones, ones], axis=1)

    def kappa(self) -> float:
        return fleiss_kappa(self.count_matrix(), self.raters)


def load_annotations(path: str | Path) -> AnnotationSet:
    """Tab-separated: example id, then one 0/1 column per rater."""
    ids, rows = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: need an id and at least one label")
        try:
            labels = [int(p) for p in parts[1:]]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: labels must be integers") from None
        if any(v not in (0, 1) for v in labels):
            raise ValueError(f"{path}:{lineno}: labels must be 0 or 1")
        if rows and len(labels) != len(rows[0]):
            raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} raters, got {len(labels)}")
        ids.append(parts[0])
        rows.append(labels)
    return AnnotationSet(ids, np.array(rows, dtype=int).reshape(len(rows), -1))


def save_annotations(annotations: AnnotationSet, path: str | Path) -> None:
    lines = [i + "\t" + "\t".join(str(int(v)) for v in row) for i, row in zip(annotations.ids, annotations.labels)]
    Path(path).write_text("".join(f"{ln}\n" for ln in lines), encoding="utf-8")


@dataclass
class CorrelationResult:
    point_biserial: float
    mutual_information: float  # nats
    p_value: float | None
    n: int


def correlate(labels: Sequence[int], scores: Sequence[float], baseline: Sequence[float] | None = None,
              bins: int = 8, resamples: int = 1000, seed: int = 0) -> CorrelationResult:
    r = point_biserial(labels, scores)
    mi = mutual_information(labels, scores, bins)
    p = None
    if baseline is not None:
        p = bootstrap_significance(labels, scores, baseline, resamples, seed).p_value
    return CorrelationResult(r, mi, p, len(labels))
