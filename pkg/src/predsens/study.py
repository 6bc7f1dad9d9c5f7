"""Cross-fitted metric study on a labelled corpus with ground-truth bias flags.

The corpus is split into folds; for each fold a task model and a PSM are
trained on the other folds and every variant is scored on the held-out one,
so each record is scored exactly once by models that never saw it. A second
PSM trained after downsampling one protected class gives the biased-PSM
comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import TextRecord
from .models import TrainConfig, downsample_class, train_classifier, train_psm
from .sensitivity import VARIANTS, SensitivitySignal, VariantSpec, evaluate_variant
from .stats import point_biserial

BIASED_P2 = "P2_biased_psm"


@dataclass
class StudyResult:
    flags: np.ndarray
    scores: dict[str, np.ndarray]
    psm_recall: list[list[float | None]] = field(default_factory=list)
    biased_psm_recall: list[list[float | None]] = field(default_factory=list)

    def correlations(self) -> dict[str, float]:
        return {name: point_biserial(self.flags, s) for name, s in self.scores.items()}


def _folds(n: int, k: int, seed: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, 17]).permutation(n)
    return [np.sort(part) for part in np.array_split(order, k)]


def cross_fit_study(records: Sequence[TextRecord], lexicon, substitutions: Mapping[str, str], seed: int = 0,
                    folds: int = 2, task_cfg: TrainConfig | None = None, psm_cfg: TrainConfig | None = None,
                    downsample: tuple[int, float] | None = (1, 0.5),
                    variants: Sequence[str] = VARIANTS) -> StudyResult:
    """Score every record under all variants with out-of-fold models.

    Records whose lexicon-based ``v`` is undefined score 0 (no gendered
    tokens means no measured reliance on them).
    """
    if folds < 2:
        raise ValueError("need at least two folds")
    if any(r.annotations is None for r in records):
        raise ValueError("every record needs a bias flag annotation")
    task_cfg = task_cfg or TrainConfig(seed=seed)
    psm_cfg = psm_cfg or TrainConfig(seed=seed)
    names = list(variants) + ([BIASED_P2] if downsample else [])
    scores = {name: np.zeros(len(records)) for name in names}
    result = StudyResult(np.array([int(r.annotations[0]) for r in records]), scores)
    parts = _folds(len(records), folds, seed)
    for k, held in enumerate(parts):
        train = [records[i].to_example() for j, part in enumerate(parts) if j != k for i in part]
        task = train_classifier(train, task_cfg)
        psm = train_psm(train, psm_cfg)
        result.psm_recall.append(psm.metrics.get("validation_per_class_accuracy"))
        specs = {v: VariantSpec(v, lexicon=lexicon, psm=psm, substitutions=substitutions) for v in variants}
        if downsample:
            biased = train_psm(downsample_class(train, downsample[0], downsample[1], seed), psm_cfg)
            result.biased_psm_recall.append(biased.metrics.get("validation_per_class_accuracy"))
            specs[BIASED_P2] = VariantSpec("P2", psm=biased)
        for i in held:
            for name, spec in specs.items():
                try:
                    scores[name][i] = evaluate_variant(spec, task, records[i].tokens).value
                except SensitivitySignal:
                    scores[name][i] = 0.0
    return result
