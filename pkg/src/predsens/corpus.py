"""Text records, the planted-bias toy corpus, and saliency export.

Records are JSON lines::

    {"id": "ex0", "tokens": ["she", "..."], "label": 2, "protected": 1, "annotations": [0]}

``annotations`` is optional: a list of 0/1 bias judgements, one per rater.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import DataError, LabeledExample
from .sensitivity import SensitivityResult

MALE_TOKENS = ("he", "him", "his", "mr", "man")
FEMALE_TOKENS = ("she", "her", "hers", "ms", "woman")


@dataclass
class TextRecord:
    id: str
    tokens: tuple[str, ...]
    label: int
    protected: int
    annotations: tuple[int, ...] | None = None

    def __post_init__(self):
        self.tokens = tuple(self.tokens)
        if self.annotations is not None:
            self.annotations = tuple(self.annotations)
        if not self.tokens:
            raise DataError(f"record {self.id!r} has no tokens")
        if self.label < 0:
            raise DataError(f"record {self.id!r}: label must be non-negative")
        if self.protected not in (0, 1):
            raise DataError(f"record {self.id!r}: protected label must be 0 or 1")
        if self.annotations is not None and any(a not in (0, 1) for a in self.annotations):
            raise DataError(f"record {self.id!r}: annotations must be 0/1")

    def to_example(self) -> LabeledExample:
        return LabeledExample(self.label, tokens=self.tokens, protected=self.protected)

    def to_json(self) -> dict:
        doc = {"id": self.id, "tokens": list(self.tokens), "label": self.label, "protected": self.protected}
        if self.annotations is not None:
            doc["annotations"] = list(self.annotations)
        return doc


_FIELDS = {"id": str, "tokens": list, "label": int, "protected": int}


def _parse_record(line: str, lineno: int, path) -> TextRecord:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}:{lineno}: expected an object")
    for name, typ in _FIELDS.items():
        if name not in doc:
            raise DataError(f"{path}:{lineno}: missing field '{name}'")
        if not isinstance(doc[name], typ) or (typ is int and isinstance(doc[name], bool)):
            raise DataError(f"{path}:{lineno}: field '{name}' must be {typ.__name__}")
    if not all(isinstance(t, str) for t in doc["tokens"]):
        raise DataError(f"{path}:{lineno}: field 'tokens' must hold strings")
    ann = doc.get("annotations")
    if ann is not None and not (isinstance(ann, list) and all(isinstance(a, int) for a in ann)):
        raise DataError(f"{path}:{lineno}: field 'annotations' must be a list of 0/1")
    try:
        return TextRecord(doc["id"], doc["tokens"], doc["label"], doc["protected"], ann)
    except DataError as exc:
        raise DataError(f"{path}:{lineno}: {exc}") from None


def load_records(path: str | Path) -> list[TextRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                records.append(_parse_record(line, lineno, path))
    return records


def save_records(records: Sequence[TextRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


# -- toy corpus ----------------------------------------------------------------


@dataclass
class PlantedCorrelation:
    """A stereotype token tied to one protected class and one task class.

    ``strength`` is P(protected == protected_class | token present);
    ``frequency`` is P(token present).
    """

    token: str
    protected_class: int
    strength: float
    stereotype_label: int
    frequency: float = 0.3


@dataclass
class ToyCorpusSpec:
    n: int = 2000
    seed: int = 0
    n_classes: int = 4
    content_vocab: int = 12
    filler_vocab: int = 30
    content_per_example: tuple[int, int] = (3, 5)
    filler_per_example: tuple[int, int] = (3, 6)
    content_noise: float = 0.2
    filler_skew: float = 0.7
    pronoun_rate: float = 0.6
    bias_rate: float = 0.5
    stereotype_labels: tuple[int, int] = (2, 1)
    planted: tuple[PlantedCorrelation, ...] = (
        PlantedCorrelation("volleyball", 1, 0.95, 1, 0.1),
        PlantedCorrelation("football", 0, 0.95, 2, 0.1),
    )

    def __post_init__(self):
        self.planted = tuple(self.planted)
        for name in ("content_noise", "filler_skew", "pronoun_rate", "bias_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.n < 1 or self.n_classes < 2:
            raise ValueError("need n >= 1 and at least two task classes")
        for pc in self.planted:
            if not 0 <= pc.strength <= 1:
                raise ValueError(f"strength for {pc.token!r} must be in [0, 1]")
            if not 0 <= pc.frequency <= 0.5:
                raise ValueError(f"frequency for {pc.token!r} must be in [0, 0.5]")
            if pc.protected_class not in (0, 1) or not 0 <= pc.stereotype_label < self.n_classes:
                raise ValueError(f"planted token {pc.token!r} references an invalid class")
        if len(self.stereotype_labels) != 2 or not all(0 <= s < self.n_classes for s in self.stereotype_labels):
            raise ValueError("stereotype_labels needs one valid task class per protected class")


@dataclass
class ToyCorpus:
    records: list[TextRecord]
    biased: np.ndarray  # ground-truth flag: label was flipped toward a stereotype
    true_labels: np.ndarray
    lexicon: frozenset[str] = frozenset(MALE_TOKENS + FEMALE_TOKENS)
    substitution_pairs: tuple[tuple[str, str], ...] = tuple(zip(MALE_TOKENS, FEMALE_TOKENS))
    metadata: dict = field(default_factory=dict)


def gen_toy_corpus(spec: ToyCorpusSpec) -> ToyCorpus:
    """Generate a biography-style corpus with planted stereotype tokens.

    Each example has a protected class (fair coin), a true occupation,
    gendered pronouns (with probability ``pronoun_rate``), occupation words
    (``content_noise`` of them drawn from another occupation), and filler.
    Filler words carry weak gender signal: a ``filler_skew`` share come from
    the half of the filler vocabulary tied to the example's class.

    Pronouns are cues pointing at ``stereotype_labels[protected]``; planted
    tokens are cues pointing at their own stereotype label. When any cue is
    present the label flips to the target of one (chosen uniformly) with
    probability ``bias_rate``. Examples whose label changed are flagged as
    biased and carry the flag as a single annotation.
    """
    rng = np.random.default_rng(spec.seed)
    pronouns = (MALE_TOKENS[:3], FEMALE_TOKENS[:3])
    records, biased, true_labels = [], [], []
    for idx in range(spec.n):
        g = int(rng.integers(0, 2))
        c = int(rng.integers(0, spec.n_classes))
        toks: list[str] = []
        cues: list[int] = []
        if rng.random() < spec.pronoun_rate:
            toks += list(rng.choice(pronouns[g], size=int(rng.integers(1, 3))))
            cues.append(spec.stereotype_labels[g])
        for _ in range(int(rng.integers(spec.content_per_example[0], spec.content_per_example[1] + 1))):
            src = c
            if rng.random() < spec.content_noise:
                src = int((c + rng.integers(1, spec.n_classes)) % spec.n_classes)
            toks.append(f"occ{src}_w{int(rng.integers(0, spec.content_vocab))}")
        half = spec.filler_vocab // 2
        for _ in range(int(rng.integers(spec.filler_per_example[0], spec.filler_per_example[1] + 1))):
            # first half of the filler vocabulary leans male, second half female
            side = g if rng.random() < spec.filler_skew else 1 - g
            lo, hi = (0, half) if side == 0 else (half, spec.filler_vocab)
            toks.append(f"w{int(rng.integers(lo, hi))}")
        for pc in spec.planted:
            p = 2 * pc.frequency * (pc.strength if g == pc.protected_class else 1 - pc.strength)
            if rng.random() < p:
                toks.append(pc.token)
                cues.append(pc.stereotype_label)
        label = c
        if cues and rng.random() < spec.bias_rate:
            label = cues[int(rng.integers(0, len(cues)))]
        flag = int(label != c)
        order = rng.permutation(len(toks))
        toks = [str(toks[i]) for i in order]
        records.append(TextRecord(f"ex{idx}", toks, label, g, (flag,)))
        biased.append(flag)
        true_labels.append(c)
    return ToyCorpus(records, np.array(biased), np.array(true_labels), metadata={"seed": spec.seed, "n": spec.n})


# -- saliency export -----------------------------------------------------------


@dataclass
class SaliencyTable:
    tokens: tuple[str, ...]
    wj: np.ndarray
    v: np.ndarray
    flags: list[str] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["row\t" + "\t".join(self.tokens)]
        lines.append("wTJ\t" + "\t".join(f"{x:.6f}" for x in self.wj))
        lines.append("v\t" + "\t".join(f"{x:.6f}" for x in self.v))
        return "\n".join(lines) + "\n"


def _normalize_row(row: np.ndarray, name: str, flags: list[str]) -> np.ndarray:
    top = row.max() if row.size else 0.0
    if top <= 0:
        flags.append(f"zero_{name}_row")
        return np.zeros_like(row)
    return row / top


def export_saliency(result: SensitivityResult, tokens: Sequence[str]) -> SaliencyTable:
    """Per-token heat-map rows for w^T J and v, each scaled to [0, 1] by its max."""
    if result.token_saliency is None:
        raise ValueError(f"variant {result.variant} carries no saliency")
    if len(tokens) != len(result.token_saliency):
        raise ValueError(f"{len(tokens)} tokens but result covers {len(result.token_saliency)}")
    flags: list[str] = []
    wj = _normalize_row(np.asarray(result.token_saliency, dtype=float), "wTJ", flags)
    v = _normalize_row(np.asarray(result.token_v, dtype=float), "v", flags)
    return SaliencyTable(tuple(tokens), wj, v, flags)
