"""Accumulated prediction sensitivity ``P = w^T J v`` and its variants.

``J[k, i] = |d f_k / d x_i|`` where ``x`` is the flattened N x D embedding
stack (token-major: feature ``i = n * D + d``). ``w`` weights classes and
``v`` weights input features; both are stochastic vectors.

Variants:

==== =============================================
P1   uniform w and v
P2   v from the protected-status model (PSM)
P3   PSM v reweighted by embedding magnitudes
P4   v spread over lexicon tokens
P5   lexicon v reweighted by embedding magnitudes
CF   L1 distance between f(x) and f(swapped x)
==== =============================================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .models import DiffModel, EmbeddedInput

VARIANTS = ("P1", "P2", "P3", "P4", "P5", "CF")
STOCHASTIC_TOL = 1e-9


class SensitivitySignal(ValueError):
    """A weight vector cannot be made stochastic for this input."""


class NoGenderedTokens(SensitivitySignal):
    pass


class DegenerateVector(SensitivitySignal):
    pass


class MissingDependency(ValueError):
    pass


def is_stochastic(vec: np.ndarray, tol: float = STOCHASTIC_TOL) -> bool:
    vec = np.asarray(vec)
    return vec.ndim == 1 and vec.size > 0 and bool(np.all(vec >= 0)) and abs(vec.sum() - 1.0) <= tol


def abs_jacobian(model, x) -> np.ndarray:
    """K x (N*D) matrix of absolute input-gradients of the class outputs."""
    values = model.input_array(x)
    out = ad.forward(model.graph, [values])
    return np.abs(ad.jacobian(out, 0))


# -- weight vectors ------------------------------------------------------------


def build_w_uniform(n_classes: int) -> np.ndarray:
    if n_classes < 1:
        raise ValueError("need at least one class")
    return np.full(n_classes, 1.0 / n_classes)


def build_v_uniform(n_tokens: int, dim: int) -> np.ndarray:
    if n_tokens * dim < 1:
        raise ValueError("empty input has no features to weight")
    return np.full(n_tokens * dim, 1.0 / (n_tokens * dim))


def build_v_lexicon(tokens: Sequence[str], lexicon: Iterable[str], dim: int) -> np.ndarray:
    """Mass ``1/(N_g * D)`` on each embedding entry of the ``N_g`` lexicon tokens."""
    lex = set(lexicon)
    hits = np.array([tok.lower() in lex for tok in tokens], dtype=bool)
    n_g = int(hits.sum())
    if n_g == 0:
        raise NoGenderedTokens("no lexicon tokens in input")
    v = np.repeat(hits.astype(np.float64), dim) / (n_g * dim)
    return v


def build_v_psm(psm: DiffModel, x: EmbeddedInput | Sequence[str], protected_class: int | None = None) -> np.ndarray:
    """Normalized column sums of the PSM's absolute Jacobian.

    Sums every output row unless ``protected_class`` picks one. For a binary
    softmax PSM both rows are identical, so the result is the same either way.
    """
    jac = abs_jacobian(psm, x)
    raw = jac.sum(axis=0) if protected_class is None else jac[protected_class]
    total = raw.sum()
    if total <= 0:
        raise DegenerateVector("protected-status model has zero input sensitivity")
    return raw / total


def apply_embedding_weights(v: np.ndarray, x: EmbeddedInput | np.ndarray) -> np.ndarray:
    """Multiply ``v`` entrywise by ``|e_i|`` and renormalize."""
    values = x.values if isinstance(x, EmbeddedInput) else np.asarray(x)
    mags = np.abs(values).ravel()
    if mags.shape != np.shape(v):
        raise ad.DimensionError("apply_embedding_weights", f"v has {np.size(v)} entries, input has {mags.size}")
    raw = mags * v
    total = raw.sum()
    if total <= 0:
        raise DegenerateVector("embedding weighting removed all mass from v")
    return raw / total


def accumulated_sensitivity(w: np.ndarray, jac: np.ndarray, v: np.ndarray) -> float:
    w, jac, v = np.asarray(w), np.asarray(jac), np.asarray(v)
    if jac.ndim != 2 or w.shape != (jac.shape[0],) or v.shape != (jac.shape[1],):
        raise ad.DimensionError(
            "accumulated_sensitivity", f"w {w.shape}, J {jac.shape}, v {v.shape} do not chain"
        )
    return float(w @ jac @ v)


# -- counterfactual baseline ---------------------------------------------------


class CounterfactualResult(NamedTuple):
    score: float
    substituted: int


def symmetric_map(pairs: Iterable[tuple[str, str]]) -> dict[str, str]:
    out: dict[str, str] = {}
    for a, b in pairs:
        for src, dst in ((a, b), (b, a)):
            if out.get(src, dst) != dst:
                raise ValueError(f"substitution map is not an involution at {src!r}")
            out[src] = dst
    return out


def substitute(tokens: Sequence[str], substitutions: Mapping[str, str]) -> tuple[list[str], int]:
    swapped, count = [], 0
    for tok in tokens:
        if tok in substitutions:
            swapped.append(substitutions[tok])
            count += 1
        else:
            swapped.append(tok)
    return swapped, count


def counterfactual_score(model: DiffModel, tokens: Sequence[str], substitutions: Mapping[str, str]) -> CounterfactualResult:
    """``sum_k |f_k(x) - f_k(x_hat)|`` with ``x_hat`` the token-swapped input."""
    swapped, count = substitute(tokens, substitutions)
    if count == 0:
        return CounterfactualResult(0.0, 0)
    diff = model.predict(list(tokens)) - model.predict(swapped)
    return CounterfactualResult(float(np.abs(diff).sum()), count)


# -- dispatch ------------------------------------------------------------------


@dataclass
class VariantSpec:
    variant: str
    lexicon: frozenset[str] | None = None
    psm: DiffModel | None = None
    substitutions: Mapping[str, str] | None = None
    protected_class: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.variant in ("P2", "P3") and self.psm is None:
            raise MissingDependency(f"{self.variant} needs a protected-status model")
        if self.variant in ("P4", "P5") and self.lexicon is None:
            raise MissingDependency(f"{self.variant} needs a lexicon")
        if self.variant == "CF" and self.substitutions is None:
            raise MissingDependency("CF needs a substitution map")


@dataclass
class SensitivityResult:
    variant: str
    value: float
    contributions: np.ndarray | None = None  # w^T J, one entry per flattened feature
    v: np.ndarray | None = None
    token_saliency: np.ndarray | None = None  # w^T J summed over each token's D entries
    token_v: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)


def per_token(vec: np.ndarray, n_tokens: int) -> np.ndarray:
    return np.asarray(vec).reshape(n_tokens, -1).sum(axis=1)


def evaluate_variant(spec: VariantSpec, task: DiffModel, tokens: Sequence[str]) -> SensitivityResult:
    """Score one example under one variant; ``w`` is always uniform.

    Raises :class:`SensitivitySignal` subclasses when ``v`` cannot be built.
    """
    x = task.embed(tokens)
    flags = ["unknown_tokens"] if any(x.unknown) else []
    if spec.variant == "CF":
        cf = counterfactual_score(task, tokens, spec.substitutions)
        if cf.substituted == 0:
            flags.append("no_substitutable_tokens")
        return SensitivityResult("CF", cf.score, flags=flags)

    n, dim = x.n_tokens, x.dim
    if spec.variant == "P1":
        v = build_v_uniform(n, dim)
    elif spec.variant in ("P2", "P3"):
        psm_x = spec.psm.embed(tokens)
        if psm_x.dim != dim:
            raise ad.DimensionError("build_v_psm", f"PSM embedding dim {psm_x.dim} != task dim {dim}")
        if any(psm_x.unknown):
            flags.append("psm_unknown_tokens")
        v = build_v_psm(spec.psm, psm_x, spec.protected_class)
    else:
        v = build_v_lexicon(tokens, spec.lexicon, dim)
    if spec.variant in ("P3", "P5"):
        v = apply_embedding_weights(v, x)

    jac = abs_jacobian(task, x)
    w = build_w_uniform(jac.shape[0])
    contributions = w @ jac
    return SensitivityResult(
        variant=spec.variant,
        value=accumulated_sensitivity(w, jac, v),
        contributions=contributions,
        v=v,
        token_saliency=per_token(contributions, n),
        token_v=per_token(v, n),
        flags=flags,
    )


# -- file formats --------------------------------------------------------------


def load_lexicon(path: str | Path) -> frozenset[str]:
    """One token per line, lowercased; blank lines and ``#`` comments skipped."""
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line.lower())
    return frozenset(words)


def save_lexicon(words: Iterable[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{w}\n" for w in sorted(words)), encoding="utf-8")


def load_substitutions(path: str | Path) -> dict[str, str]:
    """``a<TAB>b`` per line, read symmetrically."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not all(p.strip() for p in parts):
            raise ValueError(f"{path}:{lineno}: expected 'a<TAB>b'")
        pairs.append((parts[0].strip(), parts[1].strip()))
    return symmetric_map(pairs)


def save_substitutions(pairs: Iterable[tuple[str, str]], path: str | Path) -> None:
    Path(path).write_text("".join(f"{a}\t{b}\n" for a, b in pairs), encoding="utf-8")
