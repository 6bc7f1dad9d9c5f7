import json
from pathlib import Path

import numpy as np
import pytest

from predsens import autodiff as ad
from predsens.models import DiffModel

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


def unhex(obj):
    return np.array([float.fromhex(v) for v in obj["data"]]).reshape(obj["shape"])


def oracle_model(which: str) -> DiffModel:
    """Fixture model whose reference numbers were computed with torch."""
    m = FROZEN["models"]
    spec = m[which]
    params = {k: unhex(v) for k, v in spec["params"].items()}
    vocab = {tok: i for i, tok in enumerate(m["vocab"])}
    return DiffModel("text", spec["n_outputs"], m["dim"], tuple(spec["hidden"]), "tanh", params, vocab, "attention")


def central_diff_jacobian(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """K x M Jacobian of ``fn`` (array -> 1-D array) by central differences."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    cols = []
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += eps
        dn[i] -= eps
        cols.append((fn(up.reshape(x.shape)) - fn(dn.reshape(x.shape))) / (2 * eps))
    return np.stack(cols, axis=-1).reshape(-1, flat.size)


def rel_err(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_text_model(rng, dim: int, hidden: tuple[int, ...], k: int, activation="tanh",
                      pooling="attention", vocab_size: int = 6) -> DiffModel:
    params = {"embedding": rng.normal(0, 0.8, (vocab_size, dim)), "query": rng.normal(0, 0.8, (dim, 1))}
    sizes = [dim, *hidden, k]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"W{i}"] = rng.normal(0, 1.0 / np.sqrt(a), (a, b))
        params[f"b{i}"] = rng.normal(0, 0.2, b)
    vocab = {f"t{i}": i for i in range(vocab_size)}
    return DiffModel("text", k, dim, tuple(hidden), activation, params, vocab, pooling)


def marker_examples(n: int = 1000, seed: int = 0) -> list:
    """Text examples where the token "pronoun_f" appears exactly when protected == 1.

    The task label is the parity of the filler count, so both classes occur.
    """
    from predsens.models import LabeledExample

    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        g = int(rng.integers(0, 2))
        toks = [f"w{int(t)}" for t in rng.integers(0, 20, int(rng.integers(3, 7)))]
        if g:
            toks.insert(int(rng.integers(0, len(toks) + 1)), "pronoun_f")
        label = (len(toks) - g) % 2
        data.append(LabeledExample(label, tokens=tuple(toks), protected=g))
    return data


def predict_values(model, values: np.ndarray) -> np.ndarray:
    return ad.forward(model.graph, [values]).data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
