"""Differentiable classifiers: the task model, the protected-status model, and
Lipschitz-constrained fits.

Text models embed each token, pool the token vectors into one, and pass the
result through an MLP ending in softmax. Pooling is either a plain mean or a
learned attention weighting. Tabular models skip the embedding and pooling.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

FORMAT_NAME = "predsens-model"
FORMAT_VERSION = 1

_ACTIVATIONS = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "relu": ad.relu}
_MASK_BIAS = -1e9


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class LabeledExample:
    """One training row: ``tokens`` for text, ``features`` for tabular data."""

    label: int
    tokens: tuple[str, ...] | None = None
    features: tuple[float, ...] | None = None
    protected: int | None = None

    def __post_init__(self):
        if self.tokens is None and self.features is None:
            raise DataError("example needs tokens or features")
        if self.tokens is not None and len(self.tokens) == 0:
            raise DataError("text example has no tokens")
        if self.label < 0:
            raise DataError(f"label must be non-negative, got {self.label}")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.5
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "sgd"
    embedding_dim: int = 8
    hidden: tuple[int, ...] = (16,)
    activation: str = "tanh"
    pooling: str = "attention"
    architecture: str = "mlp"  # "linear" selects f = theta . x for Lipschitz fits
    validation_fraction: float = 0.2
    lipschitz: float | None = None
    norm: int = 1
    penalty: float = 10.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.optimizer != "sgd":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}; only 'sgd'")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.pooling not in ("mean", "attention"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.architecture not in ("mlp", "linear"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must be in [0, 1)")
        if self.lipschitz is not None and not self.lipschitz > 0:
            raise ConfigError("Lipschitz bound L must be > 0")
        if self.norm not in (1, 2):
            raise ConfigError("norm order p must be 1 or 2")


@dataclass
class EmbeddedInput:
    """A token sequence materialized as an N x D stack of embedding rows."""

    tokens: tuple[str, ...]
    values: np.ndarray
    unknown: tuple[bool, ...]

    @property
    def n_tokens(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class DiffModel:
    """A trained softmax classifier.

    ``params`` maps names to float64 arrays: ``embedding`` (V x D) and
    ``query`` (D x 1) for text models, then ``W0, b0, W1, b1, ...`` for
    the dense stack.
    """

    kind: str  # "text" or "tabular"
    n_outputs: int
    input_dim: int
    hidden: tuple[int, ...]
    activation: str
    params: dict[str, np.ndarray]
    vocab: dict[str, int] = field(default_factory=dict)
    pooling: str = "attention"
    metrics: dict = field(default_factory=dict)

    @property
    def embedding_dim(self) -> int:
        return self.input_dim

    def _dense(self, h: ad.Tensor, params) -> ad.Tensor:
        act = _ACTIVATIONS[self.activation]
        n_layers = len(self.hidden) + 1
        for i in range(n_layers):
            h = h @ params[f"W{i}"] + params[f"b{i}"]
            if i < n_layers - 1:
                h = act(h)
        return h

    def _pool(self, x: ad.Tensor, axis: int, params, mask_bias=None) -> ad.Tensor:
        if self.pooling == "mean":
            if mask_bias is None:
                return ad.mean(x, axis=axis)
            weights = (mask_bias == 0).astype(np.float64)
            weights = weights / weights.sum(axis=axis, keepdims=True)
            return ad.sum(x * weights, axis=axis)
        scores = x @ params["query"]
        if mask_bias is not None:
            scores = scores + mask_bias
        alpha = ad.softmax(scores, axis=axis)
        return ad.sum(alpha * x, axis=axis)

    def graph(self, x: ad.Tensor) -> ad.Tensor:
        """Class probabilities (shape ``(K,)``) for one input.

        Text input is the N x D embedded stack; tabular input has shape (M,).
        """
        if self.kind == "text":
            if x.data.ndim != 2 or x.shape[1] != self.input_dim:
                raise ad.DimensionError("graph", f"expected N x {self.input_dim} input, got {x.shape}")
            pooled = ad.reshape(self._pool(x, 0, self.params), (1, self.input_dim))
        else:
            if x.shape != (self.input_dim,):
                raise ad.DimensionError("graph", f"expected ({self.input_dim},) input, got {x.shape}")
            pooled = ad.reshape(x, (1, self.input_dim))
        logits = ad.reshape(self._dense(pooled, self.params), (self.n_outputs,))
        return ad.softmax(logits)

    def batch_logits(self, tape: ad.Tape, params: dict[str, ad.Tensor], batch) -> ad.Tensor:
        if self.kind == "text":
            ids, mask_bias = batch
            x = ad.take(params["embedding"], ids)
            pooled = self._pool(x, 1, params, mask_bias)
        else:
            pooled = tape.constant(batch)
        return self._dense(pooled, params)

    def embed(self, tokens: Sequence[str]) -> EmbeddedInput:
        if self.kind != "text":
            raise ConfigError("embed() needs a text model")
        if len(tokens) == 0:
            raise DataError("cannot embed an empty token list")
        table = self.params["embedding"]
        rows, unknown = [], []
        for tok in tokens:
            idx = self.vocab.get(tok)
            unknown.append(idx is None)
            rows.append(np.zeros(self.input_dim) if idx is None else table[idx])
        return EmbeddedInput(tuple(tokens), np.array(rows, dtype=np.float64), tuple(unknown))

    def input_array(self, x) -> np.ndarray:
        if isinstance(x, EmbeddedInput):
            return x.values
        if self.kind == "text" and not isinstance(x, np.ndarray):
            return self.embed(x).values
        return np.asarray(x, dtype=np.float64)

    def predict(self, x) -> np.ndarray:
        return ad.forward(self.graph, [self.input_array(x)]).data.copy()

    def predict_many(self, examples: Sequence[LabeledExample]) -> np.ndarray:
        batch = _make_batch(self, list(examples))
        tape = ad.Tape()
        params = {k: tape.constant(v) for k, v in self.params.items()}
        logits = self.batch_logits(tape, params, batch)
        return ad.softmax(logits, axis=-1).data.copy()

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps_model(self).encode()).hexdigest()


@dataclass
class LinearModel:
    """Scalar-output linear model ``f(x) = theta . x`` (no bias).

    Outputs are real-valued scores, not a probability simplex.
    """

    theta: np.ndarray
    metrics: dict = field(default_factory=dict)
    kind: str = "linear"

    @property
    def n_outputs(self) -> int:
        return 1

    @property
    def input_dim(self) -> int:
        return self.theta.shape[0]

    def graph(self, x: ad.Tensor) -> ad.Tensor:
        if x.shape != (self.input_dim,):
            raise ad.DimensionError("graph", f"expected ({self.input_dim},) input, got {x.shape}")
        return ad.reshape(ad.reshape(x, (1, self.input_dim)) @ self.theta.reshape(-1, 1), (1,))

    def input_array(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def predict(self, x) -> np.ndarray:
        return np.array([float(np.dot(self.theta, np.asarray(x, dtype=np.float64)))])


# -- training ------------------------------------------------------------------


def _check_data(data: Sequence[LabeledExample], target: str) -> np.ndarray:
    if len(data) == 0:
        raise DataError("empty dataset")
    kinds = {ex.tokens is not None for ex in data}
    if len(kinds) > 1:
        raise DataError("mixed text and tabular examples")
    if target == "protected":
        missing = [i for i, ex in enumerate(data) if ex.protected is None]
        if missing:
            raise DataError(f"{len(missing)} examples lack a protected label (first at index {missing[0]})")
        y = np.array([ex.protected for ex in data])
    else:
        y = np.array([ex.label for ex in data])
    if len(np.unique(y)) < 2:
        raise DataError(f"{target} labels contain a single class; need at least two")
    return y


def _make_batch(model: DiffModel, examples: list[LabeledExample]):
    if model.kind == "tabular":
        return np.array([ex.features for ex in examples], dtype=np.float64)
    width = max(len(ex.tokens) for ex in examples)
    ids = np.zeros((len(examples), width), dtype=np.int64)
    bias = np.full((len(examples), width, 1), _MASK_BIAS)
    for r, ex in enumerate(examples):
        for c, tok in enumerate(ex.tokens):
            # unknown tokens have no table row; treat as padding
            if tok in model.vocab:
                ids[r, c] = model.vocab[tok]
                bias[r, c, 0] = 0.0
    if np.any(bias[:, :, 0].max(axis=1) < 0):
        # every token unknown: fall back to attending over padding row 0
        empty = bias[:, :, 0].max(axis=1) < 0
        bias[empty, 0, 0] = 0.0
    return ids, bias


def _init_model(data: Sequence[LabeledExample], n_outputs: int, cfg: TrainConfig, rng) -> DiffModel:
    params: dict[str, np.ndarray] = {}
    if data[0].tokens is not None:
        vocab = {}
        for ex in data:
            for tok in ex.tokens:
                if tok not in vocab:
                    vocab[tok] = len(vocab)
        dim = cfg.embedding_dim
        params["embedding"] = rng.normal(0.0, 0.1, size=(len(vocab), dim))
        params["query"] = np.zeros((dim, 1))
        kind = "text"
    else:
        vocab = {}
        dim = len(data[0].features)
        if any(len(ex.features) != dim for ex in data):
            raise DataError("tabular examples have differing feature counts")
        kind = "tabular"
    sizes = [dim, *cfg.hidden, n_outputs]
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return DiffModel(kind, n_outputs, dim, cfg.hidden, cfg.activation, params, vocab, cfg.pooling)


def _split(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _per_class_accuracy(pred: np.ndarray, y: np.ndarray, k: int) -> list[float | None]:
    out = []
    for c in range(k):
        sel = y == c
        out.append(float(np.mean(pred[sel] == c)) if sel.any() else None)
    return out


def _lipschitz_penalty(probs: ad.Tensor, x: np.ndarray, cfg: TrainConfig, rng) -> ad.Tensor:
    """Squared hinge on D(f(x), f(x')) - L d(x, x') over shuffled batch pairs."""
    n = x.shape[0]
    perm = rng.permutation(n)
    diff = probs - ad.take(probs, perm)
    dx = x - x[perm]
    if cfg.norm == 1:
        dist_out = ad.sum(ad.abs(diff), axis=1)
        dist_in = np.abs(dx).sum(axis=1)
    else:
        dist_out = ad.sqrt(ad.sum(diff * diff, axis=1) + 1e-12)
        dist_in = np.sqrt((dx * dx).sum(axis=1))
    excess = ad.relu(dist_out - cfg.lipschitz * dist_in)
    return ad.mean(excess * excess)


def _fit(data: Sequence[LabeledExample], y: np.ndarray, cfg: TrainConfig,
         validation: Sequence[LabeledExample] | None, y_val: np.ndarray | None) -> DiffModel:
    rng = np.random.default_rng(cfg.seed)
    k = int(max(y.max(), y_val.max() if y_val is not None and len(y_val) else 0)) + 1
    if validation is None and cfg.validation_fraction > 0 and len(data) >= 10:
        tr, va = _split(len(data), cfg.validation_fraction, rng)
        validation = [data[i] for i in va]
        y_val = y[va]
        data = [data[i] for i in tr]
        y = y[tr]
    model = _init_model(data, k, cfg, rng)
    if cfg.lipschitz is not None and model.kind != "tabular":
        raise ConfigError("Lipschitz training needs tabular feature vectors")
    trainable = [name for name in model.params if not (name == "query" and model.pooling == "mean")]
    onehot = np.eye(k)[y]
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = _make_batch(model, [data[i] for i in idx])
            tape = ad.Tape()
            params = {name: (tape.variable(v) if name in trainable else tape.constant(v))
                      for name, v in model.params.items()}
            logits = model.batch_logits(tape, params, batch)
            logp = ad.log_softmax(logits, axis=-1)
            loss = ad.neg(ad.mean(ad.sum(logp * onehot[idx], axis=1)))
            if cfg.lipschitz is not None:
                loss = loss + cfg.penalty * _lipschitz_penalty(ad.exp(logp), batch, cfg, rng)
            wrt = [params[name] for name in trainable]
            grads = tape.backward(loss, np.ones(()), wrt)
            for name, g in zip(trainable, grads):
                model.params[name] = model.params[name] - cfg.lr * g
    pred = model.predict_many(data).argmax(axis=1)
    model.metrics = {
        "train_accuracy": float(np.mean(pred == y)),
        "train_per_class_accuracy": _per_class_accuracy(pred, y, k),
        "n_train": n,
    }
    if validation:
        vpred = model.predict_many(validation).argmax(axis=1)
        model.metrics["validation_accuracy"] = float(np.mean(vpred == y_val))
        model.metrics["validation_per_class_accuracy"] = _per_class_accuracy(vpred, y_val, k)
        model.metrics["n_validation"] = len(validation)
    return model


def train_classifier(data: Sequence[LabeledExample], cfg: TrainConfig,
                     validation: Sequence[LabeledExample] | None = None) -> DiffModel:
    """Fit a softmax classifier on task labels with plain SGD.

    Without an explicit ``validation`` set, ``cfg.validation_fraction`` of the
    data is held out (seeded) and accuracy on it lands in ``model.metrics``.
    """
    y = _check_data(data, "label")
    y_val = np.array([ex.label for ex in validation]) if validation is not None else None
    return _fit(data, y, cfg, validation, y_val)


def train_psm(data: Sequence[LabeledExample], cfg: TrainConfig,
              validation: Sequence[LabeledExample] | None = None) -> DiffModel:
    """Fit the protected-status model: same architecture, protected labels as targets."""
    y = _check_data(data, "protected")
    as_task = [LabeledExample(int(ex.protected), ex.tokens, ex.features, ex.protected) for ex in data]
    val = None
    y_val = None
    if validation is not None:
        _check_data(validation, "protected")
        val = [LabeledExample(int(ex.protected), ex.tokens, ex.features, ex.protected) for ex in validation]
        y_val = np.array([ex.protected for ex in validation])
    model = _fit(as_task, y, cfg, val, y_val)
    model.metrics["target"] = "protected"
    return model


def downsample_class(data: Sequence[LabeledExample], protected: int, fraction: float,
                     seed: int = 0) -> list[LabeledExample]:
    """Drop ``fraction`` of the examples whose protected label is ``protected``."""
    if not 0 <= fraction < 1:
        raise ConfigError("fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    members = [i for i, ex in enumerate(data) if ex.protected == protected]
    drop = set(rng.choice(members, size=int(round(len(members) * fraction)), replace=False).tolist())
    return [ex for i, ex in enumerate(data) if i not in drop]


# -- Lipschitz-constrained fits ------------------------------------------------


def _project(theta: np.ndarray, bound: float, norm: int) -> np.ndarray:
    # sup |theta.(x-x')| / ||x-x'||_p is the dual norm of theta
    if norm == 1:
        return np.clip(theta, -bound, bound)
    length = np.linalg.norm(theta)
    return theta if length <= bound else theta * (bound / length)


def constraint_violation(model, xs: np.ndarray, bound: float, norm: int = 1,
                         max_pairs: int = 20000, seed: int = 0) -> float:
    """Largest D(f(x), f(x')) - L d(x, x') over input pairs (<= 0 means satisfied).

    All pairs are checked when n <= 200; otherwise ``max_pairs`` random pairs.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[:, None]
    n = xs.shape[0]
    if n <= 200:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, max_pairs)
        j = rng.integers(0, n, max_pairs)
        keep = i != j
        i, j = i[keep], j[keep]
    if isinstance(model, LinearModel):
        out = (xs @ model.theta)[:, None]
    else:
        out = np.array([model.predict(x) for x in xs])
    dx = xs[i] - xs[j]
    dy = out[i] - out[j]
    if norm == 1:
        d_in, d_out = np.abs(dx).sum(axis=1), np.abs(dy).sum(axis=1)
    else:
        d_in, d_out = np.linalg.norm(dx, axis=1), np.linalg.norm(dy, axis=1)
    if len(d_in) == 0:
        return 0.0
    return float(np.max(d_out - bound * d_in))


def train_lipschitz(data: Sequence[LabeledExample], cfg: TrainConfig, tol: float = 1e-6):
    """Minimize training loss subject to D(f(x), f(x')) <= L d(x, x').

    ``architecture="linear"`` fits ``f = theta . x`` to the labels with squared
    loss by projected gradient descent (``cfg.epochs`` full-batch steps,
    stopping early once theta is stationary). ``"mlp"`` trains the softmax
    classifier with a hinge penalty and verifies the constraint afterwards.
    Either way a violation above ``tol`` is reported as a warning.
    """
    if cfg.lipschitz is None:
        raise ConfigError("train_lipschitz needs cfg.lipschitz (L > 0)")
    if len(data) == 0:
        raise DataError("empty dataset")
    if any(ex.features is None for ex in data):
        raise DataError("Lipschitz training needs tabular feature vectors")
    xs = np.array([ex.features for ex in data], dtype=np.float64)
    if cfg.architecture == "mlp":
        model = train_classifier(data, cfg)
    else:
        y = np.array([ex.label for ex in data], dtype=np.float64)
        theta = np.zeros(xs.shape[1])
        for step in range(cfg.epochs):
            tape = ad.Tape()
            t = tape.variable(theta)
            resid = tape.constant(y) - ad.reshape(tape.constant(xs) @ ad.reshape(t, (-1, 1)), (len(y),))
            loss = ad.mean(resid * resid)
            (g,) = tape.backward(loss, np.ones(()), [t])
            new = _project(theta - cfg.lr * g, cfg.lipschitz, cfg.norm)
            moved = np.max(np.abs(new - theta))
            theta = new
            if moved < 1e-15:
                break
        model = LinearModel(theta, {"steps": step + 1, "final_loss": float(loss.data)})
    violation = constraint_violation(model, xs, cfg.lipschitz, cfg.norm, seed=cfg.seed)
    model.metrics["constraint_violation"] = violation
    if violation > tol:
        warnings.warn(f"Lipschitz constraint violated by {violation:.3g} after training", RuntimeWarning)
    return model


# -- serialization -------------------------------------------------------------


def _encode(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(v).hex() for v in arr.ravel()]}


def _decode(obj: dict) -> np.ndarray:
    data = np.array([float.fromhex(v) for v in obj["data"]], dtype=np.float64)
    return data.reshape(obj["shape"])


def dumps_model(model) -> str:
    if isinstance(model, LinearModel):
        arch = {"kind": "linear", "input_dim": model.input_dim}
        tensors = {"theta": _encode(model.theta)}
        vocab: list[str] = []
    else:
        arch = {
            "kind": model.kind,
            "n_outputs": model.n_outputs,
            "input_dim": model.input_dim,
            "hidden": list(model.hidden),
            "activation": model.activation,
            "pooling": model.pooling,
        }
        tensors = {k: _encode(v) for k, v in model.params.items()}
        vocab = sorted(model.vocab, key=model.vocab.get)
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "architecture": arch,
        "vocabulary": vocab,
        "tensors": tensors,
        "metrics": model.metrics,
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def loads_model(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"model file is not valid JSON: {exc}") from None
    if doc.get("format") != FORMAT_NAME:
        raise DataError("not a predsens model file")
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported model file version {doc.get('version')}")
    arch = doc["architecture"]
    tensors = {k: _decode(v) for k, v in doc["tensors"].items()}
    if arch["kind"] == "linear":
        return LinearModel(tensors["theta"], doc.get("metrics", {}))
    return DiffModel(
        kind=arch["kind"],
        n_outputs=arch["n_outputs"],
        input_dim=arch["input_dim"],
        hidden=tuple(arch["hidden"]),
        activation=arch["activation"],
        params=tensors,
        vocab={tok: i for i, tok in enumerate(doc["vocabulary"])},
        pooling=arch.get("pooling", "attention"),
        metrics=doc.get("metrics", {}),
    )


def save_model(model, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def load_model(path: str | Path):
    return loads_model(Path(path).read_text(encoding="utf-8"))
