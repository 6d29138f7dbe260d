"""Stage 2: context-window classifiers and the probability-averaging ensemble.

Two deliberately distinct hashed-feature linear families share one scoring
interface: a subword family over per-token character n-grams (robust to the
misspellings that survive stage 1) and a character-sequence family over the
joined window string plus token bigrams. Both are trained with logistic-loss
SGD and produce probabilities in (0, 1); the ensemble averages member
probabilities.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from zlib import crc32

import numpy as np

from .errors import ConfigError, DataFormatError
from .matcher import ContextWindow

KIND_SUBWORD = "subword_linear"
KIND_CHARSEQ = "charseq_linear"
MODEL_KINDS = (KIND_SUBWORD, KIND_CHARSEQ)

# z is clamped so sigmoid stays strictly inside (0, 1) in float64
_Z_CLAMP = 30.0

_NAMESPACES = {KIND_SUBWORD: b"sw\x1f", KIND_CHARSEQ: b"cs\x1f"}


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 6
    learning_rate: float = 0.5
    l2: float = 0.0
    hash_buckets: int = 1 << 20
    ngram_min: int = 3
    ngram_max: int = 6

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.hash_buckets < 2 or self.hash_buckets & (self.hash_buckets - 1):
            raise ConfigError("hash_buckets must be a power of two")
        if not 1 <= self.ngram_min <= self.ngram_max:
            raise ConfigError("need 1 <= ngram_min <= ngram_max")


def default_train_config(kind: str, **overrides) -> TrainConfig:
    """Family defaults: subword n-grams 3-6 per token, charseq 2-4 over the window."""
    if kind == KIND_SUBWORD:
        base = dict(ngram_min=3, ngram_max=6)
    elif kind == KIND_CHARSEQ:
        base = dict(ngram_min=2, ngram_max=4)
    else:
        raise ConfigError(f"unknown classifier kind {kind!r}")
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ClassifierModel:
    kind: str
    config: TrainConfig
    weights: np.ndarray
    bias: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown classifier kind {self.kind!r}")
        if len(self.weights) != self.config.hash_buckets:
            raise ConfigError("weight vector length must equal hash_buckets")


@dataclass
class EnsembleModel:
    models: list[ClassifierModel]

    def __post_init__(self) -> None:
        if not self.models:
            raise ConfigError("ensemble must contain at least one model")


def zero_model(kind: str, config: TrainConfig | None = None) -> ClassifierModel:
    config = config or default_train_config(kind)
    return ClassifierModel(kind=kind, config=config, weights=np.zeros(config.hash_buckets))


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


def subword_feature_strings(token: str, ngram_min: int, ngram_max: int) -> list[str]:
    """Whole token plus all character n-grams of the boundary-marked token."""
    out = [token]
    marked = "<" + token + ">"
    lm = len(marked)
    for n in range(ngram_min, ngram_max + 1):
        for i in range(lm - n + 1):
            out.append(marked[i : i + n])
    return out


def charseq_feature_strings(tokens: Sequence[str], ngram_min: int, ngram_max: int) -> list[str]:
    """Character n-grams of the space-joined window plus token bigrams."""
    joined = " ".join(tokens)
    lj = len(joined)
    out = []
    for n in range(ngram_min, ngram_max + 1):
        for i in range(lj - n + 1):
            out.append(joined[i : i + n])
    for left, right in zip(tokens, tokens[1:]):
        out.append(left + "_" + right)
    return out


def _bag_average(strings: Iterable[str], namespace: bytes, buckets: int) -> dict[int, float]:
    mask = buckets - 1
    counts: dict[int, float] = {}
    for s in strings:
        bucket = crc32(namespace + s.encode("utf-8")) & mask
        counts[bucket] = counts.get(bucket, 0.0) + 1.0
    total = sum(counts.values())
    if total:
        for bucket in counts:
            counts[bucket] /= total
    return counts


def featurize_subword(window: ContextWindow, config: TrainConfig) -> dict[int, float]:
    """Hashed bag of per-token subword features, averaged over the window."""
    if not window.tokens:
        raise ValueError("window must be non-empty")
    strings = ["ae=" + window.ae_id]
    for token in window.tokens:
        strings.extend(subword_feature_strings(token.casefold(), config.ngram_min, config.ngram_max))
    return _bag_average(strings, _NAMESPACES[KIND_SUBWORD], config.hash_buckets)


def featurize_charseq(window: ContextWindow, config: TrainConfig) -> dict[int, float]:
    """Hashed bag of window-string character n-grams and token bigrams."""
    if not window.tokens:
        raise ValueError("window must be non-empty")
    tokens = [t.casefold() for t in window.tokens]
    strings = ["ae=" + window.ae_id]
    strings.extend(charseq_feature_strings(tokens, config.ngram_min, config.ngram_max))
    return _bag_average(strings, _NAMESPACES[KIND_CHARSEQ], config.hash_buckets)


def featurize(window: ContextWindow, kind: str, config: TrainConfig) -> dict[int, float]:
    if kind == KIND_SUBWORD:
        return featurize_subword(window, config)
    if kind == KIND_CHARSEQ:
        return featurize_charseq(window, config)
    raise ConfigError(f"unknown classifier kind {kind!r}")


# ---------------------------------------------------------------------------
# Loss and gradient (shared by training and the finite-difference checks)
# ---------------------------------------------------------------------------


def _sigmoid(z: float) -> float:
    if z > _Z_CLAMP:
        z = _Z_CLAMP
    elif z < -_Z_CLAMP:
        z = -_Z_CLAMP
    return 1.0 / (1.0 + np.exp(-z))


def logistic_loss(
    weights: np.ndarray,
    bias: float,
    examples: Sequence[tuple[dict[int, float], int, float]],
    l2: float = 0.0,
) -> float:
    """Mean weighted log loss plus l2/2 * ||w||^2 over (features, label, weight)."""
    total = 0.0
    for features, label, example_weight in examples:
        z = bias + sum(weights[j] * v for j, v in features.items())
        p = _sigmoid(z)
        total += -example_weight * (np.log(p) if label else np.log(1.0 - p))
    loss = total / len(examples)
    if l2:
        loss += 0.5 * l2 * float(weights @ weights)
    return float(loss)


def logistic_gradient(
    weights: np.ndarray,
    bias: float,
    examples: Sequence[tuple[dict[int, float], int, float]],
    l2: float = 0.0,
) -> tuple[np.ndarray, float]:
    """Analytic gradient of logistic_loss w.r.t. (weights, bias)."""
    grad_w = np.zeros_like(weights)
    grad_b = 0.0
    for features, label, example_weight in examples:
        z = bias + sum(weights[j] * v for j, v in features.items())
        residual = example_weight * (_sigmoid(z) - label)
        for j, v in features.items():
            grad_w[j] += residual * v
        grad_b += residual
    grad_w /= len(examples)
    grad_b /= len(examples)
    if l2:
        grad_w += l2 * weights
    return grad_w, grad_b


# ---------------------------------------------------------------------------
# Training and prediction
# ---------------------------------------------------------------------------


def train(
    kind: str,
    windows: Sequence[ContextWindow],
    config: TrainConfig | None = None,
) -> ClassifierModel:
    """Fit a linear model with logistic-loss SGD over shuffled examples.

    Class imbalance is handled by weighting each class inversely to its
    frequency. The example shuffle is seeded by config.seed, so training is
    bit-for-bit deterministic given (data, config).
    """
    config = config or default_train_config(kind)
    labeled = [w for w in windows if w.label is not None]
    if len(labeled) != len(windows):
        raise ValueError("all training windows must carry a label")
    n_pos = sum(1 for w in labeled if w.label)
    n_neg = len(labeled) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("training data must contain at least one example of each class")

    examples = []
    for w in labeled:
        features = featurize(w, kind, config)
        idx = np.fromiter(features.keys(), dtype=np.int64, count=len(features))
        vals = np.fromiter(features.values(), dtype=np.float64, count=len(features))
        examples.append((idx, vals, 1 if w.label else 0))

    total = len(examples)
    class_weight = {1: total / (2.0 * n_pos), 0: total / (2.0 * n_neg)}
    weights = np.zeros(config.hash_buckets)
    bias = 0.0
    lr = config.learning_rate
    l2 = config.l2

    import random as _random

    rng = _random.Random(config.seed)
    order = list(range(total))
    for _ in range(config.epochs):
        rng.shuffle(order)
        for i in order:
            idx, vals, label = examples[i]
            z = bias + float(weights[idx] @ vals)
            p = _sigmoid(z)
            step = lr * class_weight[label] * (p - label)
            if l2:
                weights[idx] -= step * vals + lr * l2 * weights[idx]
            else:
                weights[idx] -= step * vals
            bias -= step

    return ClassifierModel(
        kind=kind,
        config=config,
        weights=weights,
        bias=bias,
        metadata={
            "seed": config.seed,
            "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "examples": total,
            "positives": n_pos,
        },
    )


def predict_proba(model: ClassifierModel, window: ContextWindow) -> float:
    """Sigmoid of weights . features + bias; always strictly inside (0, 1)."""
    features = featurize(window, model.kind, model.config)
    z = model.bias + sum(model.weights[j] * v for j, v in features.items())
    return float(_sigmoid(z))


def ensemble_predict(ensemble: EnsembleModel, window: ContextWindow) -> float:
    """Arithmetic mean of member probabilities."""
    total = 0.0
    for model in ensemble.models:
        total += predict_proba(model, window)
    return total / len(ensemble.models)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"IRAEWMDL"
MODEL_VERSION = 1
_PAYLOAD_MODEL = 1
_PAYLOAD_ENSEMBLE = 2


def _pack_classifier(model: ClassifierModel) -> bytes:
    header = json.dumps(
        {
            "kind": model.kind,
            "bias": model.bias,
            "metadata": model.metadata,
            "config": {
                "seed": model.config.seed,
                "epochs": model.config.epochs,
                "learning_rate": model.config.learning_rate,
                "l2": model.config.l2,
                "hash_buckets": model.config.hash_buckets,
                "ngram_min": model.config.ngram_min,
                "ngram_max": model.config.ngram_max,
            },
        },
        sort_keys=True,
    ).encode("utf-8")
    weight_bytes = np.ascontiguousarray(model.weights, dtype="<f8").tobytes()
    return (
        struct.pack("<I", len(header))
        + header
        + struct.pack("<Q", len(model.weights))
        + weight_bytes
    )


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError("corrupt model file: truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _unpack_classifier(cursor: _Cursor) -> ClassifierModel:
    header_len = cursor.u32()
    try:
        header = json.loads(cursor.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataFormatError("corrupt model file: unreadable header") from None
    n_weights = cursor.u64()
    weights = np.frombuffer(cursor.take(n_weights * 8), dtype="<f8").copy()
    config = TrainConfig(**header["config"])
    return ClassifierModel(
        kind=header["kind"],
        config=config,
        weights=weights,
        bias=float(header["bias"]),
        metadata=header.get("metadata", {}),
    )


def save_model(model: ClassifierModel | EnsembleModel, path: str | Path) -> None:
    """Write the binary model file: magic, version, payload, trailing CRC32."""
    if isinstance(model, EnsembleModel):
        body = struct.pack("<BI", _PAYLOAD_ENSEMBLE, len(model.models))
        for member in model.models:
            body += _pack_classifier(member)
    else:
        body = struct.pack("<B", _PAYLOAD_MODEL) + _pack_classifier(model)
    payload = MODEL_MAGIC + struct.pack("<I", MODEL_VERSION) + body
    payload += struct.pack("<I", crc32(payload))
    Path(path).write_bytes(payload)


def load_model(path: str | Path) -> ClassifierModel | EnsembleModel:
    """Inverse of save_model; round-trips predictions exactly."""
    data = Path(path).read_bytes()
    if len(data) < len(MODEL_MAGIC) + 8:
        raise DataFormatError("corrupt model file: truncated")
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise DataFormatError("corrupt model file: bad magic bytes")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if crc32(data[:-4]) != stored_crc:
        raise DataFormatError("corrupt model file: checksum mismatch")
    cursor = _Cursor(data[:-4])
    cursor.take(len(MODEL_MAGIC))
    version = cursor.u32()
    if version != MODEL_VERSION:
        raise DataFormatError(
            f"unsupported model file version: found {version}, expected {MODEL_VERSION}"
        )
    payload_type = cursor.take(1)[0]
    if payload_type == _PAYLOAD_MODEL:
        return _unpack_classifier(cursor)
    if payload_type == _PAYLOAD_ENSEMBLE:
        count = cursor.u32()
        return EnsembleModel(models=[_unpack_classifier(cursor) for _ in range(count)])
    raise DataFormatError(f"corrupt model file: unknown payload type {payload_type}")
