"""Differentiable sentence-pair classifiers and their training loop.

Two small architectures share one convention: a mask, when present, scales
each word's entire embedding row before anything else happens, so masking
and word "removal" mean the same thing everywhere in the toolkit.

  bow-pair    mean-pool each sentence to u, v; classify [u; v; u*v; |u-v|]
              through one hidden ReLU layer.
  mini-dattn  attend / compare / aggregate: soft-align the two sentences
              with a shared ReLU projection, compare each word with its
              soft alignment, sum, classify.

Both accept single examples (2-D embedded matrices) or a stacked batch
(3-D), which is how the explainers probe many masked variants in one graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, NumericError, TrainingError
from .optim import Adam
from .tensor import Graph, Tensor, forward_backward

ARCHITECTURES = ("bow-pair", "mini-dattn")


@dataclass(frozen=True)
class PairExample:
    """A tokenized sentence pair with its label.

    gold_rationale, when present, is a set of (sentence index, position)
    pairs marking the planted evidence; sentence index is 0 or 1.
    """

    tokens1: tuple[int, ...]
    tokens2: tuple[int, ...]
    label: int
    gold_rationale: frozenset[tuple[int, int]] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens1", tuple(int(t) for t in self.tokens1))
        object.__setattr__(self, "tokens2", tuple(int(t) for t in self.tokens2))
        if len(self.tokens1) < 1 or len(self.tokens2) < 1:
            raise ContractError("both sentences need at least one token")
        if any(t < 0 for t in self.tokens1 + self.tokens2):
            raise ContractError("token ids must be nonnegative")
        if self.label < 0:
            raise ContractError("label must be nonnegative")
        if self.gold_rationale is not None:
            gr = frozenset((int(s), int(i)) for s, i in self.gold_rationale)
            for s, i in gr:
                if s not in (0, 1):
                    raise ContractError(f"rationale sentence index {s} not in {{0, 1}}")
                n = len(self.tokens1) if s == 0 else len(self.tokens2)
                if not 0 <= i < n:
                    raise ContractError(f"rationale position {i} out of range for sentence {s + 1}")
            object.__setattr__(self, "gold_rationale", gr)

    @property
    def n_words(self) -> int:
        return len(self.tokens1) + len(self.tokens2)

    def flat_rationale(self) -> frozenset[int] | None:
        """Gold positions as indices into the concatenated word sequence."""
        if self.gold_rationale is None:
            return None
        n1 = len(self.tokens1)
        return frozenset(i if s == 0 else n1 + i for s, i in self.gold_rationale)


_WEIGHT_SHAPES = {
    "bow-pair": lambda d, h, c, v: {
        "embedding": (v, d),
        "hidden_w": (4 * d, h),
        "hidden_b": (h,),
        "out_w": (h, c),
        "out_b": (c,),
    },
    "mini-dattn": lambda d, h, c, v: {
        "embedding": (v, d),
        "attend_w": (d, d),
        "attend_b": (d,),
        "compare_w": (2 * d, d),
        "compare_b": (d,),
        "out_w": (2 * d, c),
        "out_b": (c,),
    },
}


@dataclass
class ClassifierParams:
    """Trained weights for one architecture. Frozen: arrays are read-only."""

    architecture: str
    d: int
    n_classes: int
    vocab_size: int
    weights: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.architecture!r}")
        if self.n_classes < 2:
            raise ContractError("need at least two classes")
        h = self.weights["hidden_w"].shape[1] if self.architecture == "bow-pair" else 0
        expected = _WEIGHT_SHAPES[self.architecture](self.d, h, self.n_classes, self.vocab_size)
        if set(expected) != set(self.weights):
            raise ContractError(
                f"weights {sorted(self.weights)} do not match expected {sorted(expected)}")
        for name, shape in expected.items():
            arr = np.ascontiguousarray(np.asarray(self.weights[name], dtype=np.float64))
            if arr.shape != shape:
                raise ContractError(f"weight {name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"weight {name} contains non-finite values")
            arr.flags.writeable = False
            self.weights[name] = arr

    # explainers and metrics probe the model through these two methods

    def logits_node(self, g: Graph, example: PairExample, mask_node: int | None = None) -> int:
        return _example_logits(g, self, example, mask_node)

    def predict_proba(self, example: PairExample, mask=None) -> np.ndarray:
        return predict_proba(self, example, mask)

    def predict(self, example: PairExample) -> int:
        return int(np.argmax(self.predict_proba(example)))


# ---------------------------------------------------------------------------
# architecture forwards (graph builders over embedded matrices)
# ---------------------------------------------------------------------------


def _as_batched(g: Graph, x: int) -> tuple[int, bool]:
    dat = g.data(x)
    if dat.ndim == 2:
        return g.reshape(x, (1,) + dat.shape), True
    if dat.ndim == 3:
        return x, False
    raise ContractError(f"embedded matrix must be 2-D or 3-D, got shape {dat.shape}")


def _linear(g: Graph, x: int, w: int, b: int) -> int:
    return g.add(g.matmul(x, w), b)


def bow_pair_forward(g: Graph, x1: int, x2: int, w: dict[str, int]) -> int:
    """Logits from embedded sentence matrices (n_i, d) or (B, n_i, d)."""
    x1, squeeze = _as_batched(g, x1)
    x2, _ = _as_batched(g, x2)
    u = g.mean(x1, axis=-2)
    v = g.mean(x2, axis=-2)
    diff = g.sub(u, v)
    absdiff = g.add(g.relu(diff), g.relu(g.smul(diff, -1.0)))
    feats = g.concat([u, v, g.mul(u, v), absdiff], axis=-1)
    hidden = g.relu(_linear(g, feats, w["hidden_w"], w["hidden_b"]))
    logits = _linear(g, hidden, w["out_w"], w["out_b"])
    if squeeze:
        logits = g.reshape(logits, (g.data(logits).shape[-1],))
    return logits


def mini_dattn_forward(g: Graph, x1: int, x2: int, w: dict[str, int]) -> int:
    """Attend / compare / aggregate over embedded matrices.

    Alignment scores are inner products of a shared one-layer ReLU
    projection; each direction softmax-normalizes its own scores.
    """
    x1, squeeze = _as_batched(g, x1)
    x2, _ = _as_batched(g, x2)
    f1 = g.relu(_linear(g, x1, w["attend_w"], w["attend_b"]))
    f2 = g.relu(_linear(g, x2, w["attend_w"], w["attend_b"]))
    scores = g.matmul(f1, g.transpose(f2))          # (B, n1, n2)
    beta = g.matmul(g.softmax(scores), x2)          # s2 words aligned to each s1 word
    alpha = g.matmul(g.softmax(g.transpose(scores)), x1)

    def compare(x, aligned):
        pair = g.concat([x, aligned], axis=-1)
        cmp = g.relu(_linear(g, pair, w["compare_w"], w["compare_b"]))
        return g.sum(cmp, axis=-2)

    agg = g.concat([compare(x1, beta), compare(x2, alpha)], axis=-1)
    logits = _linear(g, agg, w["out_w"], w["out_b"])
    if squeeze:
        logits = g.reshape(logits, (g.data(logits).shape[-1],))
    return logits


_FORWARDS = {"bow-pair": bow_pair_forward, "mini-dattn": mini_dattn_forward}


def _weight_nodes(g: Graph, weights: dict[str, np.ndarray | Tensor]) -> dict[str, int]:
    return {name: g.leaf(w) for name, w in weights.items()}


def _split_mask(g: Graph, mask: int, n1: int, n2: int) -> tuple[int, int]:
    """Split a (B, n1+n2) mask node into per-sentence (B, n_i, 1) nodes."""
    n = n1 + n2
    sel1 = np.zeros((n, n1))
    sel1[np.arange(n1), np.arange(n1)] = 1.0
    sel2 = np.zeros((n, n2))
    sel2[n1 + np.arange(n2), np.arange(n2)] = 1.0
    b = g.data(mask).shape[0]
    w1 = g.reshape(g.matmul(mask, g.leaf(sel1)), (b, n1, 1))
    w2 = g.reshape(g.matmul(mask, g.leaf(sel2)), (b, n2, 1))
    return w1, w2


def _example_logits(g: Graph, params: ClassifierParams, example: PairExample,
                    mask_node: int | None = None, w: dict[str, int] | None = None) -> int:
    """Build logits for one example; mask_node may stack B masked variants."""
    n1, n2 = len(example.tokens1), len(example.tokens2)
    if max(example.tokens1 + example.tokens2) >= params.vocab_size:
        raise ContractError(f"token id out of range for vocab of {params.vocab_size}")
    if w is None:
        w = _weight_nodes(g, params.weights)
    x1 = g.gather(w["embedding"], np.asarray(example.tokens1))
    x2 = g.gather(w["embedding"], np.asarray(example.tokens2))
    squeeze = False
    if mask_node is not None:
        mdat = g.data(mask_node)
        if mdat.ndim == 1:
            squeeze = True
            mask_node = g.reshape(mask_node, (1, mdat.shape[0]))
            mdat = g.data(mask_node)
        if mdat.ndim != 2 or mdat.shape[1] != n1 + n2:
            raise ContractError(
                f"mask has shape {mdat.shape}, expected (*, {n1 + n2})")
        w1, w2 = _split_mask(g, mask_node, n1, n2)
        x1 = g.mul(w1, x1)
        x2 = g.mul(w2, x2)
    logits = _FORWARDS[params.architecture](g, x1, x2, w)
    if squeeze:
        logits = g.reshape(logits, (g.data(logits).shape[-1],))
    return logits


def predict_proba(params: ClassifierParams, example: PairExample, mask=None) -> np.ndarray:
    """Class probabilities, optionally with per-word multipliers in [0, 1].

    mask[i] scales word i's embedding row; word order is sentence 1 then
    sentence 2. Absent mask is equivalent to all ones.
    """
    g = Graph()
    mask_node = None
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != (example.n_words,):
            raise ContractError(
                f"mask length {m.shape} does not match {example.n_words} words")
        if m.min() < 0.0 or m.max() > 1.0:
            raise ContractError("mask entries must lie in [0, 1]")
        mask_node = g.leaf(m)
    logits = _example_logits(g, params, example, mask_node)
    return g.data(g.softmax(logits)).copy()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    d: int = 32
    hidden: int = 64
    vocab_size: int = 200
    n_classes: int = 3
    lr: float = 0.01
    batch_size: int = 64
    max_epochs: int = 200
    target_dev_accuracy: float = 0.95
    # with rate q, each word's embedding is independently zeroed during
    # training, so zero-masked probe inputs stay in-distribution
    word_dropout: float = 0.0


def _init_weights(architecture: str, cfg: TrainConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    shapes = _WEIGHT_SHAPES[architecture](cfg.d, cfg.hidden, cfg.n_classes, cfg.vocab_size)
    weights = {}
    for name, shape in shapes.items():
        if name.endswith("_b"):
            arr = np.zeros(shape)
        elif name == "embedding":
            arr = rng.normal(0.0, 0.3, size=shape)
        else:
            fan_in, fan_out = shape
            arr = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
        weights[name] = Tensor(arr, requires_grad=True)
    return weights


def _drop_words(g: Graph, x: int, rate: float, rng: np.random.Generator) -> int:
    keep = (rng.random(g.data(x).shape[:2] + (1,)) >= rate).astype(np.float64)
    return g.mul(x, g.leaf(keep))


def _shape_buckets(examples: Sequence[PairExample]) -> dict[tuple[int, int], list[int]]:
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, ex in enumerate(examples):
        buckets.setdefault((len(ex.tokens1), len(ex.tokens2)), []).append(i)
    return dict(sorted(buckets.items()))


def _batched_argmax(architecture: str, weights: dict[str, Tensor],
                    examples: Sequence[PairExample], batch_size: int = 256) -> np.ndarray:
    """Predicted labels for many examples, batched per sentence-length bucket."""
    preds = np.zeros(len(examples), dtype=np.int64)
    for _, idxs in _shape_buckets(examples).items():
        for start in range(0, len(idxs), batch_size):
            chunk = idxs[start:start + batch_size]
            g = Graph()
            w = {name: g.leaf(Tensor(t.data)) for name, t in weights.items()}
            x1 = g.gather(w["embedding"], np.asarray([examples[i].tokens1 for i in chunk]))
            x2 = g.gather(w["embedding"], np.asarray([examples[i].tokens2 for i in chunk]))
            logits = _FORWARDS[architecture](g, x1, x2, w)
            preds[chunk] = np.argmax(g.data(logits), axis=-1)
    return preds


def accuracy(params_or_weights, architecture: str, examples: Sequence[PairExample]) -> float:
    if isinstance(params_or_weights, ClassifierParams):
        weights = {k: Tensor(v) for k, v in params_or_weights.weights.items()}
        architecture = params_or_weights.architecture
    else:
        weights = params_or_weights
    preds = _batched_argmax(architecture, weights, examples)
    labels = np.asarray([ex.label for ex in examples])
    return float(np.mean(preds == labels))


def train_classifier(train: Sequence[PairExample], dev: Sequence[PairExample],
                     architecture: str, cfg: TrainConfig | None = None,
                     seed: int = 0) -> ClassifierParams:
    """Adam training with early stop at the target dev accuracy.

    Deterministic given the seed: initialization, shuffling, and batching
    order are all drawn from one generator.
    """
    if architecture not in ARCHITECTURES:
        raise ContractError(f"unknown architecture {architecture!r}")
    if not train:
        raise ContractError("training set is empty")
    cfg = cfg or TrainConfig()
    if cfg.n_classes < 2:
        raise ContractError("need at least two classes")
    rng = np.random.default_rng(seed)
    weights = _init_weights(architecture, cfg, rng)
    opt = Adam(list(weights.values()), lr=cfg.lr)
    buckets = _shape_buckets(train)

    for _epoch in range(cfg.max_epochs):
        for _, idxs in buckets.items():
            order = rng.permutation(len(idxs))
            for start in range(0, len(order), cfg.batch_size):
                chunk = [idxs[j] for j in order[start:start + cfg.batch_size]]
                g = Graph()
                w = {name: g.leaf(t) for name, t in weights.items()}
                x1 = g.gather(w["embedding"], np.asarray([train[i].tokens1 for i in chunk]))
                x2 = g.gather(w["embedding"], np.asarray([train[i].tokens2 for i in chunk]))
                if cfg.word_dropout > 0.0:
                    x1 = _drop_words(g, x1, cfg.word_dropout, rng)
                    x2 = _drop_words(g, x2, cfg.word_dropout, rng)
                logits = _FORWARDS[architecture](g, x1, x2, w)
                loss = g.cross_entropy(logits, [train[i].label for i in chunk])
                try:
                    forward_backward(g, loss)
                except NumericError as exc:
                    raise TrainingError(f"training diverged: {exc}") from exc
                opt.step()
        if dev and accuracy(weights, architecture, dev) >= cfg.target_dev_accuracy:
            break

    final = {name: np.array(t.data) for name, t in weights.items()}
    return ClassifierParams(architecture, cfg.d, cfg.n_classes, cfg.vocab_size, final)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_classifier(params: ClassifierParams, path) -> None:
    doc = {
        "architecture": params.architecture,
        "d": params.d,
        "classes": params.n_classes,
        "vocab_size": params.vocab_size,
        "weights": {name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                    for name, arr in params.weights.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_classifier(path) -> ClassifierParams:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ContractError(f"malformed model checkpoint: {exc}") from exc
    try:
        weights = {name: np.asarray(w["data"], dtype=np.float64).reshape(w["shape"])
                   for name, w in doc["weights"].items()}
        return ClassifierParams(doc["architecture"], int(doc["d"]), int(doc["classes"]),
                                int(doc["vocab_size"]), weights)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"malformed model checkpoint: {exc}") from exc
