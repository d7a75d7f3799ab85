"""Synthetic sentence-pair tasks with planted correlated word pairs.

Each example hides one trigger token in each sentence; the (pair of)
triggers determines the label, and the planted positions are recorded as a
gold rationale. Trigger tokens live in a reserved low range of the
vocabulary, distractors are drawn uniformly from the rest, so recovery of
the planted evidence can be measured exactly.

The default task keys the label on the *combination* of the two triggers
(any single trigger is uninformative on its own), which is the regime the
group-mask explainer is built for. The "correlated" preset sharpens this to
an XOR over two trigger pairs with longer, distractor-heavy sentences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError
from .models import PairExample


@dataclass(frozen=True)
class PlantedTaskConfig:
    vocab_size: int = 200
    n1: int = 8
    n2: int = 8
    # (sentence-1 trigger, sentence-2 trigger, class) rows
    triples: tuple[tuple[int, int, int], ...] = field(
        default_factory=lambda: tuple(
            (a, 3 + b, (a + b) % 3) for a in range(3) for b in range(3)))
    n_train: int = 4000
    n_dev: int = 500
    n_test: int = 500
    noise: float = 0.02
    reserved_tokens: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise ContractError("sentence lengths must be >= 1")
        if not 0.0 <= self.noise < 0.5:
            raise ContractError("noise rate must lie in [0, 0.5)")
        if not 0 < self.reserved_tokens < self.vocab_size:
            raise ContractError("reserved token range must be nonempty and below vocab size")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ContractError("all splits need at least one example")
        if not self.triples:
            raise ContractError("need at least one trigger triple")
        side1 = {a for a, _, _ in self.triples}
        side2 = {b for _, b, _ in self.triples}
        if side1 & side2:
            raise ContractError("sentence-1 and sentence-2 trigger sets must be disjoint")
        for a, b, c in self.triples:
            if not (0 <= a < self.reserved_tokens and 0 <= b < self.reserved_tokens):
                raise ContractError("trigger tokens must lie in the reserved range")
            if c < 0:
                raise ContractError("class indices must be nonnegative")
        classes = {c for _, _, c in self.triples}
        self._check_classes(classes)

    def _check_classes(self, classes):
        n = max(classes) + 1
        if n < 2:
            raise ContractError("need at least two classes")
        if classes != set(range(n)):
            raise ContractError("every class up to the maximum must own a triple")

    @property
    def n_classes(self) -> int:
        return max(c for _, _, c in self.triples) + 1


def correlated_task_config(seed: int = 0) -> PlantedTaskConfig:
    """Distractor-heavy XOR preset: the trigger pair decides the label but
    either trigger alone is uninformative (appears with both classes
    equally), and 22 of 24 words are pure distractors."""
    xor = ((0, 2, 0), (0, 3, 1), (1, 2, 1), (1, 3, 0))
    return PlantedTaskConfig(n1=12, n2=12, triples=xor, noise=0.02, seed=seed)


PRESETS = {"default": PlantedTaskConfig, "correlated": correlated_task_config}


def _generate_split(cfg: PlantedTaskConfig, count: int,
                    rng: np.random.Generator) -> list[PairExample]:
    examples = []
    lo, hi = cfg.reserved_tokens, cfg.vocab_size
    for _ in range(count):
        a, b, label = cfg.triples[rng.integers(len(cfg.triples))]
        pos1 = int(rng.integers(cfg.n1))
        pos2 = int(rng.integers(cfg.n2))
        tokens1 = rng.integers(lo, hi, size=cfg.n1)
        tokens2 = rng.integers(lo, hi, size=cfg.n2)
        tokens1[pos1] = a
        tokens2[pos2] = b
        if cfg.noise > 0.0 and rng.random() < cfg.noise:
            others = [c for c in range(cfg.n_classes) if c != label]
            label = others[rng.integers(len(others))]
        examples.append(PairExample(tuple(tokens1), tuple(tokens2), int(label),
                                    frozenset({(0, pos1), (1, pos2)})))
    return examples


def generate_planted_dataset(cfg: PlantedTaskConfig):
    """Deterministic (train, dev, test) splits for a planted-pair task."""
    rng = np.random.default_rng(cfg.seed)
    return (_generate_split(cfg, cfg.n_train, rng),
            _generate_split(cfg, cfg.n_dev, rng),
            _generate_split(cfg, cfg.n_test, rng))


# ---------------------------------------------------------------------------
# JSONL dataset files
# ---------------------------------------------------------------------------


def example_to_dict(ex: PairExample) -> dict:
    doc = {"tokens1": list(ex.tokens1), "tokens2": list(ex.tokens2), "label": ex.label}
    if ex.gold_rationale:
        doc["rationale"] = sorted([s, i] for s, i in ex.gold_rationale)
    return doc


def example_from_dict(doc: dict) -> PairExample:
    rationale = doc.get("rationale")
    return PairExample(
        tuple(doc["tokens1"]), tuple(doc["tokens2"]), int(doc["label"]),
        frozenset((int(s), int(i)) for s, i in rationale) if rationale else None)


def save_dataset(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_dict(ex)) + "\n")


def load_dataset(path) -> list[PairExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                examples.append(example_from_dict(doc))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, ContractError) as exc:
                raise ParseError(f"bad example record: {exc}", line=lineno) from exc
    return examples
