"""Zero-shot pseudo labels, class-balanced selection and multi-model ensembling."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import softmax

from .encoders import FrozenEncoderPair, ImageFeature, find_placeholder
from .errors import ConfigError, InputError
from .fileio import atomic_write_text

ROW_SUM_TOL = 1e-5
DEFAULT_K = 16
PSEUDO_FORMAT = "upl-pseudo-labels"


@dataclass(frozen=True, eq=False)
class ProbabilityRow:
    image_id: str
    probs: np.ndarray

    def __post_init__(self):
        p = self.probs
        if p.ndim != 1 or p.size == 0:
            raise InputError(f"probability row for {self.image_id!r} must be a non-empty 1-D array")
        if abs(float(p.sum()) - 1.0) > ROW_SUM_TOL or p.min() < 0 or p.max() > 1:
            raise InputError(f"probability row for {self.image_id!r} is not on the simplex")

    @property
    def num_classes(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class PseudoLabelRecord:
    image_id: str
    pseudo_class: int  # 1-based
    confidence: float
    source_tag: str = ""


@dataclass(frozen=True)
class Strategy:
    """``top_k`` with an integer K, or ``threshold`` with a confidence cut t."""

    kind: str
    value: float

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        kind, sep, value = text.partition(":")
        try:
            if kind == "top_k" and sep:
                k = int(value)
                if k <= 0:
                    raise ValueError
                return cls("top_k", k)
            if kind == "threshold" and sep:
                t = float(value)
                if not 0 <= t < 1:
                    raise ValueError
                return cls("threshold", t)
        except ValueError:
            pass
        raise ConfigError(f"strategy must be 'top_k:<K>=1..' or 'threshold:<t in [0,1)>', got {text!r}")

    def __str__(self):
        return f"{self.kind}:{self.value}"


@dataclass
class PseudoLabelSet:
    records: list[PseudoLabelRecord]
    strategy: Strategy
    num_classes: int
    template: str = ""

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def per_class_counts(self) -> dict[int, int]:
        """Counts for classes that received at least one record."""
        return dict(sorted(Counter(r.pseudo_class for r in self.records).items()))

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def save(self, path) -> None:
        header = {
            "format": PSEUDO_FORMAT,
            "version": 1,
            "strategy": self.strategy.kind,
            ("k" if self.strategy.kind == "top_k" else "threshold"): self.strategy.value,
            "num_classes": self.num_classes,
            "template": self.template,
        }
        lines = [json.dumps(header)]
        for r in self.records:
            lines.append(json.dumps({
                "image_id": r.image_id,
                "pseudo_class": r.pseudo_class,
                "confidence": float(f"{r.confidence:.9g}"),
                "source_tag": r.source_tag,
            }))
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PseudoLabelSet":
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            raise InputError(f"{path}: empty pseudo-label file")
        try:
            header = json.loads(lines[0])
            if header.get("format") != PSEUDO_FORMAT:
                raise InputError(f"{path}: not a pseudo-label file")
            kind = header["strategy"]
            value = header["k"] if kind == "top_k" else header["threshold"]
            records = [
                PseudoLabelRecord(d["image_id"], int(d["pseudo_class"]), float(d["confidence"]),
                                  d.get("source_tag", ""))
                for d in map(json.loads, lines[1:])
            ]
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{path}: malformed pseudo-label file: {exc}") from exc
        return cls(records, Strategy(kind, value), int(header["num_classes"]), header.get("template", ""))


def features_matrix(features: Sequence[ImageFeature]) -> np.ndarray:
    return np.stack([f.vector for f in features]).astype(np.float64)


def rows_from_matrix(image_ids: Sequence[str], probs: np.ndarray) -> list[ProbabilityRow]:
    return [ProbabilityRow(i, p) for i, p in zip(image_ids, probs)]


def zero_shot_probs(
    encoder: FrozenEncoderPair,
    prompt_template: str,
    class_names: Sequence[str],
    features: Sequence[ImageFeature],
    temperature: float | None = None,
) -> list[ProbabilityRow]:
    """Softmax over cosine similarity between image features and prompt embeddings.

    Class embeddings are built once from ``prompt_template`` and reused for
    every feature.  ``temperature`` defaults to the encoder's own value.
    """
    find_placeholder(prompt_template)
    if not class_names:
        raise ConfigError("class_names is empty")
    if not features:
        raise InputError("no image features given")
    tau = encoder.temperature if temperature is None else float(temperature)
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    text = encoder.encode_class_prompts(prompt_template, class_names)
    logits = features_matrix(features) @ text.T / tau
    return rows_from_matrix([f.image_id for f in features], softmax(logits, axis=1))


def assign_pseudo_labels(rows: Iterable[ProbabilityRow], source_tag: str = "") -> list[PseudoLabelRecord]:
    """Argmax label per row; ties go to the lowest class index."""
    out = []
    for row in rows:
        c = int(np.argmax(row.probs))
        out.append(PseudoLabelRecord(row.image_id, c + 1, float(row.probs[c]), source_tag))
    return out


def _sort_key(r: PseudoLabelRecord):
    return (r.pseudo_class, -r.confidence, r.image_id)


def _check_records(records: Sequence[PseudoLabelRecord]) -> None:
    if not records:
        raise InputError("no pseudo-label records given")
    seen = set()
    for r in records:
        if r.image_id in seen:
            raise InputError(f"image id {r.image_id!r} appears twice")
        seen.add(r.image_id)


def select_top_k(
    records: Sequence[PseudoLabelRecord],
    k: int = DEFAULT_K,
    *,
    num_classes: int | None = None,
    template: str = "",
) -> PseudoLabelSet:
    """Keep the ``k`` most confident records of every pseudo class.

    Classes with fewer than ``k`` records keep all of them.  Equal confidences
    at the cut are resolved by ascending image id.
    """
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k <= 0:
        raise ConfigError(f"K must be a positive integer, got {k!r}")
    _check_records(records)
    by_class = defaultdict(list)
    for r in records:
        by_class[r.pseudo_class].append(r)
    kept = []
    for c in sorted(by_class):
        kept.extend(sorted(by_class[c], key=_sort_key)[:k])
    n = num_classes or max(r.pseudo_class for r in records)
    return PseudoLabelSet(kept, Strategy("top_k", int(k)), n, template)


def select_threshold(
    records: Sequence[PseudoLabelRecord],
    t: float,
    *,
    num_classes: int | None = None,
    template: str = "",
) -> PseudoLabelSet:
    """Keep records with confidence strictly above ``t``; the result may be empty."""
    if not 0 <= t < 1:
        raise ConfigError(f"threshold must lie in [0, 1), got {t!r}")
    _check_records(records)
    kept = sorted((r for r in records if r.confidence > t), key=_sort_key)
    n = num_classes or max(r.pseudo_class for r in records)
    return PseudoLabelSet(kept, Strategy("threshold", float(t)), n, template)


def select(records, strategy: Strategy, **kwargs) -> PseudoLabelSet:
    if strategy.kind == "top_k":
        return select_top_k(records, int(strategy.value), **kwargs)
    return select_threshold(records, strategy.value, **kwargs)


def ensemble_probs(rows_per_model: Sequence[Sequence[ProbabilityRow]]) -> list[ProbabilityRow]:
    """Average probability rows image-by-image across models."""
    if not rows_per_model:
        raise InputError("ensemble needs at least one model")
    ref = rows_per_model[0]
    for m, rows in enumerate(rows_per_model[1:], start=1):
        for i in range(max(len(ref), len(rows))):
            if i >= len(rows) or i >= len(ref) or rows[i].image_id != ref[i].image_id:
                bad = rows[i].image_id if i < len(rows) else ref[i].image_id
                raise InputError(f"model {m} rows do not match model 0 at image {bad!r}")
    widths = {r.num_classes for rows in rows_per_model for r in rows}
    if len(widths) > 1:
        raise InputError(f"rows disagree on the number of classes: {sorted(widths)}")
    stacked = np.stack([[r.probs for r in rows] for rows in rows_per_model])
    return rows_from_matrix([r.image_id for r in ref], stacked.mean(axis=0))


@dataclass
class StatsReport:
    num_classes: int
    counts: dict[int, int]
    correct: dict[int, int] = field(default_factory=dict)
    mean_confidence: dict[int, float] = field(default_factory=dict)
    overall_accuracy: float | None = None

    @property
    def has_ground_truth(self) -> bool:
        return self.overall_accuracy is not None

    def accuracy(self, c: int) -> float | None:
        n = self.counts.get(c, 0)
        if not self.has_ground_truth or n == 0:
            return None
        return self.correct.get(c, 0) / n


def pseudo_label_stats(
    pseudo_set: PseudoLabelSet, ground_truth: Mapping[str, int] | None = None
) -> StatsReport:
    """Per-class counts, plus accuracy and mean confidence when labels are known."""
    counts = pseudo_set.per_class_counts
    conf_sum = defaultdict(float)
    for r in pseudo_set.records:
        conf_sum[r.pseudo_class] += r.confidence
    mean_conf = {c: conf_sum[c] / n for c, n in counts.items()}
    report = StatsReport(pseudo_set.num_classes, counts, mean_confidence=mean_conf)
    if ground_truth is None:
        return report
    correct = defaultdict(int)
    for r in pseudo_set.records:
        if r.image_id not in ground_truth:
            raise InputError(f"no ground truth for {r.image_id!r}")
        y = ground_truth[r.image_id]
        if not 1 <= y <= pseudo_set.num_classes:
            raise InputError(
                f"ground-truth class {y} for {r.image_id!r} outside 1..{pseudo_set.num_classes}"
            )
        correct[r.pseudo_class] += int(y == r.pseudo_class)
    report.correct = {c: correct[c] for c in counts}
    total = len(pseudo_set)
    report.overall_accuracy = sum(correct.values()) / total if total else math.nan
    return report
