"""Class embeddings from (trained or hand-crafted) prompts, prediction and accuracy."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.special import softmax

from .encoders import NORM_TOL, FrozenEncoderPair, ImageFeature
from .errors import ConfigError, InputError
from .fileio import atomic_write_text
from .prompt import PromptRepresentation, class_text_features, class_token_embeddings
from .pseudo_label import ProbabilityRow

EVAL_COLUMNS = ("class_index", "class_name", "n_test", "n_correct", "accuracy")


@dataclass(frozen=True)
class ClassEmbeddingBank:
    """One unit-norm text embedding per class, in class-index order."""

    prompt_id: str
    embeddings: np.ndarray
    cls_position: str
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise InputError(f"bank {self.prompt_id!r} needs a non-empty (C, D) matrix")
        if np.max(np.abs(np.linalg.norm(emb, axis=1) - 1.0)) > NORM_TOL:
            raise InputError(f"bank {self.prompt_id!r} holds non-unit embeddings")
        if self.class_names and len(self.class_names) != emb.shape[0]:
            raise InputError(f"bank {self.prompt_id!r}: {len(self.class_names)} names for {emb.shape[0]} classes")
        emb.flags.writeable = False
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_class_embeddings(prompt: PromptRepresentation, class_names: Sequence[str],
                           encoder: FrozenEncoderPair, prompt_id: str = "") -> ClassEmbeddingBank:
    """Encode every class prompt once; the bank is then reused for all test images."""
    if prompt.dim != encoder.embed_dim:
        raise ConfigError(f"prompt D={prompt.dim} does not match encoder D={encoder.embed_dim}")
    tokens = class_token_embeddings(encoder, class_names)
    with torch.no_grad():
        emb = class_text_features(prompt.detached(), tokens, encoder).numpy()
    return ClassEmbeddingBank(prompt_id or f"seed{prompt.seed}", emb, prompt.cls_position, tuple(class_names))


def zeroshot_bank(encoder: FrozenEncoderPair, template: str, class_names: Sequence[str]) -> ClassEmbeddingBank:
    """Bank built from the hand-crafted template (the zero-shot baseline)."""
    return ClassEmbeddingBank("zeroshot", encoder.encode_class_prompts(template, class_names),
                              "template", tuple(class_names))


def _feature_vector(feature) -> tuple[str, np.ndarray]:
    if isinstance(feature, ImageFeature):
        return feature.image_id, feature.vector
    return "", np.asarray(feature, dtype=np.float64)


def predict_batch(bank: ClassEmbeddingBank, features: np.ndarray, tau: float) -> np.ndarray:
    """``(B, C)`` probabilities for a ``(B, D)`` feature matrix."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != bank.dim:
        raise InputError(f"features of shape {feats.shape} do not match bank D={bank.dim}")
    return softmax(feats @ bank.embeddings.T / tau, axis=1)


def predict(bank: ClassEmbeddingBank, feature, tau: float) -> ProbabilityRow:
    image_id, vec = _feature_vector(feature)
    return ProbabilityRow(image_id, predict_batch(bank, vec[None, :], tau)[0])


def _check_banks(banks: Sequence[ClassEmbeddingBank]) -> None:
    if not banks:
        raise ConfigError("need at least one class-embedding bank")
    shapes = {b.embeddings.shape for b in banks}
    if len(shapes) != 1:
        raise InputError(f"banks disagree on (C, D): {sorted(shapes)}")


def predict_ensemble_batch(banks: Sequence[ClassEmbeddingBank], features: np.ndarray, tau: float) -> np.ndarray:
    """Mean of per-bank probabilities (post-softmax), ``(B, C)``."""
    _check_banks(banks)
    return np.mean([predict_batch(b, features, tau) for b in banks], axis=0)


def predict_ensemble(banks: Sequence[ClassEmbeddingBank], feature, tau: float) -> ProbabilityRow:
    image_id, vec = _feature_vector(feature)
    return ProbabilityRow(image_id, predict_ensemble_batch(banks, vec[None, :], tau)[0])


@dataclass(frozen=True)
class EvalReport:
    class_names: tuple[str, ...]
    n_test: tuple[int, ...]
    n_correct: tuple[int, ...]
    predictions: tuple[tuple[str, int, int, float], ...] = ()  # (id, true, predicted, confidence)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def accuracy(self) -> float:
        total = sum(self.n_test)
        return sum(self.n_correct) / total if total else 0.0

    def class_accuracy(self, c: int) -> float | None:
        """Accuracy of 1-based class ``c``; ``None`` when it has no test images."""
        n = self.n_test[c - 1]
        return self.n_correct[c - 1] / n if n else None

    def rows(self) -> list[tuple]:
        out = []
        for c, name in enumerate(self.class_names, 1):
            acc = self.class_accuracy(c)
            out.append((c, name, self.n_test[c - 1], self.n_correct[c - 1], "" if acc is None else f"{acc:.6f}"))
        out.append(("ALL", "", sum(self.n_test), sum(self.n_correct), f"{self.accuracy:.6f}"))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        w.writerows(self.rows())
        return buf.getvalue()

    def save_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != EVAL_COLUMNS:
            raise InputError("not an evaluation CSV (header mismatch)")
        body = [r for r in rows[1:] if r and r[0] != "ALL"]
        return cls(tuple(r[1] for r in body), tuple(int(r[2]) for r in body), tuple(int(r[3]) for r in body))

    @classmethod
    def load_csv(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_csv(fh.read())

    def pretty(self) -> str:
        width = max([len("class")] + [len(n) for n in self.class_names])
        lines = [f"{'#':>5}  {'class':<{width}}  {'n_test':>7}  {'correct':>7}  {'acc':>7}"]
        for c, name, n, k, _ in self.rows()[:-1]:
            acc = self.class_accuracy(c)
            shown = "-" if acc is None else f"{100 * acc:6.2f}%"
            lines.append(f"{c:>5}  {name:<{width}}  {n:>7}  {k:>7}  {shown:>7}")
        lines.append(f"{'ALL':>5}  {'':<{width}}  {sum(self.n_test):>7}  {sum(self.n_correct):>7}  "
                     f"{100 * self.accuracy:6.2f}%")
        return "\n".join(lines)


def evaluate(
    banks: Sequence[ClassEmbeddingBank],
    test_features: Sequence[ImageFeature],
    ground_truth: Mapping[str, int],
    tau: float,
    *,
    class_names: Sequence[str] | None = None,
    jobs: int = 1,
    shard_size: int = 4096,
) -> EvalReport:
    """Top-1 accuracy of the ensembled banks, overall and per class.

    ``ground_truth`` maps image id to 1-based class.  With ``jobs > 1`` the
    feature matrix is split into shards scored concurrently; results are merged
    in input order so the report does not depend on ``jobs``.
    """
    _check_banks(banks)
    n_cls = banks[0].num_classes
    names = tuple(class_names or banks[0].class_names or [str(c) for c in range(1, n_cls + 1)])
    ids = [f.image_id for f in test_features]
    missing = [i for i in ids if i not in ground_truth]
    if missing:
        raise InputError(f"no ground-truth label for test image {missing[0]!r}")
    truth = np.array([ground_truth[i] for i in ids], dtype=int)
    if truth.size and (truth.min() < 1 or truth.max() > n_cls):
        raise InputError(f"ground-truth classes must lie in 1..{n_cls}")
    feats = np.stack([f.vector for f in test_features]) if ids else np.zeros((0, banks[0].dim))
    shards = [feats[i:i + shard_size] for i in range(0, len(feats), shard_size)]
    if jobs > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda x: predict_ensemble_batch(banks, x, tau), shards))
    else:
        parts = [predict_ensemble_batch(banks, x, tau) for x in shards]
    probs = np.concatenate(parts) if parts else np.zeros((0, n_cls))
    pred = probs.argmax(axis=1) + 1
    n_test = np.bincount(truth, minlength=n_cls + 1)[1:]
    n_correct = np.bincount(truth[pred == truth], minlength=n_cls + 1)[1:]
    records = tuple((i, int(t), int(p), float(probs[k, p - 1]))
                    for k, (i, t, p) in enumerate(zip(ids, truth, pred)))
    return EvalReport(names, tuple(int(x) for x in n_test), tuple(int(x) for x in n_correct), records)
