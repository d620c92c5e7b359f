"""Diagnostic reports: per-class pseudo-label curves, model gaps, transfer deltas,
confidence calibration tables and nearest-vocabulary readouts of learned prompts.

Every report is a :class:`Table`; CSV is the stable output format.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .encoders import VocabularyTable
from .errors import ConfigError, InputError
from .fileio import atomic_write_text, file_hash
from .inference import EvalReport
from .prompt import PromptRepresentation
from .pseudo_label import PseudoLabelRecord, PseudoLabelSet, StatsReport, pseudo_label_stats

REPORT_NAMES = (
    "per-class-curves",
    "model-gap",
    "transfer-improvement",
    "nearest-words",
    "confidence-accuracy",
    "prediction-records",
)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_cell(text: str):
    if text == "":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


@dataclass(frozen=True)
class Table:
    """Column names plus rows of plain values (int, float, str or None)."""

    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        for r in self.rows:
            if len(r) != len(self.columns):
                raise InputError(f"row {r!r} does not match columns {self.columns}")

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def sorted_by(self, name: str, descending: bool = False) -> "Table":
        """Stable sort on one column; empty cells go last either way."""
        i = self.columns.index(name)
        present = [r for r in self.rows if r[i] is not None]
        present.sort(key=lambda r: r[i], reverse=descending)
        return Table(self.columns, present + [r for r in self.rows if r[i] is None])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows([_cell(v) for v in r] for r in self.rows)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Table":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise InputError("empty CSV")
        return cls(tuple(rows[0]), tuple(tuple(_parse_cell(c) for c in r) for r in rows[1:]))

    def save(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    def pretty(self, digits: int = 2) -> str:
        def show(v):
            if v is None:
                return "-"
            return f"{v:.{digits}f}" if isinstance(v, float) else str(v)

        cells = [list(self.columns)] + [[show(v) for v in r] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.columns))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)


# --------------------------------------------------------------------------
# Pseudo-label diagnostics
# --------------------------------------------------------------------------


def per_class_curves(pseudo_set: PseudoLabelSet, ground_truth: Mapping[str, int] | None) -> Table:
    """Per class: selected count, correct count, accuracy and mean confidence.

    Classes that received no pseudo labels appear with count 0 and an empty
    accuracy cell, which is how imbalance under threshold selection shows up.
    """
    if ground_truth is None:
        raise ConfigError("per-class curves need ground-truth labels for the pseudo-labeled split")
    stats = pseudo_label_stats(pseudo_set, ground_truth)
    rows = []
    for c in range(1, pseudo_set.num_classes + 1):
        n = stats.counts.get(c, 0)
        rows.append((c, n, stats.correct.get(c, 0), stats.accuracy(c), stats.mean_confidence.get(c)))
    return Table(("class_index", "count", "n_correct", "accuracy", "mean_confidence"), rows)


def model_gap_report(
    sets: Mapping[str, PseudoLabelSet],
    ground_truth: Mapping[str, int],
    baseline: str,
) -> Table:
    """Per-class pseudo-label accuracy of each model and its gap to ``baseline``."""
    if len(sets) < 2:
        raise ConfigError("a model-gap report needs at least two model tags")
    if baseline not in sets:
        raise ConfigError(f"unknown baseline tag {baseline!r}; have {sorted(sets)}")
    sizes = {s.num_classes for s in sets.values()}
    if len(sizes) != 1:
        raise InputError(f"pseudo-label sets disagree on the class count: {sorted(sizes)}")
    n_cls = sizes.pop()
    tags = [baseline] + sorted(t for t in sets if t != baseline)
    stats = {t: pseudo_label_stats(sets[t], ground_truth) for t in tags}
    others = tags[1:]
    columns = ("class_index", *(f"acc[{t}]" for t in tags), *(f"gap[{t}]" for t in others))
    rows = []
    for c in range(1, n_cls + 1):
        accs = [stats[t].accuracy(c) for t in tags]
        base = accs[0]
        gaps = [None if a is None or base is None else a - base for a in accs[1:]]
        rows.append((c, *accs, *gaps))
    return Table(columns, rows)


def transfer_improvement_report(
    upl_eval: EvalReport,
    zeroshot_eval: EvalReport,
    pseudo_stats: StatsReport | None = None,
) -> Table:
    """Per class: pseudo-label accuracy (if known), both test accuracies, and their delta."""
    if upl_eval.class_names != zeroshot_eval.class_names:
        raise InputError("evaluation reports cover different class sets")
    if pseudo_stats is not None and pseudo_stats.num_classes != upl_eval.num_classes:
        raise InputError("pseudo-label statistics cover a different number of classes")
    rows = []
    for c, name in enumerate(upl_eval.class_names, 1):
        a, z = upl_eval.class_accuracy(c), zeroshot_eval.class_accuracy(c)
        pseudo = pseudo_stats.accuracy(c) if pseudo_stats is not None else None
        rows.append((c, name, pseudo, a, z, None if a is None or z is None else a - z))
    return Table(("class_index", "class_name", "pseudo_accuracy", "upl_accuracy",
                  "zeroshot_accuracy", "delta"), rows)


def confidence_accuracy_table(
    records: Iterable[PseudoLabelRecord],
    ground_truth: Mapping[str, int],
    bins: int = 10,
) -> Table:
    """Pseudo-label accuracy in equal-width confidence bins ``[lo, hi)`` (last bin closed)."""
    if bins < 1:
        raise ConfigError("need at least one confidence bin")
    records = list(records)
    edges = np.linspace(0.0, 1.0, bins + 1)
    count = np.zeros(bins, dtype=int)
    correct = np.zeros(bins, dtype=int)
    conf_sum = np.zeros(bins)
    for r in records:
        if r.image_id not in ground_truth:
            raise InputError(f"no ground truth for {r.image_id!r}")
        b = min(int(r.confidence * bins), bins - 1)
        count[b] += 1
        correct[b] += int(ground_truth[r.image_id] == r.pseudo_class)
        conf_sum[b] += r.confidence
    rows = []
    for b in range(bins):
        n = int(count[b])
        rows.append((float(edges[b]), float(edges[b + 1]), n, int(correct[b]),
                     correct[b] / n if n else None, conf_sum[b] / n if n else None))
    return Table(("conf_lo", "conf_hi", "count", "n_correct", "accuracy", "mean_confidence"), rows)


def prediction_records(report: EvalReport) -> Table:
    """Per-image (confidence, correctness) export behind the qualitative figures."""
    rows = [(i, t, p, conf, int(t == p)) for i, t, p, conf in report.predictions]
    return Table(("image_id", "true_class", "predicted_class", "confidence", "correct"), rows)


# --------------------------------------------------------------------------
# Prompt interpretation
# --------------------------------------------------------------------------


def nearest_words(prompt: PromptRepresentation, vocab: VocabularyTable) -> list[tuple[str, float]]:
    """Closest vocabulary token (Euclidean) to each context vector.

    This is an exhaustive scan; ``argmin`` picks the first minimum, so ties go
    to the token that comes first in the vocabulary.
    """
    if len(vocab) == 0:
        raise ConfigError("vocabulary is empty")
    table = vocab.embeddings
    if table.shape[1] != prompt.dim:
        raise ConfigError(f"vocabulary D={table.shape[1]} does not match prompt D={prompt.dim}")
    tokens = vocab.tokens
    out = []
    for v in prompt.context.detach().numpy():
        dist = np.linalg.norm(table - v, axis=1)
        k = int(np.argmin(dist))
        out.append((tokens[k], float(dist[k])))
    return out


def nearest_words_table(pairs: Sequence[tuple[str, float]]) -> Table:
    return Table(("position", "token", "distance"), [(i, t, d) for i, (t, d) in enumerate(pairs, 1)])


# --------------------------------------------------------------------------
# Run manifests
# --------------------------------------------------------------------------


def report_dir(out_dir, run_id: str) -> str:
    return os.path.join(out_dir, "reports", run_id)


def write_run_manifest(
    path,
    *,
    command: str,
    config: Mapping[str, object],
    seeds: Sequence[int] = (),
    backend_tags: Sequence[str] = (),
    inputs: Mapping[str, str] = (),
    extra: Mapping[str, object] | None = None,
) -> dict:
    """Record what produced a set of outputs, with git-style blob hashes of the inputs."""
    manifest = {
        "command": command,
        "config": dict(config),
        "seeds": [int(s) for s in seeds],
        "backend_tags": list(backend_tags),
        "inputs": {name: {"path": os.fspath(p), "git_blob_sha1": file_hash(p)}
                   for name, p in dict(inputs).items()},
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
