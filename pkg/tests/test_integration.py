"""Reproduction targets on the real benchmarks with CLIP ResNet-50.

These runs need the ``clip`` package, checkpoints under ``$UPL_CLIP_ROOT`` and
the datasets under ``$UPL_DATA_ROOT``; otherwise every test here is skipped.
Each run trains 16 prompts for 50 epochs per dataset, so expect hours on CPU.
Set ``UPL_INTEGRATION_OUT`` to keep the run directories.
"""

import importlib.util
import os

import pytest

from upl import cli, data
from upl.inference import EvalReport
from upl.pseudo_label import PseudoLabelSet, pseudo_label_stats

BACKEND = "clip:RN50"
TOLERANCE = 1.0  # percentage points

# Published numbers (percent), checked against the source tables.
UCF101_PSEUDO_TOP16 = 79.34
UCF101_UPL = 67.17  # the ablation table instead reports 57.32 (threshold 0.9) vs 64.84 (top-16)
CALTECH101_UPL = 89.94
MIN_AVERAGE_GAIN = 3.0  # published gain: 63.38 - 59.18 = +4.2

pytestmark = pytest.mark.integration


def _missing_requirements(*datasets):
    if importlib.util.find_spec("clip") is None:
        return "the clip package is not installed"
    if not os.environ.get("UPL_CLIP_ROOT"):
        return "UPL_CLIP_ROOT is not set"
    root = os.environ.get(data.DATA_ROOT_ENV)
    if not root:
        return f"{data.DATA_ROOT_ENV} is not set"
    for name in datasets:
        spec = data.builtin_dataset(name)
        if not os.path.isdir(os.path.join(root, spec.layout_args["dir"])):
            return f"{name} is not present under {root}"
    return None


def _require(*datasets):
    reason = _missing_requirements(*datasets)
    if reason:
        pytest.skip(reason)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    keep = os.environ.get("UPL_INTEGRATION_OUT")
    if keep:
        os.makedirs(keep, exist_ok=True)
        return keep
    return str(tmp_path_factory.mktemp("integration"))


def _run_dir(workdir, dataset, variant="top16"):
    """Default-configuration runs share one directory across criteria."""
    return os.path.join(workdir, f"{dataset.lower()}-{variant}")


def _run(*argv):
    code = cli.main(list(argv))
    assert code == 0, f"upl {' '.join(argv)} exited with {code}"


def _upl(dataset, out, *, strategy="top_k:16", cls_position="end"):
    """pseudo-label, train and evaluate; returns (pseudo-label set, eval report)."""
    common = ["--dataset", dataset, "--backend", BACKEND, "--out", out]
    if not os.path.exists(os.path.join(out, cli.PSEUDO_FILE)):
        _run("pseudo-label", *common, "--strategy", strategy)
    if not os.path.exists(os.path.join(out, cli.TRAIN_MANIFEST)):
        _run("train", *common, "--cls-position", cls_position)
    if not os.path.exists(os.path.join(out, cli.EVAL_FILE)):
        _run("eval", *common)
    return (PseudoLabelSet.load(os.path.join(out, cli.PSEUDO_FILE)),
            EvalReport.load_csv(os.path.join(out, cli.EVAL_FILE)))


def _zeroshot(dataset, out):
    path = os.path.join(out, cli.ZEROSHOT_EVAL_FILE)
    if not os.path.exists(path):
        _run("eval", "--dataset", dataset, "--backend", BACKEND, "--out", out, "--zeroshot")
    return EvalReport.load_csv(path)


@pytest.mark.acceptance(12, "UCF101/RN50: pseudo-label 79.34, UPL 67.17 (+-1), threshold-0.9 below top-16")
class TestUCF101:
    def test_pseudo_label_and_transfer_accuracy(self, workdir):
        _require("UCF101")
        pseudo, report = _upl("UCF101", _run_dir(workdir, "UCF101"))
        spec = data.get_dataset("UCF101")
        stats = pseudo_label_stats(pseudo, spec.labels_for("train"))
        assert abs(100 * stats.overall_accuracy - UCF101_PSEUDO_TOP16) <= TOLERANCE
        assert abs(100 * report.accuracy - UCF101_UPL) <= TOLERANCE

    def test_threshold_strategy_underperforms(self, workdir):
        _require("UCF101")
        _, top = _upl("UCF101", _run_dir(workdir, "UCF101"))
        _, thr = _upl("UCF101", _run_dir(workdir, "UCF101", "thr09"), strategy="threshold:0.9")
        assert thr.accuracy < top.accuracy


@pytest.mark.acceptance(13, "Caltech101/RN50: UPL 89.94 (+-1); [CLS] positions within 1 point")
class TestCaltech101:
    def test_positions(self, workdir):
        _require("Caltech101")
        acc = {}
        for position in ("end", "middle", "frontal"):
            variant = "top16" if position == "end" else f"top16-{position}"
            _, report = _upl("Caltech101", _run_dir(workdir, "Caltech101", variant), cls_position=position)
            acc[position] = 100 * report.accuracy
        assert abs(acc["end"] - CALTECH101_UPL) <= TOLERANCE
        assert max(acc.values()) - min(acc.values()) <= 1.0


@pytest.mark.acceptance(14, "11-dataset average gain of UPL over zero-shot >= +3.0 points")
def test_average_gain_over_zeroshot(workdir):
    names = [s.name for s in data.register_builtin_datasets()]
    _require(*names)
    gains = []
    for name in names:
        out = _run_dir(workdir, name)
        _, report = _upl(name, out)
        gains.append(100 * (report.accuracy - _zeroshot(name, out).accuracy))
    assert sum(gains) / len(gains) >= MIN_AVERAGE_GAIN
