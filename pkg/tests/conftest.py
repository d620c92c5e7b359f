"""Shared fixtures and the acceptance-criteria summary printed at the end of a run."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
import pytest

from upl import data
from upl import pseudo_label as pl
from upl.encoders import ToyEncoderPair, load_encoder

# Backend on which the separable toy fixture is tuned (see the decisions log).
SEPARABLE_BACKEND = "toy:2"

_ACCEPTANCE: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): gating acceptance criterion")
    config.addinivalue_line("markers", "integration: needs real checkpoints and datasets")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_acceptance", None)
    if marker is None:
        return
    number, title = marker
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "outcomes": []})
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        report._acceptance = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        outcomes = entry["outcomes"]
        if outcomes and all(o == "skipped" for o in outcomes):
            status = "SKIP"
        elif outcomes and all(o in ("passed", "skipped") for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {entry['title']}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def toy():
    return ToyEncoderPair(7)


@pytest.fixture(scope="session")
def identity_toy():
    return ToyEncoderPair(0, dim=8, identity=True)


@pytest.fixture(scope="session")
def separable():
    """The constructed 3-class problem with its caches and top-16 pseudo labels."""
    enc = load_encoder(SEPARABLE_BACKEND)
    spec = data.make_separable_dataset(enc)
    train_cache = data.build_cache(spec, "train", enc)
    test_cache = data.build_cache(spec, "test", enc)
    rows = pl.zero_shot_probs(enc, spec.pseudo_prompt_template, spec.class_names, train_cache.features())
    records = pl.assign_pseudo_labels(rows, source_tag=enc.model_tag)
    pseudo = pl.select_top_k(records, 16, num_classes=spec.num_classes,
                             template=spec.pseudo_prompt_template)
    return {"encoder": enc, "spec": spec, "train": train_cache, "test": test_cache,
            "records": records, "pseudo": pseudo}


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
