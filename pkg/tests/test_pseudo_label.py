import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import unit_rows
from upl import pseudo_label as pl
from upl.encoders import ImageFeature
from upl.errors import ConfigError, InputError


def _rows(probs, prefix="img"):
    return [pl.ProbabilityRow(f"{prefix}-{i:03d}", np.asarray(p, dtype=float)) for i, p in enumerate(probs)]


def _features(vectors):
    return [ImageFeature(f"img-{i:03d}", v) for i, v in enumerate(vectors)]


def _scalar_zero_shot(text, feats, tau):
    """Plain-Python softmax over cosine scores, one image at a time."""
    out = []
    for f in feats:
        logits = [sum(a * b for a, b in zip(f, t)) / tau for t in text]
        m = max(logits)
        ex = [math.exp(v - m) for v in logits]
        out.append([e / sum(ex) for e in ex])
    return out


class TestZeroShot:
    def test_single_class_is_certain(self, toy, rng):
        rows = pl.zero_shot_probs(toy, "a photo of a [CLS].", ["cat"], _features(unit_rows(rng, 4, toy.embed_dim)))
        assert all(r.probs.tolist() == [1.0] for r in rows)

    def test_two_class_closed_form(self, identity_toy):
        """A feature equal to the first class embedding: logits 1 and cos(t0, t1) at tau=1."""
        text = identity_toy.encode_class_prompts("a photo of a [CLS].", ["cat", "dog"])
        feat = ImageFeature("x", text[0])
        row = pl.zero_shot_probs(identity_toy, "a photo of a [CLS].", ["cat", "dog"], [feat], temperature=1.0)[0]
        c = float(text[0] @ text[1])
        p1 = math.exp(1.0) / (math.exp(1.0) + math.exp(c))
        np.testing.assert_allclose(row.probs, [p1, 1 - p1], atol=1e-12)

    def test_orthogonal_closed_form(self):
        rows = [pl.ProbabilityRow("x", pl.softmax(np.array([1.0, 0.0])))]
        np.testing.assert_allclose(rows[0].probs, [0.7310585786300049, 0.2689414213699951], atol=1e-12)
        assert pl.assign_pseudo_labels(rows)[0].pseudo_class == 1

    def test_matches_scalar_oracle(self, toy):
        rng = np.random.default_rng(13)
        feats = unit_rows(rng, 10, toy.embed_dim)
        names = ["cat", "dog", "car"]
        rows = pl.zero_shot_probs(toy, "a photo of a [CLS].", names, _features(feats))
        text = toy.encode_class_prompts("a photo of a [CLS].", names)
        oracle = _scalar_zero_shot(text.tolist(), feats.tolist(), toy.temperature)
        np.testing.assert_allclose([r.probs for r in rows], oracle, atol=1e-9)
        for r in rows:
            assert abs(r.probs.sum() - 1) <= 1e-5

    def test_rejects_bad_inputs(self, toy, rng):
        feats = _features(unit_rows(rng, 2, toy.embed_dim))
        with pytest.raises(ConfigError):
            pl.zero_shot_probs(toy, "no placeholder", ["cat"], feats)
        with pytest.raises(ConfigError):
            pl.zero_shot_probs(toy, "a [CLS].", [], feats)
        with pytest.raises(InputError):
            pl.zero_shot_probs(toy, "a [CLS].", ["cat"], [])


class TestAssign:
    def test_tie_goes_to_lowest_class(self):
        recs = pl.assign_pseudo_labels(_rows([[0.4, 0.4, 0.2], [0.25, 0.375, 0.375]]))
        assert [r.pseudo_class for r in recs] == [1, 2]
        assert recs[0].confidence == 0.4

    def test_row_must_be_on_simplex(self):
        with pytest.raises(InputError):
            pl.ProbabilityRow("x", np.array([0.5, 0.6]))


class TestSelection:
    @pytest.fixture
    def records(self):
        probs = [[0.9, 0.1], [0.6, 0.4], [0.75, 0.25], [0.2, 0.8], [0.45, 0.55], [0.7, 0.3]]
        return pl.assign_pseudo_labels(_rows(probs))

    def test_top_k_keeps_most_confident(self, records):
        s = pl.select_top_k(records, 2, num_classes=2)
        assert [(r.image_id, r.pseudo_class) for r in s] == [
            ("img-000", 1), ("img-002", 1), ("img-003", 2), ("img-004", 2)]
        assert s.per_class_counts == {1: 2, 2: 2}

    def test_top_k_short_class_keeps_all(self, records):
        s = pl.select_top_k(records, 16)
        assert len(s) == len(records)

    def test_top_k_tie_at_cut_by_id(self):
        recs = pl.assign_pseudo_labels(_rows([[0.8, 0.2]] * 3, prefix="b") + _rows([[0.8, 0.2]], prefix="a"))
        s = pl.select_top_k(recs, 2)
        assert s.image_ids == ["a-000", "b-000"]

    @pytest.mark.parametrize("k", [0, -1, 1.5, True])
    def test_bad_k(self, records, k):
        with pytest.raises(ConfigError):
            pl.select_top_k(records, k)

    def test_threshold_strict(self, records):
        s = pl.select_threshold(records, 0.75)
        assert s.image_ids == ["img-000", "img-003"]

    def test_threshold_may_be_empty(self, records):
        assert len(pl.select_threshold(records, 0.95)) == 0

    @pytest.mark.parametrize("t", [-0.1, 1.0])
    def test_bad_threshold(self, records, t):
        with pytest.raises(ConfigError):
            pl.select_threshold(records, t)

    def test_duplicate_ids_rejected(self):
        recs = pl.assign_pseudo_labels(_rows([[1.0, 0.0]]) * 2)
        with pytest.raises(InputError):
            pl.select_top_k(recs, 1)

    @pytest.mark.parametrize("text,kind,value", [("top_k:16", "top_k", 16), ("threshold:0.5", "threshold", 0.5)])
    def test_strategy_parse(self, text, kind, value):
        s = pl.Strategy.parse(text)
        assert (s.kind, s.value) == (kind, value)

    @pytest.mark.parametrize("text", ["top_k", "top_k:0", "threshold:1", "random:3", "top_k:x"])
    def test_strategy_parse_errors(self, text):
        with pytest.raises(ConfigError):
            pl.Strategy.parse(text)


class TestEnsemble:
    def test_average_of_probabilities(self):
        a = _rows([[0.9, 0.1], [0.2, 0.8]])
        b = _rows([[0.5, 0.5], [0.6, 0.4]])
        out = pl.ensemble_probs([a, b])
        np.testing.assert_allclose([r.probs for r in out], [[0.7, 0.3], [0.4, 0.6]], atol=1e-15)

    def test_single_model_is_identity(self):
        a = _rows([[0.9, 0.1]])
        assert pl.ensemble_probs([a])[0].probs.tolist() == [0.9, 0.1]

    def test_id_mismatch(self):
        with pytest.raises(InputError):
            pl.ensemble_probs([_rows([[1.0, 0.0]]), _rows([[1.0, 0.0]], prefix="other")])
        with pytest.raises(InputError):
            pl.ensemble_probs([_rows([[1.0, 0.0]] * 2), _rows([[1.0, 0.0]])])

    def test_width_mismatch(self):
        with pytest.raises(InputError):
            pl.ensemble_probs([_rows([[1.0, 0.0]]), _rows([[1.0, 0.0, 0.0]])])


class TestStatsAndIO:
    def test_stats_accuracy(self):
        recs = pl.assign_pseudo_labels(_rows([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3], [0.6, 0.4]]))
        s = pl.select_top_k(recs, 16, num_classes=2)
        gt = {"img-000": 1, "img-001": 1, "img-002": 1, "img-003": 2}
        stats = pl.pseudo_label_stats(s, gt)
        assert stats.accuracy(1) == 0.75
        assert stats.overall_accuracy == 0.75
        assert stats.accuracy(2) is None
        assert stats.mean_confidence[1] == pytest.approx(0.75)

    def test_stats_without_labels(self):
        s = pl.select_top_k(pl.assign_pseudo_labels(_rows([[0.9, 0.1]])), 1)
        assert not pl.pseudo_label_stats(s).has_ground_truth

    def test_stats_missing_label(self):
        s = pl.select_top_k(pl.assign_pseudo_labels(_rows([[0.9, 0.1]])), 1)
        with pytest.raises(InputError):
            pl.pseudo_label_stats(s, {})

    @pytest.mark.parametrize("strategy", ["top_k:3", "threshold:0.5"])
    def test_jsonl_round_trip(self, tmp_path, strategy):
        recs = pl.assign_pseudo_labels(_rows([[0.9, 0.1], [0.3, 0.7]]), source_tag="toy:1")
        s = pl.select(recs, pl.Strategy.parse(strategy), num_classes=2, template="a [CLS].")
        path = tmp_path / "p.jsonl"
        s.save(path)
        back = pl.PseudoLabelSet.load(path)
        assert back.records == s.records
        assert (back.strategy, back.num_classes, back.template) == (s.strategy, 2, "a [CLS].")

    def test_load_rejects_other_files(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text('{"format": "nope"}\n')
        with pytest.raises(InputError):
            pl.PseudoLabelSet.load(path)


_prob_rows = st.integers(2, 5).flatmap(
    lambda c: st.lists(st.lists(st.floats(0.01, 1.0), min_size=c, max_size=c), min_size=1, max_size=12))


@settings(max_examples=60, deadline=None)
@given(raw=_prob_rows, k=st.integers(1, 4), seed=st.integers(0, 1000))
def test_top_k_invariants(raw, k, seed):
    """No class exceeds K, short classes keep everything, and input order does not matter."""
    probs = np.asarray(raw)
    probs /= probs.sum(axis=1, keepdims=True)
    recs = pl.assign_pseudo_labels(_rows(probs))
    s = pl.select_top_k(recs, k)
    full = pl.select_top_k(recs, len(recs))
    for c, n in full.per_class_counts.items():
        assert s.per_class_counts[c] == min(n, k)
    perm = np.random.default_rng(seed).permutation(len(recs))
    assert pl.select_top_k([recs[i] for i in perm], k).records == s.records


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_zero_shot_permutation_equivariant(toy, seed):
    rng = np.random.default_rng(seed)
    feats = _features(unit_rows(rng, 6, toy.embed_dim))
    perm = rng.permutation(6)
    base = pl.zero_shot_probs(toy, "a photo of a [CLS].", ["cat", "dog"], feats)
    permuted = pl.zero_shot_probs(toy, "a photo of a [CLS].", ["cat", "dog"], [feats[i] for i in perm])
    for j, i in enumerate(perm):
        assert permuted[j].image_id == base[i].image_id
        np.testing.assert_allclose(permuted[j].probs, base[i].probs, atol=1e-12)
