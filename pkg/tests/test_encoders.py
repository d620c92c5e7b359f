import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from upl.encoders import (
    ImageFeature,
    ToyEncoderPair,
    VocabularyTable,
    available_backends,
    fill_template,
    find_placeholder,
    load_encoder,
    tokenize,
)
from upl.errors import ConfigError, InputError, VocabularyLookupError

GOLDEN = Path(__file__).parent / "golden" / "toy7_dim8_encode_image.json"


class TestEncodeImage:
    def test_zero_vector_rejected(self, toy):
        with pytest.raises(InputError):
            toy.encode_image("z", np.zeros(toy.embed_dim))

    def test_identity_basis_vector(self, identity_toy):
        e1 = np.eye(8)[0]
        out = identity_toy.encode_image("e1", e1)
        np.testing.assert_array_equal(out.vector, e1)

    def test_golden_seed7(self):
        """Output frozen from the reference toy encoder (seed 7, D=8)."""
        golden = json.loads(GOLDEN.read_text())
        enc = load_encoder(golden["backend"])
        out = enc.encode_image("golden", np.array(golden["input"]))
        np.testing.assert_allclose(out.vector, golden["output"], rtol=0, atol=1e-12)
        assert enc.parameter_digest() == golden["parameter_digest"]

    def test_dimension_mismatch_is_config_error(self, toy):
        with pytest.raises(ConfigError):
            toy.encode_image("x", np.ones(toy.embed_dim + 1))

    def test_deterministic_and_unit_norm(self, toy, rng):
        x = rng.normal(size=toy.embed_dim)
        a, b = toy.encode_image("x", x), toy.encode_image("x", x)
        np.testing.assert_array_equal(a.vector, b.vector)
        assert abs(np.linalg.norm(a.vector) - 1) <= 1e-5

    def test_preimage_inverts_vision_map(self, toy, rng):
        f = rng.normal(size=toy.embed_dim)
        f /= np.linalg.norm(f)
        np.testing.assert_allclose(toy.encode_image("p", toy.preimage(f)).vector, f, atol=1e-12)

    def test_image_feature_requires_unit_norm(self):
        with pytest.raises(InputError):
            ImageFeature("bad", np.array([1.0, 1.0]))


class TestEncodeText:
    def test_two_copies_of_unit_vector(self, identity_toy):
        u = np.zeros(8)
        u[2] = 1.0
        out = identity_toy.encode_text_from_embeddings(np.stack([u, u]))
        np.testing.assert_allclose(out.numpy(), u, atol=1e-15)

    def test_orthonormal_pair(self, identity_toy):
        e = np.eye(8)
        out = identity_toy.encode_text_from_embeddings(e[:2])
        expected = (e[0] + e[1]) / math.sqrt(2)
        np.testing.assert_allclose(out.numpy(), expected, atol=1e-15)

    def test_empty_sequence(self, toy):
        with pytest.raises(InputError):
            toy.encode_text_from_embeddings(np.zeros((0, toy.embed_dim)))

    def test_batched_matches_single(self, toy, rng):
        seqs = rng.normal(size=(3, 5, toy.embed_dim))
        batch = toy.encode_text_from_embeddings(seqs).numpy()
        for i in range(3):
            np.testing.assert_allclose(batch[i], toy.encode_text_from_embeddings(seqs[i]).numpy(), atol=1e-14)

    def test_text_map_is_orthogonal(self, toy):
        q = toy.text_map
        np.testing.assert_allclose(q @ q.T, np.eye(toy.embed_dim), atol=1e-12)

    def test_jacobian_matches_finite_differences(self, rng):
        """Every output coordinate against every input coordinate, step 1e-4."""
        enc = ToyEncoderPair(3, dim=5)
        x0 = rng.normal(size=(3, 5))
        jac = torch.autograd.functional.jacobian(
            lambda x: enc.encode_text_from_embeddings(x), torch.from_numpy(x0)).numpy()
        h = 1e-4
        num = np.zeros_like(jac)
        for i in range(3):
            for j in range(5):
                plus, minus = x0.copy(), x0.copy()
                plus[i, j] += h
                minus[i, j] -= h
                num[:, i, j] = (enc.encode_text_from_embeddings(plus).numpy()
                                - enc.encode_text_from_embeddings(minus).numpy()) / (2 * h)
        assert np.abs(jac).max() > 0
        rel = np.abs(jac - num) / np.maximum(np.maximum(np.abs(jac), np.abs(num)), 1e-9)
        assert rel.max() <= 1e-3

    def test_encode_prompt_matches_embedding_path(self, toy):
        direct = toy.encode_prompt("a photo of a cat.")
        via = toy.encode_text_from_embeddings(toy.embed_text("a photo of a cat.")).numpy()
        np.testing.assert_allclose(direct, via, atol=1e-15)


class TestVocabulary:
    def test_lookup(self):
        v = np.arange(3.0)
        vocab = VocabularyTable(["cat", "dog"], np.stack([v, -v]))
        np.testing.assert_array_equal(vocab.lookup("cat"), v)

    def test_unknown_class_lists_suggestions(self, toy):
        with pytest.raises(VocabularyLookupError) as err:
            toy.class_token_embedding("zzz")
        assert isinstance(err.value, KeyError)
        with pytest.raises(VocabularyLookupError) as err:
            toy.class_token_embedding("catt")
        assert "cat" in err.value.suggestions

    def test_repeated_lookup_bitwise_identical(self, toy):
        a, b = toy.class_token_embedding("dog"), toy.class_token_embedding("dog")
        assert a.tobytes() == b.tobytes()
        assert not a.flags.writeable

    def test_duplicate_tokens_rejected(self):
        with pytest.raises(ConfigError):
            VocabularyTable(["a", "a"], np.zeros((2, 2)))


class TestTemplates:
    @pytest.mark.parametrize("template", ["[CLASS] texture.", "a photo of a [CLS]."])
    def test_single_placeholder(self, template):
        assert find_placeholder(template) in ("[CLS]", "[CLASS]")

    @pytest.mark.parametrize("template", ["a photo", "[CLS] and [CLS]", "[CLS] [CLASS]"])
    def test_bad_placeholder_count(self, template):
        with pytest.raises(ConfigError):
            find_placeholder(template)

    def test_fill_and_tokenize(self):
        text = fill_template("a photo of a [CLASS], a type of pet.", "Cat")
        assert tokenize(text) == ["a", "photo", "of", "a", "cat", ",", "a", "type", "of", "pet", "."]


class TestRegistry:
    def test_backends_listed(self):
        assert {"toy", "clip"} <= set(available_backends())

    def test_unknown_backend(self):
        with pytest.raises(ConfigError):
            load_encoder("nope:1")

    def test_toy_options(self):
        enc = load_encoder("toy:4:dim=8:variant=2")
        assert enc.embed_dim == 8 and enc.model_tag == "toy:4:dim=8:variant=2"
        assert load_encoder("toy:4:dim=8:variant=2") is enc

    def test_variants_share_text_tower(self):
        a, b = ToyEncoderPair(5), ToyEncoderPair(5, variant=1)
        np.testing.assert_array_equal(a.text_map, b.text_map)
        assert not np.array_equal(a.vision_map, b.vision_map)
        assert a.model_tag != b.model_tag

    def test_temperature_positive(self):
        assert ToyEncoderPair(0).temperature == 0.01
        with pytest.raises(ConfigError):
            ToyEncoderPair(0, temperature=0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), n=st.integers(1, 6), scale=st.floats(0.1, 10))
def test_text_outputs_unit_norm(seed, n, scale):
    enc = ToyEncoderPair(seed % 17, dim=6)
    x = np.random.default_rng(seed).normal(size=(n, 6)) * scale
    out = enc.encode_text_from_embeddings(x).numpy()
    assert abs(np.linalg.norm(out) - 1) <= 1e-5
