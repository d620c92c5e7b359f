"""Frozen two-tower encoder contract, plus a seeded toy backend.

Every other module talks to a vision-language model only through
:class:`FrozenEncoderPair`.  The text tower takes *word embeddings* rather
than strings, which is what lets a continuous prompt be optimized through it.
"""

from __future__ import annotations

import abc
import difflib
import hashlib
import re
import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch

from .errors import ConfigError, InputError, VocabularyLookupError

NORM_TOL = 1e-5
CLS_PLACEHOLDERS = ("[CLS]", "[CLASS]")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def l2_normalize(vec, *, what="vector") -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(arr, axis=-1, keepdims=True)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{what} contains non-finite values")
    if np.any(norm == 0):
        raise InputError(f"{what} has zero norm and cannot be normalized")
    return arr / norm


def _check_unit(vector: np.ndarray, what: str) -> None:
    norm = float(np.linalg.norm(vector))
    if abs(norm - 1.0) > NORM_TOL:
        raise InputError(f"{what} must be unit-norm, got norm {norm:.8f}")


@dataclass(frozen=True, eq=False)
class ImageFeature:
    image_id: str
    vector: np.ndarray

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise InputError(f"feature for {self.image_id!r} must be 1-D")
        _check_unit(self.vector, f"feature for {self.image_id!r}")


@dataclass(frozen=True, eq=False)
class ClassEmbedding:
    class_index: int  # 1-based
    vector: np.ndarray

    def __post_init__(self):
        _check_unit(self.vector, f"class embedding {self.class_index}")


class VocabularyTable:
    """Ordered, immutable token -> word-embedding table."""

    def __init__(self, tokens: Sequence[str], embeddings):
        tokens = tuple(tokens)
        emb = np.array(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(tokens):
            raise ConfigError("vocabulary needs one embedding row per token")
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise ConfigError(f"duplicate vocabulary token {tok!r}")
            index[tok] = i
        emb.flags.writeable = False
        self._tokens = tokens
        self._embeddings = emb
        self._index = index

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    @property
    def embeddings(self) -> np.ndarray:
        return self._embeddings

    @property
    def dim(self) -> int:
        return self._embeddings.shape[1]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token) -> bool:
        return token in self._index

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        for tok, vec in zip(self._tokens, self._embeddings):
            yield tok, vec

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyLookupError(token, self.suggest(token)) from None

    def lookup(self, token: str) -> np.ndarray:
        """Return the (read-only) embedding row for ``token``."""
        return self._embeddings[self.index(token)]

    def suggest(self, name: str, n: int = 5) -> list[str]:
        return difflib.get_close_matches(name, self._tokens, n=n, cutoff=0.5)


def find_placeholder(template: str) -> str:
    """Return the class placeholder used by ``template``; exactly one must occur."""
    found = [(p, template.count(p)) for p in CLS_PLACEHOLDERS if p in template]
    total = sum(n for _, n in found)
    if total != 1:
        raise ConfigError(
            f"prompt template must contain exactly one class placeholder "
            f"{' or '.join(CLS_PLACEHOLDERS)}, found {total}: {template!r}"
        )
    return found[0][0]


def fill_template(template: str, class_name: str) -> str:
    return template.replace(find_placeholder(template), class_name)


def tokenize(text: str) -> list[str]:
    """Whitespace/punctuation tokenizer used by the toy backend."""
    return _TOKEN_RE.findall(text.lower())


class FrozenEncoderPair(abc.ABC):
    """A frozen image tower and text tower sharing one embedding space.

    Implementations must be immutable after construction: every method is a
    pure function of its arguments.
    """

    embed_dim: int
    temperature: float
    model_tag: str

    @property
    def feature_dim(self) -> int:
        """Dimension of the joint space; equals ``embed_dim`` unless overridden."""
        return self.embed_dim

    @property
    @abc.abstractmethod
    def vocabulary(self) -> VocabularyTable: ...

    @abc.abstractmethod
    def encode_image(self, image_id: str, raw) -> ImageFeature:
        """Encode one image record into a unit-norm feature."""

    @abc.abstractmethod
    def encode_text_from_embeddings(self, embeddings) -> torch.Tensor:
        """Map a word-embedding sequence ``(L, D)`` (or a batch ``(B, L, D)``)
        to unit-norm text features, differentiably.
        """

    @abc.abstractmethod
    def class_token_embedding(self, class_name: str) -> np.ndarray:
        """Fixed word embedding(s) of a class name: ``(D,)`` or ``(k, D)``."""

    @abc.abstractmethod
    def encode_prompt(self, text: str) -> np.ndarray:
        """Encode a hand-written prompt string into a unit-norm D-vector."""

    @abc.abstractmethod
    def parameter_digest(self) -> str:
        """Hash of every frozen parameter; used to prove nothing was trained."""

    def encode_images(self, items: Iterable[tuple[str, object]]) -> list[ImageFeature]:
        return [self.encode_image(image_id, raw) for image_id, raw in items]

    def encode_class_prompts(self, template: str, class_names: Sequence[str]) -> np.ndarray:
        """Class embeddings ``(C, D)`` for a hand-crafted template."""
        find_placeholder(template)
        return np.stack([self.encode_prompt(fill_template(template, n)) for n in class_names])

    def __repr__(self):
        return f"{type(self).__name__}({self.model_tag!r})"


# --------------------------------------------------------------------------
# Toy backend
# --------------------------------------------------------------------------

TOY_TEMPERATURE = 0.01
TOY_DEFAULT_DIM = 16
TOY_VOCAB_SIZE = 256
TOY_VARIANT_SCALE = 0.35

# Words needed by the registered hand-crafted templates.
TOY_TEMPLATE_WORDS = (
    "a", "photo", "of", "person", "doing", "type", "pet", "flower", "food",
    "aircraft", "texture", "centered", "satellite", "blurry", "picture", "the",
    ".", ",",
)
TOY_CLASS_WORDS = (
    "cat", "dog", "car", "bird", "apple", "boat", "tree", "horse", "plane",
    "truck", "frog", "deer", "ship", "rose", "tulip", "pizza", "bread",
    "forest", "river", "desert", "brick", "marble", "wool", "running",
    "swimming", "cycling",
)


def _toy_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


class ToyEncoderPair(FrozenEncoderPair):
    """Deterministic linear two-tower model.

    * vision: ``normalize(P @ x)`` for a fixed random square matrix ``P``;
    * text: ``normalize(Q @ mean(sequence))`` for a fixed random orthogonal ``Q``;
    * vocabulary: one seeded Gaussian embedding per token, independent of
      insertion order.

    ``variant`` perturbs only the vision map, giving a family of "architectures"
    that share a text tower but prefer different classes.
    """

    def __init__(
        self,
        seed: int = 0,
        dim: int = TOY_DEFAULT_DIM,
        *,
        variant: int = 0,
        identity: bool = False,
        temperature: float = TOY_TEMPERATURE,
        vocab_size: int = TOY_VOCAB_SIZE,
        extra_tokens: Sequence[str] = (),
    ):
        if dim < 1:
            raise ConfigError(f"toy dim must be positive, got {dim}")
        if not temperature > 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        self.seed = int(seed)
        self.embed_dim = int(dim)
        self.variant = int(variant)
        self.identity = bool(identity)
        self.temperature = float(temperature)
        self.model_tag = _toy_tag(seed, dim, variant, identity, temperature)

        if identity:
            vision = np.eye(dim)
            text = np.eye(dim)
        else:
            vision = _toy_rng(seed, 1).normal(size=(dim, dim)) / np.sqrt(dim)
            q, r = np.linalg.qr(_toy_rng(seed, 3).normal(size=(dim, dim)))
            text = q * np.sign(np.diag(r))
        if variant:
            vision = vision + TOY_VARIANT_SCALE * _toy_rng(seed, 2, variant).normal(
                size=(dim, dim)
            ) / np.sqrt(dim)

        tokens = list(dict.fromkeys([*TOY_TEMPLATE_WORDS, *TOY_CLASS_WORDS, *extra_tokens]))
        n_filler = max(0, vocab_size - len(tokens))
        tokens += [f"w{i:03d}" for i in range(n_filler)]
        emb = np.stack(
            [
                _toy_rng(seed, 4, zlib.crc32(t.encode("utf-8"))).normal(size=dim) / np.sqrt(dim)
                for t in tokens
            ]
        )
        self._vocab = VocabularyTable(tokens, emb)

        for arr in (vision, text):
            arr.flags.writeable = False
        self._vision = vision
        self._text = text
        self._vision_t = torch.tensor(vision, dtype=torch.float64)
        self._text_t = torch.tensor(text, dtype=torch.float64)

    @property
    def vocabulary(self) -> VocabularyTable:
        return self._vocab

    @property
    def vision_map(self) -> np.ndarray:
        return self._vision

    @property
    def text_map(self) -> np.ndarray:
        return self._text

    def encode_image(self, image_id: str, raw) -> ImageFeature:
        x = np.asarray(raw, dtype=np.float64)
        if x.shape != (self.embed_dim,):
            raise ConfigError(
                f"{image_id}: toy input must have shape ({self.embed_dim},), got {x.shape}"
            )
        vec = l2_normalize(self._vision @ x, what=f"image {image_id!r}")
        return ImageFeature(image_id, vec)

    def preimage(self, feature) -> np.ndarray:
        """Raw input whose encoding is ``normalize(feature)``; for building synthetic data."""
        return np.linalg.solve(self._vision, np.asarray(feature, dtype=np.float64))

    def encode_text_from_embeddings(self, embeddings) -> torch.Tensor:
        seq = torch.as_tensor(embeddings, dtype=torch.float64)
        if seq.ndim not in (2, 3) or seq.shape[-1] != self.embed_dim:
            raise InputError(
                f"expected embeddings of shape (L, {self.embed_dim}) or "
                f"(B, L, {self.embed_dim}), got {tuple(seq.shape)}"
            )
        if seq.shape[-2] == 0:
            raise InputError("embedding sequence is empty")
        projected = seq.mean(dim=-2) @ self._text_t.T
        norm = projected.norm(dim=-1, keepdim=True)
        if torch.any(norm == 0):
            raise InputError("text features collapsed to the zero vector")
        return projected / norm

    def class_token_embedding(self, class_name: str) -> np.ndarray:
        return self._vocab.lookup(class_name.lower())

    def embed_text(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise InputError(f"prompt {text!r} has no tokens")
        return np.stack([self._vocab.lookup(t) for t in tokens])

    def encode_prompt(self, text: str) -> np.ndarray:
        with torch.no_grad():
            return self.encode_text_from_embeddings(self.embed_text(text)).numpy()

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self._vision, self._text, self._vision_t.numpy(), self._text_t.numpy(),
                    self._vocab.embeddings):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\0".join(self._vocab.tokens).encode("utf-8"))
        h.update(repr(self.temperature).encode())
        return h.hexdigest()


def _toy_tag(seed, dim, variant, identity, temperature) -> str:
    parts = [f"toy:{int(seed)}"]
    if dim != TOY_DEFAULT_DIM:
        parts.append(f"dim={int(dim)}")
    if variant:
        parts.append(f"variant={int(variant)}")
    if identity:
        parts.append("identity")
    if temperature != TOY_TEMPERATURE:
        parts.append(f"tau={temperature!r}")
    return ":".join(parts)


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------

_BACKENDS: dict[str, Callable[[str], FrozenEncoderPair]] = {}


def register_backend(prefix: str):
    def deco(factory):
        _BACKENDS[prefix] = factory
        return factory

    return deco


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


@lru_cache(maxsize=None)
def load_encoder(key: str) -> FrozenEncoderPair:
    """Resolve a registry key such as ``"toy:7"`` or ``"clip:RN50"``.

    Encoders are immutable, so repeated loads share one instance.
    """
    prefix, sep, rest = key.partition(":")
    if not sep or prefix not in _BACKENDS:
        raise ConfigError(
            f"unknown backend {key!r}; expected one of "
            f"{', '.join(p + ':<...>' for p in available_backends())}"
        )
    return _BACKENDS[prefix](rest)


@register_backend("toy")
def _make_toy(spec: str) -> ToyEncoderPair:
    seed_str, *opts = spec.split(":")
    kwargs = {}
    try:
        seed = int(seed_str)
        for opt in opts:
            name, _, value = opt.partition("=")
            if name == "dim":
                kwargs["dim"] = int(value)
            elif name == "variant":
                kwargs["variant"] = int(value)
            elif name == "tau":
                kwargs["temperature"] = float(value)
            elif name == "identity" and not value:
                kwargs["identity"] = True
            else:
                raise ConfigError(f"unknown toy backend option {opt!r}")
    except ValueError as exc:
        raise ConfigError(f"malformed toy backend key 'toy:{spec}': {exc}") from None
    return ToyEncoderPair(seed, **kwargs)


@register_backend("clip")
def _make_clip(spec: str) -> FrozenEncoderPair:
    from .clip_backend import ClipEncoderPair

    return ClipEncoderPair(spec)
