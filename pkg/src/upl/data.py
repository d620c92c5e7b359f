"""Dataset registry, synthetic toy corpora, and the persistent feature cache."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .encoders import (
    NORM_TOL,
    FrozenEncoderPair,
    ImageFeature,
    ToyEncoderPair,
    find_placeholder,
    tokenize,
)
from .errors import ConfigError, CorruptionError, InputError, TagMismatchError
from .fileio import atomic_write_text, parse_fields, read_blob, write_blob

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "UPL_DATA_ROOT"
SPLITS = ("train", "test")
CACHE_MAGIC = "UPL-FEATCACHE"
CACHE_VERSION = 1
MAX_SKIP_FRACTION = 0.01


@dataclass
class DatasetSpec:
    """Metadata plus (once resolved) ids, labels and per-image inputs.

    ``ground_truth`` maps image id to a 1-based class index.  Train labels, when
    present, are only ever used for reporting pseudo-label quality.
    ``inputs`` maps image id to whatever the encoder's ``encode_image`` accepts
    (a file path for real backends, a raw vector for the toy backend).
    """

    name: str
    pseudo_prompt_template: str
    num_classes: int
    class_names: list[str] | None = None
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    ground_truth: dict[str, int] = field(default_factory=dict)
    inputs: dict[str, Any] = field(default_factory=dict)
    train_size: int | None = None
    test_size: int | None = None
    layout: str | None = None
    layout_args: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        find_placeholder(self.pseudo_prompt_template)
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise InputError(
                f"{self.name}: {len(self.class_names)} class names for {self.num_classes} classes"
            )

    @property
    def resolved(self) -> bool:
        return self.class_names is not None

    def split_ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
        if not self.resolved:
            raise ConfigError(f"dataset {self.name} has not been resolved against a data root")
        return self.train_ids if split == "train" else self.test_ids

    def labels_for(self, split: str) -> dict[str, int]:
        return {i: self.ground_truth[i] for i in self.split_ids(split) if i in self.ground_truth}


# --------------------------------------------------------------------------
# Built-in benchmark datasets
# --------------------------------------------------------------------------

_PHOTO = "a photo of a [CLASS]."

# name, classes, train, test, template, layout, layout args
_BUILTINS = (
    # ImageNet train is reported as "1.28M"; 1,281,167 is the ILSVRC-2012 count.
    ("ImageNet", 1000, 1_281_167, 50_000, _PHOTO, "imagenet", {"dir": "imagenet"}),
    ("Caltech101", 100, 4_128, 2_465, _PHOTO, "split_json",
     {"dir": "caltech-101", "split": "split_zhou_Caltech101.json", "images": "101_ObjectCategories"}),
    ("OxfordPets", 37, 2_944, 3_669, "a photo of a [CLASS], a type of pet.", "split_json",
     {"dir": "oxford_pets", "split": "split_zhou_OxfordPets.json", "images": "images"}),
    ("StanfordCars", 196, 6_509, 8_041, _PHOTO, "split_json",
     {"dir": "stanford_cars", "split": "split_zhou_StanfordCars.json", "images": ""}),
    ("Flowers102", 102, 4_093, 2_463, "a photo of a [CLASS], a type of flower.", "split_json",
     {"dir": "oxford_flowers", "split": "split_zhou_OxfordFlowers.json", "images": "jpg"}),
    ("Food101", 101, 50_500, 30_300, "a photo of [CLASS], a type of food.", "split_json",
     {"dir": "food-101", "split": "split_zhou_Food101.json", "images": "images"}),
    ("FGVCAircraft", 100, 3_334, 3_333, "a photo of a [CLASS], a type of aircraft.", "fgvc",
     {"dir": "fgvc_aircraft"}),
    ("SUN397", 397, 15_880, 19_850, _PHOTO, "split_json",
     {"dir": "sun397", "split": "split_zhou_SUN397.json", "images": "SUN397"}),
    ("DTD", 47, 2_820, 1_692, "[CLASS] texture.", "split_json",
     {"dir": "dtd", "split": "split_zhou_DescribableTextures.json", "images": "images"}),
    ("EuroSAT", 10, 13_500, 8_100, "a centered satellite photo of [CLASS].", "split_json",
     {"dir": "eurosat", "split": "split_zhou_EuroSAT.json", "images": "2750"}),
    ("UCF101", 101, 7_639, 3_783, "a photo of a person doing [CLASS].", "split_json",
     {"dir": "ucf101", "split": "split_zhou_UCF101.json", "images": "UCF-101-midframes"}),
)


def register_builtin_datasets() -> list[DatasetSpec]:
    """The eleven transfer benchmarks, unresolved (no file access happens here)."""
    return [
        DatasetSpec(name, template, n_cls, train_size=n_train, test_size=n_test,
                    layout=layout, layout_args=dict(args))
        for name, n_cls, n_train, n_test, template, layout, args in _BUILTINS
    ]


def builtin_dataset(name: str) -> DatasetSpec:
    for spec in register_builtin_datasets():
        if spec.name.lower() == name.lower():
            return spec
    raise ConfigError(f"unknown dataset {name!r}; known: {', '.join(dataset_names())}")


def dataset_names() -> list[str]:
    return [s.name for s in register_builtin_datasets()] + sorted(SYNTHETIC_DATASETS)


def resolve_data_root(data_root=None) -> str:
    root = data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no data root: pass --data-root or set {DATA_ROOT_ENV}")
    if not os.path.isdir(root):
        raise ConfigError(f"data root {root!r} is not a directory")
    return os.fspath(root)


# Layout adapters: (spec, directory) -> resolved spec.

LAYOUTS: dict[str, Callable[[DatasetSpec, str], DatasetSpec]] = {}


def register_layout(name: str):
    def deco(fn):
        LAYOUTS[name] = fn
        return fn

    return deco


def _resolved(spec: DatasetSpec, class_names, splits: Mapping[str, list[tuple[str, int]]]) -> DatasetSpec:
    gt, inputs, ids = {}, {}, {}
    for split, items in splits.items():
        ids[split] = []
        for path, label in items:
            image_id = f"{split}/{os.path.basename(os.path.dirname(path))}/{os.path.basename(path)}"
            if image_id in gt:
                image_id = f"{split}/{path}"
            ids[split].append(image_id)
            gt[image_id] = label + 1
            inputs[image_id] = path
    return dataclasses.replace(spec, class_names=list(class_names), train_ids=ids["train"],
                               test_ids=ids["test"], ground_truth=gt, inputs=inputs)


@register_layout("split_json")
def _split_json_layout(spec: DatasetSpec, root: str) -> DatasetSpec:
    """Split files holding ``{"train": [[relpath, label, classname], ...], "test": ...}``."""
    base = os.path.join(root, spec.layout_args["dir"])
    split_file = os.path.join(base, spec.layout_args["split"])
    images = os.path.join(base, spec.layout_args.get("images", ""))
    try:
        with open(split_file, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{spec.name}: cannot read split file {split_file}: {exc}") from exc
    names: dict[int, str] = {}
    splits = {}
    for split in SPLITS:
        items = []
        for relpath, label, classname in raw[split]:
            names.setdefault(int(label), classname.replace("_", " "))
            items.append((os.path.join(images, relpath), int(label)))
        splits[split] = items
    if sorted(names) != list(range(spec.num_classes)):
        raise InputError(f"{spec.name}: split file labels do not cover 0..{spec.num_classes - 1}")
    return _resolved(spec, [names[i] for i in range(spec.num_classes)], splits)


@register_layout("fgvc")
def _fgvc_layout(spec: DatasetSpec, root: str) -> DatasetSpec:
    """``variants.txt`` plus ``images_variant_{train,test}.txt`` lines of ``<id> <variant>``."""
    base = os.path.join(root, spec.layout_args["dir"])
    try:
        with open(os.path.join(base, "variants.txt"), encoding="utf-8") as fh:
            variants = [ln.strip() for ln in fh if ln.strip()]
        label_of = {v: i for i, v in enumerate(variants)}
        splits = {}
        for split in SPLITS:
            items = []
            with open(os.path.join(base, f"images_variant_{split}.txt"), encoding="utf-8") as fh:
                for ln in fh:
                    if ln.strip():
                        img, variant = ln.strip().split(" ", 1)
                        items.append((os.path.join(base, "images", img + ".jpg"), label_of[variant]))
            splits[split] = items
    except OSError as exc:
        raise ConfigError(f"{spec.name}: incomplete FGVC layout under {base}: {exc}") from exc
    return _resolved(spec, variants, splits)


@register_layout("imagenet")
def _imagenet_layout(spec: DatasetSpec, root: str) -> DatasetSpec:
    """``classnames.txt`` (``<wnid> <name>``) and ``images/{train,val}/<wnid>/*``."""
    base = os.path.join(root, spec.layout_args["dir"])
    try:
        with open(os.path.join(base, "classnames.txt"), encoding="utf-8") as fh:
            pairs = [ln.strip().split(" ", 1) for ln in fh if ln.strip()]
        splits = {}
        for split, folder in (("train", "train"), ("test", "val")):
            items = []
            for label, (wnid, _) in enumerate(pairs):
                d = os.path.join(base, "images", folder, wnid)
                items += [(os.path.join(d, f), label) for f in sorted(os.listdir(d))]
            splits[split] = items
    except OSError as exc:
        raise ConfigError(f"{spec.name}: incomplete ImageNet layout under {base}: {exc}") from exc
    return _resolved(spec, [name for _, name in pairs], splits)


def resolve_dataset(spec: DatasetSpec, data_root=None) -> DatasetSpec:
    if spec.resolved:
        return spec
    if spec.layout not in LAYOUTS:
        raise ConfigError(f"{spec.name}: no layout adapter {spec.layout!r}")
    return LAYOUTS[spec.layout](spec, resolve_data_root(data_root))


# --------------------------------------------------------------------------
# Synthetic toy corpora
# --------------------------------------------------------------------------


def _toy_backend(encoder) -> ToyEncoderPair:
    if not isinstance(encoder, ToyEncoderPair):
        raise ConfigError("synthetic datasets can only be built against a toy backend")
    return encoder


def _sample_cluster(rng, center, n, noise, margin, centers, label, max_tries=200):
    """Unit vectors around ``center`` whose nearest center is ``label`` by ``margin``.

    Returns ``None`` when fewer than ``n`` acceptable samples turn up within
    ``max_tries * n`` proposals (the layout leaves no room for the margin).
    """
    out = []
    for _ in range(max_tries * n):
        f = center + noise * rng.normal(size=center.size)
        f /= np.linalg.norm(f)
        scores = centers @ f
        if scores[label] - np.delete(scores, label).max() >= margin:
            out.append(f)
            if len(out) == n:
                return out
    return None


def _assemble(name, template, class_names, encoder, train_feats, test_feats) -> DatasetSpec:
    gt, inputs, ids = {}, {}, {}
    # Shuffle before numbering so that neither id nor order carries the label.
    order = np.random.default_rng(len(class_names)).permutation
    for split, per_class in (("train", train_feats), ("test", test_feats)):
        items = [(label, f) for label, feats in enumerate(per_class) for f in feats]
        ids[split] = []
        for n, k in enumerate(order(len(items))):
            label, f = items[k]
            image_id = f"{split}-{n:05d}"
            ids[split].append(image_id)
            gt[image_id] = label + 1
            inputs[image_id] = encoder.preimage(f)
    return DatasetSpec(name, template, len(class_names), list(class_names), ids["train"], ids["test"],
                       gt, inputs, len(ids["train"]), len(ids["test"]), layout="synthetic")


def template_shift(encoder: ToyEncoderPair, template: str) -> np.ndarray:
    """Joint-space shift ``Q * sum(words)`` that the template's words add to every class."""
    prefix, suffix = template.split(find_placeholder(template))
    words = [encoder.vocabulary.lookup(t) for t in tokenize(prefix) + tokenize(suffix)]
    if not words:
        return np.zeros(encoder.embed_dim)
    return encoder.text_map @ np.sum(words, axis=0)


def make_separable_dataset(
    encoder: FrozenEncoderPair,
    *,
    class_names: Sequence[str] = ("cat", "dog", "car"),
    template: str = "a blurry photo of a [CLS].",
    n_train: int = 60,
    n_test: int = 60,
    bias_gain: float = 1.0,
    noise: float = 0.1,
    margin: float = 0.03,
    seed: int = 0,
) -> DatasetSpec:
    """Linearly separable clusters that a learned shared context can fit exactly.

    With the toy text tower a context summing to ``s`` maps class ``c`` to
    ``normalize(Q s + b_c)`` with ``b_c = Q w_c``.  A shared shift only changes
    the decision through its component inside ``span{b_c}``, so the cluster
    centers take the template's own shift ``a0`` and extend its in-span part by
    ``bias_gain * mean|b_c|``.  The template classifier then sits part-way to
    the truth, while the class tokens alone (what a near-zero initial context
    computes) are further off.  Each sample is at least ``margin`` closer in
    cosine to its own center than to any other center.
    """
    toy = _toy_backend(encoder)
    rng = np.random.default_rng([seed, 101])
    tokens = np.stack([toy.class_token_embedding(c) for c in class_names])
    b = tokens @ toy.text_map.T
    a0 = template_shift(toy, template)
    in_span = np.linalg.lstsq(b.T, a0, rcond=None)[0] @ b
    shift = a0
    if np.linalg.norm(in_span) > 0:
        shift = a0 + bias_gain * np.linalg.norm(b, axis=1).mean() * in_span / np.linalg.norm(in_span)
    centers = b + shift
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    splits = []
    for n in (n_train, n_test):
        per_class = [_sample_cluster(rng, centers[c], n, noise, margin, centers, c)
                     for c in range(len(class_names))]
        if any(f is None for f in per_class):
            raise ConfigError("cluster centers are too close for the requested noise and margin")
        splits.append(per_class)
    return _assemble("toy-separable", template, class_names, toy, *splits)


def make_ambiguous_dataset(
    encoder: FrozenEncoderPair,
    *,
    class_names: Sequence[str] = ("cat", "dog", "car"),
    template: str = "a photo of a [CLS].",
    n_train: int = 30,
    n_test: int = 30,
    seed: int = 0,
) -> DatasetSpec:
    """Images equidistant from every zero-shot class embedding: low confidence everywhere."""
    toy = _toy_backend(encoder)
    rng = np.random.default_rng([seed, 202])
    text = toy.encode_class_prompts(template, class_names)
    # Points f with <t_c, f> equal for all c: the in-span direction g solving
    # T g = 1, plus a component orthogonal to span(t_1..t_C).
    mean = text.T @ np.linalg.solve(text @ text.T, np.ones(len(class_names)))
    basis, _ = np.linalg.qr(text.T)
    feats = []
    for _ in range(len(class_names)):
        cls = []
        for _ in range(n_train + n_test):
            z = rng.normal(size=toy.embed_dim)
            z -= basis @ (basis.T @ z)
            f = mean / np.linalg.norm(mean) + 0.5 * z / np.linalg.norm(z)
            cls.append(f / np.linalg.norm(f))
        feats.append(cls)
    return _assemble("toy-ambiguous", template, class_names, toy,
                     [c[:n_train] for c in feats], [c[n_train:] for c in feats])


SYNTHETIC_DATASETS: dict[str, Callable[..., DatasetSpec]] = {
    "toy-separable": make_separable_dataset,
    "toy-ambiguous": make_ambiguous_dataset,
}


def get_dataset(name: str, *, encoder: FrozenEncoderPair | None = None, data_root=None) -> DatasetSpec:
    """Look up a dataset by name; synthetic ones are generated against ``encoder``."""
    if name in SYNTHETIC_DATASETS:
        if encoder is None:
            raise ConfigError(f"{name} is synthetic and needs a toy backend")
        return SYNTHETIC_DATASETS[name](encoder)
    return resolve_dataset(builtin_dataset(name), data_root)


def subsample_ids(ids: Sequence[str], cap: int | None, seed: int = 0) -> list[str]:
    """Deterministic subset of at most ``cap`` ids, kept in original order."""
    if cap is None or cap >= len(ids):
        return list(ids)
    if cap <= 0:
        raise ConfigError(f"sampling cap must be positive, got {cap}")
    keep = np.sort(np.random.default_rng(seed).choice(len(ids), size=cap, replace=False))
    return [ids[i] for i in keep]


# --------------------------------------------------------------------------
# Feature cache
# --------------------------------------------------------------------------


def safe_tag(tag: str) -> str:
    return tag.replace("/", "-").replace(os.sep, "-")


def cache_path(data_root, dataset: str, split: str, backend_tag: str) -> str:
    return os.path.join(data_root, "cache", dataset, split, f"{safe_tag(backend_tag)}.featcache")


class FeatureCache:
    """Immutable id -> unit-norm feature map for one backend, stored as float32."""

    def __init__(self, backend_tag: str, ids: Sequence[str], vectors, skipped: Sequence[str] = ()):
        ids = list(ids)
        vec = np.array(vectors, dtype="<f4")
        if ids and (vec.ndim != 2 or vec.shape[0] != len(ids)):
            raise InputError("feature cache needs one vector per id")
        if not ids:
            vec = vec.reshape(0, vec.shape[-1] if vec.ndim == 2 else 0)
        if len(set(ids)) != len(ids):
            raise InputError("feature cache ids must be unique")
        for i in ids:
            if "\n" in i or not i:
                raise InputError(f"illegal image id {i!r}")
        norms = np.linalg.norm(vec.astype(np.float64), axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > NORM_TOL:
            raise InputError("feature cache vectors must be unit-norm")
        vec.flags.writeable = False
        self.backend_tag = backend_tag
        self._ids = ids
        self._index = {i: n for n, i in enumerate(ids)}
        self._vectors = vec
        self.skipped = list(skipped)

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    def __len__(self):
        return len(self._ids)

    def __contains__(self, image_id) -> bool:
        return image_id in self._index

    def __getitem__(self, image_id) -> np.ndarray:
        try:
            return self._vectors[self._index[image_id]]
        except KeyError:
            raise InputError(f"image {image_id!r} is not in the feature cache") from None

    def matrix(self, ids: Sequence[str] | None = None) -> np.ndarray:
        """Float64 feature matrix for ``ids`` (default: all, in cache order)."""
        if ids is None:
            return self._vectors.astype(np.float64)
        return np.stack([self[i] for i in ids]).astype(np.float64)

    def features(self, ids: Sequence[str] | None = None) -> list[ImageFeature]:
        ids = self._ids if ids is None else ids
        return [ImageFeature(i, np.asarray(self[i], dtype=np.float64)) for i in ids]

    @property
    def content_hash(self) -> str:
        return _content_digest(self.backend_tag, self._ids, self.skipped, self._vectors.tobytes())

    @property
    def manifest(self) -> dict:
        return {"backend_tag": self.backend_tag, "dim": self.dim, "count": len(self),
                "skipped": len(self.skipped), "content_sha256": self.content_hash}

    def save(self, path) -> None:
        m = self.manifest
        header = [CACHE_MAGIC, f"version: {CACHE_VERSION}",
                  *(f"{k}: {m[k]}" for k in ("backend_tag", "dim", "count", "skipped", "content_sha256")),
                  "ids:", *self._ids, "skipped_ids:", *self.skipped]
        write_blob(path, header, self._vectors.tobytes())

    @classmethod
    def load(cls, path, expected_backend_tag: str | None = None) -> "FeatureCache":
        return load_cache(path, expected_backend_tag)


_CACHE_FIELDS = {"version", "backend_tag", "dim", "count", "skipped", "content_sha256"}


def _content_digest(tag: str, ids: Sequence[str], skipped: Sequence[str], payload: bytes) -> str:
    h = hashlib.sha256()
    for part in (tag, "\n".join(ids), "\n".join(skipped)):
        h.update(part.encode("utf-8") + b"\0")
    h.update(payload)
    return h.hexdigest()


def load_cache(path, expected_backend_tag: str | None = None) -> FeatureCache:
    """Read and verify a cache file.

    Raises :class:`TagMismatchError` when the file was produced by a different
    backend and :class:`CorruptionError` when the content hash does not match.
    """
    if not os.path.exists(path):
        raise InputError(f"feature cache {path} does not exist")
    lines, payload = read_blob(path, CACHE_MAGIC)
    try:
        start_ids = lines.index("ids:")
        start_skipped = lines.index("skipped_ids:", start_ids)
    except ValueError:
        raise CorruptionError(f"{path}: id section missing") from None
    meta = parse_fields(lines[:start_ids])
    ids = lines[start_ids + 1:start_skipped]
    skipped = lines[start_skipped + 1:]
    try:
        if set(meta) != _CACHE_FIELDS or int(meta["skipped"]) != len(skipped):
            raise ValueError
        version, tag = int(meta["version"]), meta["backend_tag"]
        dim, count, expected_hash = int(meta["dim"]), int(meta["count"]), meta["content_sha256"]
    except (KeyError, ValueError):
        raise CorruptionError(f"{path}: damaged cache header") from None
    if version != CACHE_VERSION:
        raise CorruptionError(f"{path}: unsupported cache version {version}")
    if count != len(ids) or len(payload) != dim * count * 4:
        raise CorruptionError(f"{path}: payload size does not match manifest")
    # Integrity first, so a damaged tag reads as corruption rather than a mismatch.
    if _content_digest(tag, ids, skipped, payload) != expected_hash:
        raise CorruptionError(f"{path}: content hash mismatch (file is corrupted)")
    if expected_backend_tag is not None and tag != expected_backend_tag:
        raise TagMismatchError(
            f"{path} holds features from {tag!r}, not {expected_backend_tag!r}; "
            "features from different encoders are not comparable"
        )
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    try:
        return FeatureCache(tag, ids, vectors, skipped)
    except InputError as exc:
        raise CorruptionError(f"{path}: {exc}") from exc


def _covers(cache: FeatureCache, ids: Sequence[str]) -> bool:
    done = set(cache.ids) | set(cache.skipped)
    return all(i in done for i in ids)


def build_cache(
    spec: DatasetSpec,
    split: str,
    encoder: FrozenEncoderPair,
    path=None,
    *,
    jobs: int = 1,
    checkpoint_every: int = 1000,
    max_skip_fraction: float = MAX_SKIP_FRACTION,
) -> FeatureCache:
    """Encode every image of ``split`` once and (optionally) persist the result.

    An existing complete cache at ``path`` is returned untouched.  Progress is
    checkpointed to ``<path>.partial`` so an interrupted build resumes.  Images
    that fail to decode are skipped and listed in ``<path>.skipped.txt``; more
    than ``max_skip_fraction`` of them is an error.
    """
    ids = spec.split_ids(split)
    tag = encoder.model_tag
    if path is not None and os.path.exists(path):
        existing = load_cache(path, tag)
        if _covers(existing, ids):
            log.info("cache %s is up to date", path)
            return existing

    done: dict[str, np.ndarray] = {}
    skipped: dict[str, str] = {}
    partial = f"{path}.partial" if path is not None else None
    if partial and os.path.exists(partial):
        try:
            prev = load_cache(partial, tag)
            done = {i: prev[i] for i in prev.ids}
            skipped = {i: "skipped in an earlier run" for i in prev.skipped}
            log.info("resuming %s from %d cached entries", path, len(done))
        except CorruptionError:
            log.warning("discarding unreadable partial cache %s", partial)

    todo = [i for i in ids if i not in done and i not in skipped]
    missing = [i for i in todo if i not in spec.inputs]
    if missing:
        raise InputError(f"{spec.name}/{split}: no input for image {missing[0]!r}")

    def encode(image_id):
        try:
            return image_id, encoder.encode_image(image_id, spec.inputs[image_id]).vector, None
        except InputError as exc:
            return image_id, None, str(exc)

    def checkpoint():
        if partial:
            kept = [i for i in ids if i in done]
            FeatureCache(tag, kept, [done[i] for i in kept] or np.zeros((0, encoder.feature_dim)),
                         [i for i in ids if i in skipped]).save(partial)

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        results = pool.map(encode, todo) if pool else map(encode, todo)
        for n, (image_id, vec, err) in enumerate(results, 1):
            if err is None:
                done[image_id] = vec
            else:
                skipped[image_id] = err
            if n % checkpoint_every == 0:
                checkpoint()
    finally:
        if pool:
            pool.shutdown()

    kept = [i for i in ids if i in done]
    skipped_ids = [i for i in ids if i in skipped]
    if path is not None:
        sidecar = f"{path}.skipped.txt"
        if skipped_ids:
            atomic_write_text(sidecar, "".join(f"{i}\t{skipped[i]}\n" for i in skipped_ids))
        elif os.path.exists(sidecar):
            os.unlink(sidecar)
    if ids and len(skipped_ids) > max_skip_fraction * len(ids):
        checkpoint()
        raise InputError(
            f"{spec.name}/{split}: {len(skipped_ids)} of {len(ids)} images failed to encode "
            f"(limit {max_skip_fraction:.0%}); see the skip list"
        )
    cache = FeatureCache(tag, kept, [done[i] for i in kept] or np.zeros((0, encoder.feature_dim)),
                         skipped_ids)
    if path is not None:
        cache.save(path)
        if partial and os.path.exists(partial):
            os.unlink(partial)
    return cache
