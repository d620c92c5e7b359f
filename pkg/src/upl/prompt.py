"""Learnable shared prompt context and its training loop.

A prompt is ``L`` context vectors in word-embedding space shared by all
classes; each class prompt splices in the frozen class-name embedding at the
configured position.  Training is plain cross-entropy on pseudo labels with
gradients flowing back through the frozen text tower.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import FrozenEncoderPair
from .errors import ConfigError, InputError
from .fileio import parse_fields, read_blob, write_blob
from .pseudo_label import PseudoLabelSet

CLS_POSITIONS = ("end", "middle", "frontal")
DEFAULT_LENGTH = 16
DEFAULT_BANK_SIZE = 16
INIT_STD = 0.02
PROMPT_MAGIC = "UPL-PROMPT"
PROMPT_VERSION = 1


class PromptRepresentation:
    """Context matrix ``V`` (stored as ``(L, D)``: one row per context vector)."""

    def __init__(self, context, cls_position: str = "end", seed: int = 0):
        ctx = torch.as_tensor(context, dtype=torch.float64)
        if ctx.ndim != 2 or ctx.shape[0] < 1 or ctx.shape[1] < 1:
            raise ConfigError(f"prompt context must be (L>=1, D>=1), got {tuple(ctx.shape)}")
        if cls_position not in CLS_POSITIONS:
            raise ConfigError(f"cls_position must be one of {CLS_POSITIONS}, got {cls_position!r}")
        self.context = ctx
        self.cls_position = cls_position
        self.seed = int(seed)

    @property
    def length(self) -> int:
        return self.context.shape[0]

    @property
    def dim(self) -> int:
        return self.context.shape[1]

    @property
    def vectors(self) -> np.ndarray:
        """``V`` as a ``D x L`` array (columns are context vectors)."""
        return self.context.detach().numpy().T.copy()

    def detached(self) -> "PromptRepresentation":
        return PromptRepresentation(self.context.detach().clone(), self.cls_position, self.seed)

    def __eq__(self, other):
        if not isinstance(other, PromptRepresentation):
            return NotImplemented
        return (
            self.cls_position == other.cls_position
            and self.seed == other.seed
            and self.context.shape == other.context.shape
            and bool(torch.equal(self.context.detach(), other.context.detach()))
        )

    def __repr__(self):
        return f"PromptRepresentation(L={self.length}, D={self.dim}, {self.cls_position}, seed={self.seed})"

    def save(self, path) -> None:
        header = [
            PROMPT_MAGIC,
            f"version: {PROMPT_VERSION}",
            f"dim: {self.dim}",
            f"length: {self.length}",
            f"cls_position: {self.cls_position}",
            f"seed: {self.seed}",
        ]
        payload = np.ascontiguousarray(self.vectors, dtype="<f8").tobytes()
        write_blob(path, header, payload)

    @classmethod
    def load(cls, path) -> "PromptRepresentation":
        lines, payload = read_blob(path, PROMPT_MAGIC)
        meta = parse_fields(lines)
        try:
            version, dim, length = int(meta["version"]), int(meta["dim"]), int(meta["length"])
            position, seed = meta["cls_position"], int(meta["seed"])
        except (KeyError, ValueError):
            raise InputError(f"{path}: damaged prompt file header") from None
        if version != PROMPT_VERSION:
            raise InputError(f"{path}: unsupported prompt file version {version}")
        if len(payload) != dim * length * 8:
            raise InputError(f"{path}: payload holds {len(payload)} bytes, expected {dim * length * 8}")
        v = np.frombuffer(payload, dtype="<f8").reshape(dim, length)
        return cls(torch.from_numpy(v.T.copy()), position, seed)


def init_prompt(dim: int, length: int = DEFAULT_LENGTH, cls_position: str = "end",
                seed: int = 0) -> PromptRepresentation:
    """Draw every context entry i.i.d. from N(0, 0.02^2)."""
    if dim < 1 or length < 1:
        raise ConfigError(f"prompt dims must be positive, got D={dim}, L={length}")
    ctx = np.random.default_rng(seed).normal(0.0, INIT_STD, size=(length, dim))
    return PromptRepresentation(torch.from_numpy(ctx), cls_position, seed)


def _insert_at(length: int, cls_position: str) -> int:
    if cls_position == "end":
        return length
    if cls_position == "frontal":
        return 0
    return math.ceil(length / 2)


def _as_token_rows(w, dim: int) -> torch.Tensor:
    w = torch.tensor(np.array(w, dtype=np.float64))
    if w.ndim == 1:
        w = w.unsqueeze(0)
    if w.ndim != 2 or w.shape[1] != dim:
        raise InputError(f"class token embedding has shape {tuple(w.shape)}, expected ({dim},)")
    return w


def compose_class_prompt(prompt: PromptRepresentation, w_c) -> torch.Tensor:
    """Splice the class embedding into the shared context.

    The result is built from ``prompt.context`` itself, so gradients reach it;
    ``w_c`` is treated as a constant.
    """
    w = _as_token_rows(w_c, prompt.dim)
    cut = _insert_at(prompt.length, prompt.cls_position)
    ctx = prompt.context
    return torch.cat([ctx[:cut], w, ctx[cut:]], dim=0)


def class_token_embeddings(encoder: FrozenEncoderPair, class_names: Sequence[str]) -> list[np.ndarray]:
    return [encoder.class_token_embedding(name) for name in class_names]


def class_text_features(prompt: PromptRepresentation, token_embs, encoder: FrozenEncoderPair) -> torch.Tensor:
    """``g(V_c)`` for every class, as a ``(C, D)`` tensor."""
    rows = [_as_token_rows(w, prompt.dim) for w in token_embs]
    if not rows:
        raise ConfigError("cannot build class prompts for zero classes")
    if len({r.shape[0] for r in rows}) == 1:
        cut = _insert_at(prompt.length, prompt.cls_position)
        ctx = prompt.context.unsqueeze(0).expand(len(rows), -1, -1)
        seq = torch.cat([ctx[:, :cut], torch.stack(rows), ctx[:, cut:]], dim=1)
        return encoder.encode_text_from_embeddings(seq)
    return torch.stack([
        encoder.encode_text_from_embeddings(compose_class_prompt(prompt, w)) for w in rows
    ])


def class_logits(prompt, token_embs, features, encoder, temperature=None) -> torch.Tensor:
    tau = encoder.temperature if temperature is None else temperature
    feats = torch.as_tensor(np.asarray(features), dtype=torch.float64)
    text = class_text_features(prompt, token_embs, encoder)
    return feats @ text.T / tau


def class_probs(prompt, token_embs, feature, encoder, temperature=None) -> torch.Tensor:
    """Class probabilities for one feature ``(C,)`` or a batch ``(B, C)``; differentiable in V."""
    return torch.softmax(class_logits(prompt, token_embs, feature, encoder, temperature), dim=-1)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.002
    warmup_lr: float = 1e-5
    warmup_epochs: int = 1
    schedule: str = "cosine"
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not (self.lr > 0 and self.warmup_lr > 0):
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs}")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(types)}")
            caster = {"int": int, "float": float, "str": str}[types[key]]
            try:
                out[key] = caster(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {types[key]}") from None
        return cls(**out)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_mapping(read_flat_config(path))


def read_flat_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{path}:{n}: expected key = value")
            key = key.strip()
            if key in values:
                raise ConfigError(f"{path}:{n}: duplicate key {key!r}")
            values[key] = value.strip()
    return values


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Fixed warmup rate, then cosine decay over the post-warmup epochs."""
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_lr
    t = epoch - cfg.warmup_epochs
    total = cfg.epochs - cfg.warmup_epochs
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    current_lr: float = 0.0
    loss_history: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)


def train_step(prompt: PromptRepresentation, optimizer, token_embs, features: torch.Tensor,
               labels: torch.Tensor, encoder) -> float:
    """One optimizer step on a batch; ``prompt.context`` must be the optimized leaf."""
    loss = F.cross_entropy(class_logits(prompt, token_embs, features, encoder), labels)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_inputs(pseudo_set: PseudoLabelSet, cache, num_classes: int):
    """Stack cached features and 0-based pseudo labels for the selected records."""
    if len(pseudo_set) == 0:
        raise ConfigError("pseudo-label set is empty (threshold selection produced zero samples?)")
    feats, labels = [], []
    for r in pseudo_set.records:
        if r.image_id not in cache:
            raise InputError(f"image {r.image_id!r} is missing from the feature cache")
        if not 1 <= r.pseudo_class <= num_classes:
            raise InputError(f"pseudo class {r.pseudo_class} outside 1..{num_classes}")
        feats.append(np.asarray(cache[r.image_id], dtype=np.float64))
        labels.append(r.pseudo_class - 1)
    return torch.from_numpy(np.stack(feats)), torch.tensor(labels, dtype=torch.long)


def train(
    prompt: PromptRepresentation,
    pseudo_set: PseudoLabelSet,
    cache,
    encoder: FrozenEncoderPair,
    class_names: Sequence[str],
    cfg: TrainConfig = TrainConfig(),
) -> tuple[PromptRepresentation, TrainState]:
    """Optimize a copy of ``prompt`` on the pseudo-labeled cache entries.

    Batches are reshuffled every epoch from ``cfg.seed``; the last partial batch
    is kept.  The input prompt is left untouched.
    """
    if prompt.dim != encoder.embed_dim:
        raise ConfigError(f"prompt D={prompt.dim} does not match encoder D={encoder.embed_dim}")
    token_embs = class_token_embeddings(encoder, class_names)
    feats, labels = train_inputs(pseudo_set, cache, len(class_names))

    context = prompt.context.detach().clone().requires_grad_(True)
    working = PromptRepresentation(context, prompt.cls_position, prompt.seed)
    optimizer = torch.optim.SGD([context], lr=cfg.warmup_lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    shuffler = np.random.default_rng(cfg.seed)
    state = TrainState()
    n = len(labels)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = torch.from_numpy(shuffler.permutation(n))
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = train_step(working, optimizer, token_embs, feats[idx], labels[idx], encoder)
            total += loss * len(idx)
            state.step += 1
        state.epoch = epoch + 1
        state.current_lr = lr
        state.lr_history.append(lr)
        state.loss_history.append(total / n)
    trained = PromptRepresentation(context.detach().clone(), prompt.cls_position, prompt.seed)
    return trained, state


def train_prompt_bank(
    seeds: Sequence[int],
    pseudo_set: PseudoLabelSet,
    cache,
    encoder: FrozenEncoderPair,
    class_names: Sequence[str],
    cfg: TrainConfig = TrainConfig(),
    *,
    length: int = DEFAULT_LENGTH,
    cls_position: str = "end",
    jobs: int = 1,
) -> list[tuple[PromptRepresentation, TrainState]]:
    """Train one independently initialized prompt per seed.

    Each run uses its seed for both initialization and batch shuffling.
    Output order follows ``seeds`` regardless of ``jobs``.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"prompt seeds must be distinct, got {seeds}")

    def run(seed):
        prompt = init_prompt(encoder.embed_dim, length, cls_position, seed)
        return train(prompt, pseudo_set, cache, encoder, class_names, cfg.replace(seed=seed))

    if jobs <= 1 or len(seeds) == 1:
        return [run(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, seeds))
