"""Adapter exposing an OpenAI CLIP checkpoint as a :class:`FrozenEncoderPair`.

Requires the ``clip`` package (``pip install git+https://github.com/openai/CLIP``)
and a checkpoint directory given by ``UPL_CLIP_ROOT``.  ``clip.load`` fetches
missing checkpoints into that directory; run it once online to populate it.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np
import torch

from .encoders import FrozenEncoderPair, ImageFeature, VocabularyTable
from .errors import ConfigError, InputError, VocabularyLookupError

CLIP_ROOT_ENV = "UPL_CLIP_ROOT"
CONTEXT_LENGTH = 77


class ClipEncoderPair(FrozenEncoderPair):
    """CLIP with embedding-level access to the text transformer.

    Prompts are laid out as ``[SOT] sequence [EOT] pad...`` and the text feature
    is read at the EOT position.
    """

    def __init__(self, arch: str, download_root: str | None = None, device: str = "cpu"):
        try:
            import clip
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ConfigError(
                "the clip backend needs the 'clip' package (github.com/openai/CLIP)"
            ) from exc
        root = download_root or os.environ.get(CLIP_ROOT_ENV)
        if not root:
            raise ConfigError(f"set {CLIP_ROOT_ENV} to the CLIP checkpoint directory")
        self._clip = clip
        model, preprocess = clip.load(arch, device=device, download_root=root)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self._preprocess = preprocess
        self._device = device
        self.model_tag = arch
        self.embed_dim = int(model.token_embedding.weight.shape[1])
        self._feature_dim = int(model.text_projection.shape[1])
        self.temperature = float(1.0 / model.logit_scale.exp().item())

        tokenizer = clip.simple_tokenizer.SimpleTokenizer()
        self._tokenizer = tokenizer
        tokens = [tokenizer.decoder[i] for i in range(len(tokenizer.decoder))]
        self._vocab = VocabularyTable(tokens, model.token_embedding.weight.detach().double().cpu())
        self._sot = tokenizer.encoder["<|startoftext|>"]
        self._eot = tokenizer.encoder["<|endoftext|>"]

    @property
    def feature_dim(self) -> int:
        return self._feature_dim

    @property
    def vocabulary(self) -> VocabularyTable:
        return self._vocab

    def encode_image(self, image_id: str, raw) -> ImageFeature:
        from PIL import Image

        try:
            with Image.open(raw) as img:
                pixels = self._preprocess(img.convert("RGB")).unsqueeze(0).to(self._device)
        except (OSError, ValueError) as exc:
            raise InputError(f"{image_id}: cannot decode image {raw!r}: {exc}") from exc
        with torch.no_grad():
            feat = self._model.encode_image(pixels).double().cpu().numpy()[0]
        return ImageFeature(image_id, feat / np.linalg.norm(feat))

    def encode_text_from_embeddings(self, embeddings) -> torch.Tensor:
        seq = torch.as_tensor(embeddings, dtype=torch.float64)
        single = seq.ndim == 2
        if single:
            seq = seq.unsqueeze(0)
        if seq.ndim != 3 or seq.shape[-1] != self.embed_dim:
            raise InputError(f"expected (B, L, {self.embed_dim}) embeddings, got {tuple(seq.shape)}")
        b, n, _ = seq.shape
        if n == 0:
            raise InputError("embedding sequence is empty")
        if n + 2 > CONTEXT_LENGTH:
            raise InputError(f"sequence of {n} tokens exceeds the CLIP context")
        m = self._model
        dtype = m.dtype
        table = m.token_embedding.weight
        sot = table[self._sot].expand(b, 1, -1)
        eot = table[self._eot].expand(b, 1, -1)
        pad = table.new_zeros(b, CONTEXT_LENGTH - n - 2, self.embed_dim)
        x = torch.cat([sot.to(dtype), seq.to(self._device, dtype), eot.to(dtype), pad.to(dtype)], 1)
        x = x + m.positional_embedding.type(dtype)
        x = m.transformer(x.permute(1, 0, 2)).permute(1, 0, 2)
        x = m.ln_final(x).type(dtype)
        feats = x[:, n + 1] @ m.text_projection
        feats = feats.double().cpu()
        feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats[0] if single else feats

    def _token_ids(self, text: str) -> list[int]:
        return self._tokenizer.encode(text)

    def class_token_embedding(self, class_name: str) -> np.ndarray:
        ids = self._token_ids(class_name)
        if not ids:
            raise VocabularyLookupError(class_name, self._vocab.suggest(class_name + "</w>"))
        return self._vocab.embeddings[ids]

    def encode_prompt(self, text: str) -> np.ndarray:
        tokens = self._clip.tokenize([text]).to(self._device)
        with torch.no_grad():
            feat = self._model.encode_text(tokens).double().cpu().numpy()[0]
        return feat / np.linalg.norm(feat)

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self._model.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()
