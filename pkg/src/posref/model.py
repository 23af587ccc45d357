"""Toy multimodal segmentation network: conv encoder, FiLM text conditioning
at the bottleneck, skip-connected decoder, and projection heads for the
contrastive objective. Teacher maintenance is a per-tensor EMA over the
student state dict.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .postext import UNK_POS_TOKEN

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
MAX_TOKENS = 24

_WORD_RE = re.compile(r"\[UNK_POS\]|[a-z0-9]+")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    enc_channels: tuple = (16, 32, 64)
    text_dim: int = 64
    proj_dim: int = 32
    max_tokens: int = MAX_TOKENS


@dataclass
class Vocabulary:
    """Closed word->id map; ids 0/1/2 are reserved for PAD/UNK/UNK_POS."""

    word_to_id: dict[str, int] = field(default_factory=dict)

    @classmethod
    def build(cls, corpus: list[str]) -> "Vocabulary":
        words = sorted({w for text in corpus for w in _words(text)} - {UNK_POS_TOKEN})
        mapping = {PAD_TOKEN: 0, UNK_TOKEN: 1, UNK_POS_TOKEN: 2}
        for w in words:
            mapping[w] = len(mapping)
        return cls(word_to_id=mapping)

    def __len__(self):
        return len(self.word_to_id)


def _words(text: str) -> list[str]:
    # [UNK_POS] stays atomic; everything else lowercased and split on
    # whitespace/punctuation
    out = []
    for chunk in text.split():
        for m in _WORD_RE.finditer(chunk if chunk == UNK_POS_TOKEN else chunk.lower()):
            out.append(m.group(0))
    return out


def tokenize(text: str, vocab: Vocabulary, max_tokens: int = MAX_TOKENS) -> np.ndarray:
    """Token ids, truncated/padded to max_tokens (pad id 0)."""
    ids = [vocab.word_to_id.get(w, 1) for w in _words(text)][:max_tokens]
    ids += [0] * (max_tokens - len(ids))
    return np.asarray(ids, dtype=np.int64)


class _ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(4, c_out)

    def forward(self, x):
        # smooth nonlinearity keeps the loss surface finite-difference friendly
        return F.silu(self.norm(self.conv(x)))


class SegModel(nn.Module):
    """f(image, tokens) -> (logits, fused bottleneck, image/text embeddings)."""

    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.enc_channels
        self.enc1 = _ConvBlock(1, c1, stride=2)
        self.enc2 = _ConvBlock(c1, c2, stride=2)
        self.enc3 = _ConvBlock(c2, c3, stride=2)
        self.embed = nn.Embedding(vocab_size, config.text_dim, padding_idx=0)
        self.film = nn.Linear(config.text_dim, 2 * c3)
        self.dec3 = _ConvBlock(c3 + c2, c2)
        self.dec2 = _ConvBlock(c2 + c1, c1)
        self.dec1 = _ConvBlock(c1, c1)
        self.head = nn.Conv2d(c1, 1, 1)
        self.proj_image = nn.Linear(c3, config.proj_dim)
        self.proj_text = nn.Linear(config.text_dim, config.proj_dim)

    def _encode(self, image: torch.Tensor, tokens: torch.Tensor):
        e1 = self.enc1(image)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)

        mask = (tokens != 0).to(image.dtype).unsqueeze(-1)
        emb = self.embed(tokens) * mask
        pooled = emb.sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)

        gamma_beta = self.film(pooled)
        gamma, beta = gamma_beta.chunk(2, dim=-1)
        fused = e3 * gamma[:, :, None, None] + beta[:, :, None, None]
        return e1, e2, fused, pooled

    def _project(self, fused, pooled):
        v = F.normalize(self.proj_image(fused.mean(dim=(2, 3))), dim=-1, eps=1e-12)
        u = F.normalize(self.proj_text(pooled), dim=-1, eps=1e-12)
        return v, u

    def forward(self, image: torch.Tensor, tokens: torch.Tensor):
        """image: (B,1,H,W); tokens: (B,L) int64. Deterministic, stateless."""
        e1, e2, fused, pooled = self._encode(image, tokens)
        d3 = self.dec3(torch.cat([_up(fused), e2], dim=1))
        d2 = self.dec2(torch.cat([_up(d3), e1], dim=1))
        # the last conv runs at half resolution; only the 1-channel head sees
        # the full grid
        logits = self.head(_up(self.dec1(d2))).squeeze(1)
        v, u = self._project(fused, pooled)
        return logits, fused, v, u

    def embeddings(self, image: torch.Tensor, tokens: torch.Tensor):
        """Projection-head outputs only (skips the decoder)."""
        _, _, fused, pooled = self._encode(image, tokens)
        return self._project(fused, pooled)


def _up(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


def init_model(config: ModelConfig, vocab_size: int, seed: int,
               dtype=torch.float32) -> SegModel:
    """Seed-deterministic init. FiLM starts as identity (scale 1, shift 0)."""
    gen = torch.Generator().manual_seed(seed)
    model = SegModel(config, vocab_size)
    fan_in = {}
    for name, p in model.named_parameters():
        if p.dim() >= 2:
            fan_in[name.rsplit(".", 1)[0]] = int(np.prod(p.shape[1:]))
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            else:
                bound = 1.0 / np.sqrt(fan_in.get(name.rsplit(".", 1)[0], p.shape[0]))
                p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))
        model.film.weight.zero_()
        c3 = config.enc_channels[-1]
        model.film.bias[:c3] = 1.0
        model.film.bias[c3:] = 0.0
    return model.to(dtype)


def ema_update(teacher: dict[str, torch.Tensor], student: dict[str, torch.Tensor],
               m: float) -> dict[str, torch.Tensor]:
    """Per-tensor convex combination m*teacher + (1-m)*student (no gradients)."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("EMA decay must be in [0,1]")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}")
        out[name] = (m * t.detach() + (1.0 - m) * s.detach()).clone()
    return out


# ---------------------------------------------------------------------------
# checkpoint format: one UTF-8 JSON header line, then per tensor (sorted by
# name) a JSON line {"name", "shape"} followed by the raw little-endian
# float32 payload.

CHECKPOINT_VERSION = 1


def save_checkpoint(path: Path, model: SegModel, vocab: Vocabulary, step: int,
                    config_echo: dict) -> None:
    state = model.state_dict()
    with open(path, "wb") as f:
        header = {
            "format_version": CHECKPOINT_VERSION,
            "config": config_echo,
            "step": step,
            "vocabulary": vocab.word_to_id,
        }
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for name in sorted(state):
            tensor = state[name].detach().to(torch.float32).numpy()
            f.write((json.dumps({"name": name, "shape": list(tensor.shape)}) + "\n")
                    .encode("utf-8"))
            f.write(tensor.astype("<f4").tobytes())


def load_checkpoint(path: Path):
    """Returns (model, vocab, header dict)."""
    with open(path, "rb") as buf:
        header = json.loads(buf.readline().decode("utf-8"))
        vocab = Vocabulary(word_to_id=header["vocabulary"])
        mc = dict(header["config"].get("model", {}))
        mc["enc_channels"] = tuple(mc.get("enc_channels", (16, 32, 64)))
        config = ModelConfig(**mc)
        model = SegModel(config, len(vocab))
        state = {}
        while True:
            line = buf.readline()
            if not line:
                break
            meta = json.loads(line.decode("utf-8"))
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            payload = buf.read(count * 4)
            arr = np.frombuffer(payload, dtype="<f4").reshape(meta["shape"])
            state[meta["name"]] = torch.from_numpy(arr.copy())
        model.load_state_dict(state)
    return model, vocab, header
