"""Reference encoder: a small pre-layer-norm bidirectional transformer.

The encoder contract is deliberately narrow: given token ids it emits one
hidden state per token plus a shared affine projection into vocabulary space.
Anything satisfying that contract can back the representation layer; this
module provides a trainable desk-scale default. All parameters are float64 so
finite-difference gradient checks are decisive.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    max_positions: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "hidden_dim", "num_layers", "num_heads", "ffn_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")


class EncoderBlock(nn.Module):
    """Pre-LN self-attention + feed-forward block (GELU, smooth for grad checks)."""

    def __init__(self, d: int, heads: int, ffn_dim: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.ln_attn = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ln_ffn = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ffn_dim)
        self.ff2 = nn.Linear(ffn_dim, d)

    def forward(
        self,
        x: torch.Tensor,
        key_mask: Optional[torch.Tensor] = None,
        collect_attn: Optional[list] = None,
    ) -> torch.Tensor:
        """x: (..., L, d); key_mask: optional (..., L) bool, True = real token."""
        *batch, L, d = x.shape
        h = self.ln_attn(x)
        q, k, v = self.qkv(h).split(d, dim=-1)
        shape = (*batch, L, self.heads, self.head_dim)
        q = q.view(shape).transpose(-3, -2)  # (..., heads, L, head_dim)
        k = k.view(shape).transpose(-3, -2)
        v = v.view(shape).transpose(-3, -2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(
                ~key_mask[..., None, None, :], float("-inf")
            )
        attn = torch.softmax(scores, dim=-1)
        if collect_attn is not None:
            collect_attn.append(attn)
        ctx = (attn @ v).transpose(-3, -2).reshape(*batch, L, d)
        x = x + self.out(ctx)
        h = self.ln_ffn(x)
        x = x + self.ff2(torch.nn.functional.gelu(self.ff1(h)))
        return x


class TableEncoder(nn.Module):
    """Token + learned position embeddings, N pre-LN blocks, final LayerNorm.

    Also owns the vocabulary projection used for sparse logits and the shared
    gate projection scoring field indicator states for expert mixing.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.max_positions, d)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, config.num_heads, config.ffn_dim) for _ in range(config.num_layers)
        )
        self.ln_final = nn.LayerNorm(d)
        self.vocab_proj = nn.Linear(d, config.vocab_size)
        self.gate_proj = nn.Linear(d, 1)
        self.to(torch.float64)

    def encode(
        self,
        token_ids: Sequence[int],
        collect_attn: Optional[list] = None,
    ) -> torch.Tensor:
        """Hidden states, one row per input token: shape (len, hidden_dim)."""
        L = len(token_ids)
        if L < 1:
            raise ValueError("cannot encode an empty sequence")
        if L > self.config.max_positions:
            raise ValueError(
                f"sequence length {L} exceeds max_positions={self.config.max_positions}"
            )
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0:
            raise ValueError("token id out of vocabulary range")
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(L))
        for block in self.blocks:
            x = block(x, collect_attn=collect_attn)
        return self.ln_final(x)

    def encode_many(self, sequences: Sequence[Sequence[int]]) -> list[torch.Tensor]:
        """Batched encode over variable-length sequences via padding + masking.

        Padded key positions receive zero attention so each returned slice
        matches the single-sequence path up to floating-point kernel choice.
        """
        if not sequences:
            return []
        lengths = [len(s) for s in sequences]
        if min(lengths) < 1:
            raise ValueError("cannot encode an empty sequence")
        L = max(lengths)
        if L > self.config.max_positions:
            raise ValueError(
                f"sequence length {L} exceeds max_positions={self.config.max_positions}"
            )
        ids = torch.zeros(len(sequences), L, dtype=torch.long)
        mask = torch.zeros(len(sequences), L, dtype=torch.bool)
        for i, seq in enumerate(sequences):
            t = torch.as_tensor(seq, dtype=torch.long)
            if int(t.max()) >= self.config.vocab_size or int(t.min()) < 0:
                raise ValueError("token id out of vocabulary range")
            ids[i, : len(seq)] = t
            mask[i, : len(seq)] = True
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(L))
        for block in self.blocks:
            x = block(x, key_mask=mask)
        x = self.ln_final(x)
        return [x[i, : lengths[i]] for i in range(len(sequences))]

    def project_to_vocab(self, hidden: torch.Tensor) -> torch.Tensor:
        """Affine map shared across positions: (len, d) -> (len, vocab_size)."""
        if hidden.shape[-1] != self.config.hidden_dim:
            raise ValueError("hidden state dimension does not match config")
        return self.vocab_proj(hidden)


def init_params(config: EncoderConfig) -> TableEncoder:
    """Seeded init: uniform +-1/sqrt(hidden_dim) for matrices, zero biases."""
    model = TableEncoder(config)
    gen = torch.Generator().manual_seed(config.seed)
    bound = 1.0 / math.sqrt(config.hidden_dim)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() >= 2 or "emb" in name:
                p.uniform_(-bound, bound, generator=gen)
            elif "ln" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return model


def save_checkpoint(model: TableEncoder, path: Union[str, Path]) -> None:
    """Single-file checkpoint: npz of float64 tensors with the config embedded."""
    arrays = {
        name: p.detach().cpu().numpy().astype(np.float64)
        for name, p in model.named_parameters()
    }
    arrays["__config__"] = np.array(json.dumps(asdict(model.config)))
    with open(path, "wb") as f:  # file handle keeps the exact path (no .npz suffixing)
        np.savez(f, **arrays)


def load_checkpoint(path: Union[str, Path]) -> TableEncoder:
    with np.load(path, allow_pickle=False) as data:
        config = EncoderConfig(**json.loads(str(data["__config__"])))
        model = TableEncoder(config)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name not in data:
                    raise ValueError(f"checkpoint missing tensor {name!r}")
                arr = data[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(
                        f"checkpoint tensor {name!r} has shape {arr.shape}, expected {tuple(p.shape)}"
                    )
                p.copy_(torch.from_numpy(arr))
    return model


def flat_parameters(model: TableEncoder) -> torch.Tensor:
    """Flat view over all trainable scalars (copy, fixed enumeration order)."""
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def checkpoint_hash(path: Union[str, Path]) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
