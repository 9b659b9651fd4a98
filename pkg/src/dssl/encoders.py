"""Visual and textual feature extractors.

Both encoders map their input into the shared ``p``-dim space and return a
global vector plus a matrix of local rows (``k`` strips for images, one row
per phrase for text).
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence

from .config import ConfigError, EncoderConfig


class ValidationError(ValueError):
    """Raised when an input violates its contract (shape, finiteness, ids)."""


def init_linear(layer):
    """Uniform fan-in init for affine layers."""
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    if layer.bias is not None:
        nn.init.uniform_(layer.bias, -bound, bound)


def linear(n_in, n_out, bias=True):
    layer = nn.Linear(n_in, n_out, bias=bias)
    init_linear(layer)
    return layer


class LocalHead(nn.Module):
    """GN -> FC -> ReLU -> FC, shared across rows."""

    def __init__(self, n_in, p, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, n_in)
        self.fc1 = linear(n_in, p)
        self.fc2 = linear(p, p)

    def forward(self, x):
        shape = x.shape[:-1]
        h = self.norm(x.reshape(-1, x.shape[-1]))
        h = self.fc2(F.relu(self.fc1(h)))
        return h.reshape(*shape, -1)


class GlobalHead(nn.Module):
    """GN -> FC."""

    def __init__(self, n_in, p, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, n_in)
        self.fc = linear(n_in, p)

    def forward(self, x):
        return self.fc(self.norm(x))


class VectorPassthrough(nn.Module):
    """Stand-in backbone for vector observations.

    The ``d``-dim input is cut into ``k`` contiguous chunks of ``ceil(d / k)``
    (the last one zero-padded when ``k`` does not divide ``d``) and each chunk
    gets its own linear projection to ``p`` channels, giving a ``k x p`` pseudo
    feature map whose rows play the role of horizontal strips.
    """

    def __init__(self, obs_dim, k, width):
        super().__init__()
        if k > obs_dim:
            raise ConfigError(f"obs_dim={obs_dim} smaller than k={k}")
        self.obs_dim, self.k, self.chunk = obs_dim, k, -(-obs_dim // k)
        self.weight = nn.Parameter(torch.empty(k, self.chunk, width))
        self.bias = nn.Parameter(torch.empty(k, width))
        bound = 1.0 / math.sqrt(self.chunk)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    def chunks(self, x):
        pad = self.k * self.chunk - self.obs_dim
        if pad:
            x = F.pad(x, (0, pad))
        return x.reshape(*x.shape[:-1], self.k, self.chunk)

    def forward(self, x):
        if x.shape[-1] != self.obs_dim:
            raise ConfigError(f"vector input has dim {x.shape[-1]}, expected {self.obs_dim}")
        strips = torch.einsum("...kc,kcw->...kw", self.chunks(x), self.weight) + self.bias
        return strips.mean(dim=-2), strips


class TinyConv(nn.Module):
    """Four conv/pool blocks; input is ``(B, H, W, C)`` in [0, 1]."""

    def __init__(self, channels, k, width):
        super().__init__()
        widths = [channels, 16, 32, 64, width]
        blocks = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            blocks += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2, ceil_mode=True)]
        self.body = nn.Sequential(*blocks)
        self.k = k

    def forward(self, x):
        fmap = self.body(x.permute(0, 3, 1, 2))
        pooled = fmap.mean(dim=(2, 3))
        strips = F.adaptive_avg_pool2d(fmap, (self.k, 1)).squeeze(-1).transpose(1, 2)
        return pooled, strips


class VisualEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.visual_backbone == "vector-passthrough":
            self.backbone = VectorPassthrough(cfg.obs_dim, cfg.k, cfg.p)
        elif cfg.visual_backbone == "tiny-conv":
            self.backbone = TinyConv(cfg.image_channels, cfg.k, cfg.p)
        else:
            raise ConfigError(f"unknown visual_backbone {cfg.visual_backbone!r}")
        self.global_head = GlobalHead(cfg.p, cfg.p, cfg.norm_groups)
        self.local_head = LocalHead(cfg.p, cfg.p, cfg.norm_groups)

    def forward(self, images):
        """Return ``(V_G (B, p), M_V (B, k, p))``."""
        if not torch.isfinite(images).all():
            raise ValidationError("image input contains non-finite values")
        expect = 2 if self.cfg.visual_backbone == "vector-passthrough" else 4
        if images.dim() != expect:
            raise ConfigError(
                f"{self.cfg.visual_backbone} expects a {expect}-d batch, got shape {tuple(images.shape)}"
            )
        pooled, strips = self.backbone(images)
        return self.global_head(pooled), self.local_head(strips)


class TextEncoder(nn.Module):
    """Embedding + bi-GRU shared by the sentence and its phrases."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.embed)
        self.gru = nn.GRU(cfg.embed, cfg.hidden, batch_first=True, bidirectional=True)
        for name, param in self.gru.named_parameters():
            if "weight_hh" in name:
                for gate in param.data.chunk(3, 0):
                    nn.init.orthogonal_(gate)
        self.global_head = GlobalHead(cfg.p, cfg.p, cfg.norm_groups)
        self.local_head = LocalHead(cfg.p, cfg.p, cfg.norm_groups)

    def sequence_states(self, tokens, lengths):
        """Concatenated last forward/backward hidden states, ``(N, p)``."""
        emb = self.embedding(tokens)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, h_n = self.gru(packed)
        return torch.cat([h_n[0], h_n[1]], dim=-1)

    def forward(self, text):
        """Return ``(T_G (B, p), M_T (B, n, p), phrase_mask (B, n))``.

        ``text`` is a :class:`TextBatch`; absent phrase rows are zero and
        masked out.
        """
        if (text.lengths < 1).any():
            raise ValidationError("empty token sequence")
        if text.tokens.numel() and (text.tokens.max() >= self.cfg.vocab_size or text.tokens.min() < 0):
            raise ValidationError("token id outside vocabulary")
        t_g = self.global_head(self.sequence_states(text.tokens, text.lengths))
        rows = self.local_head(self.sequence_states(text.phrase_tokens, text.phrase_lengths))
        B, n = text.phrase_mask.shape
        m_t = rows.new_zeros(B * n, rows.shape[-1]).index_copy(0, text.phrase_slot, rows)
        return t_g, m_t.reshape(B, n, -1), text.phrase_mask


class TextBatch:
    """Padded token tensors for a batch of sentences with ragged phrase lists."""

    def __init__(self, tokens, lengths, phrase_tokens, phrase_lengths, phrase_slot, phrase_mask):
        self.tokens = tokens
        self.lengths = lengths
        self.phrase_tokens = phrase_tokens
        self.phrase_lengths = phrase_lengths
        self.phrase_slot = phrase_slot
        self.phrase_mask = phrase_mask

    @classmethod
    def build(cls, sequences, spans, n_max=None):
        """Assemble from token-id lists and per-sentence ``(start, end)`` spans."""
        if not sequences:
            raise ValidationError("empty text batch")
        n = max(len(s) for s in spans)
        if n_max is not None:
            n = min(n, n_max)
        if n == 0:
            raise ValidationError("every sentence needs at least one phrase")
        lengths = [len(s) for s in sequences]
        if min(lengths) == 0:
            raise ValidationError("empty token sequence")
        tokens = torch.zeros(len(sequences), max(lengths), dtype=torch.long)
        phrase_seqs, slots = [], []
        mask = torch.zeros(len(sequences), n, dtype=torch.bool)
        for i, (seq, sp) in enumerate(zip(sequences, spans)):
            tokens[i, : len(seq)] = torch.as_tensor(seq, dtype=torch.long)
            if not sp:
                raise ValidationError(f"sentence {i} has no phrases")
            for j, (start, end) in enumerate(sp[:n]):
                if not 0 <= start < end <= len(seq):
                    raise ValidationError(f"sentence {i}: phrase span ({start}, {end}) out of bounds")
                phrase_seqs.append(seq[start:end])
                slots.append(i * n + j)
                mask[i, j] = True
        p_len = [len(s) for s in phrase_seqs]
        p_tok = torch.zeros(len(phrase_seqs), max(p_len), dtype=torch.long)
        for i, seq in enumerate(phrase_seqs):
            p_tok[i, : len(seq)] = torch.as_tensor(seq, dtype=torch.long)
        return cls(
            tokens,
            torch.as_tensor(lengths, dtype=torch.long),
            p_tok,
            torch.as_tensor(p_len, dtype=torch.long),
            torch.as_tensor(slots, dtype=torch.long),
            mask,
        )

    def __len__(self):
        return self.tokens.shape[0]
