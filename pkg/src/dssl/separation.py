"""Person/surroundings separation, fusion, describing, salient gating and
signal denoising blocks."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, FusionConfig, SdmConfig
from .encoders import ValidationError, linear


def _check_dim(x, p, what):
    if x.shape[-1] != p:
        raise ConfigError(f"{what}: expected last dimension {p}, got {x.shape[-1]}")


class TanhMLP(nn.Module):
    """``n_in -> hidden -> p`` with ReLU between and tanh on the output."""

    def __init__(self, n_in, hidden, p):
        super().__init__()
        self.fc1 = linear(n_in, hidden)
        self.fc2 = linear(hidden, p)

    def forward(self, x):
        return torch.tanh(self.fc2(F.relu(self.fc1(x))))


class SPSM(nn.Module):
    """Two parameter-disjoint heads splitting ``V_G`` into ``(V_P, V_S)``."""

    def __init__(self, p):
        super().__init__()
        self.p = p
        self.person = TanhMLP(p, 2 * p, p)
        self.surroundings = TanhMLP(p, 2 * p, p)

    def forward(self, v_g):
        _check_dim(v_g, self.p, "spsm")
        return self.person(v_g), self.surroundings(v_g)


class SPFM(nn.Module):
    """Fuse the textual person feature with ``V_S`` into the visual modality."""

    def __init__(self, p, cfg: FusionConfig):
        super().__init__()
        cfg.validate()
        self.p = p
        self.combine = cfg.combine
        n_in = p if cfg.combine == "addition" else 2 * p
        self.mlp = TanhMLP(n_in, 2 * p, p)

    def combined(self, t_p, v_s):
        _check_dim(t_p, self.p, "spfm")
        _check_dim(v_s, self.p, "spfm")
        if self.combine == "addition":
            return t_p + v_s
        return torch.cat([t_p, v_s], dim=-1)

    def forward(self, t_p, v_s):
        return self.mlp(self.combined(t_p, v_s))


class PDM(nn.Module):
    """Map ``V_P`` into the textual modality as ``T_R``."""

    def __init__(self, p):
        super().__init__()
        self.p = p
        self.mlp = TanhMLP(p, 2 * p, p)

    def forward(self, v_p):
        _check_dim(v_p, self.p, "pdm")
        return self.mlp(v_p)


class SAM(nn.Module):
    """Sigmoid gate conditioned on ``V_P``, applied identically to every strip."""

    def __init__(self, p, groups):
        super().__init__()
        self.p = p
        self.fc1 = linear(p, p)
        self.norm = nn.GroupNorm(groups, p)
        self.fc2 = linear(p, p)

    def gate(self, v_p):
        _check_dim(v_p, self.p, "sam")
        # GroupNorm needs a batch dimension; a single (p,) vector is accepted too
        h = self.norm(F.relu(self.fc1(v_p)).reshape(-1, self.p)).reshape(v_p.shape)
        return torch.sigmoid(self.fc2(h))

    def forward(self, v_p, m_v):
        _check_dim(m_v, self.p, "sam")
        return self.gate(v_p).unsqueeze(-2) * m_v


def zero_mask(x, r, rng=None):
    """Zero exactly ``floor(r * p)`` coordinates of every row of ``x``.

    Positions are drawn uniformly without replacement, independently per row:
    each row's positions are the first ``floor(r * p)`` entries of
    ``argsort(torch.rand(p, generator=rng))``, rows drawn in order.
    """
    if not 0.0 <= r < 1.0:
        raise ValidationError(f"zeroing ratio r={r} outside [0, 1)")
    p = x.shape[-1]
    n_zero = math.floor(r * p)
    if n_zero == 0:
        return x
    flat = x.reshape(-1, p)
    noise = torch.rand(flat.shape, generator=rng)
    idx = noise.argsort(dim=1)[:, :n_zero]
    keep = torch.ones(flat.shape, dtype=torch.bool).scatter_(1, idx, False)
    return (flat * keep.to(flat.dtype)).reshape(x.shape)


class SDM(nn.Module):
    """Zero-then-reconstruct autoencoder: ``Dec(Enc(Z(x, r)))``."""

    def __init__(self, p, cfg: SdmConfig):
        super().__init__()
        cfg.validate()
        self.p = p
        self.r = cfg.r
        self.train_mode_zeroing = cfg.train_mode_zeroing
        width = cfg.enc_width or max(1, p // 2)
        self.enc = linear(p, width)
        self.dec = linear(width, p)

    def forward(self, x, rng=None):
        _check_dim(x, self.p, "sdm")
        if self.training and self.train_mode_zeroing:
            x = zero_mask(x, self.r, rng)
        return self.dec(F.relu(self.enc(x)))
