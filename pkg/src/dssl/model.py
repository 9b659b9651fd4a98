"""The assembled DSSL network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .config import RunConfig
from .encoders import TextEncoder, VisualEncoder
from .losses import IdentityHead
from .separation import PDM, SAM, SDM, SPFM, SPSM


@dataclass
class Features:
    v_g: torch.Tensor
    m_v: torch.Tensor
    v_p: torch.Tensor
    v_s: Optional[torch.Tensor]
    v_l: torch.Tensor
    t_g: torch.Tensor
    m_t: torch.Tensor
    phrase_mask: torch.Tensor
    t_p: Optional[torch.Tensor] = None
    t_l: Optional[torch.Tensor] = None
    v_r: Optional[torch.Tensor] = None
    t_r: Optional[torch.Tensor] = None
    labels: Optional[torch.Tensor] = None
    sdm_active: bool = True


@dataclass
class ImageFeatures:
    v_g: torch.Tensor
    m_v: torch.Tensor
    v_p: torch.Tensor
    v_s: Optional[torch.Tensor]
    v_l: torch.Tensor


@dataclass
class TextFeatures:
    t_g: torch.Tensor
    m_t: torch.Tensor
    phrase_mask: torch.Tensor
    t_p: torch.Tensor
    t_l: torch.Tensor


class DSSL(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        enc, p = cfg.encoder, cfg.encoder.p
        self.visual = VisualEncoder(enc)
        self.textual = TextEncoder(enc)
        self.use_spsm = cfg.model.use_spsm
        self.use_sam = cfg.model.use_sam
        self.use_sdm = cfg.model.use_sdm
        if self.use_spsm:
            self.spsm = SPSM(p)
            self.spfm = SPFM(p, cfg.fusion)
        self.pdm = PDM(p)
        if self.use_sam:
            self.sam = SAM(p, enc.norm_groups)
        if self.use_sdm:
            self.sdm_global = SDM(p, cfg.sdm)
            self.sdm_local = SDM(p, cfg.sdm)
        self.id_head = IdentityHead(p, cfg.loss.id_class_count, enc.norm_groups)

    def backbone_parameters(self):
        return list(self.visual.backbone.parameters())

    def encode_images(self, images):
        v_g, m_v = self.visual(images)
        if self.use_spsm:
            v_p, v_s = self.spsm(v_g)
        else:
            v_p, v_s = v_g, None
        v_l = self.sam(v_p, m_v) if self.use_sam else m_v
        return ImageFeatures(v_g, m_v, v_p, v_s, v_l)

    def encode_text(self, text, rng=None):
        t_g, m_t, mask = self.textual(text)
        if self.use_sdm:
            t_p = self.sdm_global(t_g, rng)
            t_l = self.sdm_local(m_t, rng) * mask.unsqueeze(-1).to(m_t.dtype)
        else:
            t_p, t_l = t_g, m_t
        return TextFeatures(t_g, m_t, mask, t_p, t_l)

    def forward(self, images, text, labels=None, rng=None, stage=2):
        """Features for a batch of aligned image/caption pairs.

        ``stage=1`` stops after the global features (the stage-1 objective
        uses nothing else).
        """
        if stage == 1:
            v_g, m_v = self.visual(images)
            t_g, m_t, mask = self.textual(text)
            return Features(v_g, m_v, v_g, None, m_v, t_g, m_t, mask, labels=labels, sdm_active=False)
        img = self.encode_images(images)
        txt = self.encode_text(text, rng)
        v_r = self.spfm(txt.t_p, img.v_s) if self.use_spsm else None
        t_r = self.pdm(img.v_p)
        return Features(
            img.v_g, img.m_v, img.v_p, img.v_s, img.v_l,
            txt.t_g, txt.m_t, txt.phrase_mask, txt.t_p, txt.t_l,
            v_r, t_r, labels, self.use_sdm,
        )
