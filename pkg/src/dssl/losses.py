"""Training objectives: cosine similarity, the batch-sum triplet ranking loss,
the mutual-exclusion penalty, identity loss, denoising loss, cross-modal
attention and the five alignment terms."""
from __future__ import annotations

import math
from collections import Counter

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossConfig
from .encoders import ValidationError

# Degenerate-input tallies (zero-norm cosines, batches without negatives, ...).
diagnostics = Counter()

STREAMS = ("vg", "tg", "vp", "tp", "vr", "tr")


def _safe_norm(x):
    sq = (x * x).sum(-1)
    nonzero = sq > 0
    return torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))), nonzero


def cosine_sim(x, y):
    """Cosine similarity along the last axis; 0 when either side has zero norm."""
    nx, okx = _safe_norm(x)
    ny, oky = _safe_norm(y)
    ok = okx & oky
    bad = int((~ok).sum())
    if bad:
        diagnostics["zero_norm_cosine"] += bad
    cos = (x * y).sum(-1) / (nx * ny)
    return torch.where(ok, cos, torch.zeros_like(cos))


def cosine_matrix(a, b):
    """``out[i, j] = cos(a[i], b[j])`` with the zero-norm policy of :func:`cosine_sim`."""
    na, oka = _safe_norm(a)
    nb, okb = _safe_norm(b)
    bad = int((~oka).sum()) + int((~okb).sum())
    if bad:
        diagnostics["zero_norm_cosine"] += bad
    cos = (a @ b.transpose(-1, -2)) / (na.unsqueeze(-1) * nb.unsqueeze(-2))
    ok = oka.unsqueeze(-1) & okb.unsqueeze(-2)
    return torch.where(ok, cos, torch.zeros_like(cos))


def _negative_mask(B, labels, exclude_same, device):
    mask = ~torch.eye(B, dtype=torch.bool, device=device)
    if labels is not None and exclude_same:
        labels = torch.as_tensor(labels, device=device)
        mask &= labels.unsqueeze(0) != labels.unsqueeze(1)
    return mask


def ranking_hinges(x1, x2, margin, labels=None, exclude_same=True):
    """Hinge arguments ``alpha - S(pos) + S(neg)`` for both directions.

    Returns ``(h_x2, h_x1, mask)``; ``h_x2[i, j]`` uses negative ``x2[j]`` for
    anchor ``x1[i]`` and ``h_x1[i, j]`` uses ``x1[j]`` against ``x2[i]``.
    """
    sims = cosine_matrix(x1, x2)
    pos = sims.diagonal().unsqueeze(1)
    h_x2 = margin - pos + sims
    h_x1 = margin - pos + sims.t()
    return h_x2, h_x1, _negative_mask(x1.shape[0], labels, exclude_same, x1.device)


def ranking_loss(x1, x2, margin=0.2, labels=None, exclude_same=True):
    """Sum over every mismatched pair in the batch, both retrieval directions."""
    if x1.shape != x2.shape:
        raise ValidationError(f"ranking_loss: shape mismatch {tuple(x1.shape)} vs {tuple(x2.shape)}")
    if x1.shape[0] < 2:
        diagnostics["ranking_no_negatives"] += 1
        return x1.sum() * 0.0
    h_x2, h_x1, mask = ranking_hinges(x1, x2, margin, labels, exclude_same)
    zero = torch.zeros_like(h_x2)
    return torch.where(mask, F.relu(h_x2), zero).sum() + torch.where(mask, F.relu(h_x1), zero).sum()


def mec_loss(P, S, squared=False):
    """Frobenius norm of the cross-Gram matrix ``P^T S``."""
    if P.shape != S.shape:
        raise ValidationError(f"mec_loss: shape mismatch {tuple(P.shape)} vs {tuple(S.shape)}")
    sq = ((P.t() @ S) ** 2).sum()
    if squared:
        return sq
    # sqrt has an infinite slope at 0; the loss is exactly 0 there anyway
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, torch.sqrt(safe), torch.zeros_like(sq))


def id_loss(x, labels, w_id, norm):
    """Mean cross-entropy of ``W_id @ GN(x)`` (no bias) against ``labels``."""
    labels = torch.as_tensor(labels, device=x.device)
    if labels.numel() and (labels.max() >= w_id.shape[0] or labels.min() < 0):
        raise ValidationError(f"id_loss: label outside [0, {w_id.shape[0]})")
    logits = norm(x) @ w_id.t()
    return F.cross_entropy(logits, labels)


class IdentityHead(nn.Module):
    """Shared bias-free classifier with one learnable GN per feature stream."""

    def __init__(self, p, num_classes, groups):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, p))
        nn.init.uniform_(self.weight, -1.0 / math.sqrt(p), 1.0 / math.sqrt(p))
        self.norms = nn.ModuleDict({s: nn.GroupNorm(groups, p) for s in STREAMS})

    def forward(self, x, labels, stream):
        return id_loss(x, labels, self.weight, self.norms[stream])


def thresholded_softmax(cos, mask=None):
    """Softmax over the last axis (masked rows excluded) and the inclusion mask.

    A row is included iff its weight strictly exceeds ``1/m``, ``m`` being the
    number of valid rows.
    """
    if mask is None:
        mask = torch.ones(cos.shape, dtype=torch.bool, device=cos.device)
    m = mask.sum(-1, keepdim=True)
    if (m == 0).any():
        raise ValidationError("cross_modal_attend: no local rows")
    top = torch.where(mask, cos, torch.full_like(cos, -math.inf)).amax(-1, keepdim=True).detach()
    shifted = torch.where(mask, cos - top, torch.zeros_like(cos))
    e = torch.where(mask, torch.exp(shifted), torch.zeros_like(cos))
    alpha = e / e.sum(-1, keepdim=True)
    threshold = 1.0 / m.to(alpha.dtype)
    return alpha, mask & (alpha > threshold)


def attention_weights(locals_, query, mask=None):
    """Weights of ``cos(local_i, query)`` and which rows beat uniform."""
    return thresholded_softmax(cosine_sim(locals_, query.unsqueeze(-2)), mask)


def cross_modal_attend(locals_, query, mask=None):
    """Sum of ``alpha_i * local_i`` over rows whose weight beats uniform.

    Weights are not renormalized after thresholding, so a uniform tie (or a
    single row) yields the zero vector.
    """
    if locals_.shape[-2] == 0:
        raise ValidationError("cross_modal_attend: m = 0")
    alpha, keep = attention_weights(locals_, query, mask)
    w = torch.where(keep, alpha, torch.zeros_like(alpha))
    return (w.unsqueeze(-1) * locals_).sum(-2)


def sdm_loss(t_g, t_p, m_t, t_l, phrase_mask, margin=0.2, labels=None, exclude_same=True):
    """Global term plus one batchwise term per phrase index (ragged)."""
    if m_t.shape != t_l.shape:
        raise ValidationError("sdm_loss: M_T and T_L row counts differ")
    total = ranking_loss(t_g, t_p, margin, labels, exclude_same)
    for i in range(m_t.shape[1]):
        rows = phrase_mask[:, i]
        if int(rows.sum()) < 2:
            continue
        sub = None if labels is None else torch.as_tensor(labels)[rows]
        total = total + ranking_loss(m_t[rows, i], t_l[rows, i], margin, sub, exclude_same)
    return total


def alignment_losses(f, cfg: LossConfig):
    """The five alignment terms keyed ``align1``..``align5`` (skipped if disabled
    or if the required features are absent)."""
    kw = dict(margin=cfg.margin, labels=f.labels, exclude_same=cfg.exclude_same_identity_negatives)
    out = {}
    if cfg.align1:
        out["align1"] = ranking_loss(f.v_p, f.t_p, **kw)
    if cfg.align2 and f.v_r is not None:
        out["align2"] = ranking_loss(f.v_g, f.v_r, **kw)
    if cfg.align3:
        out["align3"] = ranking_loss(f.t_g, f.t_r, **kw)
    if cfg.align4:
        out["align4"] = ranking_loss(cross_modal_attend(f.v_l, f.t_p), f.t_p, **kw)
    if cfg.align5:
        out["align5"] = ranking_loss(cross_modal_attend(f.t_l, f.v_p, f.phrase_mask), f.v_p, **kw)
    return out


def stage1_terms(f, head):
    return {"id_vg": head(f.v_g, f.labels, "vg"), "id_tg": head(f.t_g, f.labels, "tg")}


def stage1_total(f, head):
    terms = stage1_terms(f, head)
    return terms["id_vg"] + terms["id_tg"], terms


def stage2_terms(f, head, cfg: LossConfig):
    terms = stage1_terms(f, head)
    terms["id_vp"] = head(f.v_p, f.labels, "vp")
    terms["id_tp"] = head(f.t_p, f.labels, "tp")
    if f.v_r is not None:
        terms["id_vr"] = head(f.v_r, f.labels, "vr")
    terms["id_tr"] = head(f.t_r, f.labels, "tr")
    terms.update(alignment_losses(f, cfg))
    if cfg.mec and f.v_s is not None:
        terms["mec"] = mec_loss(f.v_p, f.v_s, cfg.mec_squared)
    if cfg.sdm_loss and f.sdm_active:
        terms["sdm"] = sdm_loss(f.t_g, f.t_p, f.m_t, f.t_l, f.phrase_mask, cfg.margin,
                                f.labels, cfg.exclude_same_identity_negatives)
    return terms


def stage2_total(f, head, cfg: LossConfig):
    terms = stage2_terms(f, head, cfg)
    weights = {"id": cfg.w_id, "align": cfg.w_align, "mec": cfg.w_mec, "sdm": cfg.w_sdm}
    total = None
    for name, value in terms.items():
        group = name[:-1] if name.startswith("align") else name.split("_")[0]
        term = weights[group] * value
        total = term if total is None else total + term
    return total, terms
