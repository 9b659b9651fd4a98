"""Text-to-image scoring, top-k accuracy and visual-neighbor re-ranking."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .config import EvalConfig
from .data import PairDataset, text_batch
from .encoders import ValidationError
from .losses import cosine_matrix, cosine_sim, cross_modal_attend, thresholded_softmax

logger = logging.getLogger(__name__)


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (num_queries, num_gallery)
    query_ids: np.ndarray
    gallery_ids: np.ndarray
    gallery_labels: np.ndarray


@dataclass
class RankingResult:
    order: np.ndarray  # (Q, G) ranked gallery indices
    first_hit: np.ndarray  # 0-based rank of first correct image, -1 if none
    hits: dict  # k -> (Q,) bool


def sim_ti(q, g, cfg: EvalConfig):
    """Score of one caption against one image.

    ``q`` needs ``t_p (p,)``, ``t_l (n, p)``; ``g`` needs ``v_p (p,)``,
    ``v_l (k, p)``. The global person term is mixed with the mean of the two
    attended local terms.
    """
    glob = cosine_sim(g.v_p, q.t_p)
    vis = cosine_sim(cross_modal_attend(g.v_l, q.t_p), q.t_p)
    txt = cosine_sim(cross_modal_attend(q.t_l, g.v_p), g.v_p)
    return float(cfg.lambda1 * glob + cfg.lambda2 * 0.5 * (vis + txt))


def _attended_cos(dots, loc_norm, gram, q_norm, mask):
    """``cos(CA(locals, query), query)`` for every (query, gallery) pair.

    ``dots[..., i]`` is ``local_i . query``. Uses the Gram matrix of the locals
    so the attended vectors are never materialized.
    """
    denom = loc_norm * q_norm
    ok = denom > 0
    cos = torch.where(ok, dots / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(dots))
    alpha, keep = thresholded_softmax(cos, mask)
    w = torch.where(keep, alpha, torch.zeros_like(alpha))
    num = (w * dots).sum(-1)
    sq = torch.einsum("...i,...ij,...j->...", w, gram, w).clamp_min(0)
    den = torch.sqrt(sq) * q_norm.squeeze(-1)
    okd = den > 0
    return torch.where(okd, num / torch.where(okd, den, torch.ones_like(den)), torch.zeros_like(num))


def score_block(tp, tl, tmask, vp, vl, cfg: EvalConfig):
    """Scores for ``Q`` queries against ``G`` gallery images, ``(Q, G)``."""
    glob = cosine_matrix(tp, vp)
    # visual locals attended by the textual person feature
    dots_v = torch.einsum("gkp,qp->qgk", vl, tp)
    vl_norm = vl.norm(dim=-1).unsqueeze(0)
    tp_norm = tp.norm(dim=-1)[:, None, None]
    gram_v = (vl @ vl.transpose(1, 2)).unsqueeze(0)
    vis = _attended_cos(dots_v, vl_norm, gram_v, tp_norm, None)
    # textual locals attended by the visual person feature
    dots_t = torch.einsum("qnp,gp->qgn", tl, vp)
    tl_norm = tl.norm(dim=-1).unsqueeze(1)
    vp_norm = vp.norm(dim=-1)[None, :, None]
    gram_t = (tl @ tl.transpose(1, 2)).unsqueeze(1)
    mask = tmask.unsqueeze(1).expand(-1, vp.shape[0], -1)
    txt = _attended_cos(dots_t, tl_norm, gram_t, vp_norm, mask)
    return cfg.lambda1 * glob + cfg.lambda2 * 0.5 * (vis + txt)


@torch.no_grad()
def gallery_features(model, images, batch=512):
    model.eval()
    dtype = next(model.parameters()).dtype
    vps, vls = [], []
    for s in range(0, len(images), batch):
        f = model.encode_images(images[s : s + batch].to(dtype))
        vps.append(f.v_p.double())
        vls.append(f.v_l.double())
    return torch.cat(vps), torch.cat(vls)


@torch.no_grad()
def query_features(model, items, n_max=26):
    model.eval()
    f = model.encode_text(text_batch(items, n_max))
    return f.t_p.double(), f.t_l.double(), f.phrase_mask


def caption_queries(dataset: PairDataset):
    """Every caption of every image as a query: ``(items, labels, ids)``."""
    items, labels, ids = [], [], []
    for i, caps in enumerate(dataset.captions):
        for j, cap in enumerate(caps):
            items.append(cap)
            labels.append(dataset.labels[i] if dataset.labels[i] >= 0 else dataset.identities[i])
            ids.append(f"{i}:{j}")
    return items, np.asarray(labels), np.asarray(ids)


@torch.no_grad()
def score_all(model, query_items, gallery: PairDataset, cfg: EvalConfig, cache=True, chunk=128, n_max=26):
    """Score every query caption against every gallery image."""
    if len(gallery) == 0:
        raise ValidationError("score_all: empty gallery")
    if cache:
        vp, vl = gallery_features(model, gallery.images)
    blocks = []
    for s in range(0, len(query_items), chunk):
        tp, tl, tmask = query_features(model, query_items[s : s + chunk], n_max)
        if not cache:
            vp, vl = gallery_features(model, gallery.images)
        blocks.append(score_block(tp, tl, tmask, vp, vl, cfg))
    scores = torch.cat(blocks).numpy()
    if not np.isfinite(scores).all():
        raise ValidationError("score_all: non-finite scores")
    return ScoreMatrix(scores, np.arange(len(query_items)), np.arange(len(gallery)), gallery.labels.copy())


def rank_gallery(scores):
    """Descending scores; ties resolved by ascending gallery index."""
    return np.argsort(-scores, axis=1, kind="stable")


def rank(sm: ScoreMatrix, query_labels, k_list=(1, 5, 10)):
    G = sm.scores.shape[1]
    if any(k > G for k in k_list):
        raise ValidationError(f"top-k cutoff {max(k_list)} exceeds gallery size {G}")
    order = rank_gallery(sm.scores)
    match = sm.gallery_labels[order] == np.asarray(query_labels)[:, None]
    any_hit = match.any(axis=1)
    first = np.where(any_hit, match.argmax(axis=1), -1)
    hits = {k: any_hit & (first < k) for k in k_list}
    return RankingResult(order, first, hits)


def topk_accuracy(sm: ScoreMatrix, query_labels, k_list=(1, 5, 10)):
    """``{k: fraction of queries with a correct image in the first k}``."""
    res = rank(sm, query_labels, k_list)
    return {k: float(np.mean(h)) for k, h in res.hits.items()}


def rerank(sm: ScoreMatrix, gallery_vp, cfg: EvalConfig):
    """Blend each score with the image's best visual similarity to the
    query's initial top-K images."""
    gamma = cfg.rr_gamma
    if gamma == 0:
        return ScoreMatrix(sm.scores.copy(), sm.query_ids, sm.gallery_ids, sm.gallery_labels)
    G = sm.scores.shape[1]
    K = cfg.rr_K
    if K > G:
        logger.warning("rr_K=%d exceeds gallery size %d; clamping", K, G)
        K = G
    vp = torch.as_tensor(np.asarray(gallery_vp, dtype=np.float64))
    vis = cosine_matrix(vp, vp).numpy()
    top = rank_gallery(sm.scores)[:, :K]
    neigh = np.stack([vis[:, t].max(axis=1) for t in top])
    return ScoreMatrix((1.0 - gamma) * sm.scores + gamma * neigh, sm.query_ids, sm.gallery_ids, sm.gallery_labels)


@torch.no_grad()
def evaluate(model, dataset: PairDataset, cfg: EvalConfig, n_max=26):
    """Full text->image protocol on one split: ``(accuracies, ScoreMatrix, labels)``."""
    items, labels, _ = caption_queries(dataset)
    sm = score_all(model, items, dataset, cfg, n_max=n_max)
    if cfg.rr_enabled:
        vp, _ = gallery_features(model, dataset.images)
        sm = rerank(sm, vp.numpy(), cfg)
    return topk_accuracy(sm, labels, cfg.k_list), sm, labels


def format_report(acc):
    return "".join(f"top{k}={v:.6f}\n" for k, v in acc.items())


def write_ranking_dump(path, sm: ScoreMatrix, query_ids, limit=None):
    """Tab-separated ``query_id  rank  gallery_id  score`` lines (1-based rank)."""
    order = rank_gallery(sm.scores)
    with open(path, "w", encoding="utf-8") as fh:
        for qi, row in enumerate(order):
            for r, g in enumerate(row[:limit] if limit else row):
                fh.write(f"{query_ids[qi]}\t{r + 1}\t{sm.gallery_ids[g]}\t{float(sm.scores[qi, g])!r}\n")
