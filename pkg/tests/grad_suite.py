"""Finite-difference gradient checks for every loss on small random instances
(p=8, B=4, k=3, three phrases per caption, float64)."""
import numpy as np
import torch

from dssl.losses import (
    alignment_losses,
    cross_modal_attend,
    attention_weights,
    id_loss,
    mec_loss,
    ranking_hinges,
    ranking_loss,
    sdm_loss,
    stage1_total,
    stage2_total,
)
from dssl.model import DSSL, Features
from conftest import random_text, small_config
from gradcheck_util import coordinate_check, directional_check

P, B, K, N_PHRASES = 8, 4, 3, 3
KINK = 1e-3
MARGIN = 0.2


def hinge_gap(x1, x2, labels=None):
    h_a, h_b, mask = ranking_hinges(x1, x2, MARGIN, labels)
    return float(torch.cat([h_a[mask].abs(), h_b[mask].abs()]).min())


def attention_gap(locals_, query, mask=None):
    alpha, _ = attention_weights(locals_, query, mask)
    if mask is None:
        mask = torch.ones(alpha.shape, dtype=torch.bool)
    m = mask.sum(-1, keepdim=True).to(alpha.dtype)
    return float((alpha - 1.0 / m).abs()[mask].min())


def feature_gaps(f):
    """Smallest distance of any hinge or attention threshold to its kink."""
    gaps = [hinge_gap(f.v_p, f.t_p, f.labels), hinge_gap(f.t_g, f.t_r, f.labels),
            hinge_gap(f.t_g, f.t_p, f.labels),
            attention_gap(f.v_l, f.t_p), attention_gap(f.t_l, f.v_p, f.phrase_mask),
            hinge_gap(cross_modal_attend(f.v_l, f.t_p), f.t_p, f.labels),
            hinge_gap(cross_modal_attend(f.t_l, f.v_p, f.phrase_mask), f.v_p, f.labels)]
    if f.v_r is not None:
        gaps.append(hinge_gap(f.v_g, f.v_r, f.labels))
    for i in range(f.m_t.shape[1]):
        gaps.append(hinge_gap(f.m_t[:, i], f.t_l[:, i], f.labels))
    return min(gaps)


def _randn(gen, *shape):
    return torch.randn(*shape, dtype=torch.float64, generator=gen)


def sample_pair(seed):
    """Random (x1, x2) batch whose hinges all sit >= KINK from 0."""
    while True:
        gen = torch.Generator().manual_seed(seed)
        x1, x2 = _randn(gen, B, P), _randn(gen, B, P)
        if hinge_gap(x1, x2) >= KINK:
            return x1, x2
        seed += 1000


def sample_model(seed=0, **overrides):
    """Model, inputs and mask rng seed with every kink >= KINK away."""
    while True:
        cfg = small_config(p=P, k=K, vocab=20, classes=4, groups=2, obs_dim=12, **overrides)
        cfg.loss.margin = MARGIN
        torch.manual_seed(seed)
        model = DSSL(cfg).double().train()
        rng = np.random.default_rng(seed)
        images = torch.as_tensor(rng.standard_normal((B, 12)))
        text = random_text(B, 20, rng, n_phrases=N_PHRASES)
        labels = torch.arange(B)
        with torch.no_grad():
            f = model(images, text, labels, torch.Generator().manual_seed(seed))
        if feature_gaps(f) >= KINK:
            return model, images, text, labels, seed
        seed += 1000


def _features(seed=0):
    model, images, text, labels, s = sample_model(seed)
    with torch.no_grad():
        f = model(images, text, labels, torch.Generator().manual_seed(s))
    return model, f


def check_ranking():
    x1, x2 = sample_pair(1)
    return coordinate_check(lambda a, b: ranking_loss(a, b, MARGIN), [x1, x2])


def check_mec():
    gen = torch.Generator().manual_seed(2)
    P_, S_ = _randn(gen, B, P), _randn(gen, B, P)
    return coordinate_check(lambda a, b: mec_loss(a, b), [P_, S_])


def check_id():
    gen = torch.Generator().manual_seed(3)
    x, w = _randn(gen, B, P), _randn(gen, 4, P)
    norm = torch.nn.GroupNorm(2, P).double()
    with torch.no_grad():
        norm.weight.uniform_(0.5, 1.5, generator=gen)
        norm.bias.uniform_(-0.5, 0.5, generator=gen)
    labels = [0, 3, 1, 1]
    misses = coordinate_check(lambda a, ww: id_loss(a, labels, ww, norm), [x, w])
    misses += directional_check(lambda: id_loss(x, labels, w, norm), list(norm.named_parameters()))
    return misses


def check_sdm():
    _, f = _features(4)
    mask = f.phrase_mask
    return coordinate_check(lambda a, b, c, d: sdm_loss(a, b, c, d, mask, MARGIN, f.labels),
                            [f.t_g, f.t_p, f.m_t, f.t_l])


def _align(name, fields):
    _, f = _features(5)
    cfg = small_config(p=P, k=K)
    cfg.loss.margin = MARGIN

    def loss(*values):
        kw = dict(zip(fields, values))
        g = Features(**{**f.__dict__, **kw})
        return alignment_losses(g, cfg.loss)[name]

    return coordinate_check(loss, [getattr(f, n) for n in fields])


def check_align1():
    return _align("align1", ["v_p", "t_p"])


def check_align2():
    return _align("align2", ["v_g", "v_r"])


def check_align3():
    return _align("align3", ["t_g", "t_r"])


def check_align4():
    return _align("align4", ["v_l", "t_p"])


def check_align5():
    return _align("align5", ["t_l", "v_p"])


def check_stage1():
    model, images, text, labels, s = sample_model(6)
    params = [(n, p) for n, p in model.named_parameters()
              if n.startswith(("visual.", "textual.", "id_head.weight", "id_head.norms.vg", "id_head.norms.tg"))]

    def total():
        return stage1_total(model(images, text, labels, stage=1), model.id_head)[0]

    return directional_check(total, params)


def check_stage2():
    model, images, text, labels, s = sample_model(7)

    def total():
        f = model(images, text, labels, torch.Generator().manual_seed(s))
        return stage2_total(f, model.id_head, model.cfg.loss)[0]

    return directional_check(total, list(model.named_parameters()))


CHECKS = {
    "ranking": check_ranking,
    "mec": check_mec,
    "id": check_id,
    "sdm": check_sdm,
    "align1": check_align1,
    "align2": check_align2,
    "align3": check_align3,
    "align4": check_align4,
    "align5": check_align5,
    "stage1_total": check_stage1,
    "stage2_total": check_stage2,
}
