"""Annotation I/O, vocabulary, phrase chunking, the synthetic factorized
benchmark and the linear separation probe."""
from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from statistics import NormalDist
from typing import Optional

import numpy as np
import torch

from .config import SyntheticConfig
from .encoders import TextBatch, ValidationError

logger = logging.getLogger(__name__)

UNK = "<unk>"
SPLITS = ("train", "val", "test")
N_MAX = 26

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass
class AnnotationRecord:
    identity: int
    captions: list
    split: str
    img_path: Optional[str] = None
    vector: Optional[list] = None

    def to_json(self):
        out = {"id": self.identity}
        if self.vector is not None:
            out["vector"] = list(self.vector)
        else:
            out["img_path"] = self.img_path
        out["captions"] = list(self.captions)
        out["split"] = self.split
        return out


def _record_error(index, fieldname, msg):
    return ValidationError(f"record {index}: field {fieldname!r}: {msg}")


def parse_records(entries):
    if not isinstance(entries, list):
        raise ValidationError("annotation file must hold a JSON array")
    records, seen = [], set()
    for i, e in enumerate(entries):
        if not isinstance(e, dict):
            raise _record_error(i, "*", "entry is not an object")
        ident = e.get("id")
        if not isinstance(ident, int) or isinstance(ident, bool) or ident < 0:
            raise _record_error(i, "id", f"expected a non-negative integer, got {ident!r}")
        caps = e.get("captions")
        if not isinstance(caps, list) or not caps or not all(isinstance(c, str) and c.strip() for c in caps):
            raise _record_error(i, "captions", "need at least one non-empty caption string")
        split = e.get("split")
        if split not in SPLITS:
            raise _record_error(i, "split", f"expected one of {SPLITS}, got {split!r}")
        vec, path = e.get("vector"), e.get("img_path")
        if (vec is None) == (path is None):
            raise _record_error(i, "img_path/vector", "exactly one of img_path or vector is required")
        if vec is not None:
            if not isinstance(vec, list) or not vec:
                raise _record_error(i, "vector", "expected a non-empty list of numbers")
            try:
                arr = np.asarray(vec, dtype=np.float64)
            except (TypeError, ValueError):
                raise _record_error(i, "vector", "non-numeric entries") from None
            if arr.ndim != 1 or not np.isfinite(arr).all():
                raise _record_error(i, "vector", "must be a flat list of finite numbers")
            key = (ident, "vec", arr.tobytes())
        else:
            if not isinstance(path, str) or not path:
                raise _record_error(i, "img_path", "expected a non-empty string")
            key = (ident, "path", path)
        if key in seen:
            raise _record_error(i, "img_path/vector", f"duplicate image for identity {ident}")
        seen.add(key)
        records.append(AnnotationRecord(ident, list(caps), split, path, vec))
    return records


def load_annotations(path):
    """Read and validate a JSON array of annotation objects."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        entries = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    return parse_records(entries)


def save_annotations(records, path):
    Path(path).write_text(json.dumps([r.to_json() for r in records]), encoding="utf-8")


# --- text -----------------------------------------------------------------------


def tokenize(text):
    """Lowercased word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens):
        if not tokens or tokens[0] != UNK:
            raise ValidationError(f"vocabulary must start with {UNK}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def encode(self, tokens):
        return [self.index.get(t, 0) for t in tokens]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(records, min_count=2):
    """Vocabulary over training captions; rarer tokens fall back to ``<unk>``."""
    counts = Counter()
    for r in records:
        if r.split == "train":
            for c in r.captions:
                counts.update(tokenize(c))
    if not counts:
        raise ValidationError("build_vocab: empty training corpus")
    kept = sorted(t for t, n in counts.items() if n >= min_count and t != UNK)
    return Vocabulary([UNK] + kept)


def load_stopwords(path=None):
    if path:
        text = Path(path).read_text(encoding="utf-8")
    else:
        text = resources.files("dssl").joinpath("stopwords.txt").read_text(encoding="utf-8")
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line)
    return frozenset(words)


def extract_phrases(tokens, stopwords=None, n_max=N_MAX):
    """Maximal runs of non-stop tokens as ``(start, end)`` spans.

    Falls back to the whole sentence when every token is a stop token.
    """
    if not tokens:
        raise ValidationError("extract_phrases: empty token sequence")
    if stopwords is None:
        stopwords = load_stopwords()
    spans, start = [], None
    for i, tok in enumerate(tokens):
        if tok in stopwords:
            if start is not None:
                spans.append((start, i))
                start = None
        elif start is None:
            start = i
    if start is not None:
        spans.append((start, len(tokens)))
    if not spans:
        return [(0, len(tokens))]
    return spans[:n_max]


# --- synthetic benchmark ----------------------------------------------------------


@dataclass
class SyntheticData:
    records: list
    z_p: np.ndarray  # (N, d_p), one row per record
    z_s: np.ndarray  # (N, d_s)
    mixing: np.ndarray  # (obs_dim, d_p + d_s), orthonormal columns


def _stream(seed, stream, *keys):
    return np.random.default_rng([seed, stream, *keys])


def mixing_matrix(cfg: SyntheticConfig):
    g = _stream(cfg.seed, 0).standard_normal((cfg.obs_dim, cfg.d_p + cfg.d_s))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def bin_edges(bins):
    nd = NormalDist()
    return np.array([nd.inv_cdf(j / bins) for j in range(1, bins)])


def caption_tokens(z_p, cfg: SyntheticConfig, rng):
    """Quantized person factor plus inserted noise tokens, comma-separated
    into consecutive 2-token phrases."""
    levels = np.searchsorted(bin_edges(cfg.bins), z_p, side="right")
    tokens = [f"f{i}_b{int(b)}" for i, b in enumerate(levels)]
    n_noise = round(cfg.noise_token_ratio / (1.0 - cfg.noise_token_ratio) * len(tokens))
    for _ in range(n_noise):
        pos = int(rng.integers(0, len(tokens) + 1))
        tokens.insert(pos, f"n{int(rng.integers(0, cfg.noise_vocab))}")
    out = []
    for i in range(0, len(tokens), 2):
        if out:
            out.append(",")
        out.extend(tokens[i : i + 2])
    return out


def generate_synthetic(cfg: SyntheticConfig):
    """Records whose observations mix a person and a surroundings factor and
    whose captions depend on the person factor only."""
    cfg.validate()
    A = mixing_matrix(cfg)
    n_img = cfg.images_per_identity
    records, zps, zss = [], [], []
    for ident in range(cfg.num_identities):
        z_p = _stream(cfg.seed, 1, ident).standard_normal(cfg.d_p)
        obs_rng = _stream(cfg.seed, 2, ident)
        cap_rng = _stream(cfg.seed, 3, ident)
        for j in range(n_img):
            z_s = obs_rng.standard_normal(cfg.d_s)
            obs = A @ np.concatenate([z_p, z_s]) + cfg.noise_sigma * obs_rng.standard_normal(cfg.obs_dim)
            caps = [" ".join(caption_tokens(z_p, cfg, cap_rng)) for _ in range(cfg.captions_per_image)]
            split = "test" if j >= n_img - cfg.test_per_identity else "train"
            records.append(AnnotationRecord(ident, caps, split, vector=obs.tolist()))
            zps.append(z_p)
            zss.append(z_s)
    return SyntheticData(records, np.array(zps), np.array(zss), A)


def save_factors(path, z_p, z_s):
    d_p, d_s = z_p.shape[1], z_s.shape[1]
    header = ["sample_id"] + [f"z_p{i}" for i in range(d_p)] + [f"z_s{i}" for i in range(d_s)]
    lines = ["\t".join(header)]
    for i, (a, b) in enumerate(zip(z_p, z_s)):
        lines.append("\t".join([str(i)] + [repr(float(v)) for v in a] + [repr(float(v)) for v in b]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_factors(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    d_p = sum(h.startswith("z_p") for h in header)
    rows = np.array([[float(v) for v in line.split("\t")[1:]] for line in lines[1:] if line])
    return rows[:, :d_p], rows[:, d_p:]


# --- model-ready dataset ------------------------------------------------------------


def load_image(path, size=(64, 32)):
    from PIL import Image  # optional dependency, raster inputs only

    with Image.open(path) as im:
        im = im.convert("RGB").resize((size[1], size[0]))
        return np.asarray(im, dtype=np.float32) / 255.0


@dataclass
class PairDataset:
    """Images, identity labels and tokenized captions for one split."""

    images: torch.Tensor
    labels: np.ndarray  # contiguous class index per image
    identities: np.ndarray  # original identity id per image
    captions: list  # per image: list of (token_ids, spans)
    by_label: dict = field(default_factory=dict)

    def __post_init__(self):
        groups = {}
        for i, lab in enumerate(self.labels):
            groups.setdefault(int(lab), []).append(i)
        self.by_label = groups

    @property
    def num_identities(self):
        return len(self.by_label)

    def __len__(self):
        return len(self.labels)


def encode_caption(text, vocab, stopwords, n_max=N_MAX):
    toks = tokenize(text)
    if not toks:
        raise ValidationError(f"caption {text!r} has no tokens")
    return vocab.encode(toks), extract_phrases(toks, stopwords, n_max)


def make_dataset(records, vocab, split=None, stopwords=None, n_max=N_MAX, label_map=None, image_size=(64, 32)):
    """Tokenize and tensorize records; ``label_map`` maps identity -> class."""
    if stopwords is None:
        stopwords = load_stopwords()
    chosen = [r for r in records if split is None or r.split == split]
    if not chosen:
        raise ValidationError(f"no records in split {split!r}")
    if label_map is None:
        label_map = {ident: i for i, ident in enumerate(sorted({r.identity for r in chosen}))}
    images = []
    for r in chosen:
        if r.vector is not None:
            images.append(np.asarray(r.vector, dtype=np.float64))
        else:
            images.append(load_image(r.img_path, image_size).astype(np.float64))
    caps = [[encode_caption(c, vocab, stopwords, n_max) for c in r.captions] for r in chosen]
    return PairDataset(
        torch.as_tensor(np.stack(images)),
        np.array([label_map.get(r.identity, -1) for r in chosen]),
        np.array([r.identity for r in chosen]),
        caps,
    )


def text_batch(items, n_max=N_MAX):
    return TextBatch.build([ids for ids, _ in items], [spans for _, spans in items], n_max)


# --- separation probe --------------------------------------------------------------


def ridge_fit(X, Y, reg=1e-3):
    """Centered ridge regression; returns ``(W, x_mean, y_mean)``."""
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    W = np.linalg.solve(Xc.T @ Xc + reg * np.eye(X.shape[1]), Xc.T @ Yc)
    return W, mx, my


def r2_score(Y, pred):
    """Mean over target dimensions of ``1 - SS_res / SS_tot``."""
    ss_res = ((Y - pred) ** 2).sum(0)
    ss_tot = ((Y - Y.mean(0)) ** 2).sum(0)
    return float(np.mean(1.0 - ss_res / ss_tot))


def probe_r2(X_fit, Y_fit, X_eval, Y_eval, reg=1e-3):
    if np.all(X_fit.std(0) < 1e-12):
        logger.warning("probe: constant features, reporting R^2 = 0")
        return 0.0
    W, mx, my = ridge_fit(X_fit, Y_fit, reg)
    return r2_score(Y_eval, (X_eval - mx) @ W + my)


@dataclass
class ProbeReport:
    r2_vp_zp: float
    r2_vp_zs: float
    r2_vs_zp: float
    r2_vs_zs: float

    @property
    def sep_score(self):
        return self.r2_vp_zp + self.r2_vs_zs - self.r2_vp_zs - self.r2_vs_zp

    def format(self):
        return (f"r2_vp_zp={self.r2_vp_zp:.6f} r2_vp_zs={self.r2_vp_zs:.6f} "
                f"r2_vs_zp={self.r2_vs_zp:.6f} r2_vs_zs={self.r2_vs_zs:.6f} sep_score={self.sep_score:.6f}")


def probe_features(v_p, v_s, z_p, z_s, reg=1e-3, seed=0):
    """Fit on one half of the samples, report R^2 on the other half."""
    n = len(v_p)
    order = np.random.default_rng(seed).permutation(n)
    fit, hold = order[: n // 2], order[n // 2 :]

    def r2(X, Y):
        return probe_r2(X[fit], Y[fit], X[hold], Y[hold], reg)

    return ProbeReport(r2(v_p, z_p), r2(v_p, z_s), r2(v_s, z_p), r2(v_s, z_s))


@torch.no_grad()
def probe_separation(model, records, z_p, z_s, reg=1e-3, seed=0):
    """Linear-probe report for ``V_P`` / ``V_S`` of ``model`` on ``records``."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        images = torch.as_tensor(np.array([r.vector for r in records]), dtype=dtype)
        feats = model.encode_images(images)
    finally:
        model.train(was_training)
    v_p = feats.v_p.double().numpy()
    v_s = feats.v_s.double().numpy() if feats.v_s is not None else np.zeros_like(v_p)
    return probe_features(v_p, v_s, np.asarray(z_p), np.asarray(z_s), reg, seed)
