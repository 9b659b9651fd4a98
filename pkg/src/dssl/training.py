"""Batch sampling and the two-stage optimization schedule."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .data import PairDataset, text_batch
from .encoders import TextBatch, ValidationError
from .losses import stage1_total, stage2_total
from .model import DSSL

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Non-finite loss; the model has been rolled back to the last good epoch."""

    def __init__(self, msg, stage, epoch):
        super().__init__(msg)
        self.stage = stage
        self.epoch = epoch


@dataclass
class Batch:
    images: torch.Tensor
    text: TextBatch
    labels: torch.Tensor
    image_index: np.ndarray


def build_batch(dataset: PairDataset, B, rng, identities=None, n_max=26, dtype=torch.float32, images=None):
    """One image and one of its captions for each of ``B`` distinct identities.

    Images are drawn uniformly per identity unless ``images`` fixes them.
    """
    if identities is None:
        if dataset.num_identities < B:
            raise ValidationError(f"build_batch: {dataset.num_identities} identities < batch size {B}")
        identities = rng.choice(sorted(dataset.by_label), size=B, replace=False)
    idx, items = [], []
    for n, lab in enumerate(identities):
        if images is None:
            members = dataset.by_label[int(lab)]
            i = members[int(rng.integers(len(members)))]
        else:
            i = int(images[n])
        caps = dataset.captions[i]
        idx.append(i)
        items.append(caps[int(rng.integers(len(caps)))])
    idx = np.asarray(idx)
    return Batch(
        dataset.images[idx].to(dtype),
        text_batch(items, n_max),
        torch.as_tensor(dataset.labels[idx], dtype=torch.long),
        idx,
    )


def epoch_batches(dataset: PairDataset, B, rng, passes=1, n_max=26, dtype=torch.float32, mode="identities"):
    """Batches of distinct identities covering one epoch.

    ``mode="identities"`` visits every identity once per pass. ``mode="images"``
    visits every image once: each identity's images are shuffled and round
    ``r`` batches the ``r``-th image of every identity that still has one.
    """
    labels = sorted(dataset.by_label)
    for _ in range(passes):
        if mode == "identities":
            rounds = [None]
        else:
            queues = {lab: rng.permutation(dataset.by_label[lab]).tolist() for lab in labels}
            rounds = range(max(len(q) for q in queues.values()))
        for r in rounds:
            pool = labels if r is None else [lab for lab in labels if r < len(queues[lab])]
            order = rng.permutation(pool)
            for start in range(0, len(order), B):
                chunk = order[start : start + B]
                if len(chunk) < 2:
                    continue
                images = None if r is None else [queues[int(lab)][r] for lab in chunk]
                yield build_batch(dataset, len(chunk), rng, chunk, n_max, dtype, images)


def stage_lr(cfg: TrainConfig, stage, epoch):
    """Learning rate for a 0-based epoch index within ``stage``."""
    if stage == 1:
        return cfg.stage1_lr
    return cfg.stage2_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class History:
    """Per-epoch mean of every loss term, plus the metrics-log lines."""

    epochs: list = field(default_factory=list)  # (stage, epoch, {term: mean})
    lines: list = field(default_factory=list)

    def curve(self, term, stage=None):
        return [t[term] for s, _, t in self.epochs if (stage is None or s == stage) and term in t]


class Trainer:
    def __init__(self, model: DSSL, dataset: PairDataset, cfg: RunConfig, log=None, on_epoch_end=None):
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.log = log
        self.on_epoch_end = on_epoch_end
        self.history = History()
        self.data_rng = np.random.default_rng([cfg.seed, 7])
        self.mask_rng = torch.Generator().manual_seed(cfg.seed + 1)
        self.global_epoch = 0
        self.optimizer = None
        self.touched = set()

    def _emit(self, line):
        self.history.lines.append(line)
        if self.log is not None:
            self.log.write(line + "\n")
            self.log.flush()

    def _params(self, stage):
        backbone = {id(p) for p in self.model.backbone_parameters()}
        named = [(n, p) for n, p in self.model.named_parameters() if stage == 2 or id(p) not in backbone]
        for p in self.model.backbone_parameters():
            p.requires_grad_(stage == 2)
        return named

    def run_stage(self, stage):
        tc = self.cfg.train
        epochs = tc.stage1_epochs if stage == 1 else tc.stage2_epochs
        named = self._params(stage)
        params = [p for _, p in named]
        self.optimizer = torch.optim.Adam(params, lr=stage_lr(tc, stage, 0), betas=(tc.beta1, tc.beta2), eps=tc.eps)
        self._emit(f"# stage={stage} epochs={epochs}")
        dtype = getattr(torch, tc.dtype)
        self.model.train()
        last_good = copy.deepcopy(self.model.state_dict())
        for epoch in range(epochs):
            lr = stage_lr(tc, stage, epoch)
            for group in self.optimizer.param_groups:
                group["lr"] = lr
            sums, count = {}, 0
            for batch in epoch_batches(self.dataset, tc.batch_size, self.data_rng, tc.passes_per_epoch,
                                       self.cfg.encoder.n_max, dtype, tc.epoch_mode):
                feats = self.model(batch.images, batch.text, batch.labels, self.mask_rng, stage=stage)
                if stage == 1:
                    total, terms = stage1_total(feats, self.model.id_head)
                else:
                    total, terms = stage2_total(feats, self.model.id_head, self.cfg.loss)
                if not torch.isfinite(total):
                    bad = [k for k, v in terms.items() if not torch.isfinite(v)]
                    self.model.load_state_dict(last_good)
                    raise TrainingAborted(
                        f"non-finite loss at stage {stage} epoch {epoch} (terms: {', '.join(bad) or 'total'})",
                        stage, epoch,
                    )
                self.optimizer.zero_grad(set_to_none=True)
                total.backward()
                if stage == 2:
                    for name, p in named:
                        if p.grad is not None and bool(p.grad.ne(0).any()):
                            self.touched.add(name)
                if tc.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
                self.optimizer.step()
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach())
                sums["total"] = sums.get("total", 0.0) + float(total.detach())
                count += 1
            means = {k: v / max(count, 1) for k, v in sums.items()}
            self.global_epoch += 1
            self.history.epochs.append((stage, epoch, means))
            for k, v in means.items():
                self._emit(f"epoch={self.global_epoch} term={k} value={v!r}")
            self._emit(f"epoch={self.global_epoch} term=lr value={lr!r}")
            last_good = copy.deepcopy(self.model.state_dict())
            if self.on_epoch_end is not None:
                self.on_epoch_end(self, stage, epoch)
        for p in self.model.backbone_parameters():
            p.requires_grad_(True)
        return self.model

    def untouched_parameters(self):
        """Stage-2 parameters that never received a nonzero gradient."""
        return sorted(n for n, _ in self.model.named_parameters() if n not in self.touched)


def train_stage1(model, dataset, cfg, **kw):
    return Trainer(model, dataset, cfg, **kw).run_stage(1)


def train_stage2(model, dataset, cfg, **kw):
    return Trainer(model, dataset, cfg, **kw).run_stage(2)


def build_model(cfg: RunConfig):
    torch.manual_seed(cfg.seed)
    model = DSSL(cfg)
    return model.to(getattr(torch, cfg.train.dtype))


def fit(model, dataset, cfg, stages=(1, 2), **kw):
    """Run the requested stages in order with one shared trainer."""
    trainer = Trainer(model, dataset, cfg, **kw)
    prev = torch.get_num_threads()
    torch.set_num_threads(cfg.train.num_threads)
    try:
        for stage in stages:
            trainer.run_stage(stage)
    finally:
        torch.set_num_threads(prev)
    return trainer
