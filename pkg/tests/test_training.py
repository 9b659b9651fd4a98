import io

import numpy as np
import pytest
import torch

from dssl.config import RunConfig
from dssl.encoders import ValidationError
from dssl.losses import stage2_terms
from dssl.training import (
    Trainer,
    TrainingAborted,
    build_batch,
    build_model,
    epoch_batches,
    fit,
    stage_lr,
)
from conftest import tiny_run_config


def _cfg(vocab, **kw):
    return tiny_run_config(len(vocab), 12, **kw)


def test_build_batch_distinct_identities(tiny_datasets):
    train, _ = tiny_datasets
    b = build_batch(train, 8, np.random.default_rng(0))
    assert len(set(b.labels.tolist())) == 8
    assert b.images.shape == (8, 32) and b.text.tokens.shape[0] == 8
    assert all(train.labels[i] == lab for i, lab in zip(b.image_index, b.labels.tolist()))


def test_build_batch_replays_with_seed(tiny_datasets):
    train, _ = tiny_datasets
    a = build_batch(train, 6, np.random.default_rng(5))
    b = build_batch(train, 6, np.random.default_rng(5))
    assert np.array_equal(a.image_index, b.image_index)
    assert torch.equal(a.text.tokens, b.text.tokens)


def test_build_batch_full_permutation(tiny_datasets):
    train, _ = tiny_datasets
    b = build_batch(train, 12, np.random.default_rng(1))
    assert sorted(b.labels.tolist()) == list(range(12))


def test_build_batch_too_few_identities(tiny_datasets):
    train, _ = tiny_datasets
    with pytest.raises(ValidationError):
        build_batch(train, 13, np.random.default_rng(0))


def test_epoch_images_mode_visits_every_image_once(tiny_datasets):
    train, _ = tiny_datasets
    seen = []
    for b in epoch_batches(train, 5, np.random.default_rng(0), mode="images"):
        assert len(set(b.labels.tolist())) == len(b.labels)
        seen += b.image_index.tolist()
    assert sorted(seen) == list(range(len(train)))


def test_epoch_identities_mode(tiny_datasets):
    train, _ = tiny_datasets
    labels = []
    for b in epoch_batches(train, 5, np.random.default_rng(0), passes=2, mode="identities"):
        labels += b.labels.tolist()
    assert sorted(labels) == sorted(list(range(12)) * 2)


def test_stage2_lr_schedule():
    tc = RunConfig().train
    assert stage_lr(tc, 2, 0) == pytest.approx(2e-4)
    assert stage_lr(tc, 2, 9) == pytest.approx(2e-4)
    assert stage_lr(tc, 2, 10) == pytest.approx(2e-5)
    assert stage_lr(tc, 2, 20) == pytest.approx(2e-6)
    assert stage_lr(tc, 1, 7) == pytest.approx(1e-3)


def test_stage1_freezes_backbone(tiny_synth, tiny_datasets):
    _, _, vocab = tiny_synth
    train, _ = tiny_datasets
    cfg = _cfg(vocab)
    model = build_model(cfg)
    before = [p.detach().clone() for p in model.backbone_parameters()]
    head = model.visual.global_head.fc.weight.detach().clone()
    fit(model, train, cfg, stages=(1,))
    assert all(torch.equal(a, b) for a, b in zip(before, model.backbone_parameters()))
    assert not torch.equal(head, model.visual.global_head.fc.weight)
    assert all(p.requires_grad for p in model.parameters())


def test_stage2_terms_follow_flags(tiny_synth, tiny_datasets):
    _, _, vocab = tiny_synth
    train, _ = tiny_datasets
    cfg = _cfg(vocab, loss__align2=False, loss__align3=False, loss__mec=False)
    model = build_model(cfg)
    b = build_batch(train, 4, np.random.default_rng(0))
    f = model(b.images, b.text, b.labels, torch.Generator().manual_seed(0))
    terms = stage2_terms(f, model.id_head, cfg.loss)
    assert "align2" not in terms and "align3" not in terms and "mec" not in terms
    assert {"align1", "align4", "align5", "sdm", "id_vg", "id_tr"} <= set(terms)


def test_stage2_total_is_weighted_sum(tiny_synth, tiny_datasets):
    from dssl.losses import stage2_total

    _, _, vocab = tiny_synth
    train, _ = tiny_datasets
    cfg = _cfg(vocab, loss__w_mec=3.0, loss__w_align=0.5)
    model = build_model(cfg)
    b = build_batch(train, 4, np.random.default_rng(0))
    f = model(b.images, b.text, b.labels, torch.Generator().manual_seed(0))
    total, terms = stage2_total(f, model.id_head, cfg.loss)
    ref = sum(v * (3.0 if k == "mec" else 0.5 if k.startswith("align") else 1.0) for k, v in terms.items())
    assert float(total.detach()) == pytest.approx(float(ref.detach()), rel=1e-6)


def _train_log(train, vocab, seed):
    cfg = _cfg(vocab, seed=seed)
    buf = io.StringIO()
    fit(build_model(cfg), train, cfg, log=buf)
    return buf.getvalue()


def test_seeded_runs_reproduce_logs_bitwise(tiny_synth, tiny_datasets):
    _, _, vocab = tiny_synth
    train, _ = tiny_datasets
    a = _train_log(train, vocab, 4)
    assert a == _train_log(train, vocab, 4)
    assert a != _train_log(train, vocab, 5)
    assert a.startswith("# stage=1 epochs=2\n")
    assert "# stage=2 epochs=2" in a and "term=mec value=" in a


def test_stage2_touches_every_parameter(tiny_synth, tiny_datasets):
    _, _, vocab = tiny_synth
    train, _ = tiny_datasets
    cfg = _cfg(vocab)
    trainer = fit(build_model(cfg), train, cfg)
    assert trainer.untouched_parameters() == []


def test_nan_aborts_and_rolls_back(tiny_synth, tiny_datasets):
    _, _, vocab = tiny_synth
    train, _ = tiny_datasets
    cfg = _cfg(vocab, train__stage1_epochs=3)
    model = build_model(cfg)
    snapshot = {}

    def poison(trainer, stage, epoch):
        if epoch == 0:
            snapshot.update({k: v.clone() for k, v in model.state_dict().items()})
            with torch.no_grad():
                model.id_head.weight.fill_(float("nan"))

    with pytest.raises(TrainingAborted) as err:
        fit(model, train, cfg, stages=(1,), on_epoch_end=poison)
    assert err.value.stage == 1 and err.value.epoch == 1
    assert all(torch.equal(v, model.state_dict()[k]) for k, v in snapshot.items())


def test_losses_decrease(tiny_synth, tiny_datasets):
    _, _, vocab = tiny_synth
    train, _ = tiny_datasets
    cfg = _cfg(vocab, train__stage1_epochs=6, train__stage2_epochs=0)
    trainer = fit(build_model(cfg), train, cfg, stages=(1,))
    curve = trainer.history.curve("total", 1)
    assert curve[-1] < curve[0]


def test_trainer_rng_streams_are_seeded(tiny_synth, tiny_datasets):
    _, _, vocab = tiny_synth
    train, _ = tiny_datasets
    cfg = _cfg(vocab, seed=9)
    a, b = Trainer(build_model(cfg), train, cfg), Trainer(build_model(cfg), train, cfg)
    assert a.data_rng.integers(1 << 30) == b.data_rng.integers(1 << 30)
    assert torch.equal(torch.rand(3, generator=a.mask_rng), torch.rand(3, generator=b.mask_rng))
