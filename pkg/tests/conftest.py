import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dssl.config import RunConfig  # noqa: E402
from dssl.data import build_vocab, generate_synthetic, make_dataset  # noqa: E402
from dssl.encoders import TextBatch  # noqa: E402


def small_config(p=8, k=3, vocab=20, classes=4, groups=2, obs_dim=12, **sections):
    cfg = RunConfig()
    cfg.encoder.p = p
    cfg.encoder.k = k
    cfg.encoder.obs_dim = obs_dim
    cfg.encoder.vocab_size = vocab
    cfg.encoder.norm_groups = groups
    cfg.loss.id_class_count = classes
    for key, value in sections.items():
        cfg.set(key.replace("__", "."), value)
    return cfg.validate()


def random_text(B, vocab, rng, n_phrases=3, length=7):
    seqs, spans = [], []
    for _ in range(B):
        seqs.append([int(t) for t in rng.integers(1, vocab, size=length)])
        cuts = sorted(rng.choice(np.arange(1, length), size=n_phrases - 1, replace=False).tolist())
        bounds = [0] + cuts + [length]
        spans.append([(bounds[i], bounds[i + 1]) for i in range(n_phrases)])
    return TextBatch.build(seqs, spans)


@pytest.fixture
def tiny_cfg():
    return small_config()


@pytest.fixture(scope="session")
def tiny_synth():
    cfg = RunConfig()
    cfg.synth.num_identities = 12
    cfg.synth.images_per_identity = 4
    cfg.synth.test_per_identity = 1
    cfg.synth.seed = 3
    syn = generate_synthetic(cfg.synth)
    vocab = build_vocab(syn.records)
    return cfg, syn, vocab


@pytest.fixture(scope="session")
def tiny_datasets(tiny_synth):
    cfg, syn, vocab = tiny_synth
    lm = {i: i for i in range(cfg.synth.num_identities)}
    train = make_dataset(syn.records, vocab, "train", label_map=lm)
    test = make_dataset(syn.records, vocab, "test", label_map=lm)
    return train, test


def tiny_run_config(vocab_size, classes, p=16, k=4, **overrides):
    cfg = RunConfig()
    cfg.encoder.p = p
    cfg.encoder.k = k
    cfg.encoder.vocab_size = vocab_size
    cfg.loss.id_class_count = classes
    cfg.train.batch_size = 4
    cfg.train.stage1_epochs = 2
    cfg.train.stage2_epochs = 2
    cfg.eval.k_list = (1, 2, 3)
    for key, value in overrides.items():
        cfg.set(key.replace("__", "."), value)
    return cfg.validate()


@pytest.fixture(autouse=True)
def _single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(prev)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
