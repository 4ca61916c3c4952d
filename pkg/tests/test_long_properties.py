"""Statistical properties that need minutes of training per seed.

Skipped unless SCRIPTORIUM_LONG=1 is set in the environment.
"""

import os
import statistics

import numpy as np
import pytest
import torch

from conftest import forge_pair, small_spec
from scriptorium.checkpoint import load_checkpoint
from scriptorium.corpus import load_documents, load_word_crops, random_patch
from scriptorium.evaluation import RecognizerConfig, finetune_and_eval
from scriptorium.forge import generate_corpus, sample_text_path
from scriptorium.nets import NetConfig
from scriptorium.trainer import TrainConfig, fit

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.environ.get("SCRIPTORIUM_LONG") != "1", reason="set SCRIPTORIUM_LONG=1 to run"),
]


def perturbation_sensitivity(bundle, probe, amplitude=0.01, seed=7):
    """Median per-patch L1 change of F(G(x) + d) against F(G(x)) for a +-amplitude sign pattern d."""
    bundle.train(False)
    with torch.no_grad():
        fx = bundle.G(probe)
        delta = amplitude * torch.sign(torch.randn(fx.shape, generator=torch.Generator().manual_seed(seed)))
        change = (bundle.F(fx + delta) - bundle.F(fx)).abs().mean(dim=(1, 2, 3))
    return float(change.median())


@pytest.mark.xfail(strict=False, reason="no hidden channel forms in 1000 tiny-model steps; see notes")
def test_noise_training_reduces_reconstruction_sensitivity(tmp_path, font_path, alt_font_path):
    src, tgt = forge_pair(tmp_path, font_path, alt_font_path, n_pages=10)
    docs = load_documents(src, "source")
    rng = np.random.default_rng(123)
    probe = torch.stack([random_patch(docs[i % len(docs)], 64, rng).image for i in range(16)])
    wins = 0
    for seed in range(3):
        sens = {}
        for sigma in (0.05, 0.0):
            cfg = TrainConfig(epochs=2, decay_start_epoch=1, steps_per_epoch=500, patch_size=64,
                              nets=NetConfig.tiny(), seed=seed, noise_sigma=sigma)
            res = fit(src, tgt, cfg, tmp_path / f"run_{seed}_{sigma}")
            sens[sigma] = perturbation_sensitivity(load_checkpoint(res.checkpoint), probe)
        wins += sens[0.05] < sens[0.0]
    assert wins >= 2


def test_base_cer_non_increasing_with_subset(tmp_path, alt_font_path):
    spec = small_spec(alt_font_path, ink_value=70, background_value=200)
    manifest = generate_corpus(spec, sample_text_path(), 8, 5, tmp_path)
    crops = load_word_crops(manifest)
    # patience must outlast the all-blank CTC plateau, which lasts several hundred steps
    cfg = RecognizerConfig(max_epochs=150, patience=40)
    medians = []
    for frac in (0.1, 0.2, 0.5, 1.0):
        cers = [finetune_and_eval(None, manifest, frac, s, cfg, crops=crops).metrics.cer for s in (1, 2, 3)]
        medians.append(statistics.median(cers))
    assert all(a >= b for a, b in zip(medians, medians[1:])), medians
