"""The five loss terms and their weighted combination.

Adversarial terms use the least-squares form. The generator-side term is
evaluated through a detached copy of the discriminator parameters, and the
discriminator-side term on detached fakes, so each only produces gradients
for its own player.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import torch
from torch.func import functional_call

from .corpus import PatchSample, add_gaussian_noise, crop_word
from .ctc import Alphabet, ctc_loss_torch

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    lambda_read: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass
class LossReport:
    adv_g: float = 0.0
    adv_f: float = 0.0
    disc_x: float = 0.0
    disc_y: float = 0.0
    cyc: float = 0.0
    id: float = 0.0
    read: float = 0.0
    read_recovered: float = 0.0
    total: float = 0.0
    words_seen: int = 0
    skipped_inf: int = 0
    skipped: bool = False

    def terms(self) -> dict:
        return {k: getattr(self, k) for k in ("adv_g", "adv_f", "disc_x", "disc_y", "cyc", "id",
                                               "read", "read_recovered", "total")}

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.terms().values())


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def _batch(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.dim() == 3 else x


def identity_loss(G, F, x_patch, y_patch) -> torch.Tensor:
    """Each generator fed a sample of its own output domain should return it."""
    x, y = _batch(x_patch), _batch(y_patch)
    return l1(G(y), y) + l1(F(x), x)


def cycle_loss(G, F, x_patch, y_patch) -> torch.Tensor:
    x, y = _batch(x_patch), _batch(y_patch)
    return l1(F(G(x)), x) + l1(G(F(y)), y)


def frozen_call(net: torch.nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Run ``net`` with detached parameters: gradients reach ``x`` only."""
    params = {k: v.detach() for k, v in net.named_parameters()}
    return functional_call(net, params, (x,))


def generator_adversarial(D, fake: torch.Tensor) -> torch.Tensor:
    return ((frozen_call(D, _batch(fake)) - 1.0) ** 2).mean()


def discriminator_adversarial(D, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return ((D(_batch(real)) - 1.0) ** 2).mean() + (D(_batch(fake).detach()) ** 2).mean()


def adversarial_losses(D, real_patch, fake_patch):
    """Least-squares ``(gen_term, disc_term)`` averaged over the score map."""
    return generator_adversarial(D, fake_patch), discriminator_adversarial(D, real_patch, fake_patch)


def mean_finite(losses: torch.Tensor):
    """Mean over finite entries and the number of infinite ones dropped."""
    finite = torch.isfinite(losses)
    n_inf = int((~finite).sum())
    if not finite.any():
        return losses.new_zeros(()), n_inf
    return losses[finite].sum() / finite.sum(), n_inf


def word_ctc(recognizer, image: torch.Tensor, words: Sequence, alphabet: Alphabet):
    """Per-word CTC losses of ``recognizer`` reading the word boxes of ``image``."""
    crops = torch.stack([crop_word(image, w).image for w in words])
    logits = recognizer(crops)
    return ctc_loss_torch(logits, [alphabet.encode(w.text) for w in words])


def reading_terms(T, T_prime, fake_y: torch.Tensor, reconstruction: torch.Tensor,
                  words: Sequence, alphabet: Alphabet):
    """Reading and recovered reading loss for one patch.

    ``fake_y`` is the (noised) translation read by ``T``; ``reconstruction`` is
    its cycle back to the source domain read by ``T_prime``. Returns
    ``(read, read_recovered, words_seen, skipped_inf)``.
    """
    zero = fake_y.new_zeros(())
    if not words:
        return zero, zero, 0, 0
    fake_y = fake_y[0] if fake_y.dim() == 4 else fake_y
    reconstruction = reconstruction[0] if reconstruction.dim() == 4 else reconstruction
    read, inf_a = mean_finite(word_ctc(T, fake_y, words, alphabet))
    read_rec, inf_b = mean_finite(word_ctc(T_prime, reconstruction, words, alphabet))
    if inf_a or inf_b:
        log.info("excluded %d infinite CTC instances", inf_a + inf_b)
    return read, read_rec, len(words), inf_a + inf_b


def reading_loss(T, T_prime, sample: PatchSample, G, F, noise_sigma: float,
                 generator: Optional[torch.Generator], alphabet: Alphabet, noise_on_fake: bool = True):
    """Translate a labeled patch, cycle it back, and score both with the recognizers.

    Noise is added to ``G(x)`` before ``F`` sees it; ``noise_on_fake`` chooses
    whether ``T`` also reads the noised translation.
    """
    x = _batch(sample.image)
    fake = G(x)
    noisy = add_gaussian_noise(fake, noise_sigma, generator)
    rec = F(noisy)
    read, read_rec, seen, _ = reading_terms(T, T_prime, noisy if noise_on_fake else fake, rec,
                                            sample.contained_words, alphabet)
    return read, read_rec, seen


def combine(parts, weights: LossWeights):
    """Weighted generator objective; ``parts`` is a mapping or a LossReport."""
    if not isinstance(parts, dict):
        parts = parts.terms() if isinstance(parts, LossReport) else vars(parts)
    return (parts["adv_g"] + parts["adv_f"]
            + weights.lambda_cyc * parts["cyc"]
            + weights.lambda_id * parts["id"]
            + weights.lambda_read * (parts["read"] + parts["read_recovered"]))
