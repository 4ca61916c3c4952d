"""Joint optimization of the two generators, two discriminators and two recognizers.

Every step updates three optimizer groups in a fixed order: generators against
the full objective, discriminators against their least-squares terms on
detached fakes, recognizers against the reading terms on detached crops.
Per-epoch random streams are derived from ``(seed, epoch)`` so a run resumed
from any epoch checkpoint continues exactly as the uninterrupted one.
"""

from __future__ import annotations

import csv
import logging
import math
import queue
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .checkpoint import read_archive, restore_bundle, save_checkpoint
from .corpus import PatchSample, add_gaussian_noise, load_documents, random_patch, stack_crops, word_crops
from .ctc import Alphabet, ctc_loss_torch
from .losses import (
    LossReport, LossWeights, combine, discriminator_adversarial, generator_adversarial, l1, reading_terms,
)
from .nets import ModelBundle, NetConfig, build_bundle

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "lr", "adv_g", "adv_f", "disc_x", "disc_y", "cyc", "id",
                  "read", "read_rec", "total", "words_seen", "skipped_inf")
QUEUE_CAPACITY = 8


@dataclass
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: Optional[int] = None  # None: one step per source page
    lr0: float = 2e-4
    decay_start_epoch: int = 100
    weight_decay: float = 5e-5
    betas: tuple = (0.5, 0.999)
    batch_size: int = 1
    noise_sigma: float = 0.05
    noise_on_fake: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    patch_size: int = 256
    nets: NetConfig = field(default_factory=NetConfig)
    train_recognizers: bool = True
    recognizer_pretrain_steps: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.nets, dict):
            self.nets = NetConfig(**self.nets)
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.decay_start_epoch < self.epochs:
            raise ValueError("decay_start_epoch must lie in [0, epochs)")
        if self.batch_size != 1:
            raise ValueError("batch_size must be 1: word counts vary per patch")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if self.lr0 <= 0 or self.weight_decay < 0 or self.noise_sigma < 0:
            raise ValueError("lr0 must be positive; weight_decay and noise_sigma non-negative")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.patch_size % 4:
            raise ValueError("patch_size must be divisible by 4")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Constant ``lr0`` before ``decay_start_epoch``, then linear to 0 at ``epochs``."""
    if not 0 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    if epoch < config.decay_start_epoch:
        return config.lr0
    # fraction first so grid points come out exact
    frac = (config.epochs - epoch) / (config.epochs - config.decay_start_epoch)
    return config.lr0 * frac


@dataclass
class Optimizers:
    gen: torch.optim.Adam
    disc: torch.optim.Adam
    rec: torch.optim.Adam

    def all(self):
        return (self.gen, self.disc, self.rec)

    def set_lr(self, lr: float):
        for opt in self.all():
            for g in opt.param_groups:
                g["lr"] = lr

    def state_dict(self) -> dict:
        return {"gen": self.gen.state_dict(), "disc": self.disc.state_dict(), "rec": self.rec.state_dict()}

    def load_state_dict(self, state: dict):
        self.gen.load_state_dict(state["gen"])
        self.disc.load_state_dict(state["disc"])
        self.rec.load_state_dict(state["rec"])


def make_optimizers(bundle: ModelBundle, config: TrainConfig) -> Optimizers:
    def adam(*nets):
        params = [p for n in nets for p in n.parameters()]
        return torch.optim.Adam(params, lr=config.lr0, betas=config.betas, weight_decay=config.weight_decay)
    return Optimizers(adam(bundle.G, bundle.F), adam(bundle.D_x, bundle.D_y), adam(bundle.T, bundle.T_prime))


@contextmanager
def frozen(*nets):
    """Temporarily stop parameter gradients of ``nets``."""
    saved = [(p, p.requires_grad) for n in nets for p in n.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def _scalar(t: torch.Tensor) -> float:
    return float(t.detach())


def _finite(t: torch.Tensor) -> bool:
    return bool(torch.isfinite(t).all())


def generator_pass(bundle: ModelBundle, x_sample: PatchSample, y_patch: torch.Tensor, config: TrainConfig,
                   rng: Optional[torch.Generator]):
    """Forward pass of the full generator objective; returns ``(total, parts, cache)``."""
    b, w = bundle, config.weights
    x = x_sample.image[None]
    y = y_patch[None] if y_patch.dim() == 3 else y_patch
    fake_y = b.G(x)
    noisy_y = add_gaussian_noise(fake_y, config.noise_sigma, rng)
    rec_x = b.F(noisy_y)
    fake_x = b.F(y)
    rec_y = b.G(fake_x)
    zero = x.new_zeros(())
    parts = {
        "adv_g": generator_adversarial(b.D_y, fake_y),
        "adv_f": generator_adversarial(b.D_x, fake_x),
        "cyc": l1(rec_x, x) + l1(rec_y, y),
        "id": l1(b.G(y), y) + l1(b.F(x), x) if w.lambda_id > 0 else zero,
    }
    read_input = noisy_y if config.noise_on_fake else fake_y
    read, read_rec, seen, n_inf = reading_terms(b.T, b.T_prime, read_input, rec_x,
                                                x_sample.contained_words, b.alphabet)
    parts["read"], parts["read_recovered"] = read, read_rec
    total = combine(parts, w)
    cache = {"x": x, "y": y, "fake_y": fake_y, "fake_x": fake_x, "read_input": read_input, "rec_x": rec_x,
             "words_seen": seen, "skipped_inf": n_inf}
    return total, parts, cache


def train_step(bundle: ModelBundle, x_sample: PatchSample, y_patch: torch.Tensor, config: TrainConfig,
               rng: Optional[torch.Generator], optimizers: Optimizers) -> LossReport:
    """One update of generators, then discriminators, then recognizers.

    A non-finite generator objective skips the whole step (no parameter moves)
    and is reported with ``skipped=True``.
    """
    b = bundle
    b.train()
    with frozen(b.D_x, b.D_y, b.T, b.T_prime):
        total, parts, c = generator_pass(b, x_sample, y_patch, config, rng)
    report = LossReport(**{k: _scalar(v) for k, v in parts.items()}, total=_scalar(total),
                        words_seen=c["words_seen"], skipped_inf=c["skipped_inf"])
    if not _finite(total):
        log.warning("non-finite generator objective %r; step skipped", report.total)
        report.skipped = True
        return report

    for opt in optimizers.all():
        opt.zero_grad(set_to_none=True)
    total.backward()
    optimizers.gen.step()

    with frozen(b.G, b.F):
        disc_y = discriminator_adversarial(b.D_y, c["y"], c["fake_y"])
        disc_x = discriminator_adversarial(b.D_x, c["x"], c["fake_x"])
    report.disc_x, report.disc_y = _scalar(disc_x), _scalar(disc_y)
    optimizers.disc.zero_grad(set_to_none=True)
    (disc_x + disc_y).backward()
    optimizers.disc.step()

    if config.train_recognizers and c["words_seen"] > c["skipped_inf"]:
        read, read_rec, _, _ = reading_terms(b.T, b.T_prime, c["read_input"].detach(), c["rec_x"].detach(),
                                             x_sample.contained_words, b.alphabet)
        loss = read + read_rec
        if _finite(loss) and loss.requires_grad:
            optimizers.rec.zero_grad(set_to_none=True)
            loss.backward()
            optimizers.rec.step()
    return report


def epoch_streams(seed: int, epoch: int) -> tuple[np.random.Generator, torch.Generator]:
    """Patch-sampling and noise generators for one epoch."""
    rng = np.random.default_rng([seed, epoch])
    noise = torch.Generator().manual_seed(int(np.random.default_rng([seed, epoch, 1]).integers(2 ** 62)))
    return rng, noise


def sample_pairs(sources, targets, steps: int, size: int, rng: np.random.Generator) -> Iterator:
    """Draw ``steps`` (labeled source patch, target patch) pairs from one stream."""
    for _ in range(steps):
        src = sources[int(rng.integers(len(sources)))]
        tgt = targets[int(rng.integers(len(targets)))]
        x = random_patch(src, size, rng)
        y = random_patch(tgt, size, rng)
        yield x, y.image


def prefetch(items: Iterator, capacity: int = QUEUE_CAPACITY) -> Iterator:
    """Run ``items`` on a producer thread through a bounded queue, preserving order."""
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for item in items:
                if stop.is_set():
                    return
                q.put(item)
            q.put(done)
        except BaseException as exc:  # handed to the consumer
            q.put(exc)

    thread = threading.Thread(target=produce, daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while thread.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                thread.join(timeout=0.05)


def pretrain_recognizers(bundle: ModelBundle, docs, steps: int, config: TrainConfig, batch: int = 8):
    """Optional warm start of T and T' on clean source-domain crops."""
    crops = [c for d in docs for c in word_crops(d)]
    if not crops or steps <= 0:
        return
    rng = np.random.default_rng([config.seed, 2 ** 20])
    opt = torch.optim.Adam(list(bundle.T.parameters()) + list(bundle.T_prime.parameters()),
                           lr=config.lr0, betas=config.betas, weight_decay=config.weight_decay)
    bundle.T.train()
    bundle.T_prime.train()
    for _ in range(steps):
        idx = rng.integers(len(crops), size=min(batch, len(crops)))
        chosen = [crops[i] for i in idx]
        images = stack_crops(chosen)
        targets = [bundle.alphabet.encode(c.text) for c in chosen]
        loss = sum(ctc_loss_torch(net(images), targets).clamp(max=1e6).mean() for net in (bundle.T, bundle.T_prime))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()


def corpus_alphabet(docs) -> Alphabet:
    return Alphabet.from_texts(w.text for d in docs for w in d.words)


def _read_metrics(path: Path, before_epoch: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [r for r in csv.DictReader(fh) if int(r["epoch"]) < before_epoch]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


@dataclass
class FitResult:
    checkpoint: Path
    metrics: Path
    steps: int
    skipped: int


def fit(source_manifest, target_manifest, config: TrainConfig, out_dir, resume=None,
        bundle: Optional[ModelBundle] = None) -> FitResult:
    """Train for ``config.epochs`` epochs, checkpointing after each one.

    ``resume`` names a checkpoint written by a previous call with the same
    config; training restarts at the following epoch and rewrites the
    metrics file up to that point (taken from ``out_dir`` or, failing that,
    the checkpoint's directory).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = load_documents(source_manifest, "source")
    targets = load_documents(target_manifest, "target")
    if not targets:
        raise ValueError(f"{target_manifest}: no pages")
    steps = config.steps_per_epoch or len(sources)

    start_epoch = 0
    if resume is not None:
        archive = read_archive(resume, "bundle")
        bundle = restore_bundle(archive)
        extra = archive.payload["extra"]
        if extra.get("config") != config.to_dict():
            raise ValueError(f"{resume}: checkpoint was written under a different training config")
        optimizers = make_optimizers(bundle, config)
        optimizers.load_state_dict(extra["optimizers"])
        start_epoch = int(extra["epoch"])
    else:
        if bundle is None:
            bundle = build_bundle(corpus_alphabet(sources), config.nets, config.seed)
        optimizers = make_optimizers(bundle, config)
        if config.recognizer_pretrain_steps:
            pretrain_recognizers(bundle, sources, config.recognizer_pretrain_steps, config)

    metrics_path = out / "metrics.csv"
    rows = []
    if resume is not None:
        # earlier rows live beside the checkpoint when resuming into a new directory
        prior = metrics_path if metrics_path.exists() else Path(resume).parent / "metrics.csv"
        rows = _read_metrics(prior, start_epoch)
    ckpt = Path(resume) if resume is not None else None
    skipped = 0
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow([r[k] for k in METRIC_COLUMNS])
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(config, epoch)
            optimizers.set_lr(lr)
            rng, noise = epoch_streams(config.seed, epoch)
            pairs = prefetch(sample_pairs(sources, targets, steps, config.patch_size, rng))
            for i, (x, y) in enumerate(pairs):
                rep = train_step(bundle, x, y, config, noise, optimizers)
                skipped += rep.skipped
                step = epoch * steps + i + 1
                writer.writerow([_fmt(v) for v in (step, epoch, lr, rep.adv_g, rep.adv_f, rep.disc_x, rep.disc_y,
                                                   rep.cyc, rep.id, rep.read, rep.read_recovered, rep.total,
                                                   rep.words_seen, rep.skipped_inf)])
            fh.flush()
            ckpt = save_checkpoint(bundle, out / f"epoch_{epoch + 1:04d}.ckpt", {
                "epoch": epoch + 1, "config": config.to_dict(), "optimizers": optimizers.state_dict()})
            log.info("epoch %d done, lr %.3g, checkpoint %s", epoch + 1, lr, ckpt)
    return FitResult(ckpt, metrics_path, (config.epochs - start_epoch) * steps, skipped)


def metrics_finite(path) -> bool:
    with open(path, newline="") as fh:
        return all(math.isfinite(float(r[k])) for r in csv.DictReader(fh) for k in METRIC_COLUMNS)
