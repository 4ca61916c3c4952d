"""Downstream evaluation: recognizers pretrained on synthetic words, fine-tuned on
labeled subsets, scored by CER/WER on a fixed held-out test split."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_recognizer, save_recognizer
from .corpus import WordCrop, load_word_crops, stack_crops
from .ctc import Alphabet, MetricPair, best_path, cer_wer, ctc_loss_torch
from .nets import TextRecognizer

log = logging.getLogger(__name__)

SUBSET_GRID = (0.1, 0.2, 0.5, 1.0)
MODEL_TAGS = ("syn", "base", "ext")
SPLITS = ("validation", "test")
REPORT_COLUMNS = ("model_tag", "subset_frac", "seed", "split", "cer", "wer", "ref_chars", "ref_words")


@dataclass
class RecognizerConfig:
    width: int = 16
    hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    max_steps: Optional[int] = None
    patience: int = 5
    weight_decay: float = 0.0
    split_seed: int = 0
    split_fracs: tuple = (0.7, 0.15, 0.15)  # train, validation, test

    def __post_init__(self):
        self.split_fracs = tuple(self.split_fracs)
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")
        if len(self.split_fracs) != 3 or not math.isclose(sum(self.split_fracs), 1.0):
            raise ValueError("split_fracs must be three fractions summing to 1")


@dataclass
class EvalRecord:
    model_tag: str
    subset_frac: float
    split: str
    metrics: MetricPair
    seed: int

    def __post_init__(self):
        if self.model_tag not in MODEL_TAGS:
            raise ValueError(f"model_tag must be one of {MODEL_TAGS}, got {self.model_tag!r}")
        if self.subset_frac not in SUBSET_GRID:
            raise ValueError(f"subset_frac must be one of {SUBSET_GRID}, got {self.subset_frac}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")


class Patience:
    """Early stopping on a value to minimize; ``update`` returns True when it is time to stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class Splits:
    train: list
    validation: list
    test: list


def word_identity(crop: WordCrop):
    return (crop.source.get("page"), crop.source.get("order"))


def split_crops(crops: Sequence[WordCrop], fracs=(0.7, 0.15, 0.15), seed: int = 0) -> Splits:
    """Seeded shuffle cut into train/validation/test, disjoint by word identity."""
    ids = sorted({word_identity(c) for c in crops}, key=repr)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_val = int(len(ids) * fracs[1])
    n_test = int(len(ids) * fracs[2])
    bucket = {}
    for rank, k in enumerate(order):
        bucket[ids[k]] = "test" if rank < n_test else "validation" if rank < n_test + n_val else "train"
    out = Splits([], [], [])
    for c in crops:
        getattr(out, bucket[word_identity(c)]).append(c)
    check_disjoint(out)
    return out


def check_disjoint(splits: Splits):
    sets = [{word_identity(c) for c in getattr(splits, s)} for s in ("train", "validation", "test")]
    if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
        raise AssertionError("train/validation/test splits share words")


def subset_size(n: int, frac: float) -> int:
    return max(1, math.floor(n * frac)) if n else 0


def draw_subset(crops: Sequence[WordCrop], frac: float, seed: int) -> list:
    k = subset_size(len(crops), frac)
    idx = np.random.default_rng(seed).choice(len(crops), size=k, replace=False)
    return [crops[i] for i in sorted(idx.tolist())]


@torch.no_grad()
def transcribe(net: TextRecognizer, alphabet: Alphabet, crops: Sequence[WordCrop], batch: int = 64) -> list[str]:
    was = net.training
    net.eval()
    out = []
    for i in range(0, len(crops), batch):
        logits = net(stack_crops(crops[i:i + batch]))
        out.extend(alphabet.decode(best_path(l.numpy())) for l in logits)
    net.train(was)
    return out


def evaluate(net: TextRecognizer, alphabet: Alphabet, crops: Sequence[WordCrop]) -> MetricPair:
    return cer_wer([c.text for c in crops], transcribe(net, alphabet, crops))


@dataclass
class TrainLog:
    steps: int = 0
    epochs: int = 0
    best_val_cer: float = math.inf
    val_cer: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)


def train_recognizer(net: TextRecognizer, alphabet: Alphabet, train: Sequence[WordCrop],
                     validation: Sequence[WordCrop], config: RecognizerConfig, seed: int,
                     target_cer: Optional[float] = None) -> TrainLog:
    """Minibatch CTC training; keeps the weights with the best validation CER.

    Stops on patience, ``max_epochs``, ``max_steps``, or once validation CER
    reaches ``target_cer``. With no validation crops the training set is used.
    """
    if not train:
        raise ValueError("no training crops")
    validation = validation or train
    rng = np.random.default_rng([seed, 7])
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    targets = [alphabet.encode(c.text) for c in train]
    images = stack_crops(train)
    stop = Patience(config.patience)
    best = copy.deepcopy(net.state_dict())
    tl = TrainLog()
    for epoch in range(config.max_epochs):
        net.train()
        order = rng.permutation(len(train))
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            losses = ctc_loss_torch(net(images[idx]), [targets[j] for j in idx])
            finite = torch.isfinite(losses)
            if not finite.any():
                continue
            loss = losses[finite].mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tl.steps += 1
            tl.train_loss.append(float(loss.detach()))
            if config.max_steps is not None and tl.steps >= config.max_steps:
                break
        tl.epochs = epoch + 1
        cer = evaluate(net, alphabet, validation).cer
        tl.val_cer.append(cer)
        if cer < tl.best_val_cer:
            tl.best_val_cer = cer
            best = copy.deepcopy(net.state_dict())
        if stop.update(cer) or (target_cer is not None and cer <= target_cer):
            break
        if config.max_steps is not None and tl.steps >= config.max_steps:
            break
    net.load_state_dict(best)
    return tl


def pretrain_recognizer(word_manifest, config: RecognizerConfig, out_path, seed: int = 0) -> Path:
    """Train a fresh recognizer on a word manifest and save the best-by-validation model."""
    crops = load_word_crops(word_manifest)
    if not crops:
        raise ValueError(f"{word_manifest}: empty word manifest")
    alphabet = Alphabet.from_texts(c.text for c in crops)
    splits = split_crops(crops, (0.9, 0.1, 0.0), config.split_seed)
    torch.manual_seed(seed)
    net = TextRecognizer(len(alphabet), config.width, config.hidden)
    tl = train_recognizer(net, alphabet, splits.train, splits.validation, config, seed)
    log.info("pretrained on %d words: best validation CER %.4f after %d epochs",
             len(splits.train), tl.best_val_cer, tl.epochs)
    return save_recognizer(net, alphabet, out_path, {"val_cer": tl.best_val_cer, "epochs": tl.epochs,
                                                     "words": len(crops)})


def finetune_and_eval(base_ckpt, labeled_manifest, subset_frac: float, seed: int,
                      config: Optional[RecognizerConfig] = None, model_tag: Optional[str] = None,
                      crops: Optional[Sequence[WordCrop]] = None) -> EvalRecord:
    """Fine-tune (or train from scratch when ``base_ckpt`` is None) on a seeded
    subset of the labeled train split; score on the fixed test split."""
    config = config or RecognizerConfig()
    if subset_frac not in SUBSET_GRID:
        raise ValueError(f"subset_frac must be one of {SUBSET_GRID}")
    crops = list(crops) if crops is not None else load_word_crops(labeled_manifest)
    splits = split_crops(crops, config.split_fracs, config.split_seed)
    if not splits.train or not splits.test:
        raise ValueError(f"{labeled_manifest}: too few words for a train/test split")
    subset = draw_subset(splits.train, subset_frac, seed)
    texts = [c.text for c in subset]
    torch.manual_seed(seed)
    if base_ckpt is None:
        model_tag = model_tag or "base"
        alphabet = Alphabet.from_texts(texts)
        net = TextRecognizer(len(alphabet), config.width, config.hidden)
    else:
        model_tag = model_tag or "syn"
        net, alphabet, _ = load_recognizer(base_ckpt)
        grown = alphabet.extended(texts)
        if len(grown) > len(alphabet):
            log.info("extending output layer by %d symbols: %s", len(grown) - len(alphabet),
                     "".join(grown.symbols[len(alphabet):]))
            net.extend_classes(len(grown), torch.Generator().manual_seed(seed))
            alphabet = grown
    train_recognizer(net, alphabet, subset, splits.validation, config, seed)
    return EvalRecord(model_tag, subset_frac, "test", evaluate(net, alphabet, splits.test), seed)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_report_csv(records: Sequence[EvalRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in records:
            m = r.metrics
            w.writerow([_fmt(v) for v in (r.model_tag, r.subset_frac, r.seed, r.split, m.cer, m.wer,
                                          m.ref_chars, m.ref_words)])
    return path


def read_report_csv(path) -> list[EvalRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cer, wer = float(row["cer"]), float(row["wer"])
            rc, rw = int(row["ref_chars"]), int(row["ref_words"])
            m = MetricPair(cer, wer, round(cer * rc), round(wer * rw), rc, rw)
            out.append(EvalRecord(row["model_tag"], float(row["subset_frac"]), row["split"], m, int(row["seed"])))
    return out


def plot_metric(records: Sequence[EvalRecord], metric: str, path) -> int:
    """Median-over-seeds line chart against subset size; returns the series count."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    tags = [t for t in MODEL_TAGS if any(r.model_tag == t for r in records)]
    for tag in tags:
        fracs = sorted({r.subset_frac for r in records if r.model_tag == tag})
        ys = [median(getattr(r.metrics, metric) for r in records if r.model_tag == tag and r.subset_frac == f)
              for f in fracs]
        ax.plot([100 * f for f in fracs], ys, marker="o", label=tag)
    ax.set_xlabel("labeled training words used (%)")
    ax.set_ylabel(metric.upper())
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    n = len(ax.get_lines())
    plt.close(fig)
    return n


def report(records: Sequence[EvalRecord], out_dir) -> dict:
    if not records:
        raise ValueError("report needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_report_csv(records, out / "report.csv")
    series = {m: plot_metric(records, m, out / f"{m}.png") for m in ("cer", "wer")}
    return {"csv": csv_path, "plots": [out / "cer.png", out / "wer.png"], "series": series}


def run_grid(labeled_manifest, pretrained: dict, subsets: Sequence[float], seeds: Sequence[int],
             config: Optional[RecognizerConfig] = None) -> list[EvalRecord]:
    """Evaluate every (model tag, subset, seed) cell.

    ``pretrained`` maps model tags to recognizer checkpoints; the ``base`` tag
    (random initialization) is always included.
    """
    config = config or RecognizerConfig()
    crops = load_word_crops(labeled_manifest)
    cells = {"base": None, **{t: p for t, p in pretrained.items() if t != "base"}}
    records = []
    for tag in MODEL_TAGS:
        if tag not in cells:
            continue
        for frac in subsets:
            for seed in seeds:
                rec = finetune_and_eval(cells[tag], labeled_manifest, frac, seed, config, tag, crops)
                log.info("%s frac=%.2f seed=%d: CER %.4f WER %.4f", tag, frac, seed, rec.metrics.cer, rec.metrics.wer)
                records.append(rec)
    return records
