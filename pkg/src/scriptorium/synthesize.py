"""Full-page style transfer by overlapping patches, and synthetic word export."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .corpus import PAD_VALUE, PATCH_SIZE, crop_word, load_documents, minmax_normalize
from .forge import ManifestRecord, RenderedPage, WordGT, write_manifest

log = logging.getLogger(__name__)

BLEND_MODES = ("uniform", "feather")


def tile_starts(length: int, size: int, overlap_frac: float) -> list[int]:
    """Tile offsets along one axis; the last tile is re-anchored flush to the border."""
    if not 0 <= overlap_frac < 1:
        raise ValueError(f"overlap_frac must lie in [0, 1), got {overlap_frac}")
    if length <= size:
        return [0]
    stride = max(1, int(size * (1 - overlap_frac)))
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] + size < length:
        starts.append(length - size)
    return starts


def tile_window(size: int, blend: str) -> torch.Tensor:
    if blend == "uniform":
        return torch.ones(size, size)
    if blend == "feather":
        # tent profile, strictly positive so every covered pixel keeps weight
        ramp = torch.minimum(torch.arange(1, size + 1), torch.arange(size, 0, -1)).float()
        return torch.outer(ramp, ramp)
    raise ValueError(f"blend must be one of {BLEND_MODES}, got {blend!r}")


def weight_map(height: int, width: int, size: int = PATCH_SIZE, overlap_frac: float = 0.10,
               blend: str = "uniform") -> torch.Tensor:
    """Per-pixel sum of tile weights; with uniform blending, the number of covering tiles."""
    win = tile_window(size, blend)
    acc = torch.zeros(max(height, size), max(width, size))
    for t in tile_starts(height, size, overlap_frac):
        for l in tile_starts(width, size, overlap_frac):
            acc[t:t + size, l:l + size] += win
    return acc[:height, :width]


def page_tensor(page) -> torch.Tensor:
    """Normalized (3, H, W) tensor from a RenderedPage, uint8 array or tensor."""
    if isinstance(page, RenderedPage):
        page = page.image
    if isinstance(page, torch.Tensor):
        x = page.to(torch.float32)
        return x.expand(3, *x.shape[-2:]) if x.dim() == 2 or x.shape[0] == 1 else x
    arr = np.asarray(page)
    x = torch.from_numpy(minmax_normalize(arr).astype(np.float32))
    if x.dim() == 2:
        return x.expand(3, *x.shape).clone()
    return x.permute(2, 0, 1).contiguous()


@torch.no_grad()
def synthesize_page(G, page, overlap_frac: float = 0.10, patch_size: int = PATCH_SIZE,
                    blend: str = "uniform", batch: int = 4) -> torch.Tensor:
    """Translate a whole page by tiling it with overlapping patches.

    Each output pixel is the (optionally feather-weighted) mean of all tile
    outputs covering it. Pages smaller than a patch are padded with background
    and cropped back.
    """
    x = page_tensor(page)
    C, H, W = x.shape
    if H < patch_size or W < patch_size:
        x = F.pad(x, (0, max(0, patch_size - W), 0, max(0, patch_size - H)), value=PAD_VALUE)
    _, Hp, Wp = x.shape
    win = tile_window(patch_size, blend)
    acc = torch.zeros_like(x)
    norm = torch.zeros(Hp, Wp)
    coords = [(t, l) for t in tile_starts(Hp, patch_size, overlap_frac) for l in tile_starts(Wp, patch_size, overlap_frac)]
    was_training = getattr(G, "training", False)
    if hasattr(G, "eval"):
        G.eval()
    try:
        for i in range(0, len(coords), batch):
            chunk = coords[i:i + batch]
            tiles = torch.stack([x[:, t:t + patch_size, l:l + patch_size] for t, l in chunk])
            out = G(tiles)
            for (t, l), o in zip(chunk, out):
                acc[:, t:t + patch_size, l:l + patch_size] += o * win
                norm[t:t + patch_size, l:l + patch_size] += win
    finally:
        if was_training:
            G.train()
    return (acc / norm)[:, :H, :W]


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """Grey uint8 array from a (C, H, W) tensor in [0, 1]."""
    g = image.mean(dim=0) if image.dim() == 3 else image
    return (g.clamp(0, 1) * 255).round().to(torch.uint8).numpy()


@dataclass
class ExportResult:
    manifest: Path
    n_words: int
    duplicates: int


def export_word_dataset(G, source_manifest, n_words: int = 70000, seed: int = 0, out_dir=".",
                        overlap_frac: float = 0.10, patch_size: int = PATCH_SIZE) -> ExportResult:
    """Style the pages of a labeled corpus and cut out word crops with transcripts.

    Words are drawn uniformly over all non-initial words of the corpus, without
    replacement unless more are requested than exist. Each crop is written as a
    128x32 image; its record keeps the originating page, word order and box.
    """
    if n_words < 0:
        raise ValueError("n_words must be non-negative")
    out = Path(out_dir)
    (out / "words").mkdir(parents=True, exist_ok=True)
    docs = load_documents(source_manifest, "source")
    pool = [(d, w) for d, doc in enumerate(docs) for w in doc.words if not w.drop_cap]
    if n_words and not pool:
        raise ValueError(f"{source_manifest}: no exportable words")
    rng = np.random.default_rng(seed)
    replace = n_words > len(pool)
    picks = rng.choice(len(pool), size=n_words, replace=replace) if n_words else np.array([], dtype=int)
    duplicates = n_words - len(set(picks.tolist()))
    if duplicates:
        log.warning("only %d distinct words for %d requested; %d duplicates", len(pool), n_words, duplicates)

    records: list[Optional[ManifestRecord]] = [None] * n_words
    by_page: dict[int, list[int]] = {}
    for i, k in enumerate(picks.tolist()):
        by_page.setdefault(pool[k][0], []).append(i)
    for d in sorted(by_page):
        styled = synthesize_page(G, docs[d].image, overlap_frac, patch_size)
        for i in by_page[d]:
            word = pool[picks[i]][1]
            crop = crop_word(styled, word)
            rel = f"words/word_{i:06d}.png"
            Image.fromarray(to_uint8(crop.image), mode="L").save(out / rel)
            h, w = crop.image.shape[1:]
            records[i] = ManifestRecord(
                rel, w, h, [WordGT(word.text, (0, 0, w, h), 0, 0)],
                {"source": {"page": docs[d].page_id, "order": word.order_index, "bbox": list(word.bbox)}})
    return ExportResult(write_manifest(out / "manifest.jsonl", records), n_words, duplicates)
