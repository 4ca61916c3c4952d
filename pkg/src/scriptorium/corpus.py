"""Manifest loading, patch sampling, word cropping and noise injection."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .forge import WordGT, read_manifest, resolve_image

PATCH_SIZE = 256
CROP_HEIGHT = 32
CROP_WIDTH = 128
PAD_VALUE = 1.0


@dataclass
class DocumentSample:
    image: torch.Tensor  # (3, H, W) float32, min-max normalized
    words: list
    domain_tag: str  # "source" or "target"
    page_id: str = ""
    extra: dict = field(default_factory=dict)  # manifest fields beyond the page geometry

    @property
    def word_count(self) -> int:
        return len(self.words)


@dataclass
class PatchSample:
    image: torch.Tensor  # (3, S, S) in [0, 1]
    contained_words: list
    origin: tuple  # (page_id, x0, y0)


@dataclass
class WordCrop:
    image: torch.Tensor  # (1, 32, 128) in [0, 1]
    text: str
    source: dict = field(default_factory=dict)


def minmax_normalize(image):
    """Rescale intensities linearly onto [0, 1]; a constant image maps to zeros."""
    if isinstance(image, torch.Tensor):
        x = image.to(torch.float32)
        lo, hi = x.min(), x.max()
        if hi == lo:
            return torch.zeros_like(x)
        return (x - lo) / (hi - lo)
    x = np.asarray(image, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def load_image(path, channels: int = 3) -> torch.Tensor:
    """Read an image file as a normalized ``(channels, H, W)`` float tensor."""
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(minmax_normalize(arr).astype(np.float32))


def load_documents(manifest_path, domain_tag: str) -> list[DocumentSample]:
    if domain_tag not in ("source", "target"):
        raise ValueError(f"domain_tag must be 'source' or 'target', got {domain_tag!r}")
    docs = []
    for rec in read_manifest(manifest_path):
        path = resolve_image(manifest_path, rec)
        img = load_image(path)
        if img.shape[1:] != (rec.page_height, rec.page_width):
            raise ValueError(f"{path}: image size {tuple(img.shape[1:])} disagrees with manifest")
        docs.append(DocumentSample(img, list(rec.words), domain_tag, rec.image_path, dict(rec.extra)))
    if domain_tag == "source" and not any(d.words for d in docs):
        raise ValueError(f"{manifest_path}: source manifest carries no words")
    return docs


def sampler_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one sampler stream (e.g. one producer worker)."""
    return np.random.default_rng([seed, stream])


def _inside(word: WordGT, x0: int, y0: int, size: int) -> bool:
    x, y, w, h = word.bbox
    return x >= x0 and y >= y0 and x + w <= x0 + size and y + h <= y0 + size


def random_patch(doc: DocumentSample, size: int = PATCH_SIZE, rng: Optional[np.random.Generator] = None,
                 include_drop_caps: bool = False) -> PatchSample:
    """Uniformly placed square crop with the words it fully contains, rebased.

    Pages smaller than ``size`` are padded with background on the bottom/right.
    Drop-cap initials are left out of ``contained_words`` unless requested.
    """
    rng = rng if rng is not None else np.random.default_rng()
    img = doc.image
    _, H, W = img.shape
    if H < size or W < size:
        img = F.pad(img, (0, max(0, size - W), 0, max(0, size - H)), value=PAD_VALUE)
        _, H, W = img.shape
    y0 = int(rng.integers(0, H - size + 1))
    x0 = int(rng.integers(0, W - size + 1))
    words = []
    for w in doc.words:
        if w.drop_cap and not include_drop_caps:
            continue
        if _inside(w, x0, y0, size):
            x, y, bw, bh = w.bbox
            words.append(replace(w, bbox=(x - x0, y - y0, bw, bh)))
    return PatchSample(img[:, y0:y0 + size, x0:x0 + size].clone(), words, (doc.page_id, x0, y0))


def crop_word(image: torch.Tensor, word: WordGT) -> WordCrop:
    """Cut a word box out of ``image`` and fit it into a 1x32x128 crop.

    Channels are averaged, the crop is resampled with its aspect ratio kept and
    the short side is padded symmetrically with background (1.0). Differentiable
    with respect to ``image``.
    """
    x, y, w, h = word.bbox
    if w <= 0 or h <= 0:
        raise ValueError(f"word {word.text!r} has an empty box {word.bbox}")
    _, H, W = image.shape
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"box {word.bbox} of {word.text!r} exceeds image {W}x{H}")
    region = image[:, y:y + h, x:x + w].mean(dim=0, keepdim=True)
    scale = min(CROP_WIDTH / w, CROP_HEIGHT / h)
    nw = min(CROP_WIDTH, max(1, round(w * scale)))
    nh = min(CROP_HEIGHT, max(1, round(h * scale)))
    if (nh, nw) != (h, w):
        if scale < 1:
            region = F.interpolate(region[None], size=(nh, nw), mode="area")[0]
        else:
            region = F.interpolate(region[None], size=(nh, nw), mode="bilinear", align_corners=False)[0]
    pw, ph = CROP_WIDTH - nw, CROP_HEIGHT - nh
    if pw or ph:
        region = F.pad(region, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), value=PAD_VALUE)
    return WordCrop(region.clamp(0.0, 1.0), word.text)


def add_gaussian_noise(image: torch.Tensor, sigma: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """``clamp(image + N(0, sigma^2), 0, 1)`` with i.i.d. noise drawn from ``generator``."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return image
    noise = torch.randn(image.shape, generator=generator, dtype=image.dtype) * sigma
    return (image + noise).clamp(0.0, 1.0)


def word_crops(doc: DocumentSample, include_drop_caps: bool = False) -> list[WordCrop]:
    crops = []
    for w in doc.words:
        if w.drop_cap and not include_drop_caps:
            continue
        c = crop_word(doc.image, w)
        # exported word images identify by the page word they were cut from
        origin = doc.extra.get("source")
        if origin:
            c.source = {"page": origin["page"], "order": origin["order"], "file": doc.page_id}
        else:
            c.source = {"page": doc.page_id, "order": w.order_index}
        crops.append(c)
    return crops


def load_word_crops(manifest_path, include_drop_caps: bool = False) -> list[WordCrop]:
    """Every labeled word of a manifest as a normalized crop (pages or word images)."""
    crops = []
    for doc in load_documents(manifest_path, "source"):
        crops.extend(word_crops(doc, include_drop_caps))
    return crops


def stack_crops(crops: Sequence[WordCrop]) -> torch.Tensor:
    return torch.stack([c.image for c in crops])
