"""Independent reference implementations used only by the tests."""

import itertools
import math
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def _paths_by_label(T, C):
    """Map every collapsed label tuple to the array of frame paths producing it."""
    groups = {}
    for path in itertools.product(range(C), repeat=T):
        label = []
        prev = None
        for k in path:
            if k != prev and k != 0:
                label.append(k)
            prev = k
        groups.setdefault(tuple(label), []).append(path)
    return {k: np.array(v) for k, v in groups.items()}


def brute_force_ctc(logits, target):
    """-ln of the summed probability of every frame path collapsing to target."""
    logits = np.asarray(logits, dtype=np.float64)
    T, C = logits.shape
    z = logits - logits.max(axis=1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    paths = _paths_by_label(T, C).get(tuple(target))
    if paths is None:
        return math.inf
    path_lp = lp[np.arange(T)[None, :], paths].sum(axis=1)
    m = path_lp.max()
    return -(m + math.log(np.exp(path_lp - m).sum()))


def levenshtein_recursive(a, b):
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1,
                   d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


def central_difference(f, x, h=1e-4):
    """Full numerical gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def ink_mask(image, background):
    return np.asarray(image) != background


def tile_counts(height, width, tops, lefts, size):
    """Per-pixel count of covering tiles, one pixel at a time."""
    counts = np.zeros((height, width), dtype=np.int64)
    for r in range(height):
        for c in range(width):
            counts[r, c] = sum(1 for t in tops for l in lefts
                               if t <= r < t + size and l <= c < l + size)
    return counts


def audit_page(image, words, background):
    """Ground-truth audit of a rendered page by direct pixel scanning.

    Returns a dict with the number of boxes lacking ink, overlapping box pairs,
    and words failing the 3 px shrink test (only words wider and taller than 6 px).
    """
    image = np.asarray(image)
    ink = image.astype(int) != background
    strong = np.abs(image.astype(int) - background) > 16
    H, W = image.shape
    no_ink = overlaps = loose = out_of_bounds = 0
    boxes = [w.bbox for w in words]
    for x, y, w, h in boxes:
        if x < 0 or y < 0 or x + w > W or y + h > H or w <= 0 or h <= 0:
            out_of_bounds += 1
        if not strong[y:y + h, x:x + w].any():
            no_ink += 1
        if w > 6 and h > 6:
            full = ink[y:y + h, x:x + w].sum()
            inner = ink[y + 3:y + h - 3, x + 3:x + w - 3].sum()
            if not inner < full:
                loose += 1
    for i in range(len(boxes)):
        xi, yi, wi, hi = boxes[i]
        for j in range(i + 1, len(boxes)):
            xj, yj, wj, hj = boxes[j]
            ix = min(xi + wi, xj + wj) - max(xi, xj)
            iy = min(yi + hi, yj + hj) - max(yi, yj)
            if ix > 0 and iy > 0:
                overlaps += 1
    return {"no_ink": no_ink, "overlaps": overlaps, "loose": loose, "out_of_bounds": out_of_bounds}
