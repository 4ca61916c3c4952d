"""Template page typesetting with exact word-level ground truth.

Words are rasterized one at a time from a glyph-outline font and pasted onto
the page; every word box is the tight extent of the pixels that word actually
changed, dilated by :data:`BOX_PAD`. Layout keeps the dilated boxes disjoint.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

BOX_PAD = 2
# ink gap between neighbouring words so that padded boxes never touch
MIN_INK_GAP = 2 * BOX_PAD + 1
DEFAULT_CORPUS_PAGES = 455  # default source corpus size


class GlyphMissingError(ValueError):
    pass


class LayoutError(ValueError):
    pass


def default_font_path(name: str = "DejaVuSerif.ttf") -> str:
    """Locate one of the DejaVu fonts bundled with matplotlib."""
    import matplotlib

    path = Path(matplotlib.get_data_path()) / "fonts" / "ttf" / name
    if not path.exists():
        raise FileNotFoundError(path)
    return str(path)


@dataclass(frozen=True)
class LayoutSpec:
    page_width_px: int = 2754
    page_height_px: int = 3564
    margins_px: tuple = (200, 200, 200, 200)  # top, bottom, left, right
    columns: tuple = (1, 2)  # allowed column counts; corpus generation samples one
    font_source: Optional[str] = None
    font_size_px: int = 48
    line_spacing_px: int = 72
    column_gap_px: int = 96
    drop_cap: bool = True
    drop_cap_scale: int = 3
    ink_value: int = 0
    background_value: int = 255

    def __post_init__(self):
        cols = self.columns
        if isinstance(cols, int):
            cols = (cols,)
        object.__setattr__(self, "columns", tuple(int(c) for c in cols))
        object.__setattr__(self, "margins_px", tuple(int(m) for m in self.margins_px))
        self.validate()

    @property
    def font_path(self) -> str:
        return self.font_source or default_font_path()

    def text_area(self) -> tuple[int, int, int, int]:
        top, bottom, left, right = self.margins_px
        return left, top, self.page_width_px - right, self.page_height_px - bottom

    def validate(self):
        if len(self.margins_px) != 4 or min(self.margins_px) < 0:
            raise LayoutError("margins_px must be four non-negative values (top, bottom, left, right)")
        x0, y0, x1, y1 = self.text_area()
        if x1 <= x0 or y1 <= y0:
            raise LayoutError("margins leave no text area")
        if not self.columns or not set(self.columns) <= {1, 2}:
            raise LayoutError(f"columns must be drawn from {{1, 2}}, got {self.columns}")
        if self.font_size_px < 4:
            raise LayoutError("font_size_px must be at least 4")
        if self.line_spacing_px <= 0 or self.column_gap_px < 0:
            raise LayoutError("line_spacing_px must be positive and column_gap_px non-negative")
        if self.drop_cap_scale < 2:
            raise LayoutError("drop_cap_scale must be at least 2")
        for name in ("ink_value", "background_value"):
            v = getattr(self, name)
            if not 0 <= v <= 255:
                raise LayoutError(f"{name} must lie in [0, 255]")
        if abs(self.ink_value - self.background_value) <= 16:
            raise LayoutError("ink and background intensities must differ by more than 16")


@dataclass(frozen=True)
class WordGT:
    text: str
    bbox: tuple  # x, y, w, h in page pixels
    line_index: int
    order_index: int
    drop_cap: bool = False

    def to_record(self) -> dict:
        x, y, w, h = self.bbox
        return {"text": self.text, "x": x, "y": y, "w": w, "h": h,
                "line": self.line_index, "order": self.order_index, "drop_cap": self.drop_cap}

    @classmethod
    def from_record(cls, r: dict) -> "WordGT":
        return cls(r["text"], (int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"])),
                   int(r.get("line", 0)), int(r.get("order", 0)), bool(r.get("drop_cap", False)))


@dataclass
class RenderedPage:
    image: np.ndarray  # (H, W) uint8
    words: list
    source_text_hash: str
    overflow: list = field(default_factory=list)
    columns: int = 1

    @property
    def placed_tokens(self) -> list[str]:
        return merge_drop_caps(self.words)


def merge_drop_caps(words: Sequence[WordGT]) -> list[str]:
    """Rebuild the placed token stream, re-attaching drop caps to their word."""
    out = []
    pending = ""
    for w in sorted(words, key=lambda w: w.order_index):
        if w.drop_cap:
            if pending:
                out.append(pending)
            pending = w.text
            continue
        out.append(pending + w.text)
        pending = ""
    if pending:
        out.append(pending)
    return out


def text_hash(tokens: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()


@lru_cache(maxsize=32)
def _font(path: str, size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.truetype(path, size)


@lru_cache(maxsize=32)
def _codepoints(path: str) -> frozenset:
    from fontTools.ttLib import TTFont

    with TTFont(path, lazy=True) as tt:
        return frozenset(tt.getBestCmap())


def check_glyphs(font_path: str, tokens: Iterable[str]):
    have = _codepoints(font_path)
    for tok in tokens:
        if not tok or any(c.isspace() for c in tok):
            raise ValueError(f"tokens must be non-empty and whitespace free, got {tok!r}")
        for c in tok:
            if ord(c) not in have:
                raise GlyphMissingError(f"font {os.path.basename(font_path)} has no glyph for {c!r} (U+{ord(c):04X}) in {tok!r}")


@dataclass(frozen=True)
class _Run:
    """A rasterized word: ink values, ink offset from the pen origin, advance."""
    pixels: np.ndarray  # (h, w) uint8 page values
    ink: np.ndarray  # (h, w) bool
    dx: int
    dy: int
    advance: float

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@lru_cache(maxsize=65536)
def _rasterize(text: str, path: str, size: int, ink: int, background: int) -> _Run:
    font = _font(path, size)
    x0, y0, x1, y1 = font.getbbox(text, anchor="ls")
    m = 2
    canvas = Image.new("L", (x1 - x0 + 2 * m, y1 - y0 + 2 * m), 0)
    ImageDraw.Draw(canvas).text((m - x0, m - y0), text, font=font, fill=255, anchor="ls")
    alpha = np.asarray(canvas, dtype=np.float64) / 255.0
    values = np.rint(background + alpha * (ink - background)).astype(np.int64)
    is_ink = values != background
    if not is_ink.any():
        raise LayoutError(f"token {text!r} rasterizes to no visible ink")
    rows = np.flatnonzero(is_ink.any(axis=1))
    cols = np.flatnonzero(is_ink.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    return _Run(
        pixels=values[r0:r1, c0:c1].astype(np.uint8),
        ink=is_ink[r0:r1, c0:c1],
        dx=int(x0 - m + c0),
        dy=int(y0 - m + r0),
        advance=font.getlength(text),
    )


@dataclass
class _Placed:
    text: str
    run: _Run
    left: int  # ink left column
    top: int  # ink top row
    line: int
    drop_cap: bool = False

    @property
    def ink_box(self):
        return self.left, self.top, self.left + self.run.width, self.top + self.run.height


class _Typesetter:
    def __init__(self, spec: LayoutSpec, columns: int):
        self.spec = spec
        self.path = spec.font_path
        self.size = spec.font_size_px
        font = _font(self.path, self.size)
        self.ascent, self.descent = font.getmetrics()
        self.space = font.getlength(" ")
        x0, y0, x1, y1 = spec.text_area()
        self.y_top, self.y_bottom = y0, y1
        if columns == 1:
            self.columns = [(x0, x1)]
        else:
            cw = (x1 - x0 - spec.column_gap_px) // 2
            if cw <= 0:
                raise LayoutError("column gap leaves no room for two columns")
            self.columns = [(x0, x0 + cw), (x1 - cw, x1)]

    def run(self, text: str, size: Optional[int] = None) -> _Run:
        s = self.spec
        return _rasterize(text, self.path, size or self.size, s.ink_value, s.background_value)

    def fill_line(self, tokens, start, x_left, x_right, baseline):
        """Greedy left-to-right fill. Returns placed words and next token index."""
        placed = []
        pen = float(x_left + BOX_PAD)
        prev_pen = pen
        i = start
        while i < len(tokens):
            r = self.run(tokens[i])
            if placed:
                prev = placed[-1]
                pen = prev_pen + prev.run.advance + self.space
                pen = max(pen, prev.left + prev.run.width - 1 + MIN_INK_GAP - r.dx)
            else:
                pen = max(pen, x_left + BOX_PAD - r.dx)
            left = int(math.ceil(pen)) + r.dx
            if left + r.width + BOX_PAD > x_right:
                break
            placed.append(_Placed(tokens[i], r, left, baseline + r.dy, -1))
            prev_pen = math.ceil(pen)
            i += 1
        return placed, i


def _overlaps(a, b) -> bool:
    """Dilated ink boxes (x0, y0, x1, y1 exclusive) intersect with positive area."""
    return (a[0] - BOX_PAD < b[2] + BOX_PAD and b[0] - BOX_PAD < a[2] + BOX_PAD
            and a[1] - BOX_PAD < b[3] + BOX_PAD and b[1] - BOX_PAD < a[3] + BOX_PAD)


def _layout(ts: _Typesetter, tokens: list[str], drop_cap: bool):
    """Place tokens column by column; returns (placed words, tokens consumed) or None."""
    spec = ts.spec
    placed: list[_Placed] = []
    toks = list(tokens)
    i = 0
    line_no = 0
    dc_box = None
    # a one-letter first word would be indistinguishable from initial + word
    if drop_cap and toks and len(toks[0]) > 1:
        first = toks[0]
        dc_run = ts.run(first[0], ts.size * spec.drop_cap_scale)
        x_left, x_right = ts.columns[0]
        left, top = x_left + BOX_PAD, ts.y_top + BOX_PAD
        if left + dc_run.width + BOX_PAD > x_right or top + dc_run.height + BOX_PAD > ts.y_bottom:
            return None
        dc = _Placed(first[0], dc_run, left, top, 0, drop_cap=True)
        placed.append(dc)
        dc_box = dc.ink_box
        toks[0] = first[1:]

    def set_line(indent, x_right, baseline, prev_bottom):
        words, nxt = ts.fill_line(toks, i, indent, x_right, baseline)
        if not words:
            return words, nxt
        floor = ts.y_top + BOX_PAD if prev_bottom is None else prev_bottom + MIN_INK_GAP - 1
        shift = max(0, floor - min(w.top for w in words))
        for w in words:
            w.top += shift
        return words, nxt

    for col, (x_left, x_right) in enumerate(ts.columns):
        prev_bottom = None  # exclusive ink bottom of the previous line
        baseline = ts.y_top + BOX_PAD + ts.ascent
        while i < len(toks):
            words, nxt = set_line(x_left, x_right, baseline, prev_bottom)
            if not words:
                raise LayoutError(f"token {toks[i]!r} is wider than the column")
            if col == 0 and dc_box is not None and any(_overlaps(w.ink_box, dc_box) for w in words):
                words, nxt = set_line(dc_box[2] + BOX_PAD, x_right, baseline, prev_bottom)
                if not words:
                    # nothing fits beside the initial; move down a line
                    baseline += spec.line_spacing_px
                    if baseline + ts.descent + BOX_PAD > ts.y_bottom:
                        break
                    continue
            bottom = max(w.top + w.run.height for w in words)
            if bottom + BOX_PAD > ts.y_bottom:
                break
            for w in words:
                w.line = line_no
            placed.extend(words)
            baseline = words[0].top - words[0].run.dy + spec.line_spacing_px
            line_no += 1
            i = nxt
            prev_bottom = bottom
        if i >= len(toks):
            break

    if dc_box is not None and i == 0:
        # the rest of the initial's word found no room beside it
        return None
    return placed, i


def render_page(spec: LayoutSpec, tokens: Sequence[str], columns: Optional[int] = None,
                drop_cap: Optional[bool] = None) -> RenderedPage:
    """Typeset ``tokens`` onto one page.

    ``columns`` and ``drop_cap`` default to the first allowed column count and
    to ``spec.drop_cap``. Tokens that do not fit are returned in ``overflow``.
    """
    spec.validate()
    tokens = list(tokens)
    columns = spec.columns[0] if columns is None else columns
    if columns not in (1, 2):
        raise LayoutError(f"columns must be 1 or 2, got {columns}")
    drop_cap = spec.drop_cap if drop_cap is None else drop_cap
    check_glyphs(spec.font_path, tokens)

    ts = _Typesetter(spec, columns)
    result = _layout(ts, tokens, drop_cap and bool(tokens))
    if result is None:
        result = _layout(ts, tokens, False)
    placed, n_tokens = result

    H, W = spec.page_height_px, spec.page_width_px
    image = np.full((H, W), spec.background_value, dtype=np.uint8)
    words = []
    for order, p in enumerate(placed):
        x0, y0, x1, y1 = p.ink_box
        region = image[y0:y1, x0:x1]
        region[p.run.ink] = p.run.pixels[p.run.ink]
        bx0, by0 = max(0, x0 - BOX_PAD), max(0, y0 - BOX_PAD)
        bx1, by1 = min(W, x1 + BOX_PAD), min(H, y1 + BOX_PAD)
        words.append(WordGT(p.text, (bx0, by0, bx1 - bx0, by1 - by0), p.line, order, p.drop_cap))
    return RenderedPage(image, words, text_hash(tokens), tokens[n_tokens:], columns)


# -- manifests ---------------------------------------------------------------

@dataclass
class ManifestRecord:
    image_path: str  # absolute or relative to the manifest directory
    page_width: int
    page_height: int
    words: list
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {"image_path": self.image_path, "page_width": self.page_width,
             "page_height": self.page_height, "words": [w.to_record() for w in self.words]}
        d.update(self.extra)
        return json.dumps(d, sort_keys=True, ensure_ascii=False)


def write_manifest(path, records: Iterable[ManifestRecord]) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.to_json() + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                words = [WordGT.from_record(w) for w in d.pop("words")]
                rec = ManifestRecord(d.pop("image_path"), int(d.pop("page_width")),
                                     int(d.pop("page_height")), words, d)
            except (KeyError, ValueError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: malformed manifest record ({e})") from None
            out.append(rec)
    return out


def resolve_image(manifest_path, record: ManifestRecord) -> Path:
    p = Path(record.image_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def sample_text_path() -> str:
    """Path of the bundled Latin sample text used by the desk-scale corpora."""
    return str(Path(__file__).parent / "data" / "bellum_gallicum.txt")


def load_tokens(text_source) -> list[str]:
    with open(text_source, encoding="utf-8") as f:
        tokens = f.read().split()
    if not tokens:
        raise ValueError(f"{text_source} contains no tokens")
    return tokens


def _capacity(spec: LayoutSpec) -> int:
    x0, y0, x1, y1 = spec.text_area()
    lines = (y1 - y0) // max(1, min(spec.line_spacing_px, spec.font_size_px // 2)) + 1
    per_line = (x1 - x0) // MIN_INK_GAP + 1
    return lines * per_line


def generate_corpus(spec: LayoutSpec, text_source, n_pages: int, seed: int, out_dir) -> Path:
    """Render ``n_pages`` pages from a token stream and write a manifest.

    Column count and drop-cap presence are drawn per page from ``seed``; the
    text wraps around when exhausted. Returns the manifest path.
    """
    if n_pages < 1:
        raise ValueError("n_pages must be at least 1")
    tokens = load_tokens(text_source)
    check_glyphs(spec.font_path, tokens)
    out_dir = Path(out_dir)
    try:
        (out_dir / "pages").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out_dir}: {e}") from e
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir} is not writable")

    rng = np.random.default_rng(seed)
    cap = _capacity(spec)
    cursor = 0
    records = []
    for k in range(n_pages):
        columns = int(rng.choice(spec.columns))
        drop_cap = bool(spec.drop_cap and rng.random() < 0.5)
        window = [tokens[(cursor + j) % len(tokens)] for j in range(cap)]
        page = render_page(spec, window, columns=columns, drop_cap=drop_cap)
        n = cap - len(page.overflow)
        if n == 0:
            raise LayoutError(f"page {k}: no token fits on the page")
        cursor = (cursor + n) % len(tokens)
        rel = f"pages/page_{k:05d}.png"
        Image.fromarray(page.image, mode="L").save(out_dir / rel, optimize=False)
        records.append(ManifestRecord(rel, spec.page_width_px, spec.page_height_px, page.words,
                                      {"columns": columns, "text_hash": text_hash(window[:n])}))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


def spec_to_dict(spec: LayoutSpec) -> dict:
    d = asdict(spec)
    d["margins_px"] = list(spec.margins_px)
    d["columns"] = list(spec.columns)
    return d
