import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def font_path():
    from scriptorium.forge import default_font_path
    return default_font_path()


@pytest.fixture(scope="session")
def alt_font_path():
    from scriptorium.forge import default_font_path
    return default_font_path("DejaVuSans.ttf")


def small_spec(font, **kw):
    from scriptorium.forge import LayoutSpec
    base = dict(page_width_px=256, page_height_px=256, margins_px=(12, 12, 12, 12), font_source=font,
                font_size_px=14, line_spacing_px=20, column_gap_px=16)
    base.update(kw)
    return LayoutSpec(**base)


def forge_pair(root, font, alt_font, n_pages=4, seed=0):
    """Source (serif, black on white) and target (sans, grey on beige-grey) corpora."""
    from scriptorium.forge import generate_corpus, sample_text_path
    src = generate_corpus(small_spec(font), sample_text_path(), n_pages, seed, Path(root) / "src")
    tgt = generate_corpus(small_spec(alt_font, ink_value=70, background_value=200, columns=2),
                          sample_text_path(), n_pages, seed + 1, Path(root) / "tgt")
    return src, tgt


@pytest.fixture(scope="session")
def small_corpora(tmp_path_factory, font_path, alt_font_path):
    return forge_pair(tmp_path_factory.mktemp("corpora"), font_path, alt_font_path)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in mod.TITLES.items():
        if n not in mod.RESULTS:
            tr.write_line(f"NOT RUN [{n:2d}] {title} (deselected, or raised before its check)")
            continue
        ok, detail = mod.RESULTS[n]
        tr.write_line(f"{'PASS' if ok else 'FAIL'} [{n:2d}] {title}: {detail}")
