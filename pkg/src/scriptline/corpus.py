"""Corpora: manifests, charsets, and a deterministic synthetic generator.

A corpus on disk is a directory of PGM line images plus a manifest
(`<relative-image-path>\\t<transcription>` per line, UTF-8) and a
charset file (one symbol per line; the space symbol is a line holding a
single space). The generator renders text lines by concatenating glyph
bitmaps with random spacing, optional vertical jitter, salt-and-pepper
noise and size scaling, and is byte-reproducible from its seed. It
stands in for licensed line-image datasets at desk scale; negative
spacing produces the touching, ligature-like shapes that make printed
cursive scripts hard.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .imaging import normalize_height, save_pgm

log = logging.getLogger(__name__)

GLYPH_HEIGHT = 32
SPACE_SYMBOL = " "


@dataclass
class CorpusManifest:
    root: Path
    entries: list  # (relative image path, transcription)
    split: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, rel: str) -> Path:
        return self.root / rel


def load_charset(path) -> list:
    """Ordered unique symbols, one per line (a single-space line is the space)."""
    seen = set()
    out = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            symbol = raw.rstrip("\n").rstrip("\r")
            if not symbol:  # a space symbol survives as " "
                continue
            if symbol in seen:
                raise DataError(f"{path}: duplicate charset symbol {symbol!r}")
            seen.add(symbol)
            out.append(symbol)
    if not out:
        raise DataError(f"{path}: empty charset")
    return out


def save_charset(symbols, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in symbols:
            fh.write(s + "\n")


def load_manifest(path, charset=None, check_images: bool = True) -> CorpusManifest:
    """Parse and validate a manifest file.

    With a charset, transcription symbols outside it raise a DataError
    naming the glyph and line; missing images raise FileNotFoundError.
    An empty manifest is valid but logged.
    """
    path = Path(path)
    entries = []
    seen = set()
    known = set(charset) if charset is not None else None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected '<image>\\t<transcription>'")
            rel, text = line.split("\t", 1)
            if rel in seen:
                raise DataError(f"{path}:{lineno}: duplicate image path {rel!r}")
            seen.add(rel)
            if known is not None:
                for ch in text:
                    if ch not in known:
                        raise DataError(f"{path}:{lineno}: glyph {ch!r} not in charset")
            if check_images and not (path.parent / rel).is_file():
                raise FileNotFoundError(f"{path}:{lineno}: image {rel!r} not found")
            entries.append((rel, text))
    if not entries:
        log.warning("%s: manifest has no entries", path)
    return CorpusManifest(root=path.parent, entries=entries)


def save_manifest(manifest: CorpusManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rel, text in manifest.entries:
            fh.write(f"{rel}\t{text}\n")


# ---------------------------------------------------------------------------
# builtin glyphs

def _canvas(width: int) -> np.ndarray:
    return np.zeros((GLYPH_HEIGHT, width), dtype=bool)


def _baseline(g: np.ndarray) -> np.ndarray:
    g[24:27, :] = True  # shared connecting stroke, full width
    return g


def builtin_alphabet() -> dict:
    """Thirteen connected 32-px glyphs plus a space, all sharing a baseline.

    Every ink glyph runs its baseline across its full width and keeps
    all strokes attached to it, so adjacent glyphs fuse into a single
    connected shape whenever spacing goes negative.
    """
    glyphs = {}

    g = _canvas(22)  # tall left stroke
    g[4:25, 2:5] = True
    glyphs["a"] = _baseline(g)

    g = _canvas(24)  # loop
    yy, xx = np.ogrid[:GLYPH_HEIGHT, :24]
    ring = (yy - 14) ** 2 + (xx - 12) ** 2
    g[(ring <= 81) & (ring >= 36)] = True
    g[20:25, 11:14] = True  # stem to baseline
    glyphs["b"] = _baseline(g)

    g = _canvas(22)  # two raised dots on stems
    g[6:10, 4:8] = True
    g[10:25, 5:7] = True
    g[6:10, 14:18] = True
    g[10:25, 15:17] = True
    glyphs["c"] = _baseline(g)

    g = _canvas(24)  # zigzag dropping to the baseline and back
    for step in range(18):
        x = 3 + step
        y = 6 + 2 * step if step < 9 else 22 - 2 * (step - 9)
        g[y : y + 3, x : x + 2] = True
    glyphs["d"] = _baseline(g)

    g = _canvas(22)  # tall right stroke
    g[4:25, 17:20] = True
    glyphs["e"] = _baseline(g)

    g = _canvas(24)  # twin pillars
    g[8:25, 4:7] = True
    g[8:25, 17:20] = True
    glyphs["f"] = _baseline(g)

    g = _canvas(22)  # high block
    g[4:12, 6:16] = True
    g[12:25, 10:12] = True
    glyphs["g"] = _baseline(g)

    g = _canvas(26)  # crossbar tee
    g[8:11, 3:23] = True
    g[8:25, 12:15] = True
    glyphs["h"] = _baseline(g)

    g = _canvas(20)  # dot riding a stroke
    g[4:8, 8:12] = True
    g[8:25, 9:11] = True
    glyphs["i"] = _baseline(g)

    g = _canvas(26)  # vee
    for step in range(10):
        g[6 + 2 * step : 8 + 2 * step, 4 + step : 6 + step] = True
        g[6 + 2 * step : 8 + 2 * step, 20 - step : 22 - step] = True
    g[24:27, 12:15] = True
    glyphs["j"] = _baseline(g)

    g = _canvas(24)  # arch
    g[6:9, 5:19] = True
    g[6:25, 5:8] = True
    g[6:25, 16:19] = True
    glyphs["k"] = _baseline(g)

    g = _canvas(22)  # plus
    g[6:20, 9:12] = True
    g[12:15, 3:19] = True
    g[14:25, 9:12] = True
    glyphs["l"] = _baseline(g)

    g = _canvas(26)  # three dots stacked on stems
    g[4:8, 11:15] = True
    g[10:14, 5:9] = True
    g[10:14, 17:21] = True
    g[8:25, 12:14] = True
    g[14:25, 6:8] = True
    g[14:25, 18:20] = True
    glyphs["m"] = _baseline(g)

    glyphs[SPACE_SYMBOL] = _canvas(22)  # all background
    return glyphs


@dataclass
class NoiseConfig:
    jitter: int = 0  # max vertical glyph offset, px
    salt_pepper: float = 0.0  # per-pixel flip probability
    scale_range: tuple = (1.0, 1.0)  # per-line size factor


def render_line(
    alphabet: dict,
    symbols,
    spacings,
    jitters=None,
    margin: int = 2,
    jitter_room: int = 0,
) -> np.ndarray:
    """Concatenate glyph bitmaps into one dark-ink-on-white line image.

    Lines are written right to left: the first symbol sits at the right
    edge, matching the direction the sliding-window featurizer walks.
    `spacings` has one gap per adjacent glyph pair; negative gaps
    overlap the glyphs (their ink is OR-ed). Width is exactly
    2*margin + sum of widths + sum of spacings.
    """
    widths = [alphabet[s].shape[1] for s in symbols]
    total = 2 * margin + sum(widths) + sum(spacings)
    height = GLYPH_HEIGHT + 2 * jitter_room
    ink = np.zeros((height, max(total, 1)), dtype=bool)
    x = total - margin
    for idx, symbol in enumerate(symbols):
        glyph = alphabet[symbol]
        dy = jitter_room + (jitters[idx] if jitters is not None else 0)
        x -= glyph.shape[1]
        ink[dy : dy + GLYPH_HEIGHT, x : x + glyph.shape[1]] |= glyph
        if idx < len(spacings):
            x -= spacings[idx]
    return 1.0 - ink.astype(np.float64)


def synth_generate(
    alphabet: dict,
    out_dir,
    n_lines: int,
    length_range=(3, 8),
    noise: NoiseConfig | None = None,
    seed: int = 0,
    spacing_range=(2, 5),
    space_rate: float = 0.15,
    margin: int = 2,
) -> CorpusManifest:
    """Render a corpus to disk; byte-identical for identical arguments.

    Symbols are drawn i.i.d. uniformly from the non-space glyphs
    (`length_range` counts them); the space symbol, when present in the
    alphabet, is inserted between neighbours with probability
    `space_rate`. Writes images/, manifest.tsv and charset.txt under
    `out_dir` and returns the loaded manifest.
    """
    if not alphabet:
        raise ValueError("alphabet has no glyphs")
    heights = {g.shape[0] for g in alphabet.values()}
    if len(heights) != 1:
        raise ValueError("glyph bitmaps must share one height")
    noise = noise or NoiseConfig()
    rng = np.random.default_rng(seed)

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    symbols = [s for s in alphabet if s != SPACE_SYMBOL]
    has_space = SPACE_SYMBOL in alphabet

    entries = []
    lo, hi = length_range
    for n in range(n_lines):
        length = int(rng.integers(lo, hi + 1))
        picks = [symbols[int(i)] for i in rng.integers(0, len(symbols), size=length)]
        line = [picks[0]]
        for nxt in picks[1:]:
            if has_space and rng.random() < space_rate:
                line.append(SPACE_SYMBOL)
            line.append(nxt)

        gaps = [int(g) for g in rng.integers(spacing_range[0], spacing_range[1] + 1, size=len(line) - 1)]
        jitters = [int(j) for j in rng.integers(-noise.jitter, noise.jitter + 1, size=len(line))] \
            if noise.jitter else None
        img = render_line(alphabet, line, gaps, jitters, margin=margin, jitter_room=noise.jitter)

        scale = float(rng.uniform(*noise.scale_range))
        if scale != 1.0:
            img = normalize_height(img, max(1, round(img.shape[0] * scale)))

        if noise.salt_pepper > 0.0:
            flip = rng.random(img.shape) < noise.salt_pepper
            values = rng.random(img.shape) < 0.5
            img = np.where(flip, values.astype(np.float64), img)

        rel = f"images/line_{n:05d}.pgm"
        save_pgm(img, out_dir / rel)
        entries.append((rel, "".join(line)))

    manifest = CorpusManifest(root=out_dir, entries=entries)
    save_manifest(manifest, out_dir / "manifest.tsv")
    save_charset(list(alphabet.keys()), out_dir / "charset.txt")
    return manifest
