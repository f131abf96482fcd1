"""Built-in 5x7 bitmap font for channel labels.

Font rendering goes through system libraries in most plotting stacks, and
those are a notorious source of cross-machine byte differences. Labels here
are stamped from a fixed bitmap table with integer nearest-neighbor scaling,
so rendered images stay bit-deterministic.

Covers uppercase letters, digits and the separators common in bipolar
channel names (``F7-T3``). Lowercase input is uppercased; anything else
renders as the fallback box glyph.
"""

from __future__ import annotations

import numpy as np

GLYPH_W = 5
GLYPH_H = 7

_RAW = {
    "A": (" XXX ", "X   X", "X   X", "XXXXX", "X   X", "X   X", "X   X"),
    "B": ("XXXX ", "X   X", "X   X", "XXXX ", "X   X", "X   X", "XXXX "),
    "C": (" XXX ", "X   X", "X    ", "X    ", "X    ", "X   X", " XXX "),
    "D": ("XXXX ", "X   X", "X   X", "X   X", "X   X", "X   X", "XXXX "),
    "E": ("XXXXX", "X    ", "X    ", "XXXX ", "X    ", "X    ", "XXXXX"),
    "F": ("XXXXX", "X    ", "X    ", "XXXX ", "X    ", "X    ", "X    "),
    "G": (" XXX ", "X   X", "X    ", "X XXX", "X   X", "X   X", " XXX "),
    "H": ("X   X", "X   X", "X   X", "XXXXX", "X   X", "X   X", "X   X"),
    "I": ("XXXXX", "  X  ", "  X  ", "  X  ", "  X  ", "  X  ", "XXXXX"),
    "J": ("XXXXX", "   X ", "   X ", "   X ", "   X ", "X  X ", " XX  "),
    "K": ("X   X", "X  X ", "X X  ", "XX   ", "X X  ", "X  X ", "X   X"),
    "L": ("X    ", "X    ", "X    ", "X    ", "X    ", "X    ", "XXXXX"),
    "M": ("X   X", "XX XX", "X X X", "X X X", "X   X", "X   X", "X   X"),
    "N": ("X   X", "XX  X", "XX  X", "X X X", "X  XX", "X  XX", "X   X"),
    "O": (" XXX ", "X   X", "X   X", "X   X", "X   X", "X   X", " XXX "),
    "P": ("XXXX ", "X   X", "X   X", "XXXX ", "X    ", "X    ", "X    "),
    "Q": (" XXX ", "X   X", "X   X", "X   X", "X X X", "X  X ", " XX X"),
    "R": ("XXXX ", "X   X", "X   X", "XXXX ", "X X  ", "X  X ", "X   X"),
    "S": (" XXXX", "X    ", "X    ", " XXX ", "    X", "    X", "XXXX "),
    "T": ("XXXXX", "  X  ", "  X  ", "  X  ", "  X  ", "  X  ", "  X  "),
    "U": ("X   X", "X   X", "X   X", "X   X", "X   X", "X   X", " XXX "),
    "V": ("X   X", "X   X", "X   X", "X   X", "X   X", " X X ", "  X  "),
    "W": ("X   X", "X   X", "X   X", "X X X", "X X X", "XX XX", "X   X"),
    "X": ("X   X", "X   X", " X X ", "  X  ", " X X ", "X   X", "X   X"),
    "Y": ("X   X", "X   X", " X X ", "  X  ", "  X  ", "  X  ", "  X  "),
    "Z": ("XXXXX", "    X", "   X ", "  X  ", " X   ", "X    ", "XXXXX"),
    "0": (" XXX ", "X   X", "X  XX", "X X X", "XX  X", "X   X", " XXX "),
    "1": ("  X  ", " XX  ", "  X  ", "  X  ", "  X  ", "  X  ", "XXXXX"),
    "2": (" XXX ", "X   X", "    X", "   X ", "  X  ", " X   ", "XXXXX"),
    "3": (" XXX ", "X   X", "    X", "  XX ", "    X", "X   X", " XXX "),
    "4": ("   X ", "  XX ", " X X ", "X  X ", "XXXXX", "   X ", "   X "),
    "5": ("XXXXX", "X    ", "XXXX ", "    X", "    X", "X   X", " XXX "),
    "6": (" XXX ", "X    ", "X    ", "XXXX ", "X   X", "X   X", " XXX "),
    "7": ("XXXXX", "    X", "   X ", "  X  ", " X   ", " X   ", " X   "),
    "8": (" XXX ", "X   X", "X   X", " XXX ", "X   X", "X   X", " XXX "),
    "9": (" XXX ", "X   X", "X   X", " XXXX", "    X", "    X", " XXX "),
    "-": ("     ", "     ", "     ", "XXXXX", "     ", "     ", "     "),
    "_": ("     ", "     ", "     ", "     ", "     ", "     ", "XXXXX"),
    ".": ("     ", "     ", "     ", "     ", "     ", " XX  ", " XX  "),
    ":": ("     ", " XX  ", " XX  ", "     ", " XX  ", " XX  ", "     "),
    "+": ("     ", "  X  ", "  X  ", "XXXXX", "  X  ", "  X  ", "     "),
    "/": ("    X", "    X", "   X ", "  X  ", " X   ", "X    ", "X    "),
    " ": ("     ", "     ", "     ", "     ", "     ", "     ", "     "),
    "?": ("XXXXX", "X   X", "X   X", "X   X", "X   X", "X   X", "XXXXX"),
}

_GLYPHS = {
    ch: np.array([[1 if c == "X" else 0 for c in row] for row in rows], dtype=bool)
    for ch, rows in _RAW.items()
}


def glyph(ch: str) -> np.ndarray:
    return _GLYPHS.get(ch.upper(), _GLYPHS["?"])


def text_size(text: str, font_px: int) -> tuple[int, int]:
    """(width, height) in pixels of a rendered string."""
    scale = max(1, font_px // GLYPH_H)
    if not text:
        return 0, GLYPH_H * scale
    return (len(text) * (GLYPH_W + 1) - 1) * scale, GLYPH_H * scale


def stamp_text(img: np.ndarray, x: int, y: int, text: str, font_px: int,
               rgb: tuple[int, int, int]) -> None:
    """Stamp ``text`` with its top-left corner at (x, y), clipped to the image."""
    scale = max(1, font_px // GLYPH_H)
    h, w = img.shape[0], img.shape[1]
    color = np.asarray(rgb, dtype=np.uint8)
    cx = x
    for ch in text:
        bitmap = glyph(ch)
        mask = np.repeat(np.repeat(bitmap, scale, axis=0), scale, axis=1)
        gh, gw = mask.shape
        y0, x0 = max(0, y), max(0, cx)
        y1, x1 = min(h, y + gh), min(w, cx + gw)
        if y1 > y0 and x1 > x0:
            sub = mask[y0 - y:y1 - y, x0 - cx:x1 - cx]
            region = img[y0:y1, x0:x1]
            region[sub] = color
        cx += (GLYPH_W + 1) * scale
