"""Stacked chromatic waveform rendering.

A trial is drawn as one polyline per channel: the vertical coordinate of
channel c at time t is ``alpha * norm(x[c, t]) + delta * c`` plus a fixed
top margin of ``delta / 2``; time maps linearly onto the full image width.
Channels get distinct colors, strokes are square-capped with no
anti-aliasing, and there are no axes, grids, or margins beyond the stacking
offsets. Amplitudes are never clipped: tall excursions may cross into a
neighbor's band, which is exactly what the per-channel coloring is there to
disambiguate.

Rendering is a pure function of (trial, config): identical inputs produce
byte-identical PNG files.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _font, pngio
from ._kernels import stamp_polyline
from .dataset import EegTrial

MAD_EPSILON = 1e-8


class RenderError(ValueError):
    """Raised for invalid render configurations or rasterization failures."""


class Normalizer(str, enum.Enum):
    MAD = "mad"
    NONE = "none"


class PaletteMode(str, enum.Enum):
    MACHINE_SEPARABLE = "machine-separable"
    HUMAN_PERCEPTUAL = "human-perceptual"


# First three machine-separable colors are fixed seeds chosen for maximal
# RGB-space contrast between neighbors; the rest are grown greedily.
_SEPARABLE_SEEDS = [(0, 255, 255), (255, 0, 0), (122, 122, 122)]

# Fixed qualitative map for human viewing.
_QUALITATIVE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
    (152, 223, 138), (255, 152, 150), (197, 176, 213), (196, 156, 148),
    (247, 182, 210), (199, 199, 199), (219, 219, 141), (158, 218, 229),
]


def _rgb_dist(a: tuple[int, int, int], b: tuple[int, int, int]) -> float:
    return float(np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))))


def channel_palette(num_channels: int, mode: PaletteMode = PaletteMode.MACHINE_SEPARABLE,
                    background: tuple[int, int, int] = (255, 255, 255)) -> list[tuple[int, int, int]]:
    """Deterministic per-channel colors, one distinct triple per channel.

    Machine-separable mode greedily keeps adjacent channels far apart in RGB
    space (and away from the background); the perceptual mode walks a fixed
    qualitative map, extending greedily past its length.
    """
    if num_channels < 1:
        raise RenderError("num_channels must be >= 1")
    if mode is PaletteMode.MACHINE_SEPARABLE:
        palette = [c for c in _SEPARABLE_SEEDS[:num_channels]]
    else:
        palette = [c for c in _QUALITATIVE[:num_channels]]
    if len(palette) < num_channels:
        # candidate lattice: 6 levels per component = 216 colors
        levels = (0, 51, 102, 153, 204, 255)
        candidates = [(r, g, b) for r in levels for g in levels for b in levels]
        used = set(palette)
        while len(palette) < num_channels:
            prev = palette[-1]
            best = None
            best_key = None
            for cand in candidates:
                if cand in used or _rgb_dist(cand, background) < 120.0:
                    continue
                key = (_rgb_dist(cand, prev), cand)
                if best_key is None or key > best_key:
                    best = cand
                    best_key = key
            if best is None:
                raise RenderError(f"cannot build {num_channels} distinct colors")
            palette.append(best)
            used.add(best)
    return palette


@dataclass(frozen=True)
class RenderConfig:
    """All knobs that determine the raster; hashable via :meth:`digest`."""

    width_px: int = 896
    height_px: int = 896
    alpha: float = 28.0           # image units per normalized amplitude unit
    delta: float = 44.0           # vertical offset between channels
    stroke_px: int = 2
    palette: tuple[tuple[int, int, int], ...] = ()
    palette_mode: PaletteMode = PaletteMode.MACHINE_SEPARABLE
    background: tuple[int, int, int] = (255, 255, 255)
    draw_labels: bool = True
    label_font_px: int = 14
    normalizer: Normalizer = Normalizer.MAD

    def __post_init__(self):
        if self.alpha <= 0:
            raise RenderError(f"alpha must be positive, got {self.alpha}")
        if self.delta <= 0:
            raise RenderError(f"delta must be positive, got {self.delta}")
        if self.stroke_px < 1:
            raise RenderError(f"stroke_px must be >= 1, got {self.stroke_px}")
        if self.width_px < 1 or self.height_px < 1:
            raise RenderError("image dimensions must be positive")
        object.__setattr__(self, "palette", tuple(tuple(c) for c in self.palette))
        object.__setattr__(self, "background", tuple(self.background))

    def colors_for(self, num_channels: int) -> list[tuple[int, int, int]]:
        if self.palette:
            if len(self.palette) >= num_channels:
                if len(set(self.palette[:num_channels])) != num_channels:
                    raise RenderError("palette entries must be pairwise distinct")
                return list(self.palette[:num_channels])
            # shorter palettes extend cyclically
            return [self.palette[c % len(self.palette)] for c in range(num_channels)]
        return channel_palette(num_channels, self.palette_mode, self.background)

    def to_dict(self) -> dict:
        return {
            "width_px": self.width_px,
            "height_px": self.height_px,
            "alpha": self.alpha,
            "delta": self.delta,
            "stroke_px": self.stroke_px,
            "palette": [list(c) for c in self.palette],
            "palette_mode": self.palette_mode.value,
            "background": list(self.background),
            "draw_labels": self.draw_labels,
            "label_font_px": self.label_font_px,
            "normalizer": self.normalizer.value,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RenderConfig":
        kwargs = dict(doc)
        if "palette" in kwargs:
            kwargs["palette"] = tuple(tuple(c) for c in kwargs["palette"])
        if "background" in kwargs:
            kwargs["background"] = tuple(kwargs["background"])
        if "palette_mode" in kwargs:
            kwargs["palette_mode"] = PaletteMode(kwargs["palette_mode"])
        if "normalizer" in kwargs:
            kwargs["normalizer"] = Normalizer(kwargs["normalizer"])
        return cls(**kwargs)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class WaveformImage:
    png_bytes: bytes
    width_px: int
    height_px: int
    subject_id: str
    trial_index: int
    config_digest: str

    @property
    def digest(self) -> str:
        """Content address of the raster."""
        return hashlib.sha256(self.png_bytes).hexdigest()


def normalize_channel(samples: np.ndarray, normalizer: Normalizer) -> np.ndarray:
    """Robust per-channel scaling: (x - median) / (MAD + eps), or identity.

    A constant channel has MAD 0 and maps to all zeros via the epsilon.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise RenderError("cannot normalize an empty channel")
    if normalizer is Normalizer.NONE:
        return samples
    med = np.median(samples)
    mad = np.median(np.abs(samples - med))
    return (samples - med) / (mad + MAD_EPSILON)


@dataclass(frozen=True)
class TrialLayout:
    """Per-channel polylines in image coordinates (float, pre-rounding)."""

    xs: np.ndarray        # (T,)
    ys: np.ndarray        # (C, T)
    margin: float

    @property
    def num_channels(self) -> int:
        return self.ys.shape[0]


def layout_trial(trial: EegTrial, config: RenderConfig) -> TrialLayout:
    """Map samples to image coordinates: y = alpha*norm(x) + delta*c + delta/2."""
    c_count, t_count = trial.samples.shape
    required = config.delta * c_count + config.delta
    if config.height_px < required:
        raise RenderError(
            f"height_px={config.height_px} too small for {c_count} channels at "
            f"delta={config.delta} (needs >= {required:g})")
    margin = config.delta / 2.0
    if t_count == 1:
        xs = np.zeros(1, dtype=np.float64)
    else:
        xs = np.arange(t_count, dtype=np.float64) * ((config.width_px - 1) / (t_count - 1))
    ys = np.empty((c_count, t_count), dtype=np.float64)
    for c in range(c_count):
        norm = normalize_channel(trial.samples[c], config.normalizer)
        ys[c] = config.alpha * norm + config.delta * c + margin
    return TrialLayout(xs=xs, ys=ys, margin=margin)


def rasterize(trial: EegTrial, config: RenderConfig) -> WaveformImage:
    """Render a trial to a PNG-backed :class:`WaveformImage`. Pure and
    bit-deterministic for identical inputs."""
    layout = layout_trial(trial, config)
    colors = config.colors_for(trial.num_channels)
    img = np.empty((config.height_px, config.width_px, 3), dtype=np.uint8)
    img[:, :] = np.asarray(config.background, dtype=np.uint8)
    for c in range(trial.num_channels):
        stamp_polyline(img, layout.xs, np.ascontiguousarray(layout.ys[c]),
                       config.stroke_px, colors[c])
    if config.draw_labels:
        for c, name in enumerate(trial.channel_names):
            _, text_h = _font.text_size(name, config.label_font_px)
            top = int(np.rint(config.delta * c + layout.margin - text_h / 2.0))
            _font.stamp_text(img, 2, top, name, config.label_font_px, colors[c])
    try:
        png = pngio.encode_rgb(img)
    except pngio.PngError as exc:
        raise RenderError(f"PNG encoding failed: {exc}") from exc
    return WaveformImage(
        png_bytes=png,
        width_px=config.width_px,
        height_px=config.height_px,
        subject_id=trial.subject_id,
        trial_index=trial.trial_index,
        config_digest=config.digest(),
    )


def label_boxes(trial: EegTrial, config: RenderConfig) -> list[tuple[int, int, int, int]]:
    """Label bounding boxes as (top, left, height, width); audit helper for
    the no-overlap legibility check."""
    layout = layout_trial(trial, config)
    boxes = []
    for c, name in enumerate(trial.channel_names):
        text_w, text_h = _font.text_size(name, config.label_font_px)
        top = int(np.rint(config.delta * c + layout.margin - text_h / 2.0))
        boxes.append((top, 2, text_h, text_w))
    return boxes


class RenderCache:
    """Directory of rendered PNGs keyed by (subject, trial, config digest).

    Renders are pure, so a cache hit is byte-equivalent to re-rendering; this
    only exists to keep repeated evaluation sweeps cheap.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, subject_id: str, trial_index: int, config_digest: str) -> Path:
        return self.root / config_digest[:16] / f"{subject_id}_{trial_index:05d}.png"

    def get(self, subject_id: str, trial_index: int, config: RenderConfig) -> WaveformImage | None:
        path = self._path(subject_id, trial_index, config.digest())
        if not path.exists():
            return None
        png = path.read_bytes()
        return WaveformImage(
            png_bytes=png,
            width_px=config.width_px,
            height_px=config.height_px,
            subject_id=subject_id,
            trial_index=trial_index,
            config_digest=config.digest(),
        )

    def render(self, trial: EegTrial, config: RenderConfig) -> WaveformImage:
        cached = self.get(trial.subject_id, trial.trial_index, config)
        if cached is not None:
            return cached
        image = rasterize(trial, config)
        path = self._path(trial.subject_id, trial.trial_index, image.config_digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(image.png_bytes)
        tmp.replace(path)
        return image


def scaled(config: RenderConfig, alpha: float) -> RenderConfig:
    """Convenience: same config with a different amplitude scale."""
    return replace(config, alpha=alpha)
