import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waveicl import pngio
from waveicl._kernels import HAS_NUMBA, stamp_polyline_numba, stamp_polyline_numpy
from waveicl.dataset import EegTrial, SynthSpec, synthesize_dataset
from waveicl.render import (Normalizer, PaletteMode, RenderConfig, RenderError, channel_palette,
                            label_boxes, layout_trial, normalize_channel, rasterize)


def _trial(samples, subject="s0", index=0, rate=50.0):
    samples = np.asarray(samples, dtype=np.float32)
    names = [f"CH{i}" for i in range(samples.shape[0])]
    return EegTrial(subject_id=subject, trial_index=index, samples=samples,
                    sampling_rate=rate, channel_names=names, label=0)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def test_normalize_constant_channel_is_zero():
    out = normalize_channel(np.array([5.0, 5.0, 5.0]), Normalizer.MAD)
    assert np.array_equal(out, np.zeros(3))


def test_normalize_symmetric_case():
    out = normalize_channel(np.array([1.0, 2.0, 3.0]), Normalizer.MAD)
    assert np.allclose(out, [-1.0, 0.0, 1.0], atol=1e-6)


def test_normalize_random_vector_median_and_mad():
    # independent statistics oracle: scipy's median_abs_deviation
    from scipy.stats import median_abs_deviation

    x = np.random.default_rng(42).normal(3.0, 2.5, size=1000)
    out = normalize_channel(x, Normalizer.MAD)
    assert abs(np.median(out)) < 1e-6
    assert abs(median_abs_deviation(out) - 1.0) < 1e-6


def test_normalize_none_is_identity():
    x = np.array([3.0, -1.0, 7.0])
    assert np.array_equal(normalize_channel(x, Normalizer.NONE), x)


# ---------------------------------------------------------------------------
# layout (vertical stacking law)
# ---------------------------------------------------------------------------


def test_layout_median_sample_sits_on_channel_baseline():
    trial = _trial([[1.0, 2.0, 3.0]])
    cfg = RenderConfig(width_px=100, height_px=200, alpha=10, delta=40)
    lay = layout_trial(trial, cfg)
    # norm(median) = 0 -> y = margin
    assert lay.ys[0, 1] == pytest.approx(20.0, abs=1e-12)


def test_layout_channel_offset_is_delta_times_c():
    samples = np.tile([1.0, 2.0, 3.0], (4, 1))
    trial = _trial(samples)
    cfg = RenderConfig(width_px=100, height_px=520, alpha=10, delta=100 / 1.0,
                       label_font_px=10)
    lay = layout_trial(trial, cfg)
    assert np.allclose(lay.ys[3] - lay.ys[0], 300.0, atol=1e-9)


def test_layout_identical_waveforms_shift_by_delta():
    wave = np.sin(np.linspace(0, 6, 50))
    trial = _trial(np.stack([wave, wave]))
    cfg = RenderConfig(width_px=100, height_px=200, alpha=12, delta=50)
    lay = layout_trial(trial, cfg)
    assert np.allclose(lay.ys[1] - lay.ys[0], 50.0, atol=1e-9)


def test_layout_alpha_linearity():
    rng = np.random.default_rng(3)
    trial = _trial(rng.normal(size=(3, 40)))
    base = RenderConfig(width_px=100, height_px=300, alpha=8, delta=60)
    doubled = RenderConfig(width_px=100, height_px=300, alpha=16, delta=60)
    margin = 30.0
    r1 = layout_trial(trial, base).ys - (60.0 * np.arange(3)[:, None] + margin)
    r2 = layout_trial(trial, doubled).ys - (60.0 * np.arange(3)[:, None] + margin)
    assert np.allclose(r2, 2.0 * r1, atol=1e-9)


def test_layout_time_axis_spans_width():
    trial = _trial(np.zeros((1, 5)))
    cfg = RenderConfig(width_px=101, height_px=100, alpha=5, delta=30)
    lay = layout_trial(trial, cfg)
    assert lay.xs[0] == 0.0
    assert lay.xs[-1] == 100.0


def test_layout_channel_permutation_property():
    rng = np.random.default_rng(9)
    samples = rng.normal(size=(4, 30))
    perm = [2, 0, 3, 1]
    cfg = RenderConfig(width_px=50, height_px=400, alpha=7, delta=80)
    lay = layout_trial(_trial(samples), cfg)
    lay_p = layout_trial(_trial(samples[perm]), cfg)
    for new_c, old_c in enumerate(perm):
        expected = lay.ys[old_c] - 80.0 * old_c + 80.0 * new_c
        assert np.allclose(lay_p.ys[new_c], expected, atol=1e-9)


def test_layout_rejects_insufficient_height():
    trial = _trial(np.zeros((5, 10)))
    with pytest.raises(RenderError, match="height"):
        layout_trial(trial, RenderConfig(width_px=50, height_px=100, alpha=5, delta=40))


# ---------------------------------------------------------------------------
# palettes
# ---------------------------------------------------------------------------


def test_palette_seed_triples():
    assert channel_palette(3) == [(0, 255, 255), (255, 0, 0), (122, 122, 122)]


def test_palette_single_channel_not_background():
    (color,) = channel_palette(1)
    assert color != (255, 255, 255)


def test_palette_18_adjacent_distance():
    palette = channel_palette(18)
    assert len(palette) == 18
    assert len(set(palette)) == 18
    for a, b in zip(palette, palette[1:]):
        dist = np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
        assert dist >= 100.0, (a, b, dist)


def test_palette_modes_deterministic():
    for mode in PaletteMode:
        assert channel_palette(25, mode) == channel_palette(25, mode)


def test_palette_human_perceptual_distinct():
    palette = channel_palette(24, PaletteMode.HUMAN_PERCEPTUAL)
    assert len(set(palette)) == 24


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def test_rasterize_deterministic_bytes(small_render_config):
    trial = _trial(np.random.default_rng(1).normal(size=(3, 60)))
    a = rasterize(trial, small_render_config)
    b = rasterize(trial, small_render_config)
    assert a.png_bytes == b.png_bytes
    assert a.digest == b.digest


def test_rasterize_all_zero_trial_band_pixel_counts():
    # flat channels paint exactly C horizontal bands, stroke_px thick, full width
    c, width, stroke = 3, 90, 2
    cfg = RenderConfig(width_px=width, height_px=200, alpha=10, delta=40,
                       stroke_px=stroke, draw_labels=False)
    image = rasterize(_trial(np.zeros((c, 30))), cfg)
    pixels = pngio.decode_rgb(image.png_bytes)
    non_bg = (pixels != 255).any(axis=2)
    assert int(non_bg.sum()) == c * stroke * width
    colors = cfg.colors_for(c)
    for ch in range(c):
        band = (pixels == np.asarray(colors[ch], dtype=np.uint8)).all(axis=2)
        rows = np.flatnonzero(band.any(axis=1))
        assert len(rows) == stroke
        baseline = 40.0 * ch + 20.0
        center = rows.mean()
        assert abs(center - baseline) <= 0.5 + (stroke % 2 == 0) * 0.5


def test_rasterize_decodes_to_declared_dimensions(small_render_config):
    trial = _trial(np.zeros((2, 10)))
    image = rasterize(trial, small_render_config)
    pixels = pngio.decode_rgb(image.png_bytes)
    assert pixels.shape == (small_render_config.height_px, small_render_config.width_px, 3)


def test_rasterize_no_clipping_tall_amplitudes_cross_bands():
    # one huge spike in channel 0 must paint pixels inside channel 1's band
    samples = np.zeros((2, 50))
    samples[0, 25] = 1000.0
    samples[0, ::2] = 1.0  # give the channel a nonzero MAD
    cfg = RenderConfig(width_px=100, height_px=120, alpha=10, delta=40,
                       stroke_px=1, draw_labels=False)
    image = rasterize(_trial(samples), cfg)
    pixels = pngio.decode_rgb(image.png_bytes)
    color0 = np.asarray(cfg.colors_for(2)[0], dtype=np.uint8)
    ch0 = (pixels == color0).all(axis=2)
    rows = np.flatnonzero(ch0.any(axis=1))
    assert rows.max() > 40 + 20  # beyond channel 1's baseline


def test_rasterize_label_pixels_drawn():
    cfg = RenderConfig(width_px=120, height_px=120, alpha=5, delta=30,
                       draw_labels=True, label_font_px=7, stroke_px=1)
    trial = _trial(np.zeros((2, 20)))
    image = rasterize(trial, cfg)
    pixels = pngio.decode_rgb(image.png_bytes)
    left = (pixels[:, :40] != 255).any(axis=2)
    no_labels = rasterize(trial, RenderConfig(width_px=120, height_px=120, alpha=5,
                                              delta=30, draw_labels=False, stroke_px=1),)
    left_plain = (pngio.decode_rgb(no_labels.png_bytes)[:, :40] != 255).any(axis=2)
    assert left.sum() > left_plain.sum()


def test_label_boxes_do_not_overlap():
    cfg = RenderConfig()  # default: 18-channel-capable
    trial = _trial(np.zeros((18, 30)))
    boxes = label_boxes(trial, cfg)
    for (top_a, _, h_a, _), (top_b, _, _, _) in zip(boxes, boxes[1:]):
        assert top_a + h_a <= top_b


def test_rasterize_same_value_different_channel_shifts_band():
    samples = np.tile(np.array([1.0, 2.0, 3.0]), (4, 1))
    cfg = RenderConfig(width_px=30, height_px=500, alpha=10, delta=100,
                       stroke_px=1, draw_labels=False)
    image = rasterize(_trial(samples), cfg)
    pixels = pngio.decode_rgb(image.png_bytes)
    colors = cfg.colors_for(4)
    rows0 = np.flatnonzero((pixels == np.asarray(colors[0], np.uint8)).all(axis=2).any(axis=1))
    rows3 = np.flatnonzero((pixels == np.asarray(colors[3], np.uint8)).all(axis=2).any(axis=1))
    assert np.array_equal(rows3, rows0 + 300)


def test_rasterize_alpha_linearity_band_extent():
    samples = np.tile(np.array([1.0, 2.0, 3.0] * 10), (1, 1))
    base = RenderConfig(width_px=60, height_px=120, alpha=10, delta=60,
                        stroke_px=1, draw_labels=False)
    doubled = RenderConfig(width_px=60, height_px=120, alpha=20, delta=60,
                           stroke_px=1, draw_labels=False)
    extents = []
    for cfg in (base, doubled):
        pixels = pngio.decode_rgb(rasterize(_trial(samples), cfg).png_bytes)
        rows = np.flatnonzero((pixels != 255).any(axis=2).any(axis=1))
        extents.append((rows.max() - rows.min()) / 2.0)
    assert extents[0] == pytest.approx(10.0, abs=1.0)
    assert extents[1] == pytest.approx(20.0, abs=1.0)


@pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")
def test_kernel_paths_bit_identical():
    rng = np.random.default_rng(7)
    xs = np.linspace(0, 99, 140)
    ys = rng.normal(50, 20, size=140)
    for stroke in (1, 2, 3):
        a = np.full((120, 100, 3), 255, np.uint8)
        b = a.copy()
        stamp_polyline_numba(a, xs, ys, stroke, (1, 2, 3))
        stamp_polyline_numpy(b, xs, ys, stroke, (1, 2, 3))
        assert np.array_equal(a, b)


def test_render_identical_under_pure_numpy_env(tmp_path):
    # subprocess with the env flag re-renders the same bytes
    code = (
        "import numpy as np\n"
        "from waveicl.dataset import SynthSpec, synthesize_dataset\n"
        "from waveicl.render import rasterize, RenderConfig\n"
        "m = synthesize_dataset(SynthSpec(subjects=2, trials_per_class=2, channels=3,"
        " sampling_rate=50.0, trial_duration_s=1.0), 13)\n"
        "img = rasterize(m.subjects[0].trials[1], RenderConfig(width_px=150, height_px=180,"
        " alpha=9.0, delta=40.0))\n"
        "import sys; sys.stdout.buffer.write(img.png_bytes)\n"
    )
    outputs = []
    for pure in ("0", "1"):
        result = subprocess.run([sys.executable, "-c", code], capture_output=True,
                                env={"PATH": "/usr/bin:/bin", "WAVEICL_PURE_NUMPY": pure,
                                     "PYTHONHASHSEED": pure and "12345" or "0"},
                                check=True)
        outputs.append(result.stdout)
    assert outputs[0] == outputs[1]
    assert outputs[0][:8] == b"\x89PNG\r\n\x1a\n"


def test_rasterize_golden_pixels_stable_against_pillow():
    # cross-decoder check: our decoder and Pillow agree on our encoder output
    from io import BytesIO

    from PIL import Image

    manifest = synthesize_dataset(SynthSpec(subjects=2, trials_per_class=2, channels=4,
                                            sampling_rate=50.0, trial_duration_s=1.0), 21)
    cfg = RenderConfig(width_px=200, height_px=260, alpha=12.0, delta=48.0)
    image = rasterize(manifest.subjects[1].trials[0], cfg)
    ours = pngio.decode_rgb(image.png_bytes)
    theirs = np.asarray(Image.open(BytesIO(image.png_bytes)).convert("RGB"))
    assert np.array_equal(ours, theirs)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def test_render_config_rejects_bad_values():
    with pytest.raises(RenderError):
        RenderConfig(alpha=0)
    with pytest.raises(RenderError):
        RenderConfig(delta=-1)
    with pytest.raises(RenderError):
        RenderConfig(stroke_px=0)


def test_render_config_digest_changes_with_fields():
    a = RenderConfig()
    b = RenderConfig(alpha=29.0)
    assert a.digest() != b.digest()
    assert a.digest() == RenderConfig().digest()


def test_render_config_duplicate_palette_rejected():
    cfg = RenderConfig(palette=((1, 2, 3), (1, 2, 3)))
    with pytest.raises(RenderError, match="distinct"):
        cfg.colors_for(2)


def test_render_config_short_palette_cycles():
    cfg = RenderConfig(palette=((1, 2, 3), (4, 5, 6)))
    assert cfg.colors_for(5) == [(1, 2, 3), (4, 5, 6), (1, 2, 3), (4, 5, 6), (1, 2, 3)]


@settings(max_examples=25, deadline=None)
@given(c=st.integers(1, 6), t=st.integers(1, 40), seed=st.integers(0, 10**6))
def test_rasterize_purity_property(c, t, seed):
    samples = np.random.default_rng(seed).normal(size=(c, t))
    cfg = RenderConfig(width_px=64, height_px=int(20 * (c + 1)) + 4, alpha=4.0,
                       delta=20.0, draw_labels=False, stroke_px=1)
    first = rasterize(_trial(samples), cfg).png_bytes
    assert rasterize(_trial(samples), cfg).png_bytes == first
