"""Procedural scene rendering for the toy benchmark.

Every known class gets a fixed base color plus a sinusoidal texture pattern
keyed by the texture seed; outlier objects are drawn with out-of-palette
colors and their own pattern, keyed by the object's class name.  Weather and
time-of-day act purely on the rendered image (covariate shift: the label map
is never touched).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .core import LabelSpace

WEATHERS = ("cloudy", "rainy", "snowy", "foggy", "clear")
TIMES = ("day", "night")

# base colors for the default 6-class world: road, sky, building, car,
# person, vegetation (extended procedurally beyond 6)
_BASE_COLORS = np.array([
    [0.45, 0.45, 0.47],
    [0.70, 0.80, 0.92],
    [0.62, 0.44, 0.36],
    [0.20, 0.26, 0.55],
    [0.85, 0.60, 0.30],
    [0.25, 0.52, 0.28],
])

# outlier palette: hues deliberately far from every class color
_OOD_COLORS = np.array([
    [0.72, 0.20, 0.68],
    [0.15, 0.75, 0.72],
    [0.88, 0.15, 0.25],
    [0.95, 0.85, 0.15],
    [0.50, 0.10, 0.95],
])


@dataclass(frozen=True)
class RenderParams:
    """Knobs of the procedural renderer."""

    num_classes: int = 6
    texture_seed: int = 7
    pixel_noise: float = 0.03
    pattern_amp: float = 0.10
    weather_strength: dict = field(default_factory=dict)  # per-weather overrides
    time_strength: dict = field(default_factory=dict)     # per-time overrides

    def strength_of(self, weather: str, time: str) -> tuple[float, float]:
        return (float(self.weather_strength.get(weather, 1.0)),
                float(self.time_strength.get(time, 1.0)))


def class_texture_table(params: RenderParams) -> dict:
    """Colors, stripe frequencies and phases for each known class."""
    rng = np.random.default_rng(params.texture_seed)
    C = params.num_classes
    colors = np.empty((C, 3))
    for c in range(C):
        base = _BASE_COLORS[c % len(_BASE_COLORS)]
        colors[c] = np.clip(base + 0.05 * rng.standard_normal(3), 0.05, 0.95)
    freqs = rng.uniform(0.08, 0.45, size=(C, 2)) * rng.choice([-1.0, 1.0], size=(C, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=C)
    return {"colors": colors, "freqs": freqs, "phases": phases}


def ood_texture(class_name: str, texture_seed: int) -> dict:
    """Texture parameters for an outlier object, stable in its class name."""
    key = zlib.crc32(f"{texture_seed}:{class_name}".encode()) & 0xFFFFFFFF
    rng = np.random.default_rng(key)
    color = _OOD_COLORS[int(rng.integers(len(_OOD_COLORS)))]
    color = np.clip(color + 0.04 * rng.standard_normal(3), 0.05, 0.95)
    return {
        "color": color,
        "freq": rng.uniform(0.5, 0.9, size=2) * rng.choice([-1.0, 1.0], size=2),
        "phase": float(rng.uniform(0.0, 2.0 * np.pi)),
    }


def render_base_image(label: np.ndarray, space: LabelSpace, params: RenderParams,
                      rng: np.random.Generator,
                      ood_textures: dict[str, dict] | None = None,
                      ood_regions: list[tuple[np.ndarray, str]] | None = None) -> np.ndarray:
    """Render a clear/day image from a label map.

    ``ood_regions`` pairs boolean masks with outlier class names so each
    pasted object keeps its own texture; any remaining ood pixels fall back
    to a default outlier texture.  Ignore pixels render as dark void.
    """
    table = class_texture_table(params)
    H, W = label.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.zeros((3, H, W))

    for c in range(params.num_classes):
        sel = label == c
        if not sel.any():
            continue
        pattern = np.sin(table["freqs"][c, 0] * xx + table["freqs"][c, 1] * yy
                         + table["phases"][c])
        shade = table["colors"][c][:, None, None] + params.pattern_amp * pattern[None]
        img[:, sel] = shade[:, sel]

    covered = np.zeros((H, W), dtype=bool)
    for mask, name in (ood_regions or []):
        tex = (ood_textures or {}).get(name) or ood_texture(name, params.texture_seed)
        _paint_ood(img, mask & (label == space.ood_id), tex, params, xx, yy)
        covered |= mask
    rest = (label == space.ood_id) & ~covered
    if rest.any():
        _paint_ood(img, rest, ood_texture("unknown object", params.texture_seed), params, xx, yy)

    img[:, label == space.ignore_id] = 0.08
    img += params.pixel_noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _paint_ood(img, sel, tex, params, xx, yy):
    if not sel.any():
        return
    pattern = np.sin(tex["freq"][0] * xx + tex["freq"][1] * yy + tex["phase"])
    checker = np.sign(np.sin(tex["freq"][0] * 6.0 * xx) * np.sin(tex["freq"][1] * 6.0 * yy))
    shade = tex["color"][:, None, None] + params.pattern_amp * (0.6 * pattern + 0.4 * checker)[None]
    img[:, sel] = shade[:, sel]


def apply_covariate_shift(img: np.ndarray, weather: str, time: str,
                          params: RenderParams, rng: np.random.Generator) -> np.ndarray:
    """Deterministic color-and-noise restyling keyed by the weather/time enums.

    ``clear`` + ``day`` is the identity.  Only the image changes; callers
    keep the label map untouched.
    """
    if weather not in WEATHERS:
        raise ValueError(f"unknown weather {weather!r}")
    if time not in TIMES:
        raise ValueError(f"unknown time {time!r}")
    w_str, t_str = params.strength_of(weather, time)
    out = img.astype(np.float64).copy()
    H, W = out.shape[1:]
    gray = out.mean(axis=0, keepdims=True)

    if weather == "cloudy":
        s = 0.55 * w_str
        out = (1 - s) * out + s * gray
        out *= 1.0 - 0.10 * w_str
    elif weather == "rainy":
        out *= 1.0 - 0.22 * w_str
        out[2] += 0.05 * w_str
        streaks = (rng.random(W) < 0.10).astype(np.float64)
        streak_map = np.tile(streaks, (H, 1))
        streak_map *= 0.5 + 0.5 * rng.random((H, W))
        out += 0.12 * w_str * streak_map[None]
    elif weather == "snowy":
        s = 0.30 * w_str
        out = (1 - s) * out + s
        flakes = rng.random((H, W)) < 0.015 * w_str
        out[:, flakes] = 0.97
    elif weather == "foggy":
        s = 0.55 * w_str
        out = (1 - s) * out + s * 0.74
        out = 0.74 + (out - 0.74) * (1.0 - 0.35 * w_str)

    if time == "night":
        out *= 1.0 - 0.55 * t_str
        out[2] *= 1.0 + 0.18 * t_str
        out = np.clip(out, 0.0, 1.0) ** (1.0 + 0.15 * t_str)

    return np.clip(out, 0.0, 1.0)


def render_image(label: np.ndarray, space: LabelSpace, params: RenderParams,
                 rng: np.random.Generator, weather: str = "clear", time: str = "day",
                 ood_regions: list[tuple[np.ndarray, str]] | None = None) -> np.ndarray:
    base = render_base_image(label, space, params, rng, ood_regions=ood_regions)
    if weather == "clear" and time == "day":
        return base
    return apply_covariate_shift(base, weather, time, params, rng)


def label_to_color(label: np.ndarray, space: LabelSpace, params: RenderParams) -> np.ndarray:
    """Flat-color visualization of a label map (3, H, W)."""
    table = class_texture_table(params)
    H, W = label.shape
    img = np.zeros((3, H, W))
    for c in range(params.num_classes):
        img[:, label == c] = table["colors"][c][:, None, None]
    img[:, label == space.ood_id] = np.array([0.9, 0.1, 0.9])[:, None]
    img[:, label == space.ignore_id] = 0.0
    return img
