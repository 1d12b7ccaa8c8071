"""
Synthetic scene-text images with exact word polygons.

Words are drawn from the profile's alphabet onto a textured background, either
straight (optionally rotated) or with characters laid along a circular arc.
Everything is derived from one ``numpy`` generator, so a seed fully determines
the image and its annotations.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import cv2
import numpy as np
from PIL import Image, ImageDraw, ImageFont
from shapely.geometry import Polygon as ShapelyPolygon

from .models import SynthProfile, TextInstance

_logger = logging.getLogger(__name__)

FONT_CANDIDATES = ("DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "Arial.ttf")
GLYPH_PAD = 4
POLYGON_PAD = 2.0
ARC_POINTS = 7


@dataclass
class RenderedWord:
    """A word rendered into its own canvas: ink alpha and the polygon in canvas pixels."""

    alpha: np.ndarray
    polygon: np.ndarray


@lru_cache(maxsize=64)
def load_font(size: int) -> ImageFont.ImageFont:
    for name in FONT_CANDIDATES:
        try:
            return ImageFont.truetype(name, size)
        except OSError:
            continue
    _logger.debug("no truetype font found; using the bundled default font")
    return ImageFont.load_default(size)


def _text_alpha(text: str, font: ImageFont.ImageFont) -> Tuple[np.ndarray, float]:
    """Draw ``text`` on a padded canvas; returns the alpha and the line height."""
    ascent, descent = font.getmetrics()
    line_h = ascent + descent
    width = int(math.ceil(font.getlength(text))) if text else 1
    canvas = Image.new("L", (width + 2 * GLYPH_PAD, line_h + 2 * GLYPH_PAD), 0)
    ImageDraw.Draw(canvas).text((GLYPH_PAD, GLYPH_PAD), text, fill=255, font=font)
    return np.asarray(canvas), float(line_h)


def _rotate(alpha: np.ndarray, points: np.ndarray, angle: float) -> Tuple[np.ndarray, np.ndarray]:
    """Rotate a canvas counter-clockwise by ``angle`` degrees on an expanded canvas; maps ``points`` along."""
    h, w = alpha.shape
    M = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
    cos, sin = abs(M[0, 0]), abs(M[0, 1])
    new_w = int(math.ceil(h * sin + w * cos))
    new_h = int(math.ceil(h * cos + w * sin))
    M[0, 2] += new_w / 2.0 - w / 2.0
    M[1, 2] += new_h / 2.0 - h / 2.0
    rotated = cv2.warpAffine(alpha, M, (new_w, new_h), flags=cv2.INTER_LINEAR, borderValue=0)
    mapped = np.hstack([points, np.ones((len(points), 1))]) @ M.T
    return rotated, mapped


def render_straight_word(text: str, font: ImageFont.ImageFont, angle: float) -> RenderedWord:
    alpha, line_h = _text_alpha(text, font)
    h, w = alpha.shape
    x0, y0 = GLYPH_PAD - POLYGON_PAD, GLYPH_PAD - POLYGON_PAD
    x1, y1 = w - GLYPH_PAD + POLYGON_PAD, GLYPH_PAD + line_h + POLYGON_PAD
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
    if angle:
        alpha, corners = _rotate(alpha, corners, angle)
    return RenderedWord(alpha=alpha, polygon=corners)


def render_curved_word(text: str, font: ImageFont.ImageFont, bend: float) -> RenderedWord:
    """Characters placed left to right along a circular arc.

    ``bend`` is the total arc angle in radians; positive bends the word over a
    center below it, negative under a center above it.
    """
    ascent, descent = font.getmetrics()
    line_h = float(ascent + descent)
    advances = [max(font.getlength(ch), 1.0) for ch in text]
    total = float(sum(advances))
    radius = total / abs(bend)
    sign = 1.0 if bend > 0 else -1.0
    half_h = line_h / 2.0
    max_adv = max(advances)
    pad = POLYGON_PAD + max_adv ** 2 / (8.0 * max(radius - half_h, 1.0)) + 1.0

    size = int(math.ceil(2 * (radius + line_h + max_adv + pad + 2 * GLYPH_PAD)))
    center = np.array([size / 2.0, size / 2.0])
    canvas = np.zeros((size, size), dtype=np.float32)

    def arc(r: float, angles: np.ndarray) -> np.ndarray:
        return center + np.stack([r * np.sin(angles), -sign * r * np.cos(angles)], axis=1)

    start = -abs(bend) / 2.0
    s = 0.0
    for ch, adv in zip(text, advances):
        phi = start + (s + adv / 2.0) / radius
        s += adv
        glyph, _ = _text_alpha(ch, font)
        glyph, _ = _rotate(glyph, np.zeros((1, 2)), -sign * math.degrees(phi))
        gh, gw = glyph.shape
        point = arc(radius, np.array([phi]))[0]
        ox = int(round(point[0] - gw / 2.0))
        oy = int(round(point[1] - gh / 2.0))
        region = canvas[oy:oy + gh, ox:ox + gw]
        np.maximum(region, glyph[: region.shape[0], : region.shape[1]].astype(np.float32), out=region)

    limit = abs(bend) / 2.0 + pad / radius
    angles = np.linspace(-limit, limit, ARC_POINTS)
    outer = arc(radius + half_h + pad, angles)
    inner = arc(max(radius - half_h - pad, 1.0), angles[::-1])
    return RenderedWord(alpha=np.clip(canvas, 0, 255).astype(np.uint8), polygon=np.vstack([outer, inner]))


def _crop_to_content(word: RenderedWord) -> RenderedWord:
    """Trim empty margins while keeping the whole polygon inside the canvas."""
    ys, xs = np.nonzero(word.alpha)
    if len(xs) == 0:
        return word
    x0 = int(max(0, min(xs.min(), math.floor(word.polygon[:, 0].min()))))
    y0 = int(max(0, min(ys.min(), math.floor(word.polygon[:, 1].min()))))
    x1 = int(min(word.alpha.shape[1], max(xs.max() + 1, math.ceil(word.polygon[:, 0].max()))))
    y1 = int(min(word.alpha.shape[0], max(ys.max() + 1, math.ceil(word.polygon[:, 1].max()))))
    return RenderedWord(alpha=word.alpha[y0:y1, x0:x1], polygon=word.polygon - np.array([x0, y0]))


def textured_background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    base = rng.uniform(40, 215, size=3)
    coarse = rng.normal(0.0, 1.0, size=(max(2, height // 16), max(2, width // 16), 3)).astype(np.float32)
    noise = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC)
    fine = rng.normal(0.0, 4.0, size=(height, width, 3)).astype(np.float32)
    gradient = np.linspace(-15, 15, width, dtype=np.float32)[None, :, None] * rng.choice([-1.0, 1.0])
    image = base[None, None, :] + 18.0 * noise + fine + gradient
    return np.clip(image, 0, 255).astype(np.uint8)


def _random_word(rng: np.random.Generator, profile: SynthProfile) -> str:
    length = int(rng.integers(profile.min_word_length, profile.max_word_length + 1))
    return "".join(profile.alphabet[i] for i in rng.integers(0, len(profile.alphabet), size=length))


def _ink_color(rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    luminance = float(background.reshape(-1, 3).mean())
    if luminance > 127:
        return rng.uniform(0, 60, size=3)
    return rng.uniform(195, 255, size=3)


def generate_synthetic_sample_with_masks(
    seed: int, profile: SynthProfile
) -> Tuple[np.ndarray, List[TextInstance], List[np.ndarray]]:
    """Like :func:`generate_synthetic_sample`, also returning each word's full-image ink mask."""
    rng = np.random.default_rng(seed)
    H, W = profile.image_height, profile.image_width
    image = textured_background(rng, H, W).astype(np.float32)
    num_words = int(rng.integers(profile.min_words, profile.max_words + 1))

    placed: List[ShapelyPolygon] = []
    instances: List[TextInstance] = []
    ink_masks: List[np.ndarray] = []
    for _ in range(num_words):
        text = _random_word(rng, profile)
        word: Optional[RenderedWord] = None
        offset = None
        for attempt in range(profile.max_retries):
            shrink = 1.0 - 0.5 * attempt / profile.max_retries
            size = int(rng.integers(profile.min_font_size, profile.max_font_size + 1) * shrink)
            font = load_font(max(size, 6))
            if profile.curved and rng.random() < profile.curve_probability:
                bend = float(rng.uniform(0.6, 1.4)) * float(rng.choice([-1.0, 1.0]))
                candidate = render_curved_word(text, font, bend)
            else:
                angle = float(rng.uniform(-profile.max_rotation, profile.max_rotation)) * shrink
                candidate = render_straight_word(text, font, angle)
            candidate = _crop_to_content(candidate)
            ch, cw = candidate.alpha.shape
            poly = candidate.polygon
            if cw > W or ch > H:
                continue
            ox = int(rng.integers(0, W - cw + 1))
            oy = int(rng.integers(0, H - ch + 1))
            shifted = poly + np.array([ox, oy])
            if shifted[:, 0].min() < 0 or shifted[:, 1].min() < 0 or shifted[:, 0].max() > W or shifted[:, 1].max() > H:
                continue
            shape = ShapelyPolygon(shifted)
            if not shape.is_valid or any(shape.buffer(2.0).intersects(p) for p in placed):
                continue
            word, offset = candidate, (ox, oy)
            break

        if word is None:
            _logger.debug("could not place word; rendering fewer words", extra={"seed": seed, "text": text})
            continue

        ox, oy = offset
        ch, cw = word.alpha.shape
        alpha = word.alpha.astype(np.float32)[..., None] / 255.0
        color = _ink_color(rng, image[oy:oy + ch, ox:ox + cw])
        region = image[oy:oy + ch, ox:ox + cw]
        image[oy:oy + ch, ox:ox + cw] = region * (1 - alpha) + color[None, None, :] * alpha

        polygon = word.polygon + np.array([ox, oy])
        placed.append(ShapelyPolygon(polygon))
        instances.append(TextInstance(polygon=polygon.reshape(-1).tolist(), text=text, care=True))
        full = np.zeros((H, W), dtype=bool)
        full[oy:oy + ch, ox:ox + cw] = word.alpha > 127
        ink_masks.append(full)

    return np.clip(image, 0, 255).astype(np.uint8), instances, ink_masks


def generate_synthetic_sample(seed: int, profile: SynthProfile) -> Tuple[np.ndarray, List[TextInstance]]:
    """
    Render one synthetic scene-text image.

    Args:
        seed: Determines the image and annotations completely
        profile: Image size, word count and length ranges, fonts, rotation and curvature

    Returns:
        ``(H, W, 3)`` uint8 image and its word instances
    """
    image, instances, _ = generate_synthetic_sample_with_masks(seed, profile)
    return image, instances
