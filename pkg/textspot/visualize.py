"""
Overlay rendering for spotting results.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from .dataset import read_image
from .errors import TextSpotError
from .models import PredictionsFile, SpottingResult
from .synth import load_font

_logger = logging.getLogger(__name__)

Color = Tuple[int, int, int]


def instance_colors(count: int, seed: int = 0) -> List[Color]:
    """Distinct, reproducible outline colors."""
    rng = np.random.default_rng(seed)
    hues = (rng.random() + np.arange(count) * 0.618033988749895) % 1.0
    colors = []
    for h in hues:
        rgb = Image.new("HSV", (1, 1), (int(h * 255), 200, 255)).convert("RGB").getpixel((0, 0))
        colors.append(tuple(int(c) for c in rgb))
    return colors


def render_overlay(
    image: np.ndarray, results: Sequence[SpottingResult], seed: int = 0, font_size: int = 14
) -> Image.Image:
    """Draw each polygon with its transcription and confidence above it."""
    canvas = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    font = load_font(font_size)
    for result, color in zip(results, instance_colors(len(results), seed)):
        points = [tuple(p) for p in np.asarray(result.polygon).reshape(-1, 2).tolist()]
        draw.polygon(points, outline=color, width=2)
        label = f"{result.text} {result.confidence:.2f}"
        x = min(p[0] for p in points)
        y = min(p[1] for p in points) - font_size - 4
        left, top, right, bottom = draw.textbbox((x, max(0, y)), label, font=font)
        draw.rectangle((left - 1, top - 1, right + 1, bottom + 1), fill=(0, 0, 0))
        draw.text((x, max(0, y)), label, fill=(255, 255, 255), font=font)
    return canvas


def attention_panels(
    image: np.ndarray, result: SpottingResult, panel_size: int = 112
) -> List[Image.Image]:
    """One panel per decoded character: the word crop with that step's attention map blended in red."""
    if not result.attention:
        return []
    points = np.asarray(result.polygon).reshape(-1, 2)
    h, w = image.shape[:2]
    x0, y0 = np.clip(np.floor(points.min(axis=0)).astype(int), 0, [w - 1, h - 1])
    x1, y1 = np.clip(np.ceil(points.max(axis=0)).astype(int), [x0 + 1, y0 + 1], [w, h])
    crop = Image.fromarray(image[y0:y1, x0:x1]).convert("RGB").resize((panel_size, panel_size))

    panels = []
    for step in result.attention[: len(result.text)]:
        attn = np.asarray(step, dtype=np.float32)
        attn = attn / attn.max() if attn.max() > 0 else attn
        heat = Image.fromarray((attn * 255).astype(np.uint8)).resize((panel_size, panel_size), Image.BILINEAR)
        red = Image.merge("RGB", (heat, Image.new("L", heat.size, 0), Image.new("L", heat.size, 0)))
        panels.append(Image.blend(crop, red, 0.5))
    return panels


def _resolve(image: str, image_root: Optional[Path]) -> Path:
    path = Path(image)
    if image_root is not None and not path.is_absolute():
        return image_root / path
    return path


def visualize(
    predictions: PredictionsFile,
    out_dir: Union[str, Path],
    image_root: Optional[Union[str, Path]] = None,
    attention: bool = False,
    seed: int = 0,
) -> List[Path]:
    """
    Write one overlay per predicted image, plus attention panels when requested.

    Images that are missing, unreadable or carry an inference error are skipped
    with a warning.

    Returns:
        Paths of the written overlays
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = Path(image_root) if image_root else None
    written = []
    for index, entry in enumerate(predictions.images):
        if entry.error:
            _logger.warning("skipping image with inference error", extra={"image": entry.image})
            continue
        try:
            image = read_image(_resolve(entry.image, root))
        except TextSpotError as e:
            _logger.warning("skipping image", extra={"image": entry.image, "error": str(e)})
            continue

        stem = f"{index:04d}_{Path(entry.image).stem}"
        path = out_dir / f"{stem}_overlay.png"
        render_overlay(image, entry.results, seed).save(path)
        written.append(path)

        if attention:
            for k, result in enumerate(entry.results):
                for t, panel in enumerate(attention_panels(image, result)):
                    panel.save(out_dir / f"{stem}_word{k:02d}_step{t:02d}.png")
    _logger.info("wrote overlays", extra={"count": len(written), "out_dir": str(out_dir)})
    return written
