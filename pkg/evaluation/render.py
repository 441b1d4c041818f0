""" Plain Pillow renderings of the evaluation tables. The CSV next to each
PNG is the canonical data; these are for looking at.
"""
import logging
import math

import numpy as np
from PIL import Image, ImageDraw

logger = logging.getLogger(__name__)

PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75),
)
BACKGROUND = (255, 255, 255)
AXIS = (0, 0, 0)


def render_heatmap(values, path, cell=16):
    """ One cell per entry, darker for larger values on a log scale.
    """
    values = np.asarray(values, dtype=np.float64)
    shifted = np.log1p(np.clip(values, 0, None))
    top = shifted.max() if shifted.size and shifted.max() > 0 else 1.0
    pixels = 255 - np.rint(255 * shifted / top).astype(np.uint8)
    size = (pixels.shape[1] * cell, pixels.shape[0] * cell)
    image = Image.fromarray(pixels).resize(size, Image.Resampling.NEAREST)
    image.save(path)
    logger.info("Wrote %s", path)
    return path


def render_lines(series, path, size=(480, 320), margin=32, log_y=False):
    """ series: {label: [(x, y), ...]}. Points with non-finite y are
    skipped.
    """
    width, height = size
    image = Image.new('RGB', size, BACKGROUND)
    draw = ImageDraw.Draw(image)
    points = dict(
        (label, [(float(x), _y(y, log_y)) for x, y in values
                 if _y(y, log_y) is not None])
        for label, values in series.items())
    everything = [p for values in points.values() for p in values]
    draw.line([(margin, margin), (margin, height - margin),
               (width - margin, height - margin)], fill=AXIS)
    if everything:
        xs = [x for x, _ in everything]
        ys = [y for _, y in everything]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
        x_span = (x_hi - x_lo) or 1.0
        y_span = (y_hi - y_lo) or 1.0

        def place(x, y):
            return (margin + (x - x_lo) / x_span * (width - 2 * margin),
                    height - margin -
                    (y - y_lo) / y_span * (height - 2 * margin))

        for index, (label, values) in enumerate(sorted(points.items())):
            colour = PALETTE[index % len(PALETTE)]
            placed = [place(x, y) for x, y in sorted(values)]
            if len(placed) > 1:
                draw.line(placed, fill=colour, width=2)
            for px, py in placed:
                draw.ellipse((px - 2, py - 2, px + 2, py + 2), fill=colour)
            draw.text((margin + 4, 4 + 12 * index), str(label), fill=colour)
    image.save(path)
    logger.info("Wrote %s", path)
    return path


def _y(value, log_y):
    value = float(value)
    if not math.isfinite(value):
        return None
    if log_y:
        return math.log10(value) if value > 0 else None
    return value
