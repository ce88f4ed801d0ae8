"""Image-byte helpers: label tags, crops, box overlays, and thumbnails.

Frames travel through the pipeline as encoded PNG/JPEG bytes. Synthetic and
test content carries semantic labels in a PNG tEXt chunk (keyword
``foresearch-labels``, value ``label:<name> ...``); tEXt is stored
uncompressed, so the deterministic mock encoder can find the tags with a
plain byte scan and no image decode. Crop and overlay re-encode as PNG and
preserve the text chunks so tags survive person-crop operations.
"""

from __future__ import annotations

import io
import re
from typing import Iterable, List, Optional, Sequence, Tuple

from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from .core import BBox

LABEL_KEYWORD = "foresearch-labels"
LABEL_TOKEN_RE = re.compile(rb"label:([A-Za-z0-9_.\-]+)")


def make_labeled_png(size: Tuple[int, int], labels: Iterable[str], seed: int = 0) -> bytes:
    """Render a flat-color PNG tagged with semantic labels."""
    rgb = (32 + (seed * 37) % 192, 32 + (seed * 73) % 192, 32 + (seed * 131) % 192)
    img = Image.new("RGB", size, rgb)
    info = PngInfo()
    tokens = " ".join(f"label:{name}" for name in labels)
    if tokens:
        info.add_text(LABEL_KEYWORD, tokens)
    buf = io.BytesIO()
    img.save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


def extract_label_tags(data: bytes) -> List[str]:
    """Label tags present anywhere in the raw bytes, in first-seen order."""
    seen: List[str] = []
    for match in LABEL_TOKEN_RE.finditer(data):
        name = match.group(1).decode("ascii")
        if name not in seen:
            seen.append(name)
    return seen


def _reencode(img: Image.Image, source: Image.Image) -> bytes:
    info = PngInfo()
    for key, value in getattr(source, "text", {}).items():
        info.add_text(key, value)
    buf = io.BytesIO()
    img.save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


def crop_to_box(data: bytes, box: BBox) -> bytes:
    """Crop image bytes to a box (clamped to the image), keeping label tags."""
    src = Image.open(io.BytesIO(data))
    left = int(max(0, min(box.x, src.width - 1)))
    top = int(max(0, min(box.y, src.height - 1)))
    right = int(max(left + 1, min(box.x + box.w, src.width)))
    bottom = int(max(top + 1, min(box.y + box.h, src.height)))
    return _reencode(src.crop((left, top, right, bottom)), src)


def overlay_box(data: bytes, box: BBox, stroke: int = 3) -> bytes:
    """Draw a solid box outline on uncropped image bytes."""
    src = Image.open(io.BytesIO(data))
    img = src.convert("RGB")
    draw = ImageDraw.Draw(img)
    draw.rectangle(
        (box.x, box.y, box.x + box.w, box.y + box.h),
        outline=(255, 64, 32),
        width=stroke,
    )
    return _reencode(img, src)


def render_thumbnail(data: bytes, box: Optional[BBox] = None, max_side: int = 160) -> bytes:
    """Small boxed preview of a frame; used for search-hit cards."""
    rendered = overlay_box(data, box) if box is not None else data
    img = Image.open(io.BytesIO(rendered)).convert("RGB")
    img.thumbnail((max_side, max_side))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()
