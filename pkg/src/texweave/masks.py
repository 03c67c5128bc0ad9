"""Every mask the pipeline consumes.

Mask semantics throughout: 1 = keep the original latent, 0 = take the
dragged latent, matching the blend Z_drag * (1-m) + Z_origin * m. Masks are
strictly binary uint8 grids, in image resolution or latent resolution
(image dims / LATENT_FACTOR).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Viewpoint
from .render import ViewImage, src_facing_field
from .util import binarize

log = logging.getLogger(__name__)

LATENT_FACTOR = 8
CHECKER_CELL = 2
BAND_DILATION = 3
# Surface points this grazing to the drag view count as newly revealed.
TAU_SIDE = 0.1


class MaskError(ValueError):
    pass


@dataclass
class MaskStack:
    """Bundle of the masks one fusion job needs.

    m_drag / m_recon live in image resolution; checker_mask / update_mask in
    latent resolution. provenance records whether the image-res masks came
    from the user or were derived by the pipeline.
    """

    m_drag: np.ndarray
    m_recon: np.ndarray
    checker_mask: np.ndarray
    update_mask: np.ndarray
    space: str = "image"
    provenance: str = "derived"

    def __post_init__(self):
        for name in ("m_drag", "m_recon", "checker_mask", "update_mask"):
            setattr(self, name, binarize(getattr(self, name)))
        if self.provenance == "user_drawn" and not np.all(self.m_recon >= self.m_drag):
            log.warning("m_recon does not cover m_drag; reconstruction may erase drag results")


def downsample_mask(m: np.ndarray, factor: int) -> np.ndarray:
    """Majority vote per factor x factor block; ties resolve to 1."""
    m = binarize(m)
    h, w = m.shape
    if h % factor or w % factor:
        raise MaskError(f"mask dims {h}x{w} not divisible by factor {factor}")
    blocks = m.reshape(h // factor, factor, w // factor, factor)
    counts = blocks.sum(axis=(1, 3))
    return (counts * 2 >= factor * factor).astype(np.uint8)


def shrink_band(band: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a thin band down to latent resolution (any hit keeps it)."""
    band = binarize(band)
    h, w = band.shape
    if h % factor or w % factor:
        raise MaskError(f"band dims {h}x{w} not divisible by factor {factor}")
    return band.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


def dilate_mask(m: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev (square structuring element) binary dilation."""
    m = binarize(m)
    if radius <= 0:
        return m
    out = m.copy()
    for _ in range(radius):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        out = grown
    return out


def build_update_mask(
    dst_view_buffers: ViewImage,
    silhouette: np.ndarray,
    src_view: Viewpoint,
    center: np.ndarray,
    factor: int = LATENT_FACTOR,
    tau_side: float = TAU_SIDE,
) -> tuple[np.ndarray, str]:
    """Split the dst view along src's silhouette into keep/update sides.

    Pixels whose surface faces the drag view (n . d_src > tau_side) carry
    freshly baked drag content and take the dragged latent (0); the side the
    drag view only grazed or never saw keeps the original latent (1), as do
    background pixels. Returns the latent-resolution mask plus a status
    string ("ok" or "empty_silhouette"; an empty silhouette yields an
    all-ones mask since nothing needs updating).
    """
    silhouette = binarize(silhouette)
    if silhouette.sum() == 0:
        h, w = dst_view_buffers.coverage.shape
        return np.ones((h // factor, w // factor), dtype=np.uint8), "empty_silhouette"
    dots = src_facing_field(dst_view_buffers, src_view, center)
    keep = np.where(
        dst_view_buffers.coverage > 0,
        (dots <= tau_side).astype(np.uint8),
        np.uint8(1),
    )
    return downsample_mask(keep, factor), "ok"


def build_checker_mask(
    update_mask: np.ndarray,
    silhouette_band: np.ndarray,
    cell: int = CHECKER_CELL,
    dilation: int = BAND_DILATION,
) -> np.ndarray:
    """Checker variant: update_mask outside the dilated band, checkerboard inside.

    update_mask and silhouette_band are latent resolution; cell is the
    checker cell size in latent pixels.
    """
    if cell < 1:
        raise MaskError("cell must be >= 1")
    update_mask = binarize(update_mask)
    band = dilate_mask(binarize(silhouette_band), dilation)
    if band.shape != update_mask.shape:
        raise MaskError("band and update_mask resolutions differ")
    h, w = update_mask.shape
    rr, cc = np.mgrid[0:h, 0:w]
    checker = (((rr // cell) + (cc // cell)) % 2).astype(np.uint8)
    return np.where(band > 0, checker, update_mask).astype(np.uint8)


def schedule_fusion_mask(i: int, masks: MaskStack, s1: int = 20, s2: int = 40) -> np.ndarray:
    """Step-scheduled fusion mask: checker for i < s1, update for s1 <= i < s2."""
    if not s1 < s2:
        raise MaskError("schedule requires s1 < s2")
    if i < 0 or i >= s2:
        raise MaskError(f"step {i} outside fusion schedule [0, {s2})")
    return masks.checker_mask if i < s1 else masks.update_mask
