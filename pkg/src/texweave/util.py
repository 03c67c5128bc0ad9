"""Shared helpers: image I/O, deterministic seeding, hashing."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path: str | Path) -> np.ndarray:
    """Load an image file as float32 RGB in [0, 1], shape (H, W, 3)."""
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def save_image(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(to_uint8(rgb)).save(path)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def image_to_png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(rgb)).save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_image(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a binary mask as a 1-bit PNG."""
    Image.fromarray((mask > 0).astype(np.uint8) * 255).convert("1").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return (np.asarray(img) > 127).astype(np.uint8)


def mask_to_png_bytes(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((mask > 0).astype(np.uint8) * 255).convert("1").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_mask(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("L")
    return (np.asarray(img) > 127).astype(np.uint8)


def derive_seed(base: int, label: str) -> int:
    """Stable sub-seed for a named pipeline stage.

    Uses blake2b, not hash(), so the value survives process restarts.
    """
    h = hashlib.blake2b(f"{base}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") & 0x7FFFFFFF


def config_hash(obj) -> str:
    """Short content hash of any JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def binarize(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) > 0.5).astype(np.uint8)
