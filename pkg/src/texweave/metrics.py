"""Image quality metrics and the strategy-comparison report.

PSNR/SSIM are self-contained implementations (SSIM: 11x11 Gaussian window,
sigma 1.5, standard stabilizers, averaged over the valid interior). The
perceptual metric is pluggable; the default is multi-scale SSIM distance.
Mean distance (MD) measures how far dragged content landed from its target,
with either an exact oracle correspondence or a best-effort patch matcher.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .util import binarize, config_hash

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
FAILURE_SSIM_THRESHOLD = 0.85
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class MetricError(ValueError):
    pass


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' convolution with the 1D kernel along both axes."""
    n = len(kernel)
    win = np.lib.stride_tricks.sliding_window_view(img, n, axis=0)
    img = np.tensordot(win, kernel, axes=([2], [0]))
    win = np.lib.stride_tricks.sliding_window_view(img, n, axis=1)
    return np.tensordot(win, kernel, axes=([2], [0]))


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA) -> float:
    """Gaussian-windowed SSIM on the grayscale images, L = 1."""
    x, y = _gray(a), _gray(b)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise MetricError(f"image smaller than the {window}x{window} SSIM window")
    k = _gaussian_kernel(window, sigma)
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    xx = _filter_valid(x * x, k) - mu_x ** 2
    yy = _filter_valid(y * y, k) - mu_y ** 2
    xy = _filter_valid(x * y, k) - mu_x * mu_y
    c1, c2 = K1 ** 2, K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2]) / 4.0


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale SSIM; scales that no longer fit the window are dropped."""
    x, y = _gray(a), _gray(b)
    k = _gaussian_kernel()
    c1, c2 = K1 ** 2, K2 ** 2
    vals = []
    for level in range(len(MSSSIM_WEIGHTS)):
        if min(x.shape) < SSIM_WINDOW:
            break
        mu_x, mu_y = _filter_valid(x, k), _filter_valid(y, k)
        xx = _filter_valid(x * x, k) - mu_x ** 2
        yy = _filter_valid(y * y, k) - mu_y ** 2
        xy = _filter_valid(x * y, k) - mu_x * mu_y
        cs = float(np.mean((2 * xy + c2) / (xx + yy + c2)))
        lum = float(np.mean(
            (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
        ))
        vals.append((lum, cs))
        x, y = _downsample2(x), _downsample2(y)
    if not vals:
        raise MetricError("image too small for MS-SSIM")
    weights = np.asarray(MSSSIM_WEIGHTS[: len(vals)])
    weights = weights / weights.sum()
    # luminance enters only at the coarsest scale, contrast/structure at all
    out = max(vals[-1][0], 1e-6) ** weights[-1]
    for (_, cs), wgt in zip(vals, weights):
        out *= max(cs, 1e-6) ** wgt
    return float(out)


def perceptual_distance(a: np.ndarray, b: np.ndarray, kind: str = "msssim") -> float:
    """Pluggable perceptual metric; default is 1 - MS-SSIM."""
    fn = PERCEPTUAL_METRICS.get(kind)
    if fn is None:
        raise MetricError(f"unknown perceptual metric '{kind}'")
    return fn(a, b)


PERCEPTUAL_METRICS = {
    "msssim": lambda a, b: 1.0 - ms_ssim(a, b),
}


def register_perceptual_metric(name: str, fn) -> None:
    """Mount an external perceptual metric (e.g., a learned one)."""
    PERCEPTUAL_METRICS[name] = fn


def locate_patch(original: np.ndarray, edited: np.ndarray,
                 source: tuple[float, float], target: tuple[float, float],
                 patch_radius: int = 4, search_pad: int = 8):
    """Find where the content at `source` moved to, by SSD patch search.

    The window is centered on the target and sized by the drag length.
    Returns ((row, col), normalized_ssd) or (None, inf) when the patch
    cannot be extracted.
    """
    g0, g1 = _gray(original), _gray(edited)
    h, w = g0.shape
    sr, sc = int(round(source[0])), int(round(source[1]))
    r0, r1 = sr - patch_radius, sr + patch_radius + 1
    c0, c1 = sc - patch_radius, sc + patch_radius + 1
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        return None, math.inf
    ref = g0[r0:r1, c0:c1]
    span = int(math.ceil(math.hypot(target[0] - source[0], target[1] - source[1]))) + search_pad
    tr, tc = int(round(target[0])), int(round(target[1]))
    best, best_pos = math.inf, None
    for rr in range(max(patch_radius, tr - span), min(h - patch_radius - 1, tr + span) + 1):
        for cc in range(max(patch_radius, tc - span), min(w - patch_radius - 1, tc + span) + 1):
            cand = g1[rr - patch_radius:rr + patch_radius + 1,
                      cc - patch_radius:cc + patch_radius + 1]
            d = float(np.mean((cand - ref) ** 2))
            if d < best:
                best, best_pos = d, (float(rr), float(cc))
    return best_pos, best


def mean_distance(edited: np.ndarray, targets, sources, correspondence,
                  original: np.ndarray | None = None) -> tuple[float, int]:
    """Mean distance between targets and located post-edit source content.

    correspondence is either a callable source -> (row, col) (the oracle
    mode) or the string "patch", which runs the SSD matcher against
    `original`. Returns (mean distance in pixels, unresolved handle count);
    unresolved handles are excluded from the mean.
    """
    if len(targets) == 0 or len(targets) != len(sources):
        raise MetricError("need matching nonempty source/target lists")
    dists, unresolved = [], 0
    for src, tgt in zip(sources, targets):
        if callable(correspondence):
            loc = correspondence(tuple(src))
        elif correspondence == "patch":
            if original is None:
                raise MetricError("patch correspondence requires the original image")
            loc, _ = locate_patch(original, edited, tuple(src), tuple(tgt))
        else:
            raise MetricError(f"unknown correspondence mode {correspondence!r}")
        if loc is None:
            unresolved += 1
            continue
        dists.append(math.hypot(tgt[0] - loc[0], tgt[1] - loc[1]))
    if not dists:
        return math.inf, unresolved
    return float(np.mean(dists)), unresolved


def outside_mask_ssim(edited: np.ndarray, original: np.ndarray, m_recon: np.ndarray) -> float:
    """SSIM restricted to the unedited region: differences inside the mask
    are nulled by compositing the original back in before scoring."""
    m = binarize(m_recon)[..., None].astype(np.float64)
    composite = np.asarray(edited, dtype=np.float64) * (1 - m) + np.asarray(original, np.float64) * m
    return ssim(composite, original)


def failure_rate(cases: list[dict], threshold: float = FAILURE_SSIM_THRESHOLD) -> float:
    """Fraction of cases whose outside-mask SSIM drops below the threshold.

    Each case is {"edited", "original", "m_recon"}; m_recon may be None for
    whole-image comparison.
    """
    if not cases:
        raise MetricError("failure_rate requires at least one case")
    failed = 0
    for case in cases:
        m = case.get("m_recon")
        if m is None:
            m = np.zeros(case["original"].shape[:2], dtype=np.uint8)
        if outside_mask_ssim(case["edited"], case["original"], m) < threshold:
            failed += 1
    return failed / len(cases)


@dataclass
class EvalReport:
    """Per-strategy metric rows plus the manifest they were computed from."""

    rows: dict[str, dict[str, float]]
    manifest: dict
    failure_threshold: float = FAILURE_SSIM_THRESHOLD
    config_digest: str = ""
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.config_digest:
            self.config_digest = config_hash(self.manifest)

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "manifest": self.manifest,
            "failure_threshold": self.failure_threshold,
            "config_digest": self.config_digest,
            "notes": self.notes,
        }

    def to_markdown(self) -> str:
        cols = ["psnr", "ssim", "perceptual", "failure_rate", "md"]
        lines = [
            "| Strategy | PSNR ^ | SSIM ^ | Perceptual v | Failure v | MD v |",
            "|---|---|---|---|---|---|",
        ]
        for name, row in self.rows.items():
            cells = []
            for c in cols:
                v = row.get(c)
                cells.append("-" if v is None else f"{v:.4g}")
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        lines.append("")
        lines.append(f"failure threshold: outside-mask SSIM < {self.failure_threshold}")
        lines.append(f"manifest digest: {self.config_digest}")
        return "\n".join(lines)
