"""Latent-space point dragging.

Motion supervision pulls feature patches at the handle points one unit
toward their targets per iteration while an L1 term holds the region outside
the drag mask and static silhouette control points in place; handles are
re-located each iteration by nearest-neighbor feature search. The module
also ships OracleDragEngine, a pure pixel-translation double used to test
everything downstream of dragging independent of optimizer quality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .backend import AdapterWeights, LatentGrid, ToyDiffusionBackend
from .geometry import Viewpoint
from .masks import LATENT_FACTOR, downsample_mask
from .util import binarize

PATCH_RADIUS = 1   # latent px, motion-supervision patch
SEARCH_RADIUS = 3  # latent px, tracking window
TRACK_LOSS_FACTOR = 6.0  # abort when the best match exceeds this ratio of the reference magnitude


class DragError(ValueError):
    pass


@dataclass
class DragSpec:
    """Source/target handles plus preservation controls for one drag.

    Coordinates are (row, col) pixels in the drag view's image space.
    """

    handles: list[tuple[tuple[float, float], tuple[float, float]]]
    static_points: list[tuple[float, float]] = field(default_factory=list)
    m_drag: np.ndarray | None = None
    lambda_unmask: float = 1.0
    lambda_static: float = 1.0
    view: Viewpoint | None = None

    def __post_init__(self):
        if len(self.handles) < 1:
            raise DragError("drag requires at least one handle pair")
        if self.lambda_unmask < 0 or self.lambda_static < 0:
            raise DragError("loss weights must be >= 0")

    def to_json(self) -> dict:
        return {
            "handles": [
                {"source": list(s), "target": list(t)} for s, t in self.handles
            ],
            "static_points": [list(p) for p in self.static_points],
            "lambda_unmask": self.lambda_unmask,
            "lambda_static": self.lambda_static,
            "view": self.view.to_json() if self.view else None,
        }


@dataclass
class DragResult:
    latent: LatentGrid
    status: str  # "converged", "max_iters", "tracking_lost"
    iterations: int
    handle_history: list[list[tuple[float, float]]]
    final_handles: list[tuple[float, float]]


def sample_static_points(silhouette_pixels, k: int) -> list[tuple[int, int]]:
    """Greedy max-sum-of-distances selection of silhouette control points.

    The first point is the lexicographically smallest coordinate; each next
    point maximizes the sum of Euclidean distances to the already selected
    points, ties resolved lexicographically.
    """
    pts = [tuple(p) for p in silhouette_pixels]
    if k > len(pts):
        raise DragError(f"requested {k} static points from {len(pts)} pixels")
    if k == 0:
        return []
    arr = np.asarray(sorted(pts), dtype=np.float64)
    chosen = [0]
    cum = np.linalg.norm(arr - arr[0], axis=1)
    for _ in range(k - 1):
        cum_masked = cum.copy()
        cum_masked[chosen] = -np.inf
        best = cum_masked.max()
        cand = np.nonzero(cum_masked == best)[0]
        nxt = int(cand[0])  # arr is lexicographically sorted, first hit wins ties
        chosen.append(nxt)
        cum = cum + np.linalg.norm(arr - arr[nxt], axis=1)
    return [(int(arr[i][0]), int(arr[i][1])) for i in chosen]


def _patch(feats: torch.Tensor, r: float, c: float, radius: int) -> torch.Tensor:
    """Bilinearly interpolated (C, 2r+1, 2r+1) feature patch centered at (r, c)."""
    _, h, w = feats.shape
    dr = torch.arange(-radius, radius + 1, dtype=torch.float32)
    rr = torch.clamp(dr + r, 0, h - 1)
    cc = torch.clamp(dr + c, 0, w - 1)
    r0 = rr.floor().long().clamp(0, h - 2)
    c0 = cc.floor().long().clamp(0, w - 2)
    fr = (rr - r0).view(1, -1, 1)
    fc = (cc - c0).view(1, 1, -1)
    v00 = feats[:, r0][:, :, c0]
    v01 = feats[:, r0][:, :, c0 + 1]
    v10 = feats[:, r0 + 1][:, :, c0]
    v11 = feats[:, r0 + 1][:, :, c0 + 1]
    return (v00 * (1 - fr) * (1 - fc) + v01 * (1 - fr) * fc
            + v10 * fr * (1 - fc) + v11 * fr * fc)


def _track_handles(f0: torch.Tensor, f1: torch.Tensor, handles, init_handles):
    """Nearest-neighbor relocation of each handle inside the search window.

    Returns (new_handles, worst_ratio) where worst_ratio compares the best
    match distance against the per-handle feature magnitude.
    """
    _, h, w = f1.shape
    new_handles = []
    worst = 0.0
    for (r, c), (r0, c0) in zip(handles, init_handles):
        ref = f0[:, int(round(r0)), int(round(c0))]
        ri, ci = int(round(r)), int(round(c))
        r1, r2 = max(ri - SEARCH_RADIUS, 0), min(ri + SEARCH_RADIUS + 1, h)
        c1, c2 = max(ci - SEARCH_RADIUS, 0), min(ci + SEARCH_RADIUS + 1, w)
        window = f1[:, r1:r2, c1:c2]
        dist = (window - ref[:, None, None]).abs().sum(dim=0)
        flat = int(dist.argmin())
        dr, dc = divmod(flat, dist.shape[1])
        best = float(dist.view(-1)[flat])
        scale = float(ref.abs().sum()) + 1e-6
        worst = max(worst, best / scale)
        new_handles.append((float(r1 + dr), float(c1 + dc)))
    return new_handles, worst


def drag_latent(
    backend: ToyDiffusionBackend,
    z_start: LatentGrid,
    spec: DragSpec,
    adapter: AdapterWeights | None,
    n_iters: int | None = None,
    lr: float | None = None,
) -> DragResult:
    """Optimize a noisy latent so handle features move to their targets.

    Runs up to n_iters iterations of motion supervision plus preservation
    terms, re-tracking handles each iteration; stops early once every handle
    is within one latent pixel of its target. lambda_unmask=inf projects the
    region outside the drag mask back to the reference latent exactly.
    """
    cfg = backend.cfg
    n_iters = n_iters if n_iters is not None else cfg.n_drag_steps
    lr = lr if lr is not None else cfg.drag_lr
    step = z_start.step

    f = LATENT_FACTOR
    handles = [(s[0] / f, s[1] / f) for s, _ in spec.handles]
    targets = [(t[0] / f, t[1] / f) for _, t in spec.handles]
    statics = [(p[0] / f, p[1] / f) for p in spec.static_points]
    init_handles = list(handles)

    z_ref = z_start.data.detach().clone()
    z = z_start.data.detach().clone().requires_grad_(True)
    _, h, w = z_ref.shape

    hard_project = math.isinf(spec.lambda_unmask)
    if spec.m_drag is not None:
        m_lat = torch.from_numpy(
            downsample_mask(binarize(spec.m_drag), f).astype(np.float32)
        )
    else:
        m_lat = torch.ones(h, w)

    with torch.no_grad():
        f0 = backend.unet_features(z_ref, step, adapter)

    opt = torch.optim.Adam([z], lr=lr)
    history = [list(handles)]
    status = "max_iters"
    iters_done = 0

    for it in range(n_iters):
        feats = backend.unet_features(z, step, adapter)

        if it > 0:
            with torch.no_grad():
                handles, worst = _track_handles(f0, feats.detach(), handles, init_handles)
            history.append(list(handles))
            if worst > TRACK_LOSS_FACTOR:
                status = "tracking_lost"
                break

        if all(math.hypot(hr - tr, hc - tc) < 1.0
               for (hr, hc), (tr, tc) in zip(handles, targets)):
            status = "converged"
            break
        iters_done = it + 1

        loss = z.new_zeros(())
        for (hr, hc), (tr, tc) in zip(handles, targets):
            dist = math.hypot(tr - hr, tc - hc)
            if dist < 1.0:
                continue
            dr, dc = (tr - hr) / dist, (tc - hc) / dist
            cur = _patch(feats, hr, hc, PATCH_RADIUS).detach()
            moved = _patch(feats, hr + dr, hc + dc, PATCH_RADIUS)
            loss = loss + F.l1_loss(moved, cur, reduction="sum")

        if not hard_project and spec.lambda_unmask > 0:
            loss = loss + spec.lambda_unmask * ((z - z_ref).abs() * (1 - m_lat)).sum()
        if spec.lambda_static > 0 and statics:
            for (sr, sc) in statics:
                cur = _patch(feats, sr, sc, 0)
                ref = _patch(f0, sr, sc, 0)
                loss = loss + spec.lambda_static * (cur - ref).abs().sum()

        opt.zero_grad()
        loss.backward()
        opt.step()
        if hard_project:
            with torch.no_grad():
                z.data = z.data * m_lat + z_ref * (1 - m_lat)

    out = z.detach().clone()
    if hard_project:
        out = out * m_lat + z_ref * (1 - m_lat)
    pixel_handles = [(r * f, c * f) for r, c in handles]
    return DragResult(
        latent=LatentGrid(out, step=step, view_tag=z_start.view_tag),
        status=status,
        iterations=iters_done,
        handle_history=history,
        final_handles=pixel_handles,
    )


class OracleDragEngine:
    """Test double that literally translates pixels inside the drag mask.

    Each step moves the masked content one pixel-unit toward the target; the
    handle position is tracked exactly, so displacement equals target-source
    at convergence and the mean-distance metric is zero by construction.
    """

    def __init__(self, image: np.ndarray, spec: DragSpec):
        if len(spec.handles) != 1:
            raise DragError("oracle double supports exactly one handle")
        self.original = np.asarray(image, dtype=np.float32)
        self.spec = spec
        (self.source, self.target) = spec.handles[0]
        self.offset = np.zeros(2)
        self.history: list[tuple[float, float]] = [tuple(self.source)]

    @property
    def handle(self) -> tuple[float, float]:
        return (self.source[0] + self.offset[0], self.source[1] + self.offset[1])

    def distance_to_target(self) -> float:
        hr, hc = self.handle
        return math.hypot(self.target[0] - hr, self.target[1] - hc)

    def step(self) -> bool:
        """Advance one unit; returns False once the handle reached the target."""
        remaining = np.array(self.target) - np.array(self.handle)
        dist = np.linalg.norm(remaining)
        if dist < 1e-9:
            return False
        self.offset = self.offset + remaining / dist * min(1.0, dist)
        self.history.append(tuple(self.handle))
        return True

    def run(self, max_steps: int = 10_000) -> np.ndarray:
        for _ in range(max_steps):
            if not self.step():
                break
        return self.render()

    def render(self) -> np.ndarray:
        """Translate masked content by the current integer offset."""
        dr, dc = int(round(self.offset[0])), int(round(self.offset[1]))
        img = self.original
        h, w = img.shape[:2]
        mask = binarize(self.spec.m_drag) if self.spec.m_drag is not None else np.ones((h, w), np.uint8)
        out = img.copy()
        moved = np.zeros_like(img)
        moved_mask = np.zeros((h, w), np.uint8)
        src_r0, src_r1 = max(0, -dr), min(h, h - dr)
        src_c0, src_c1 = max(0, -dc), min(w, w - dc)
        if src_r1 > src_r0 and src_c1 > src_c0:
            moved[src_r0 + dr:src_r1 + dr, src_c0 + dc:src_c1 + dc] = img[src_r0:src_r1, src_c0:src_c1]
            moved_mask[src_r0 + dr:src_r1 + dr, src_c0 + dc:src_c1 + dc] = mask[src_r0:src_r1, src_c0:src_c1]
        out[moved_mask > 0] = moved[moved_mask > 0]
        return out

    def locate(self, source: tuple[float, float]) -> tuple[float, float]:
        """Exact post-edit position of content originally at `source`."""
        return (source[0] + self.offset[0], source[1] + self.offset[1])
