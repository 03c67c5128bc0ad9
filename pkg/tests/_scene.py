"""The pinned toy scene shared by the acceptance suite.

One cube session at 96x96 with a purpose-built atlas: the +x face carries
high-contrast draggable features while the faces a neighbor view grazes are
kept flat, so band seam energy measures actual seams rather than baseline
texture gradients. Budgets are sized for CPU runs; the backend seed and all
stage seeds derive from the session seed, so the scene is fully pinned.
"""

from __future__ import annotations

import numpy as np

from texweave.assets import make_cube
from texweave.drag import DragSpec
from texweave.geometry import save_mesh_bundle
from texweave.render import render
from texweave.session import SessionStore

PINNED_OVERRIDES = {
    "image_size": 96,
    "atlas_size": 128,
    "n_views": 10,
    "seed": 7,
    "recon_steps": 150,
    "recon_lr": 1e-3,
    "backend": {
        "ae_steps": 2600,
        "noise_steps": 800,
        "lora_steps_multiview": 1200,
        "lora_lr": 1e-3,
    },
}


def scene_texture(size: int = 128) -> np.ndarray:
    """Cube atlas: featureful +x face, flat side faces, mild checker elsewhere.

    Face layout (3x2 UV grid, atlas rows count from the top):
      (0,0)=+x bottom-left, (1,0)=-x, (2,0)=+y, (0,1)=-y, (1,1)=+z, (2,1)=-z.
    """
    tex = np.full((size, size, 3), 0.62, dtype=np.float32)
    third, half = size // 3, size // 2

    def cell(gx, gy):
        # uv v=0 is the bottom of the atlas image
        r0 = size - (gy + 1) * half
        return slice(r0, r0 + half), slice(gx * third, (gx + 1) * third)

    # +x: drag content. red band, two blobs, dark stripes
    rs, cs = cell(0, 0)
    face = tex[rs, cs]
    h, w = face.shape[:2]
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float32)
    face[:] = (0.85, 0.8, 0.7)
    face[(rr > h * 0.42) & (rr < h * 0.58)] = (0.85, 0.08, 0.08)
    for (fy, fx, fr, col) in [(0.28, 0.3, 0.11, (0.05, 0.1, 0.6)),
                              (0.72, 0.62, 0.13, (0.05, 0.45, 0.1))]:
        blob = ((rr - fy * h) ** 2 + (cc - fx * w) ** 2) < (fr * h) ** 2
        face[blob] = col
    face[:, (cc[0] // max(w // 10, 1)).astype(int) % 3 == 0] *= 0.55
    tex[rs, cs] = face

    # side faces the neighbors graze: flat with a faint gradient
    for gx, gy, base in [((2), 0, 0.58), (0, 1, 0.66)]:
        rs, cs = cell(gx, gy)
        h = tex[rs, cs].shape[0]
        grad = np.linspace(0.0, 0.03, h, dtype=np.float32)[:, None, None]
        tex[rs, cs] = base + grad

    # remaining faces: mild checker for training variety
    for gx, gy in [(1, 0), (1, 1), (2, 1)]:
        rs, cs = cell(gx, gy)
        face = tex[rs, cs]
        h, w = face.shape[:2]
        rr, cc = np.mgrid[0:h, 0:w]
        board = (((rr // (h // 4)) + (cc // (w // 4))) % 2).astype(np.float32)
        face[:] = (0.45 + 0.18 * board)[..., None] * np.array([1.0, 0.95, 0.85], np.float32)
        tex[rs, cs] = face

    return np.clip(tex, 0.0, 1.0)


def build_pinned_session(root, session_id: str = "pinned", overrides: dict | None = None):
    """Create and pretrain the pinned cube session under `root`."""
    mesh = make_cube(scene_texture())
    obj = save_mesh_bundle(mesh, root / "assets", "pinned_cube")
    store = SessionStore(root / "data")
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in PINNED_OVERRIDES.items()}
    for k, v in (overrides or {}).items():
        if isinstance(v, dict):
            merged.setdefault(k, {}).update(v)
        else:
            merged[k] = v
    sess = store.create_session(obj, None, merged, session_id=session_id)
    sess.pretrain()
    return sess


def pinned_drag(sess):
    """The canonical oracle drag: shift the red band across V_t's silhouette.

    Returns (spec, m_recon). View 0 looks at the +x face; the drag pushes a
    stripe rightward across the cube's +x/+y edge.
    """
    img = render(sess.mesh_at(0), sess.views[0], background=sess.background())
    cov = img.coverage
    ys, xs = np.nonzero(cov)
    cy = int(ys.mean())
    row_xs = xs[np.abs(ys - cy) < 3]
    right_edge = int(row_xs.max())
    m_drag = np.zeros_like(cov)
    m_drag[cy - 18:cy + 18, right_edge - 26:right_edge + 4] = 1
    spec = DragSpec(
        handles=[((float(cy), float(right_edge - 14)), (float(cy), float(right_edge - 2)))],
        m_drag=m_drag,
        view=sess.views[0],
    )
    m_recon = np.zeros_like(cov)
    m_recon[cy - 24:cy + 24, right_edge - 32:right_edge + 8] = 1
    return spec, m_recon
