"""Software rasterizer and its inverse: view rendering and atlas baking.

Rendering is a z-buffered perspective rasterization with perspective-correct
attribute interpolation and bilinear texel fetch; textures are transported
unlit. Baking projects an edited view image back onto the UV atlas with
occlusion testing against the view's depth buffer and a view-angle weight.
Everything is plain numpy and deterministic: the same inputs produce
bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import TexturedMesh, TextureAtlas, Viewpoint, camera_frame, project_points

# Weight exponent strongly demotes grazing texels at bake time.
BAKE_EXPONENT = 4.0
# Relative depth tolerance for bake-time occlusion tests.
DEPTH_EPS = 1e-3
# Silhouette band threshold on |n . dir_to_src_camera|.
TAU_SIL = 0.3

_NEAR = 1e-6


@dataclass
class ViewImage:
    """Rendered view plus the G-buffers the pipeline consumes.

    rgb in [0,1]; depth is camera-space z with +inf on background; normal is
    camera-space and unit-length on coverage; uv holds atlas coordinates
    (zeros on background). position/normal_world are world-space buffers kept
    for reprojection (bake, silhouette side tests).
    """

    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    uv: np.ndarray
    coverage: np.ndarray
    background_id: str
    view: Viewpoint
    position: np.ndarray
    normal_world: np.ndarray

    def copy_with_rgb(self, rgb: np.ndarray) -> "ViewImage":
        return ViewImage(
            rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
            depth=self.depth,
            normal=self.normal,
            uv=self.uv,
            coverage=self.coverage,
            background_id=self.background_id,
            view=self.view,
            position=self.position,
            normal_world=self.normal_world,
        )


@dataclass
class BakeResult:
    atlas: TextureAtlas
    status: str  # "ok" or "empty_view"
    texels_written: int = 0


def _screen_vertices(mesh: TexturedMesh, view: Viewpoint):
    """Project all mesh vertices; returns (pix rc, camera z, cam-space normals)."""
    eye, forward, right, up = camera_frame(view, mesh.center)
    rel = mesh.vertices - eye
    cam = np.stack([rel @ right, rel @ up, rel @ forward], axis=-1)
    h, w = view.image_size
    t = math.tan(view.fov_y / 2.0)
    aspect = w / h
    z = cam[:, 2]
    safe_z = np.where(np.abs(z) < _NEAR, _NEAR, z)
    col = (cam[:, 0] / (safe_z * t * aspect) + 1.0) * 0.5 * w - 0.5
    row = (1.0 - cam[:, 1] / (safe_z * t)) * 0.5 * h - 0.5
    n_cam = np.stack(
        [mesh.normals @ right, mesh.normals @ up, mesh.normals @ forward], axis=-1
    )
    return np.stack([row, col], axis=-1), z, n_cam


def _sample_bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear sample with edge clamp; rows/cols are float pixel coords."""
    h, w = img.shape[:2]
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[..., None] if img.ndim == 3 else (r - r0)
    fc = (c - c0)[..., None] if img.ndim == 3 else (c - c0)
    v00 = img[r0, c0]
    v01 = img[r0, c1]
    v10 = img[r1, c0]
    v11 = img[r1, c1]
    top = v00 * (1 - fc) + v01 * fc
    bot = v10 * (1 - fc) + v11 * fc
    return top * (1 - fr) + bot * fr


def sample_texture(atlas: TextureAtlas, uv: np.ndarray) -> np.ndarray:
    """Bilinear atlas fetch. uv has shape (..., 2), u right / v up."""
    h, w = atlas.size
    u = uv[..., 0]
    v = uv[..., 1]
    cols = u * w - 0.5
    rows = (1.0 - v) * h - 0.5
    return _sample_bilinear(atlas.pixels, rows, cols)


def render(mesh: TexturedMesh, view: Viewpoint, background=0.5, background_id: str = "") -> ViewImage:
    """Render mesh into view, compositing `background` where nothing covers.

    background may be a scalar gray, an (r, g, b) tuple, or an (H, W, 3)
    image matching the view size. Degenerate triangles are skipped.
    """
    h, w = view.image_size
    pix, z, n_cam = _screen_vertices(mesh, view)

    depth = np.full((h, w), np.inf, dtype=np.float64)
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3), dtype=np.float64)

    rows_grid, cols_grid = np.mgrid[0:h, 0:w]
    for fi, f in enumerate(mesh.faces):
        if z[f].min() <= _NEAR:
            continue  # behind the camera; hemisphere views never hit this
        p0, p1, p2 = pix[f[0]], pix[f[1]], pix[f[2]]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area) < 1e-12:
            continue
        rmin = max(int(math.floor(min(p0[0], p1[0], p2[0]))), 0)
        rmax = min(int(math.ceil(max(p0[0], p1[0], p2[0]))) + 1, h)
        cmin = max(int(math.floor(min(p0[1], p1[1], p2[1]))), 0)
        cmax = min(int(math.ceil(max(p0[1], p1[1], p2[1]))) + 1, w)
        if rmin >= rmax or cmin >= cmax:
            continue
        rr = rows_grid[rmin:rmax, cmin:cmax]
        cc = cols_grid[rmin:rmax, cmin:cmax]
        w0 = ((p1[0] - rr) * (p2[1] - cc) - (p1[1] - cc) * (p2[0] - rr)) / area
        w1 = ((p2[0] - rr) * (p0[1] - cc) - (p2[1] - cc) * (p0[0] - rr)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        zf = z[f]
        inv_z = w0 / zf[0] + w1 / zf[1] + w2 / zf[2]
        z_pix = 1.0 / np.where(inv_z == 0, 1e-30, inv_z)
        closer = inside & (z_pix > _NEAR) & (z_pix < depth[rmin:rmax, cmin:cmax])
        if not closer.any():
            continue
        sub_depth = depth[rmin:rmax, cmin:cmax]
        sub_face = face_id[rmin:rmax, cmin:cmax]
        sub_bary = bary[rmin:rmax, cmin:cmax]
        sub_depth[closer] = z_pix[closer]
        sub_face[closer] = fi
        sub_bary[closer] = np.stack([w0[closer], w1[closer], w2[closer]], axis=-1)

    coverage = (face_id >= 0).astype(np.uint8)
    ys, xs = np.nonzero(coverage)
    uv_buf = np.zeros((h, w, 2), dtype=np.float64)
    normal_cam = np.zeros((h, w, 3), dtype=np.float64)
    normal_wld = np.zeros((h, w, 3), dtype=np.float64)
    position = np.zeros((h, w, 3), dtype=np.float64)
    rgb = _background_layer(background, h, w)

    if len(ys):
        fids = face_id[ys, xs]
        faces = mesh.faces[fids]
        b = bary[ys, xs]
        zf = z[faces]  # (N, 3)
        pw = b / zf
        pw = pw / pw.sum(axis=1, keepdims=True)
        uv_pix = np.einsum("nk,nkd->nd", pw, mesh.uv_coords[fids])
        pos_pix = np.einsum("nk,nkd->nd", pw, mesh.vertices[faces])
        ncam_pix = np.einsum("nk,nkd->nd", pw, n_cam[faces])
        nwld_pix = np.einsum("nk,nkd->nd", pw, mesh.normals[faces])
        ncam_pix /= np.maximum(np.linalg.norm(ncam_pix, axis=1, keepdims=True), 1e-12)
        nwld_pix /= np.maximum(np.linalg.norm(nwld_pix, axis=1, keepdims=True), 1e-12)
        uv_buf[ys, xs] = np.clip(uv_pix, 0.0, 1.0)
        position[ys, xs] = pos_pix
        normal_cam[ys, xs] = ncam_pix
        normal_wld[ys, xs] = nwld_pix
        rgb[ys, xs] = sample_texture(mesh.texture, uv_buf[ys, xs])

    return ViewImage(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=depth,
        normal=normal_cam,
        uv=uv_buf,
        coverage=coverage,
        background_id=background_id,
        view=view,
        position=position,
        normal_world=normal_wld,
    )


def _background_layer(background, h: int, w: int) -> np.ndarray:
    if isinstance(background, np.ndarray) and background.ndim == 3:
        if background.shape[:2] != (h, w):
            raise ValueError(
                f"background {background.shape[:2]} does not match view {h}x{w}"
            )
        return background.astype(np.float64).copy()
    if isinstance(background, (tuple, list)):
        return np.tile(np.asarray(background, dtype=np.float64), (h, w, 1))
    return np.full((h, w, 3), float(background), dtype=np.float64)


def _rasterize_uv_space(mesh: TexturedMesh, atlas_hw: tuple[int, int]):
    """Map each texel covered by the UV layout to its surface point.

    Returns (texel_face, texel_pos, texel_normal) where texel_face is
    (H, W) int64 with -1 on unmapped texels. Overlapping charts resolve
    by face order (last write wins), which is deterministic.
    """
    ah, aw = atlas_hw
    texel_face = np.full((ah, aw), -1, dtype=np.int64)
    texel_pos = np.zeros((ah, aw, 3), dtype=np.float64)
    texel_nrm = np.zeros((ah, aw, 3), dtype=np.float64)
    rows_grid, cols_grid = np.mgrid[0:ah, 0:aw]
    for fi, f in enumerate(mesh.faces):
        uv = mesh.uv_coords[fi]
        pr = (1.0 - uv[:, 1]) * ah - 0.5  # texel row of each corner
        pc = uv[:, 0] * aw - 0.5
        area = (pr[1] - pr[0]) * (pc[2] - pc[0]) - (pc[1] - pc[0]) * (pr[2] - pr[0])
        if abs(area) < 1e-12:
            continue
        rmin = max(int(math.floor(pr.min())), 0)
        rmax = min(int(math.ceil(pr.max())) + 1, ah)
        cmin = max(int(math.floor(pc.min())), 0)
        cmax = min(int(math.ceil(pc.max())) + 1, aw)
        if rmin >= rmax or cmin >= cmax:
            continue
        rr = rows_grid[rmin:rmax, cmin:cmax]
        cc = cols_grid[rmin:rmax, cmin:cmax]
        w0 = ((pr[1] - rr) * (pc[2] - cc) - (pc[1] - cc) * (pr[2] - rr)) / area
        w1 = ((pr[2] - rr) * (pc[0] - cc) - (pc[2] - cc) * (pr[0] - rr)) / area
        w2 = 1.0 - w0 - w1
        eps = 1e-9
        inside = (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        if not inside.any():
            continue
        verts = mesh.vertices[f]
        norms = mesh.normals[f]
        b = np.stack([w0[inside], w1[inside], w2[inside]], axis=-1)
        sub_face = texel_face[rmin:rmax, cmin:cmax]
        sub_pos = texel_pos[rmin:rmax, cmin:cmax]
        sub_nrm = texel_nrm[rmin:rmax, cmin:cmax]
        sub_face[inside] = fi
        sub_pos[inside] = b @ verts
        nn = b @ norms
        nn /= np.maximum(np.linalg.norm(nn, axis=1, keepdims=True), 1e-12)
        sub_nrm[inside] = nn
    return texel_face, texel_pos, texel_nrm


def bake_view_to_atlas(
    mesh: TexturedMesh,
    view: Viewpoint,
    edited: ViewImage,
    atlas: TextureAtlas,
    bake_mask: np.ndarray | None = None,
    exponent: float = BAKE_EXPONENT,
    depth_eps: float = DEPTH_EPS,
) -> BakeResult:
    """Project an edited view image back into the texture atlas.

    Each texel visible in the view (occlusion-tested against the view depth
    buffer) is blended toward the bilinearly sampled edited pixel with weight
    w = max(cos(theta), 0)^exponent, theta being the angle between surface
    normal and the direction to the camera. The atlas weight channel
    accumulates w. With a bake_mask (view image space), texels projecting
    outside the mask are untouched.
    """
    out = atlas.copy()
    if edited.coverage.sum() == 0:
        return BakeResult(atlas=out, status="empty_view")

    eye, _, _, _ = camera_frame(view, mesh.center)
    ah, aw = out.size
    texel_face, texel_pos, texel_nrm = _rasterize_uv_space(mesh, (ah, aw))
    tys, txs = np.nonzero(texel_face >= 0)
    if len(tys) == 0:
        return BakeResult(atlas=out, status="empty_view")
    pos = texel_pos[tys, txs]
    nrm = texel_nrm[tys, txs]

    pix, z = project_points(pos, view, mesh.center)
    h, w = view.image_size
    rows, cols = pix[:, 0], pix[:, 1]
    in_img = (rows >= 0) & (rows <= h - 1) & (cols >= 0) & (cols <= w - 1) & (z > _NEAR)

    ri = np.clip(np.round(rows).astype(np.int64), 0, h - 1)
    ci = np.clip(np.round(cols).astype(np.int64), 0, w - 1)
    buf_depth = edited.depth[ri, ci]
    visible = in_img & np.isfinite(buf_depth) & (z <= buf_depth * (1.0 + depth_eps))

    to_cam = eye - pos
    to_cam /= np.maximum(np.linalg.norm(to_cam, axis=1, keepdims=True), 1e-12)
    cos_t = np.einsum("nd,nd->n", nrm, to_cam)
    wgt = np.clip(cos_t, 0.0, 1.0) ** exponent
    visible &= wgt > 0

    if bake_mask is not None:
        m = np.asarray(bake_mask)
        if m.shape != (h, w):
            raise ValueError("bake_mask must match the view image size")
        visible &= m[ri, ci] > 0

    idx = np.nonzero(visible)[0]
    if len(idx) == 0:
        return BakeResult(atlas=out, status="ok", texels_written=0)
    samples = _sample_bilinear(edited.rgb.astype(np.float64), rows[idx], cols[idx])
    wv = wgt[idx][:, None]
    sel_y, sel_x = tys[idx], txs[idx]
    old = out.pixels[sel_y, sel_x].astype(np.float64)
    out.pixels[sel_y, sel_x] = (old * (1.0 - wv) + samples * wv).astype(np.float32)
    out.weight[sel_y, sel_x] += wgt[idx].astype(np.float32)
    np.clip(out.pixels, 0.0, 1.0, out=out.pixels)
    return BakeResult(atlas=out, status="ok", texels_written=len(idx))


def src_facing_field(dst_img: ViewImage, src_view: Viewpoint, center: np.ndarray) -> np.ndarray:
    """Signed n . dir(surface -> src camera) over the dst view, 0 off coverage.

    The zero level set on coverage is view_src's occluding contour as seen
    from the dst view.
    """
    eye_src, _, _, _ = camera_frame(src_view, center)
    rel = eye_src - dst_img.position
    rel /= np.maximum(np.linalg.norm(rel, axis=2, keepdims=True), 1e-12)
    dots = np.einsum("hwd,hwd->hw", dst_img.normal_world, rel)
    return np.where(dst_img.coverage > 0, dots, 0.0)


def rasterize_silhouette(
    mesh: TexturedMesh,
    view_src: Viewpoint,
    view_dst: Viewpoint,
    tau_sil: float = TAU_SIL,
) -> np.ndarray:
    """Mark dst-view pixels whose surface point lies on src's occluding contour.

    A pixel is in the band when |n . d_src| < tau_sil, with n the surface
    normal and d_src the direction to view_src's camera, restricted to
    view_dst coverage. Returns a binary (H, W) uint8 grid.
    """
    dst_img = render(mesh, view_dst, background=0.0)
    dots = src_facing_field(dst_img, view_src, mesh.center)
    band = (np.abs(dots) < tau_sil) & (dst_img.coverage > 0)
    return band.astype(np.uint8)
