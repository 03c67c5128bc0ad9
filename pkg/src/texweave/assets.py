"""Procedural demo assets: meshes with UV atlases, textures, backgrounds.

Everything here is deterministic. Backgrounds are multi-octave value noise
with natural palettes, standing in for the real-photo backdrops used when
rendering training views.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import TextureAtlas, TexturedMesh, compute_vertex_normals


def checker_texture(size: int = 256, cells: int = 8,
                    c0=(0.15, 0.25, 0.65), c1=(0.95, 0.85, 0.25)) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    cell = size // cells
    board = (((rr // cell) + (cc // cell)) % 2).astype(np.float32)
    tex = np.empty((size, size, 3), dtype=np.float32)
    for k in range(3):
        tex[..., k] = c0[k] * (1 - board) + c1[k] * board
    return tex


def feature_texture(size: int = 256, seed: int = 7) -> np.ndarray:
    """High-contrast texture with blobs and stripes, good for tracking drags."""
    rng = np.random.default_rng(seed)
    tex = np.full((size, size, 3), 0.82, dtype=np.float32)
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float32)
    for _ in range(6):
        y, x = rng.uniform(0.15, 0.85, 2) * size
        rad = rng.uniform(0.04, 0.09) * size
        color = rng.uniform(0.0, 1.0, 3).astype(np.float32)
        blob = ((rr - y) ** 2 + (cc - x) ** 2) < rad ** 2
        tex[blob] = color
    stripes = ((cc // (size // 16)) % 4 == 0)
    tex[stripes] = tex[stripes] * 0.35
    band = (rr > size * 0.45) & (rr < size * 0.55)
    tex[band] = np.array([0.85, 0.1, 0.1], dtype=np.float32)
    return np.clip(tex, 0.0, 1.0)


def make_cube(texture: np.ndarray | None = None, side: float = 1.0) -> TexturedMesh:
    """Unit cube, six quads laid out on a 3x2 UV grid, fan-triangulated."""
    s = side / 2.0
    verts = np.array([
        [-s, -s, -s], [s, -s, -s], [s, s, -s], [-s, s, -s],
        [-s, -s, s], [s, -s, s], [s, s, s], [-s, s, s],
    ])
    # quad corner order walks each face counterclockwise seen from outside
    quads = [
        ([1, 2, 6, 5], 0, 0),  # +x
        ([3, 0, 4, 7], 1, 0),  # -x
        ([2, 3, 7, 6], 2, 0),  # +y
        ([0, 1, 5, 4], 0, 1),  # -y
        ([4, 5, 6, 7], 1, 1),  # +z
        ([3, 2, 1, 0], 2, 1),  # -z
    ]
    faces, uvs = [], []
    for corners, gx, gy in quads:
        u0, v0 = gx / 3.0, gy / 2.0
        u1, v1 = (gx + 1) / 3.0, (gy + 1) / 2.0
        inset_u = (u1 - u0) * 0.02
        inset_v = (v1 - v0) * 0.02
        quad_uv = [
            (u0 + inset_u, v0 + inset_v),
            (u1 - inset_u, v0 + inset_v),
            (u1 - inset_u, v1 - inset_v),
            (u0 + inset_u, v1 - inset_v),
        ]
        for k in range(1, 3):
            faces.append([corners[0], corners[k], corners[k + 1]])
            uvs.append([quad_uv[0], quad_uv[k], quad_uv[k + 1]])
    tex = texture if texture is not None else checker_texture()
    return TexturedMesh(
        vertices=verts,
        faces=np.asarray(faces, dtype=np.int64),
        uv_coords=np.asarray(uvs, dtype=np.float64),
        normals=None,
        texture=TextureAtlas.from_image(tex),
    )


def make_icosphere(subdivisions: int = 2, texture: np.ndarray | None = None,
                   radius: float = 0.5) -> TexturedMesh:
    """Icosphere with per-face UV islands packed on a square grid."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) for v in verts]
    verts = [v / np.linalg.norm(v) for v in verts]

    cache: dict[tuple[int, int], int] = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = (verts[i] + verts[j]) / 2.0
            verts.append(m / np.linalg.norm(m))
            cache[key] = len(verts) - 1
        return cache[key]

    tris = list(faces)
    for _ in range(subdivisions):
        nxt = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        tris = nxt

    vertices = np.asarray(verts) * radius
    faces_arr = np.asarray(tris, dtype=np.int64)
    uvs = _packed_face_uvs(len(faces_arr))
    normals = vertices / np.linalg.norm(vertices, axis=1, keepdims=True)
    tex = texture if texture is not None else checker_texture()
    return TexturedMesh(
        vertices=vertices, faces=faces_arr, uv_coords=uvs,
        normals=normals, texture=TextureAtlas.from_image(tex),
    )


def _packed_face_uvs(n_faces: int) -> np.ndarray:
    """One small triangular UV island per face on a sqrt-grid."""
    grid = int(math.ceil(math.sqrt(n_faces)))
    cell = 1.0 / grid
    inset = cell * 0.08
    uvs = np.zeros((n_faces, 3, 2), dtype=np.float64)
    for i in range(n_faces):
        gx, gy = i % grid, i // grid
        u0, v0 = gx * cell + inset, gy * cell + inset
        u1, v1 = (gx + 1) * cell - inset, (gy + 1) * cell - inset
        uvs[i] = [(u0, v0), (u1, v0), (u0 + (u1 - u0) / 2, v1)]
    return uvs


def make_billboard(size: float = 1.0, texture: np.ndarray | None = None) -> TexturedMesh:
    """Flat quad in the yz-plane facing +x."""
    s = size / 2.0
    verts = np.array([
        [0, -s, -s], [0, s, -s], [0, s, s], [0, -s, s],
    ], dtype=np.float64)
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    uvs = np.array([
        [(0.02, 0.02), (0.98, 0.02), (0.98, 0.98)],
        [(0.02, 0.02), (0.98, 0.98), (0.02, 0.98)],
    ])
    normals = np.tile(np.array([1.0, 0.0, 0.0]), (4, 1))
    tex = texture if texture is not None else checker_texture()
    return TexturedMesh(vertices=verts, faces=faces, uv_coords=uvs,
                        normals=normals, texture=TextureAtlas.from_image(tex))


def _value_noise(size: int, rng: np.random.Generator, octaves: int = 4) -> np.ndarray:
    out = np.zeros((size, size), dtype=np.float64)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        n = 4 * (2 ** o)
        coarse = rng.random((n + 1, n + 1))
        xs = np.linspace(0, n, size)
        xi = np.floor(xs).astype(int).clip(0, n - 1)
        xf = xs - xi
        c00 = coarse[np.ix_(xi, xi)]
        c01 = coarse[np.ix_(xi, xi + 1)]
        c10 = coarse[np.ix_(xi + 1, xi)]
        c11 = coarse[np.ix_(xi + 1, xi + 1)]
        fx = xf[None, :]
        fy = xf[:, None]
        layer = (c00 * (1 - fx) * (1 - fy) + c01 * fx * (1 - fy)
                 + c10 * (1 - fx) * fy + c11 * fx * fy)
        out += amp * layer
        total += amp
        amp *= 0.55
    return (out / total).astype(np.float32)


_PALETTES = [
    ((0.35, 0.52, 0.78), (0.92, 0.95, 0.99)),   # sky
    ((0.16, 0.34, 0.14), (0.65, 0.78, 0.42)),   # foliage
    ((0.35, 0.22, 0.12), (0.78, 0.62, 0.44)),   # wood
    ((0.28, 0.28, 0.30), (0.75, 0.74, 0.72)),   # stone
]


def default_backgrounds(size: int = 512, count: int = 4) -> list[np.ndarray]:
    """Bundled natural-image-like backdrops (deterministic value noise)."""
    out = []
    for i in range(count):
        rng = np.random.default_rng(1000 + i)
        noise = _value_noise(size, rng)
        lo, hi = _PALETTES[i % len(_PALETTES)]
        img = np.empty((size, size, 3), dtype=np.float32)
        for k in range(3):
            img[..., k] = lo[k] + (hi[k] - lo[k]) * noise
        grad = np.linspace(0.0, 0.12, size, dtype=np.float32)[:, None]
        img = np.clip(img + grad[..., None] * (1 if i % 2 else -1), 0, 1)
        out.append(img)
    return out


def resize_image(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize via PIL, kept here so callers avoid another dep."""
    from PIL import Image

    from .util import to_uint8

    h, w = hw
    if img.shape[:2] == (h, w):
        return img.astype(np.float32)
    pil = Image.fromarray(to_uint8(img)).resize((w, h), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float32) / 255.0
