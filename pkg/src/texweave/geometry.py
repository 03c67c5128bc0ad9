"""Mesh, texture atlas, and camera primitives.

Meshes are ingested from OBJ/MTL with per-corner UVs. Cameras live on a
hemisphere around the mesh and always look at the bounding-box center.
All types are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .util import load_image, save_image

TWO_PI = 2.0 * math.pi


class MeshError(ValueError):
    pass


@dataclass
class TextureAtlas:
    """RGB atlas plus a per-texel bake-confidence channel.

    pixels: (H, W, 3) float32 in [0, 1]. weight: (H, W) float32 >= 0,
    accumulated by bakes. H and W must be powers of two.
    """

    pixels: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.pixels = np.clip(np.asarray(self.pixels, dtype=np.float32), 0.0, 1.0)
        if self.weight is None:
            self.weight = np.zeros(self.pixels.shape[:2], dtype=np.float32)
        self.weight = np.asarray(self.weight, dtype=np.float32)
        h, w = self.pixels.shape[:2]
        if h & (h - 1) or w & (w - 1):
            raise MeshError(f"atlas dims must be powers of two, got {h}x{w}")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @classmethod
    def from_image(cls, rgb: np.ndarray) -> "TextureAtlas":
        return cls(pixels=rgb, weight=np.zeros(rgb.shape[:2], dtype=np.float32))

    def copy(self) -> "TextureAtlas":
        return TextureAtlas(pixels=self.pixels.copy(), weight=self.weight.copy())


@dataclass(frozen=True)
class Viewpoint:
    """Camera pose on the sampling hemisphere.

    azimuth/elevation in radians (elevation in [0, pi/2]), radius in object
    units, fov_y in radians. The camera looks at the mesh bbox center.
    image_size is (H, W) pixels.
    """

    azimuth: float
    elevation: float
    radius: float
    fov_y: float = math.pi / 3
    image_size: tuple[int, int] = (512, 512)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if not 0 < self.fov_y < math.pi:
            raise ValueError("fov_y must be in (0, pi)")

    def to_json(self) -> dict:
        return {
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "radius": self.radius,
            "fov_y": self.fov_y,
            "width": self.image_size[1],
            "height": self.image_size[0],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Viewpoint":
        return cls(
            azimuth=float(d["azimuth"]),
            elevation=float(d["elevation"]),
            radius=float(d["radius"]),
            fov_y=float(d.get("fov_y", math.pi / 3)),
            image_size=(int(d.get("height", 512)), int(d.get("width", 512))),
        )

    def with_azimuth(self, azimuth: float) -> "Viewpoint":
        return replace(self, azimuth=azimuth % TWO_PI)


@dataclass
class TexturedMesh:
    """Triangle mesh with a per-corner UV atlas.

    vertices: (V, 3) float64. faces: (F, 3) int64 vertex indices.
    uv_coords: (F, 3, 2) per-corner atlas coordinates in [0, 1]^2.
    normals: (V, 3) unit vertex normals.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    normals: np.ndarray
    texture: TextureAtlas
    _bbox: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv_coords = np.asarray(self.uv_coords, dtype=np.float64)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise MeshError("face index out of range")
        if self.uv_coords.size and (self.uv_coords.min() < -1e-9 or self.uv_coords.max() > 1 + 1e-9):
            raise MeshError("UV coordinates must lie in [0,1]^2")
        if self.normals is None:
            self.normals = compute_vertex_normals(self.vertices, self.faces)
        self.normals = np.asarray(self.normals, dtype=np.float64)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self._bbox is None:
            self._bbox = (self.vertices.min(axis=0), self.vertices.max(axis=0))
        return self._bbox

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.bbox
        return (lo + hi) / 2.0

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.vertices - self.center, axis=1).max())

    def face_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted accumulation of face normals, renormalized per vertex."""
    normals = np.zeros_like(vertices, dtype=np.float64)
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # length = 2*area
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    lens[lens == 0] = 1.0
    return normals / lens


def load_mesh(path: str | Path) -> TexturedMesh:
    """Parse an OBJ file (with MTL-referenced texture) into a TexturedMesh.

    Non-triangle faces are fan-triangulated. Missing UVs are a hard error:
    the editing pipeline requires an atlas. Vertex normals are computed
    when the file carries none. Only the first material's map_Kd is used.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    file_normals: list[list[float]] = []
    face_v: list[list[int]] = []
    face_vt: list[list[int]] = []
    mtl_file = None
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            uvs.append([float(parts[1]), float(parts[2])])
        elif tag == "vn":
            file_normals.append([float(x) for x in parts[1:4]])
        elif tag == "mtllib":
            mtl_file = parts[1]
        elif tag == "f":
            vi, ti = [], []
            for corner in parts[1:]:
                comps = corner.split("/")
                vi.append(int(comps[0]) - 1)
                if len(comps) > 1 and comps[1]:
                    ti.append(int(comps[1]) - 1)
            if len(ti) not in (0, len(vi)):
                raise MeshError(f"face mixes textured and untextured corners: {line}")
            # fan triangulation for quads and n-gons
            for k in range(1, len(vi) - 1):
                face_v.append([vi[0], vi[k], vi[k + 1]])
                if ti:
                    face_vt.append([ti[0], ti[k], ti[k + 1]])
    if not uvs or not face_vt:
        raise MeshError("mesh has no UV atlas")
    vertices = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(face_v, dtype=np.int64)
    uv_arr = np.asarray(uvs, dtype=np.float64)
    uv_coords = uv_arr[np.asarray(face_vt, dtype=np.int64)]

    texture = _load_texture_for(path, mtl_file)
    if len(file_normals) == len(verts):
        normals = np.asarray(file_normals, dtype=np.float64)
        lens = np.linalg.norm(normals, axis=1, keepdims=True)
        lens[lens == 0] = 1.0
        normals = normals / lens
    else:
        normals = compute_vertex_normals(vertices, faces)
    return TexturedMesh(vertices=vertices, faces=faces, uv_coords=uv_coords,
                        normals=normals, texture=texture)


def _load_texture_for(obj_path: Path, mtl_file: str | None) -> TextureAtlas:
    if mtl_file is not None:
        mtl_path = obj_path.parent / mtl_file
        if mtl_path.exists():
            for raw in mtl_path.read_text().splitlines():
                parts = raw.strip().split()
                if parts and parts[0] == "map_Kd":
                    tex_path = obj_path.parent / parts[-1]
                    if tex_path.exists():
                        return TextureAtlas.from_image(load_image(tex_path))
    # gray fallback keeps meshes without textures loadable for previews
    return TextureAtlas.from_image(np.full((256, 256, 3), 0.5, dtype=np.float32))


def save_mesh_bundle(mesh: TexturedMesh, out_dir: str | Path, name: str = "mesh") -> Path:
    """Write OBJ + MTL + texture PNG so external tools can open the result."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tex_name = f"{name}_texture.png"
    save_image(out_dir / tex_name, mesh.texture.pixels)
    (out_dir / f"{name}.mtl").write_text(
        f"newmtl material_0\nKd 1.0 1.0 1.0\nmap_Kd {tex_name}\n"
    )
    lines = [f"mtllib {name}.mtl", "usemtl material_0"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for n in mesh.normals:
        lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    uv_flat = mesh.uv_coords.reshape(-1, 2)
    for uv in uv_flat:
        lines.append(f"vt {uv[0]:.9g} {uv[1]:.9g}")
    for fi, f in enumerate(mesh.faces):
        c = 3 * fi
        lines.append(
            f"f {f[0]+1}/{c+1}/{f[0]+1} {f[1]+1}/{c+2}/{f[1]+1} {f[2]+1}/{c+3}/{f[2]+1}"
        )
    obj_path = out_dir / f"{name}.obj"
    obj_path.write_text("\n".join(lines) + "\n")
    return obj_path


def sample_hemisphere_views(
    n: int,
    radius: float,
    elevation_set: tuple[float, ...] = (math.pi / 6, math.pi / 3),
    fov_y: float = math.pi / 3,
    image_size: tuple[int, int] = (512, 512),
) -> list[Viewpoint]:
    """Deterministic uniform view sampling on the hemisphere.

    Views are distributed over the given elevation rings (earlier rings get
    the remainder) with equal azimuth spacing per ring. Ordering is
    elevation-major, azimuth-ascending.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    k = len(elevation_set)
    base, rem = divmod(n, k)
    counts = [base + (1 if i < rem else 0) for i in range(k)]
    views = []
    for elev, m in zip(elevation_set, counts):
        for j in range(m):
            views.append(
                Viewpoint(
                    azimuth=TWO_PI * j / m,
                    elevation=elev,
                    radius=radius,
                    fov_y=fov_y,
                    image_size=image_size,
                )
            )
    return views


def neighbor_views(v: Viewpoint, delta: float) -> tuple[Viewpoint, Viewpoint]:
    """Same-elevation views at azimuth -delta and +delta around v."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    return v.with_azimuth(v.azimuth - delta), v.with_azimuth(v.azimuth + delta)


def camera_frame(view: Viewpoint, center: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (eye, forward, right, up) for a camera looking at `center`.

    World is z-up; azimuth 0 puts the camera on the +x side.
    """
    center = np.asarray(center, dtype=np.float64)
    ce, se = math.cos(view.elevation), math.sin(view.elevation)
    ca, sa = math.cos(view.azimuth), math.sin(view.azimuth)
    eye = center + view.radius * np.array([ce * ca, ce * sa, se])
    forward = center - eye
    forward = forward / np.linalg.norm(forward)
    up_world = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up_world) > 0.999:
        up_world = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up_world)
    right = right / np.linalg.norm(right)
    up = np.cross(right, forward)
    return eye, forward, right, up


def world_to_camera(points: np.ndarray, view: Viewpoint, center: np.ndarray) -> np.ndarray:
    """Transform world points to camera space (x right, y up, z forward)."""
    eye, forward, right, up = camera_frame(view, center)
    rel = np.asarray(points, dtype=np.float64) - eye
    return np.stack([rel @ right, rel @ up, rel @ forward], axis=-1)


def project_points(points: np.ndarray, view: Viewpoint, center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to pixel coordinates (row, col) plus camera depth.

    Returns (pix: (N,2) float row/col, depth: (N,) camera-space z).
    """
    cam = world_to_camera(points, view, center)
    h, w = view.image_size
    t = math.tan(view.fov_y / 2.0)
    aspect = w / h
    z = cam[..., 2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    x_ndc = cam[..., 0] / (safe_z * t * aspect)
    y_ndc = cam[..., 1] / (safe_z * t)
    col = (x_ndc + 1.0) * 0.5 * w - 0.5
    row = (1.0 - y_ndc) * 0.5 * h - 0.5
    return np.stack([row, col], axis=-1), z
