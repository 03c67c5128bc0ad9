"""Point-based generative drag editing of textures on 3D meshes."""

__version__ = "0.1.0"

from .backend import AdapterWeights, BackendConfig, LatentGrid, ToyDiffusionBackend
from .drag import DragSpec, OracleDragEngine, drag_latent, sample_static_points
from .fusion import FusionJob, fuse_view, seam_energy
from .geometry import (
    TextureAtlas,
    TexturedMesh,
    Viewpoint,
    load_mesh,
    neighbor_views,
    sample_hemisphere_views,
)
from .masks import (
    MaskStack,
    build_checker_mask,
    build_update_mask,
    downsample_mask,
    schedule_fusion_mask,
)
from .recon import ReconJob, reconstruct_details
from .render import ViewImage, bake_view_to_atlas, rasterize_silhouette, render
from .session import Session, SessionConfig, SessionStore

__all__ = [
    "AdapterWeights", "BackendConfig", "LatentGrid", "ToyDiffusionBackend",
    "DragSpec", "OracleDragEngine", "drag_latent", "sample_static_points",
    "FusionJob", "fuse_view", "seam_energy",
    "TextureAtlas", "TexturedMesh", "Viewpoint", "load_mesh",
    "neighbor_views", "sample_hemisphere_views",
    "MaskStack", "build_checker_mask", "build_update_mask",
    "downsample_mask", "schedule_fusion_mask",
    "ReconJob", "reconstruct_details",
    "ViewImage", "bake_view_to_atlas", "rasterize_silhouette", "render",
    "Session", "SessionConfig", "SessionStore",
]
