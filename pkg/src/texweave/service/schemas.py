"""Pydantic request/response models for the HTTP API.

Masks travel as base64-encoded PNG strings; poses as plain JSON records.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class ViewpointModel(BaseModel):
    azimuth: float
    elevation: float
    radius: Optional[float] = None
    fov_y: Optional[float] = None
    width: Optional[int] = None
    height: Optional[int] = None


class CreateSessionRequest(BaseModel):
    mesh_path: str
    background_paths: list[str] = Field(default_factory=list)
    config: dict = Field(default_factory=dict)
    session_id: Optional[str] = None


class SessionResponse(BaseModel):
    id: str
    state: str
    message: str = ""
    n_views: int
    views: list[dict]
    texture_versions: int
    training_invocations: int
    jobs: list[str]


class HandleModel(BaseModel):
    source: tuple[float, float]
    target: tuple[float, float]


class DragRequest(BaseModel):
    view: Optional[ViewpointModel] = None
    view_index: Optional[int] = None
    handles: list[HandleModel]
    static_points: list[tuple[float, float]] = Field(default_factory=list)
    auto_static_points: int = 0
    lambda_unmask: float = 1.0
    lambda_static: float = 1.0
    m_drag_png: Optional[str] = None
    m_recon_png: Optional[str] = None
    use_oracle_drag: bool = False
    wait: bool = True


class FuseRequest(BaseModel):
    delta: Optional[float] = None
    m_recon_plus_png: Optional[str] = None
    m_recon_minus_png: Optional[str] = None
    skip_fusion: bool = False
    skip_recon: bool = False
    wait: bool = True


class PretrainRequest(BaseModel):
    ae_steps: Optional[int] = None
    noise_steps: Optional[int] = None
    adapter_steps: Optional[int] = None
    wait: bool = True


class EvalRequest(BaseModel):
    strategies: list[str] = Field(default_factory=lambda: ["multiview", "none"])
    eval_noise_step: int = 30
    wait: bool = True


class JobResponse(BaseModel):
    id: str
    kind: str
    status: str
    timings: dict = Field(default_factory=dict)
    error: Optional[str] = None
    result: dict = Field(default_factory=dict)


class TextureInfo(BaseModel):
    version: int
    file: str
    provenance: dict
