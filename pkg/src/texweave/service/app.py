"""HTTP/JSON API over the session store.

Mutating stages run on a single worker thread per session (one pipeline
stage at a time); read endpoints are served directly. POST endpoints return
a job record; pass wait=false to poll GET /sessions/{id}/jobs/{job} instead.
"""

from __future__ import annotations

import base64
import os
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response

from ..drag import DragError, DragSpec, sample_static_points
from ..session import SessionError, SessionStore, StateError
from ..util import image_to_png_bytes, mask_to_png_bytes, png_bytes_to_mask
from .schemas import (
    CreateSessionRequest,
    DragRequest,
    EvalRequest,
    FuseRequest,
    JobResponse,
    PretrainRequest,
    SessionResponse,
)

DATA_DIR_ENV = "TEXWEAVE_DATA_DIR"


def create_app(data_dir: str | Path | None = None) -> FastAPI:
    root = Path(data_dir or os.environ.get(DATA_DIR_ENV, "./texweave_data"))
    store = SessionStore(root)
    app = FastAPI(title="texweave", version="0.1.0")
    app.state.store = store
    executors: dict[str, ThreadPoolExecutor] = {}
    futures: dict[tuple[str, str], Future] = {}
    lock = threading.Lock()

    def executor_for(sid: str) -> ThreadPoolExecutor:
        with lock:
            if sid not in executors:
                executors[sid] = ThreadPoolExecutor(max_workers=1)
            return executors[sid]

    def get_session(sid: str):
        try:
            return store.get(sid)
        except SessionError as exc:
            raise HTTPException(404, str(exc))

    pending: dict[tuple[str, str], dict] = {}

    def submit(sid: str, kind: str, fn, wait: bool) -> dict:
        """Run fn(job_id) on the session's worker; fn must return the job record."""
        import uuid as _uuid

        jid = f"{kind}-{_uuid.uuid4().hex[:8]}"
        rec = {"id": jid, "kind": kind, "status": "queued",
               "timings": {}, "error": None, "result": {}}
        with lock:
            pending[(sid, jid)] = rec

        def runner():
            rec["status"] = "running"
            try:
                return fn(jid)
            except Exception as exc:
                rec["status"] = "failed"
                rec["error"] = str(exc)
                raise

        fut = executor_for(sid).submit(runner)
        with lock:
            futures[(sid, jid)] = fut
        if wait:
            try:
                return fut.result()
            except (StateError, SessionError, DragError) as exc:
                raise HTTPException(409, str(exc))
        return rec

    def session_response(sess) -> SessionResponse:
        return SessionResponse(
            id=sess.id, state=sess.state, message=sess.message,
            n_views=len(sess.views), views=[v.to_json() for v in sess.views],
            texture_versions=len(sess.texture_versions),
            training_invocations=sess.training_invocations,
            jobs=sorted(sess.jobs),
        )

    @app.post("/sessions", response_model=SessionResponse)
    def create_session(req: CreateSessionRequest):
        try:
            sess = store.create_session(req.mesh_path, req.background_paths or None,
                                        req.config, session_id=req.session_id)
        except FileNotFoundError as exc:
            raise HTTPException(404, f"mesh not found: {exc}")
        except (SessionError, ValueError) as exc:
            raise HTTPException(400, str(exc))
        return session_response(sess)

    @app.get("/sessions", response_model=list[str])
    def list_sessions():
        return store.list_sessions()

    @app.get("/sessions/{sid}", response_model=SessionResponse)
    def get_session_info(sid: str):
        return session_response(get_session(sid))

    @app.post("/sessions/{sid}/pretrain", response_model=JobResponse)
    def pretrain(sid: str, req: PretrainRequest):
        sess = get_session(sid)
        job = submit(sid, lambda: sess.pretrain(
            ae_steps=req.ae_steps, noise_steps=req.noise_steps,
            adapter_steps=req.adapter_steps), req.wait)
        return JobResponse(**{k: job[k] for k in
                              ("id", "kind", "status", "timings", "error", "result")})

    @app.post("/sessions/{sid}/drag", response_model=JobResponse)
    async def drag(sid: str, req: DragRequest, request: Request):
        sess = get_session(sid)
        raw = await request.body()
        m_drag = png_bytes_to_mask(base64.b64decode(req.m_drag_png)) if req.m_drag_png else None
        m_recon = png_bytes_to_mask(base64.b64decode(req.m_recon_png)) if req.m_recon_png else None
        if req.view is not None:
            view = sess.resolve_view({k: v for k, v in req.view.model_dump().items()
                                      if v is not None})
        elif req.view_index is not None:
            view = sess.views[req.view_index]
        else:
            view = sess.views[0]
        static_points = [tuple(p) for p in req.static_points]
        if req.auto_static_points > 0 and not static_points:
            probe = sess.render_view(view)
            border = _coverage_border(probe.coverage)
            static_points = sample_static_points(border, min(req.auto_static_points, len(border)))
        try:
            spec = DragSpec(
                handles=[(tuple(h.source), tuple(h.target)) for h in req.handles],
                static_points=static_points,
                m_drag=m_drag,
                lambda_unmask=req.lambda_unmask,
                lambda_static=req.lambda_static,
                view=view,
            )
        except DragError as exc:
            raise HTTPException(422, str(exc))
        job = submit(sid, lambda: sess.run_drag(
            spec, m_recon, use_oracle_drag=req.use_oracle_drag, raw_request=raw), req.wait)
        return JobResponse(**{k: job[k] for k in
                              ("id", "kind", "status", "timings", "error", "result")})

    @app.post("/sessions/{sid}/fuse", response_model=JobResponse)
    async def fuse(sid: str, req: FuseRequest, request: Request):
        sess = get_session(sid)
        raw = await request.body()
        m_neighbors = {}
        if req.m_recon_plus_png:
            m_neighbors["plus"] = png_bytes_to_mask(base64.b64decode(req.m_recon_plus_png))
        if req.m_recon_minus_png:
            m_neighbors["minus"] = png_bytes_to_mask(base64.b64decode(req.m_recon_minus_png))
        job = submit(sid, lambda: sess.run_fuse_and_bake(
            delta=req.delta, m_recon_neighbors=m_neighbors or None,
            skip_fusion=req.skip_fusion, skip_recon=req.skip_recon,
            raw_request=raw), req.wait)
        return JobResponse(**{k: job[k] for k in
                              ("id", "kind", "status", "timings", "error", "result")})

    @app.post("/sessions/{sid}/eval")
    def evaluate(sid: str, req: EvalRequest):
        sess = get_session(sid)
        try:
            report = sess.evaluate_strategies(tuple(req.strategies),
                                              eval_noise_step=req.eval_noise_step)
        except (SessionError, StateError) as exc:
            raise HTTPException(409, str(exc))
        return report.to_json()

    @app.get("/sessions/{sid}/jobs/{jid}", response_model=JobResponse)
    def get_job(sid: str, jid: str):
        sess = get_session(sid)
        if jid not in sess.jobs:
            raise HTTPException(404, f"unknown job {jid}")
        job = sess.jobs[jid]
        return JobResponse(**{k: job[k] for k in
                              ("id", "kind", "status", "timings", "error", "result")})

    @app.get("/sessions/{sid}/jobs/{jid}/artifacts/{name}")
    def get_artifact(sid: str, jid: str, name: str):
        sess = get_session(sid)
        path = sess.dir / "artifacts" / jid / name
        if not path.exists() or not path.resolve().is_relative_to(sess.dir.resolve()):
            raise HTTPException(404, "no such artifact")
        media = "image/png" if name.endswith(".png") else "application/octet-stream"
        return Response(path.read_bytes(), media_type=media)

    @app.get("/sessions/{sid}/views/{index}/render")
    def render_view(sid: str, index: int, buffer: str = "rgb", background: int | None = None,
                    version: int | None = None):
        sess = get_session(sid)
        if not 0 <= index < len(sess.views):
            raise HTTPException(404, f"view {index} out of range")
        img = sess.render_view(index, background_index=background, version=version)
        return Response(_buffer_png(img, buffer), media_type="image/png")

    @app.post("/sessions/{sid}/render")
    def render_pose(sid: str, pose: dict, buffer: str = "rgb", version: int | None = None):
        sess = get_session(sid)
        img = sess.render_view(pose, version=version)
        return Response(_buffer_png(img, buffer), media_type="image/png")

    @app.get("/sessions/{sid}/texture/{version}")
    def get_texture(sid: str, version: int):
        sess = get_session(sid)
        if not 0 <= version < len(sess.texture_versions):
            raise HTTPException(404, f"no texture version {version}")
        path = sess.dir / "textures" / sess.texture_versions[version]
        return Response(path.read_bytes(), media_type="image/png")

    @app.get("/sessions/{sid}/texture/{version}/provenance")
    def get_provenance(sid: str, version: int):
        sess = get_session(sid)
        if not 0 <= version < len(sess.texture_versions):
            raise HTTPException(404, f"no texture version {version}")
        return sess.provenance(version)

    @app.get("/sessions/{sid}/export/{version}")
    def export_bundle(sid: str, version: int):
        """OBJ + MTL + texture PNG as a zip archive."""
        import io
        import zipfile

        sess = get_session(sid)
        if not 0 <= version < len(sess.texture_versions):
            raise HTTPException(404, f"no texture version {version}")
        mesh = sess.mesh_at(version)
        import tempfile

        from ..geometry import save_mesh_bundle
        with tempfile.TemporaryDirectory() as td:
            save_mesh_bundle(mesh, td, name=f"textured_v{version}")
            buf = io.BytesIO()
            with zipfile.ZipFile(buf, "w") as zf:
                for p in sorted(Path(td).iterdir()):
                    zf.write(p, p.name)
        return Response(buf.getvalue(), media_type="application/zip")

    @app.get("/sessions/{sid}/mesh")
    def get_mesh_obj(sid: str):
        sess = get_session(sid)
        path = sess.dir / "mesh" / "mesh.obj"
        if not path.exists():
            raise HTTPException(404, "mesh missing")
        return Response(path.read_bytes(), media_type="text/plain")

    return app


def _coverage_border(coverage: np.ndarray) -> list[tuple[int, int]]:
    cov = coverage > 0
    interior = cov.copy()
    interior[1:, :] &= cov[:-1, :]
    interior[:-1, :] &= cov[1:, :]
    interior[:, 1:] &= cov[:, :-1]
    interior[:, :-1] &= cov[:, 1:]
    ys, xs = np.nonzero(cov & ~interior)
    return list(zip(ys.tolist(), xs.tolist()))


def _buffer_png(img, buffer: str) -> bytes:
    if buffer == "rgb":
        return image_to_png_bytes(img.rgb)
    if buffer == "coverage":
        return mask_to_png_bytes(img.coverage)
    if buffer == "depth":
        d = img.depth.copy()
        finite = np.isfinite(d)
        if finite.any():
            lo, hi = d[finite].min(), d[finite].max()
            d = np.where(finite, (d - lo) / max(hi - lo, 1e-9), 1.0)
        else:
            d = np.ones_like(d)
        return image_to_png_bytes(np.repeat(d[..., None], 3, axis=2))
    if buffer == "normal":
        return image_to_png_bytes(img.normal * 0.5 + 0.5)
    if buffer == "uv":
        uv3 = np.concatenate([img.uv, np.zeros_like(img.uv[..., :1])], axis=2)
        return image_to_png_bytes(uv3)
    raise HTTPException(422, f"unknown buffer {buffer!r}")
