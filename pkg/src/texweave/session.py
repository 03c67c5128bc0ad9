"""Session orchestration: the full editing pipeline as a state machine.

A session owns a mesh, an immutable texture version chain, the per-session
generative backend, and a job log. Pipeline stages run in a fixed order
(create -> pretrain -> ready, then drag and fuse+bake cycles) and every
mutation is seeded, so re-running a session with the same inputs yields
bit-identical texture versions.
"""

from __future__ import annotations

import base64
import json
import math
import time
import uuid
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import assets
from .backend import AdapterWeights, BackendConfig, ToyDiffusionBackend
from .drag import DragResult, DragSpec, OracleDragEngine, drag_latent
from .fusion import FusionJob, fuse_view, seam_energy
from .geometry import (
    TexturedMesh,
    TextureAtlas,
    Viewpoint,
    load_mesh,
    neighbor_views,
    sample_hemisphere_views,
    save_mesh_bundle,
)
from .masks import (
    LATENT_FACTOR,
    build_checker_mask,
    build_update_mask,
    dilate_mask,
    shrink_band,
)
from .metrics import (
    EvalReport,
    failure_rate,
    mean_distance,
    outside_mask_ssim,
    perceptual_distance,
    psnr,
    ssim,
)
from .recon import ReconJob, reconstruct_details
from .render import ViewImage, bake_view_to_atlas, rasterize_silhouette, render
from .util import (
    binarize,
    config_hash,
    derive_seed,
    image_to_png_bytes,
    load_image,
    png_bytes_to_image,
    save_image,
    sha256_bytes,
)

STATES = ("created", "pretrained", "ready", "dragging", "fusing",
          "reconstructing", "baking", "failed")

_TRANSITIONS = {
    ("created", "pretrained"), ("pretrained", "ready"),
    ("ready", "dragging"), ("dragging", "ready"),
    ("ready", "fusing"), ("fusing", "reconstructing"),
    ("reconstructing", "baking"), ("baking", "ready"),
}


class SessionError(RuntimeError):
    pass


class StateError(SessionError):
    pass


@dataclass
class SessionConfig:
    image_size: int = 512
    atlas_size: int | None = None
    n_views: int = 10
    elevations: tuple[float, float] = (math.pi / 6, math.pi / 3)
    radius_scale: float = 2.5
    fov_y: float = math.pi / 3
    neighbor_delta: float = math.pi / 6
    training_mode: str = "multiview"  # "multiview" | "singleview"
    tau_sil: float = 0.3
    checker_cell: int = 2
    band_dilation: int = 3
    s1: int = 20
    s2: int = 40
    lambda_recon: float = 1.0
    recon_steps: int = 100
    recon_lr: float = 1e-4
    bake_exponent: float = 4.0
    background_index: int = 0
    seed: int = 0
    dump_latents: bool = False
    backend: BackendConfig = field(default_factory=BackendConfig)

    def __post_init__(self):
        if self.image_size % LATENT_FACTOR:
            raise SessionError("image_size must be divisible by 8")
        if self.training_mode not in ("multiview", "singleview"):
            raise SessionError(f"unknown training_mode {self.training_mode!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["backend"] = self.backend.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SessionConfig":
        d = dict(d)
        backend = BackendConfig.from_json(d.pop("backend", {}))
        known = {f for f in cls.__dataclass_fields__ if f != "backend"}
        kwargs = {k: v for k, v in d.items() if k in known}
        if "elevations" in kwargs:
            kwargs["elevations"] = tuple(kwargs["elevations"])
        return cls(backend=backend, **kwargs)

    @classmethod
    def with_overrides(cls, overrides: dict | None) -> "SessionConfig":
        cfg = cls()
        if not overrides:
            return cfg
        merged = cfg.to_json()
        backend_over = overrides.pop("backend", {}) if isinstance(overrides, dict) else {}
        merged.update(overrides)
        merged["backend"].update(backend_over)
        # keep the sampler/optimizer seeds tied to the session seed unless set
        if "seed" in overrides and "seed" not in backend_over:
            merged["backend"]["seed"] = overrides["seed"]
        return cls.from_json(merged)


class Session:
    """One editing session; all mutating stages run serialized per session."""

    def __init__(self, store: "SessionStore", session_id: str, cfg: SessionConfig):
        self.store = store
        self.id = session_id
        self.cfg = cfg
        self.dir = store.root / session_id
        self.state = "created"
        self.message = ""
        self.mesh: TexturedMesh | None = None
        self.views: list[Viewpoint] = []
        self.backgrounds: list[np.ndarray] = []
        self.backend: ToyDiffusionBackend | None = None
        self.adapter: AdapterWeights | None = None
        self._view_adapters: dict[str, AdapterWeights] = {}
        self.texture_versions: list[str] = []  # file names, index = version
        self.jobs: dict[str, dict] = {}
        self.training_invocations = 0
        self.pretrained_backend = False
        self.last_drag: dict | None = None
        self._invert_cache: dict = {}

    # ------------------------------------------------------------ lifecycle

    @classmethod
    def create(cls, store: "SessionStore", mesh_path: str | Path,
               background_paths: list[str | Path] | None,
               overrides: dict | None = None,
               session_id: str | None = None) -> "Session":
        """Load the mesh, resolve backgrounds, and render the hemisphere set."""
        cfg = SessionConfig.with_overrides(dict(overrides) if overrides else None)
        sid = session_id or uuid.uuid4().hex[:12]
        sess = cls(store, sid, cfg)
        sess.dir.mkdir(parents=True, exist_ok=True)

        background_paths = background_paths or []
        if len(background_paths) > 4:
            raise SessionError("at most 4 backgrounds are supported")

        job = sess._new_job("create")
        try:
            mesh = load_mesh(mesh_path)
            if cfg.atlas_size is not None:
                resized = assets.resize_image(mesh.texture.pixels, (cfg.atlas_size, cfg.atlas_size))
                mesh.texture = TextureAtlas.from_image(resized)
            sess.mesh = mesh
        except Exception as exc:  # bad mesh -> failed session with message
            sess.state = "failed"
            sess.message = str(exc)
            sess._finish_job(job, "failed", error=str(exc))
            sess.save()
            if isinstance(exc, FileNotFoundError):
                raise
            return sess

        if background_paths:
            bgs = [assets.resize_image(load_image(p), (cfg.image_size, cfg.image_size))
                   for p in background_paths]
        else:
            bgs = [assets.resize_image(b, (cfg.image_size, cfg.image_size))
                   for b in assets.default_backgrounds()]
        sess.backgrounds = bgs

        radius = cfg.radius_scale * sess.mesh.bounding_radius
        sess.views = sample_hemisphere_views(
            cfg.n_views, radius, cfg.elevations, fov_y=cfg.fov_y,
            image_size=(cfg.image_size, cfg.image_size),
        )
        save_mesh_bundle(sess.mesh, sess.dir / "mesh", name="mesh")
        bg_dir = sess.dir / "backgrounds"
        bg_dir.mkdir(exist_ok=True)
        for i, bg in enumerate(bgs):
            save_image(bg_dir / f"bg_{i}.png", bg)
        sess._persist_texture(sess.mesh.texture, provenance={
            "kind": "initial", "source": str(mesh_path), "config_hash": config_hash(cfg.to_json()),
        })
        t0 = time.perf_counter()
        render_dir = sess.dir / "renders"
        render_dir.mkdir(exist_ok=True)
        for i, v in enumerate(sess.views):
            img = sess.render_view(i)
            save_image(render_dir / f"view_{i:03d}.png", img.rgb)
        sess._finish_job(job, "ok", timings={"render_views": time.perf_counter() - t0})
        sess.save()
        return sess

    def _transition(self, new_state: str) -> None:
        if (self.state, new_state) not in _TRANSITIONS and new_state != "failed":
            raise StateError(f"illegal transition {self.state} -> {new_state}")
        self.state = new_state

    # ------------------------------------------------------------- plumbing

    def _new_job(self, kind: str, job_id: str | None = None) -> str:
        jid = job_id or f"{kind}-{len(self.jobs):04d}"
        self.jobs[jid] = {
            "id": jid, "kind": kind, "status": "running",
            "started": time.time(), "finished": None,
            "timings": {}, "error": None, "result": {},
        }
        return jid

    def _finish_job(self, jid: str, status: str, timings: dict | None = None,
                    error: str | None = None, result: dict | None = None) -> dict:
        job = self.jobs[jid]
        job["status"] = status
        job["finished"] = time.time()
        if timings:
            job["timings"].update(timings)
        job["error"] = error
        if result:
            job["result"].update(result)
        return job

    def artifact_dir(self, jid: str) -> Path:
        d = self.dir / "artifacts" / jid
        d.mkdir(parents=True, exist_ok=True)
        return d

    def background(self, index: int | None = None) -> np.ndarray:
        idx = self.cfg.background_index if index is None else index
        return self.backgrounds[idx % len(self.backgrounds)]

    def current_atlas(self) -> TextureAtlas:
        return self.texture_atlas(len(self.texture_versions) - 1)

    def texture_atlas(self, version: int) -> TextureAtlas:
        path = self.dir / "textures" / self.texture_versions[version]
        pixels = load_image(path)
        weight_path = path.with_suffix(".weight.npy")
        weight = np.load(weight_path) if weight_path.exists() else None
        return TextureAtlas(pixels=pixels, weight=weight)

    def provenance(self, version: int) -> dict:
        path = self.dir / "textures" / self.texture_versions[version]
        return json.loads(path.with_suffix(".provenance.json").read_text())

    def _persist_texture(self, atlas: TextureAtlas, provenance: dict) -> int:
        tex_dir = self.dir / "textures"
        tex_dir.mkdir(exist_ok=True)
        k = len(self.texture_versions)
        name = f"T_{k:04d}.png"
        save_image(tex_dir / name, atlas.pixels)
        np.save(tex_dir / f"T_{k:04d}.weight.npy", atlas.weight)
        provenance = dict(provenance)
        provenance["version"] = k
        provenance["seed"] = self.cfg.seed
        (tex_dir / f"T_{k:04d}.provenance.json").write_text(
            json.dumps(provenance, indent=2, sort_keys=True))
        self.texture_versions.append(name)
        return k

    def mesh_at(self, version: int | None = None) -> TexturedMesh:
        mesh = self.mesh
        atlas = self.current_atlas() if version is None else self.texture_atlas(version)
        return TexturedMesh(
            vertices=mesh.vertices, faces=mesh.faces, uv_coords=mesh.uv_coords,
            normals=mesh.normals, texture=atlas,
        )

    def resolve_view(self, view) -> Viewpoint:
        if isinstance(view, Viewpoint):
            return view
        if isinstance(view, int):
            return self.views[view]
        if isinstance(view, dict):
            d = dict(view)
            d.setdefault("radius", self.cfg.radius_scale * self.mesh.bounding_radius)
            d.setdefault("fov_y", self.cfg.fov_y)
            d.setdefault("width", self.cfg.image_size)
            d.setdefault("height", self.cfg.image_size)
            return Viewpoint.from_json(d)
        raise SessionError(f"cannot resolve view from {view!r}")

    def render_view(self, view, background_index: int | None = None,
                    version: int | None = None) -> ViewImage:
        pose = self.resolve_view(view)
        bg_idx = (view % len(self.backgrounds)) if isinstance(view, int) and background_index is None \
            else (background_index if background_index is not None else self.cfg.background_index)
        bg = self.backgrounds[bg_idx % len(self.backgrounds)]
        return render(self.mesh_at(version), pose, background=bg,
                      background_id=f"bg_{bg_idx % len(self.backgrounds)}")

    # -------------------------------------------------------------- pretrain

    def pretrain(self, ae_steps: int | None = None, noise_steps: int | None = None,
                 adapter_steps: int | None = None, job_id: str | None = None) -> dict:
        """Train the toy backend on the hemisphere renders; in multiview mode
        also train the shared adapter (exactly one training invocation)."""
        if self.state != "created":
            raise StateError("already pretrained" if self.state != "failed"
                             else f"session failed: {self.message}")
        jid = self._new_job("pretrain", job_id)
        try:
            t0 = time.perf_counter()
            renders = [self.render_view(i).rgb for i in range(len(self.views))]
            backend = ToyDiffusionBackend(self.cfg.backend)
            curves_dir = self.dir / "backend"
            curves_dir.mkdir(exist_ok=True)
            ae_curve = backend.train_autoencoder(
                renders, steps=ae_steps, curve_path=curves_dir / "ae_curve.csv")
            t1 = time.perf_counter()
            noise_curve = backend.train_noise_model(
                renders, steps=noise_steps, curve_path=curves_dir / "noise_curve.csv")
            t2 = time.perf_counter()
            self.backend = backend
            adapter = None
            if self.cfg.training_mode == "multiview":
                adapter = backend.train_adapter(
                    renders, steps=adapter_steps,
                    view_ids=[f"view_{i:03d}" for i in range(len(renders))],
                    curve_path=curves_dir / "adapter_curve.csv")
                self.adapter = adapter
                self.training_invocations += 1
            t3 = time.perf_counter()
            backend.save(curves_dir / "checkpoint.pt", adapter)
            self.pretrained_backend = True
            self._transition("pretrained")
            self._transition("ready")
            self._finish_job(jid, "ok", timings={
                "train_autoencoder": t1 - t0, "train_noise_model": t2 - t1,
                "train_adapter": t3 - t2,
            }, result={
                "ae_loss_first": ae_curve[0], "ae_loss_last": ae_curve[-1],
                "noise_loss_first": noise_curve[0], "noise_loss_last": noise_curve[-1],
            })
        except StateError:
            raise
        except Exception as exc:
            self.state = "failed"
            self.message = str(exc)
            self._finish_job(jid, "failed", error=str(exc))
            raise
        finally:
            self.save()
        return self.jobs[jid]

    def _adapter_for_view(self, tag: str, rgb: np.ndarray) -> AdapterWeights | None:
        """Session adapter in multiview mode; lazily trained per view otherwise."""
        if self.cfg.training_mode == "multiview":
            return self.adapter
        if tag not in self._view_adapters:
            adapter = self.backend.train_adapter(
                [rgb], steps=self.cfg.backend.lora_steps_singleview, view_ids=[tag])
            self._view_adapters[tag] = adapter
            self.training_invocations += 1
        return self._view_adapters[tag]

    def _invert_cached(self, rgb: np.ndarray, tag: str, to_step: int,
                       adapter: AdapterWeights | None):
        key = (tag, to_step, id(adapter))
        if key not in self._invert_cache:
            z0 = self.backend.encode(rgb, view_tag=tag)
            self._invert_cache[key] = self.backend.invert(z0, to_step, adapter)
        return self._invert_cache[key]

    # ------------------------------------------------------------------ drag

    def run_drag(self, spec: DragSpec, m_recon: np.ndarray | None = None,
                 use_oracle_drag: bool = False,
                 raw_request: bytes | None = None, job_id: str | None = None) -> dict:
        """Dragging branch: invert, optimize, decode, reconstruct details."""
        if self.state != "ready":
            raise StateError(f"run_drag requires state ready, session is {self.state}")
        if self.backend is None:
            raise StateError("session has no trained backend; run pretrain first")
        jid = self._new_job("drag", job_id)
        self._transition("dragging")
        try:
            pose = self.resolve_view(spec.view if spec.view is not None else 0)
            version = len(self.texture_versions) - 1
            origin_img = self.render_view(pose)
            tag = f"drag-v{version}-{config_hash(pose.to_json())}"
            adapter = self._adapter_for_view(tag, origin_img.rgb)

            if m_recon is None:
                base = spec.m_drag if spec.m_drag is not None else np.ones(
                    origin_img.coverage.shape, np.uint8)
                m_recon = dilate_mask(binarize(base), 2 * LATENT_FACTOR)
                m_recon_provenance = "derived"
            else:
                m_recon = binarize(m_recon)
                m_recon_provenance = "user_drawn"

            t0 = time.perf_counter()
            drag_step = min(self.cfg.backend.drag_noise_step, self.cfg.backend.n_ddim_steps)
            if use_oracle_drag:
                z_traj = [self.backend.encode(origin_img.rgb, view_tag=tag)]
                t1 = time.perf_counter()
                engine = OracleDragEngine(origin_img.rgb, spec)
                dragged_rgb = engine.run()
                drag_status = "converged"
                t2 = time.perf_counter()
                z_after = self.backend.encode(dragged_rgb, view_tag=tag)
                final_handles = [engine.locate(tuple(s)) for s, _ in spec.handles]
            else:
                z_traj = self._invert_cached(origin_img.rgb, tag, drag_step, adapter)
                t1 = time.perf_counter()
                dres: DragResult = drag_latent(self.backend, z_traj[drag_step], spec, adapter)
                if dres.status == "tracking_lost":
                    self._transition("ready")
                    self._finish_job(jid, "partial", error="handle tracking lost",
                                     result={"drag_status": dres.status})
                    self.save()
                    return self.jobs[jid]
                drag_status = dres.status
                final_handles = dres.final_handles
                t2 = time.perf_counter()
                z_after = self.backend.denoise_from(dres.latent, adapter)
                dragged_rgb = self.backend.decode(z_after)
            t3 = time.perf_counter()

            job_dir = self.artifact_dir(jid)
            recon = reconstruct_details(self.backend, ReconJob(
                z0=z_after, edited=dragged_rgb, original=origin_img.rgb,
                m_recon=m_recon, lambda_recon=self.cfg.lambda_recon,
                steps=self.cfg.recon_steps, lr=self.cfg.recon_lr,
            ), curve_path=job_dir / "recon_curve.csv")
            t4 = time.perf_counter()

            save_image(job_dir / "origin.png", origin_img.rgb)
            save_image(job_dir / "dragged.png", dragged_rgb)
            save_image(job_dir / "final.png", recon.image)
            self.last_drag = {
                "job_id": jid,
                "pose": pose.to_json(),
                "spec_json": json.dumps(spec.to_json(), sort_keys=True),
                "m_drag": spec.m_drag,
                "m_recon": m_recon,
                "m_recon_provenance": m_recon_provenance,
                "final_image": recon.image,
                "origin_rgb": origin_img.rgb,
                "texture_version": version,
                "use_oracle_drag": use_oracle_drag,
                "raw_request_b64": base64.b64encode(raw_request).decode() if raw_request else None,
            }
            self._transition("ready")
            self._finish_job(jid, "ok", timings={
                "invert": t1 - t0, "drag": t2 - t1,
                "decode": t3 - t2, "reconstruct": t4 - t3,
            }, result={
                "drag_status": drag_status,
                "final_handles": [list(h) for h in final_handles],
                "recon_initial_loss": recon.initial_loss,
                "recon_final_loss": recon.final_loss,
                "artifacts": ["origin.png", "dragged.png", "final.png"],
            })
        except (StateError, SessionError):
            raise
        except Exception as exc:
            self.state = "failed"
            self.message = str(exc)
            self._finish_job(jid, "failed", error=str(exc))
            raise
        finally:
            self.save()
        return self.jobs[jid]

    # ------------------------------------------------------------- fuse+bake

    def run_fuse_and_bake(self, delta: float | None = None,
                          m_recon_neighbors: dict | None = None,
                          skip_fusion: bool = False,
                          skip_recon: bool = False,
                          raw_request: bytes | None = None,
                          job_id: str | None = None) -> dict:
        """Blending branch: bake the drag view, then fuse, reconstruct, and
        bake both neighbors (order t, t+1, t-1) into a new texture version."""
        if self.state != "ready":
            raise StateError(f"run_fuse_and_bake requires state ready, session is {self.state}")
        if self.last_drag is None:
            raise StateError("no completed drag to fuse")
        delta = delta if delta is not None else self.cfg.neighbor_delta
        m_recon_neighbors = m_recon_neighbors or {}
        jid = self._new_job("fuse", job_id)
        self._transition("fusing")
        job_dir = self.artifact_dir(jid)
        try:
            pose = Viewpoint.from_json(self.last_drag["pose"])
            base_version = len(self.texture_versions) - 1
            mesh_orig = self.mesh_at(base_version)
            t0 = time.perf_counter()

            # bake the drag view first (order: t, t+1, t-1)
            drag_view_img = render(mesh_orig, pose, background=self.background(),
                                   background_id=f"bg_{self.cfg.background_index}")
            edited_t = drag_view_img.copy_with_rgb(self.last_drag["final_image"])
            atlas = bake_view_to_atlas(mesh_orig, pose, edited_t, mesh_orig.texture,
                                       exponent=self.cfg.bake_exponent).atlas
            mesh_baked = TexturedMesh(
                vertices=self.mesh.vertices, faces=self.mesh.faces,
                uv_coords=self.mesh.uv_coords, normals=self.mesh.normals, texture=atlas)

            minus, plus = neighbor_views(pose, delta)
            neighbor_data = []
            for label, v_prime in (("plus", plus), ("minus", minus)):
                nd = self._fuse_neighbor(
                    label, v_prime, pose, mesh_orig, mesh_baked,
                    skip_fusion=skip_fusion, job_dir=job_dir)
                neighbor_data.append(nd)
            t1 = time.perf_counter()

            self._transition("reconstructing")
            for nd in neighbor_data:
                user_mask = m_recon_neighbors.get(nd["label"])
                if skip_recon:
                    nd["final"] = nd["fused"]
                    continue
                if user_mask is not None:
                    m_rec = binarize(user_mask)
                else:
                    diff = np.abs(nd["fused"] - nd["origin_img"].rgb).max(axis=2) > 0.02
                    m_rec = dilate_mask(
                        binarize(diff.astype(np.uint8) | nd["band"]), 2)
                recon = reconstruct_details(self.backend, ReconJob(
                    z0=nd["z0_fused"], edited=nd["fused"], original=nd["origin_img"].rgb,
                    m_recon=m_rec, lambda_recon=self.cfg.lambda_recon,
                    steps=self.cfg.recon_steps, lr=self.cfg.recon_lr,
                ), curve_path=job_dir / f"recon_curve_{nd['label']}.csv")
                nd["final"] = recon.image
                nd["m_recon"] = m_rec
            t2 = time.perf_counter()

            self._transition("baking")
            for nd in neighbor_data:  # plus first, then minus: bake order t, t+1, t-1
                edited = nd["drag_img"].copy_with_rgb(nd["final"])
                atlas = bake_view_to_atlas(mesh_baked, nd["view"], edited, atlas,
                                           exponent=self.cfg.bake_exponent).atlas
                save_image(job_dir / f"final_{nd['label']}.png", nd["final"])
            t3 = time.perf_counter()

            provenance = {
                "kind": "drag_fuse",
                "parent": base_version,
                "drag_job": self.last_drag["job_id"],
                "fuse_job": jid,
                "drag_spec": self.last_drag["spec_json"],
                "m_drag_sha": sha256_bytes(
                    binarize(self.last_drag["m_drag"]).tobytes()) if self.last_drag["m_drag"] is not None else None,
                "m_recon_sha": sha256_bytes(binarize(self.last_drag["m_recon"]).tobytes()),
                "skip_fusion": skip_fusion,
                "skip_recon": skip_recon,
                "config_hash": config_hash(self.cfg.to_json()),
                "raw_drag_request_b64": self.last_drag.get("raw_request_b64"),
                "raw_fuse_request_b64": base64.b64encode(raw_request).decode() if raw_request else None,
            }
            new_version = self._persist_texture(atlas, provenance)
            self._transition("ready")
            self._finish_job(jid, "ok", timings={
                "fuse": t1 - t0, "reconstruct": t2 - t1, "bake": t3 - t2,
            }, result={
                "texture_version": new_version,
                "skip_fusion": skip_fusion,
                "skip_recon": skip_recon,
                "artifacts": sorted(p.name for p in job_dir.iterdir()),
            })
        except (StateError, SessionError):
            raise
        except Exception as exc:
            self.state = "failed"
            self.message = str(exc)
            self._finish_job(jid, "failed", error=str(exc))
            raise
        finally:
            self.save()
        return self.jobs[jid]

    def _fuse_neighbor(self, label: str, v_prime: Viewpoint, pose: Viewpoint,
                       mesh_orig: TexturedMesh, mesh_baked: TexturedMesh,
                       skip_fusion: bool, job_dir: Path) -> dict:
        bg = self.background()
        bg_id = f"bg_{self.cfg.background_index}"
        origin_img = render(mesh_orig, v_prime, background=bg, background_id=bg_id)
        drag_img = render(mesh_baked, v_prime, background=bg, background_id=bg_id)
        band = rasterize_silhouette(self.mesh, pose, v_prime, tau_sil=self.cfg.tau_sil)
        update_mask, _ = build_update_mask(origin_img, band, pose, self.mesh.center)
        band_lat = shrink_band(band, LATENT_FACTOR)
        checker_mask = build_checker_mask(update_mask, band_lat,
                                          cell=self.cfg.checker_cell,
                                          dilation=self.cfg.band_dilation)
        from .masks import MaskStack
        masks = MaskStack(
            m_drag=np.zeros(origin_img.coverage.shape, np.uint8),
            m_recon=np.zeros(origin_img.coverage.shape, np.uint8),
            checker_mask=checker_mask, update_mask=update_mask, space="latent")

        version = len(self.texture_versions) - 1
        tag = f"{label}-v{version}-{config_hash(v_prime.to_json())}"
        if skip_fusion:
            fused = drag_img.rgb
            z0_fused = self.backend.encode(drag_img.rgb, view_tag=tag)
        else:
            adapter = self._adapter_for_view(tag, origin_img.rgb)
            traj_o = self._invert_cached(origin_img.rgb, f"{tag}-orig",
                                         self.cfg.s2 - 1, adapter)
            z0_d = self.backend.encode(drag_img.rgb, view_tag=tag)
            traj_d = self.backend.invert(z0_d, self.cfg.s2 - 1, adapter)
            job = FusionJob(view_prime=v_prime, z_traj_origin=traj_o,
                            z_traj_drag=traj_d, masks=masks,
                            s1=self.cfg.s1, s2=self.cfg.s2, adapter=adapter,
                            record_latents=self.cfg.dump_latents)
            fres = fuse_view(self.backend, job)
            fused = fres.image
            z0_fused = fres.final_latent
            if self.cfg.dump_latents:
                dump_dir = job_dir / f"latents_{label}"
                dump_dir.mkdir(exist_ok=True)
                for lat in fres.step_latents:
                    arr = lat.data.numpy()
                    arr.tofile(dump_dir / f"step_{lat.step:03d}.bin")
                    (dump_dir / f"step_{lat.step:03d}.json").write_text(json.dumps({
                        "shape": list(arr.shape), "dtype": str(arr.dtype),
                        "step": lat.step, "view_tag": lat.view_tag}))

        save_image(job_dir / f"origin_{label}.png", origin_img.rgb)
        save_image(job_dir / f"naive_{label}.png", drag_img.rgb)
        save_image(job_dir / f"fused_{label}.png", fused)
        return {
            "label": label, "view": v_prime, "origin_img": origin_img,
            "drag_img": drag_img, "band": band, "update_mask": update_mask,
            "checker_mask": checker_mask, "fused": fused, "z0_fused": z0_fused,
        }

    # ------------------------------------------------------------ evaluation

    def evaluate_strategies(self, strategies: tuple[str, ...] = ("multiview", "none"),
                            drag_spec: DragSpec | None = None,
                            n_cases: int = 4,
                            eval_noise_step: int = 30,
                            probe_iters: int | None = None,
                            probe_lr: float | None = None) -> EvalReport:
        """Reconstruction-quality and drag-accuracy comparison across
        adapter strategies, on views in and out of the training set."""
        if self.backend is None:
            raise StateError("evaluate requires a pretrained session")
        rng = np.random.default_rng(derive_seed(self.cfg.seed, "eval-manifest"))
        n_train = max(2, n_cases - 1)
        train_idx = sorted(rng.choice(len(self.views), size=min(n_train, len(self.views)),
                                      replace=False).tolist())
        novel_pose = self.views[train_idx[0]].with_azimuth(
            self.views[train_idx[0]].azimuth + 0.35)
        cases = [{"pose": self.views[i], "in_training": True, "bg": i % len(self.backgrounds)}
                 for i in train_idx]
        cases.append({"pose": novel_pose, "in_training": False,
                      "bg": len(cases) % len(self.backgrounds)})

        rows = {}
        notes = {}
        for strat in strategies:
            adapter = self._strategy_adapter(strat)
            psnrs, ssims, percs, fail_cases = [], [], [], []
            for ci, case in enumerate(cases):
                img = render(self.mesh_at(), case["pose"],
                             background=self.backgrounds[case["bg"]],
                             background_id=f"bg_{case['bg']}").rgb
                z0 = self.backend.encode(img)
                z_back = self.backend.noisy_reconstruct(
                    z0, eval_noise_step, adapter,
                    noise_seed=derive_seed(self.cfg.seed, f"eval-noise-{ci}"))
                recon = self.backend.decode(z_back)
                psnrs.append(psnr(recon, img))
                ssims.append(ssim(recon, img))
                percs.append(perceptual_distance(recon, img))
                fail_cases.append({"edited": recon, "original": img, "m_recon": None})
            row = {
                "psnr": float(np.mean([p for p in psnrs if np.isfinite(p)])),
                "ssim": float(np.mean(ssims)),
                "perceptual": float(np.mean(percs)),
                "failure_rate": failure_rate(fail_cases),
            }
            if drag_spec is not None:
                md, unresolved = self._probe_drag_md(drag_spec, adapter,
                                                     n_iters=probe_iters, lr=probe_lr)
                row["md"] = md
                notes[f"{strat}_md_unresolved"] = unresolved
            rows[strat] = row

        manifest = {
            "views": [dict(pose=c["pose"].to_json(), in_training=c["in_training"],
                           background=c["bg"]) for c in cases],
            "strategies": list(strategies),
            "seed": self.cfg.seed,
            "session": self.id,
            "texture_version": len(self.texture_versions) - 1,
            "eval_noise_step": eval_noise_step,
            "probe_iters": probe_iters,
            "probe_lr": probe_lr,
        }
        return EvalReport(rows=rows, manifest=manifest, notes=notes)

    def _strategy_adapter(self, strat: str) -> AdapterWeights | None:
        if strat == "none":
            return None
        if strat == "multiview":
            if self.adapter is None:
                raise SessionError("session has no multiview adapter")
            return self.adapter
        if strat == "singleview":
            tag = "eval-singleview"
            if tag not in self._view_adapters:
                rgb = self.render_view(0).rgb
                self._view_adapters[tag] = self.backend.train_adapter(
                    [rgb], steps=self.cfg.backend.lora_steps_singleview, view_ids=[tag])
                self.training_invocations += 1
            return self._view_adapters[tag]
        raise SessionError(f"unknown strategy {strat!r}")

    def _probe_drag_md(self, spec: DragSpec, adapter: AdapterWeights | None,
                       n_iters: int | None = None, lr: float | None = None):
        """Run a non-committing drag and measure MD via patch matching."""
        pose = self.resolve_view(spec.view if spec.view is not None else 0)
        origin = render(self.mesh_at(), pose, background=self.background()).rgb
        z0 = self.backend.encode(origin)
        drag_step = min(self.cfg.backend.drag_noise_step, self.cfg.backend.n_ddim_steps)
        traj = self.backend.invert(z0, drag_step, adapter)
        dres = drag_latent(self.backend, traj[drag_step], spec, adapter,
                           n_iters=n_iters, lr=lr)
        z_back = self.backend.denoise_from(dres.latent, adapter)
        edited = self.backend.decode(z_back)
        sources = [s for s, _ in spec.handles]
        targets = [t for _, t in spec.handles]
        return mean_distance(edited, targets, sources, "patch", original=origin)

    # ----------------------------------------------------------- persistence

    def save(self) -> None:
        blob = {
            "id": self.id,
            "state": self.state,
            "message": self.message,
            "config": self.cfg.to_json(),
            "views": [v.to_json() for v in self.views],
            "texture_versions": self.texture_versions,
            "jobs": self.jobs,
            "training_invocations": self.training_invocations,
            "pretrained_backend": self.pretrained_backend,
        }
        (self.dir / "session.json").write_text(json.dumps(blob, indent=2))

    @classmethod
    def load(cls, store: "SessionStore", session_id: str) -> "Session":
        path = store.root / session_id / "session.json"
        if not path.exists():
            raise SessionError(f"unknown session {session_id}")
        blob = json.loads(path.read_text())
        cfg = SessionConfig.from_json(blob["config"])
        sess = cls(store, session_id, cfg)
        sess.state = blob["state"]
        sess.message = blob.get("message", "")
        sess.views = [Viewpoint.from_json(v) for v in blob.get("views", [])]
        sess.texture_versions = blob.get("texture_versions", [])
        sess.jobs = blob.get("jobs", {})
        sess.training_invocations = blob.get("training_invocations", 0)
        sess.pretrained_backend = blob.get("pretrained_backend", False)
        mesh_obj = store.root / session_id / "mesh" / "mesh.obj"
        if mesh_obj.exists():
            sess.mesh = load_mesh(mesh_obj)
            if sess.texture_versions:
                sess.mesh.texture = sess.texture_atlas(0)
        bg_dir = store.root / session_id / "backgrounds"
        if bg_dir.exists():
            sess.backgrounds = [load_image(p) for p in sorted(bg_dir.glob("bg_*.png"))]
        ckpt = store.root / session_id / "backend" / "checkpoint.pt"
        if ckpt.exists():
            sess.backend, sess.adapter = ToyDiffusionBackend.load(ckpt)
        return sess


class SessionStore:
    """Directory-backed registry of sessions."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._live: dict[str, Session] = {}

    def create_session(self, mesh_path, background_paths=None, overrides=None,
                       session_id=None) -> Session:
        sess = Session.create(self, mesh_path, background_paths, overrides, session_id)
        self._live[sess.id] = sess
        return sess

    def get(self, session_id: str) -> Session:
        if session_id not in self._live:
            self._live[session_id] = Session.load(self, session_id)
        return self._live[session_id]

    def list_sessions(self) -> list[str]:
        return sorted(p.parent.name for p in self.root.glob("*/session.json"))
