"""Latent diffusion backend: encode/decode, deterministic inversion and
denoising, and low-rank adapter training.

The sampler is the eta=0 deterministic update

    z(i-1) = A_i z(i) + B_i eps(z(i), i),
    A_i = sqrt(abar(i-1)/abar(i)),  B_i = sqrt(1-abar(i-1)) - A_i sqrt(1-abar(i))

over a cosine abar schedule with abar(0) = 1. Inversion solves the same
update implicitly by fixed-point iteration, so invert-then-denoise round
trips to numerical precision and blended trajectories stay aligned.

The backend is fully functional at desk scale: a small conv autoencoder and
residual UNet trained per session. An external latent diffusion model can be
mounted by implementing the same five operations (encode, invert,
denoise_step, train_adapter, decode).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from ..util import derive_seed
from .models import ConvAutoencoder, TinyUNet, init_adapter_tensors


class BackendError(ValueError):
    pass


@dataclass
class BackendConfig:
    """Sampler, adapter, and toy-model training knobs."""

    n_ddim_steps: int = 50
    n_drag_steps: int = 35
    lora_rank: int = 16
    lora_lr: float = 2e-4
    lora_steps_multiview: int = 1000
    lora_steps_singleview: int = 200
    seed: int = 0
    # toy backend
    latent_channels: int = 4
    unet_width: int = 48
    ae_steps: int = 3000
    ae_lr: float = 2e-3
    noise_steps: int = 3000
    noise_lr: float = 1e-3
    alpha_bar_min: float = 0.05
    invert_iters: int = 8
    # drag optimizer
    drag_noise_step: int = 35
    drag_lr: float = 0.05
    # augmentation for the generic (pre-adapter) noise model
    crop_frac: float = 0.625
    jitter: float = 0.3

    def __post_init__(self):
        for name in ("n_ddim_steps", "n_drag_steps", "lora_rank",
                     "lora_steps_multiview", "lora_steps_singleview"):
            if getattr(self, name) < 1:
                raise BackendError(f"{name} must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LatentGrid:
    """Latent tensor (c, h, w) float32 at a declared noise index."""

    data: torch.Tensor
    step: int
    view_tag: str = ""

    @property
    def shape(self):
        return tuple(self.data.shape)

    def clone(self) -> "LatentGrid":
        return LatentGrid(self.data.clone(), self.step, self.view_tag)


@dataclass
class AdapterWeights:
    """Low-rank factor pairs per host layer of the noise predictor."""

    rank: int
    scale: float
    tensors: dict[str, tuple[torch.Tensor, torch.Tensor]]
    trained_on: list[str] = field(default_factory=list)
    steps_trained: int = 0


def cosine_alpha_bar(n_steps: int, abar_min: float) -> np.ndarray:
    """abar[i] for i in 0..n_steps, abar[0] = 1, decreasing to abar_min."""
    i = np.arange(n_steps + 1, dtype=np.float64)
    return abar_min + (1.0 - abar_min) * np.cos((i / n_steps) * (math.pi / 2)) ** 2


class ToyDiffusionBackend:
    """Per-session generative prior over rendered views.

    Training is exclusive per session; encode/invert/denoise/decode only read
    the weights and may run concurrently across sessions.
    """

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        torch.manual_seed(derive_seed(cfg.seed, "backend-init"))
        self.ae = ConvAutoencoder(cfg.latent_channels)
        self.unet = TinyUNet(cfg.latent_channels, cfg.unet_width)
        self.alpha_bar = cosine_alpha_bar(cfg.n_ddim_steps, cfg.alpha_bar_min)
        self.latent_mean = torch.zeros(cfg.latent_channels)
        self.latent_std = torch.ones(cfg.latent_channels)
        self.adapter_train_count = 0
        self.ae.eval()
        self.unet.eval()

    # ---------------------------------------------------------------- codec

    @staticmethod
    def _to_tensor(img) -> torch.Tensor:
        rgb = img.rgb if hasattr(img, "rgb") else img
        rgb = np.asarray(rgb, dtype=np.float32)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise BackendError(f"expected (H, W, 3) image, got {rgb.shape}")
        if rgb.shape[0] % 8 or rgb.shape[1] % 8:
            raise BackendError(f"image dims {rgb.shape[:2]} must be divisible by 8")
        return torch.from_numpy(rgb).permute(2, 0, 1).contiguous()

    def encode(self, img, view_tag: str = "") -> LatentGrid:
        """Encode an RGB view into a clean (step 0) latent."""
        x = self._to_tensor(img)
        with torch.no_grad():
            z = self.ae.encoder(x[None])[0]
        z = (z - self.latent_mean[:, None, None]) / self.latent_std[:, None, None]
        return LatentGrid(z, step=0, view_tag=view_tag)

    def decode(self, z: LatentGrid, decoder_weights: dict | None = None) -> np.ndarray:
        """Decode a clean latent to an (H, W, 3) image in [0, 1]."""
        if z.step != 0:
            raise BackendError(f"decode expects a step-0 latent, got step {z.step}")
        zd = z.data * self.latent_std[:, None, None] + self.latent_mean[:, None, None]
        with torch.no_grad():
            if decoder_weights is None:
                out = self.ae.decoder(zd[None])[0]
            else:
                out = torch.func.functional_call(self.ae.decoder, decoder_weights, (zd[None],))[0]
        return out.permute(1, 2, 0).numpy().astype(np.float32)

    def denormalize_latent(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.latent_std[:, None, None] + self.latent_mean[:, None, None]

    # -------------------------------------------------------------- sampler

    def _coeffs(self, i: int) -> tuple[float, float]:
        ab_prev, ab = self.alpha_bar[i - 1], self.alpha_bar[i]
        a = math.sqrt(ab_prev / ab)
        b = math.sqrt(1.0 - ab_prev) - a * math.sqrt(1.0 - ab)
        return a, b

    def _eps(self, z: torch.Tensor, step: int, adapter: AdapterWeights | None) -> torch.Tensor:
        frac = torch.tensor([step / self.cfg.n_ddim_steps], dtype=torch.float32)
        return self.unet(z[None], frac, adapter=adapter)[0]

    def denoise_step(self, z: LatentGrid, adapter: AdapterWeights | None = None) -> LatentGrid:
        """One deterministic sampler step, i -> i-1."""
        if z.step < 1:
            raise BackendError("denoise_step requires step >= 1")
        a, b = self._coeffs(z.step)
        with torch.no_grad():
            eps = self._eps(z.data, z.step, adapter)
            out = a * z.data + b * eps
        return LatentGrid(out, step=z.step - 1, view_tag=z.view_tag)

    def denoise_from(self, z: LatentGrid, adapter: AdapterWeights | None = None) -> LatentGrid:
        while z.step > 0:
            z = self.denoise_step(z, adapter)
        return z

    def invert(self, z0: LatentGrid, to_step: int,
               adapter: AdapterWeights | None = None) -> list[LatentGrid]:
        """Deterministic inversion trajectory [z(0), ..., z(to_step)].

        Each upward step solves the denoise update implicitly (fixed-point
        iteration), so denoising the trajectory reproduces z0 to numerical
        precision.
        """
        if to_step > self.cfg.n_ddim_steps:
            raise BackendError("to_step exceeds n_ddim_steps")
        traj = [z0.clone()]
        z = z0.data
        with torch.no_grad():
            for i in range(1, to_step + 1):
                a, b = self._coeffs(i)
                zi = (z - b * self._eps(z, i, adapter)) / a
                for _ in range(self.cfg.invert_iters):
                    zi = (z - b * self._eps(zi, i, adapter)) / a
                traj.append(LatentGrid(zi.clone(), step=i, view_tag=z0.view_tag))
                z = zi
        return traj

    def add_noise(self, z0: torch.Tensor, step: int, noise: torch.Tensor) -> torch.Tensor:
        ab = self.alpha_bar[step]
        return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise

    def noisy_reconstruct(self, z0: LatentGrid, step: int,
                          adapter: AdapterWeights | None = None,
                          noise_seed: int = 0) -> LatentGrid:
        """Forward-noise z0 to `step` with seeded Gaussian noise, denoise back.

        Unlike invert/denoise (an exact round trip by construction), this
        measures how well the denoiser actually knows the content, which is
        what separates adapter strategies.
        """
        g = torch.Generator().manual_seed(noise_seed)
        noise = torch.randn(z0.data.shape, generator=g)
        z = LatentGrid(self.add_noise(z0.data, step, noise).float(),
                       step=step, view_tag=z0.view_tag)
        return self.denoise_from(z, adapter)

    # ------------------------------------------------------------- features

    def unet_features(self, z: torch.Tensor, step: int,
                      adapter: AdapterWeights | None = None) -> torch.Tensor:
        """Latent-resolution feature map used for motion supervision/tracking."""
        frac = torch.tensor([step / self.cfg.n_ddim_steps], dtype=torch.float32)
        _, feats = self.unet(z[None], frac, adapter=adapter, return_features=True)
        return feats[0]

    # ------------------------------------------------------------- training

    def train_autoencoder(self, images: list[np.ndarray], steps: int | None = None,
                          curve_path: str | Path | None = None) -> list[float]:
        """Fit the autoencoder to the session's renders. Returns the loss curve."""
        steps = steps or self.cfg.ae_steps
        torch.manual_seed(derive_seed(self.cfg.seed, "train-ae"))
        data = torch.stack([self._to_tensor(im) for im in images])
        self.ae.train()
        opt = torch.optim.Adam(self.ae.parameters(), lr=self.cfg.ae_lr)
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda t: 0.1 + 0.45 * (1 + math.cos(math.pi * t / max(steps, 1))))
        curve = []
        n, h, w = len(data), data.shape[2], data.shape[3]
        crop = min(64, h, w)
        for it in range(steps):
            idx = torch.randint(0, n, (min(4, n),))
            top = int(torch.randint(0, h - crop + 1, ()))
            left = int(torch.randint(0, w - crop + 1, ()))
            batch = data[idx][:, :, top:top + crop, left:left + crop]
            if torch.rand(()) < 0.5:
                batch = torch.flip(batch, dims=[3])
            out = self.ae(batch)
            loss = torch.mean((out - batch) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            curve.append(float(loss.detach()))
        self.ae.eval()
        with torch.no_grad():
            lat = self.ae.encoder(data)
            self.latent_mean = lat.mean(dim=(0, 2, 3))
            self.latent_std = lat.std(dim=(0, 2, 3)).clamp_min(1e-4)
        if curve_path:
            _write_curve(curve_path, curve)
        return curve

    def _augment(self, batch: torch.Tensor) -> torch.Tensor:
        """Crops, flips, and color jitter: the generic prior never sees exact views."""
        b, _, h, w = batch.shape
        ch = max(16, int(h * self.cfg.crop_frac) // 8 * 8)
        cw = max(16, int(w * self.cfg.crop_frac) // 8 * 8)
        top = int(torch.randint(0, h - ch + 1, ()))
        left = int(torch.randint(0, w - cw + 1, ()))
        out = batch[:, :, top:top + ch, left:left + cw]
        if torch.rand(()) < 0.5:
            out = torch.flip(out, dims=[3])
        j = self.cfg.jitter
        scale = 1.0 + (torch.rand(b, 3, 1, 1) * 2 - 1) * j
        shift = (torch.rand(b, 3, 1, 1) * 2 - 1) * (j / 2)
        return (out * scale + shift).clamp(0.0, 1.0)

    def _denoising_loss(self, latents: torch.Tensor, adapter: AdapterWeights | None) -> torch.Tensor:
        n = latents.shape[0]
        steps = torch.randint(1, self.cfg.n_ddim_steps + 1, (n,))
        noise = torch.randn_like(latents)
        ab = torch.tensor(self.alpha_bar, dtype=torch.float32)[steps]
        noisy = ab.sqrt()[:, None, None, None] * latents + (1 - ab).sqrt()[:, None, None, None] * noise
        pred = self.unet(noisy, steps.float() / self.cfg.n_ddim_steps, adapter=adapter)
        return torch.mean((pred - noise) ** 2)

    def _encode_batch(self, batch: torch.Tensor) -> torch.Tensor:
        z = self.ae.encoder(batch)
        return (z - self.latent_mean[None, :, None, None]) / self.latent_std[None, :, None, None]

    def train_noise_model(self, images: list[np.ndarray], steps: int | None = None,
                          curve_path: str | Path | None = None) -> list[float]:
        """Train the base noise predictor on augmented renders."""
        steps = steps or self.cfg.noise_steps
        torch.manual_seed(derive_seed(self.cfg.seed, "train-noise"))
        data = torch.stack([self._to_tensor(im) for im in images])
        self.unet.train()
        opt = torch.optim.Adam(self.unet.parameters(), lr=self.cfg.noise_lr)
        curve = []
        n = len(data)
        for it in range(steps):
            idx = torch.randint(0, n, (min(4, n),))
            with torch.no_grad():
                latents = self._encode_batch(self._augment(data[idx]))
            loss = self._denoising_loss(latents, None)
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(float(loss.detach()))
        self.unet.eval()
        if curve_path:
            _write_curve(curve_path, curve)
        return curve

    def train_adapter(self, views: list, steps: int | None = None,
                      rank: int | None = None, lr: float | None = None,
                      view_ids: list[str] | None = None,
                      curve_path: str | Path | None = None) -> AdapterWeights:
        """Train a low-rank adapter on the given views' exact renders.

        Increments the training-invocation counter exactly once per call.
        """
        if not views:
            raise BackendError("train_adapter requires at least one view")
        rank = rank if rank is not None else self.cfg.lora_rank
        if rank < 1:
            raise BackendError("adapter rank must be >= 1")
        steps = steps or (self.cfg.lora_steps_multiview if len(views) > 1
                          else self.cfg.lora_steps_singleview)
        lr = lr if lr is not None else self.cfg.lora_lr
        self.adapter_train_count += 1
        torch.manual_seed(derive_seed(self.cfg.seed, f"train-adapter-{self.adapter_train_count}"))

        data = torch.stack([self._to_tensor(v) for v in views])
        with torch.no_grad():
            latents_all = self._encode_batch(data)
        tensors = init_adapter_tensors(self.unet, rank)
        params = []
        for a, b in tensors.values():
            a.requires_grad_(True)
            b.requires_grad_(True)
            params.extend([a, b])
        adapter = AdapterWeights(rank=rank, scale=1.0, tensors=tensors,
                                 trained_on=list(view_ids or []), steps_trained=steps)
        opt = torch.optim.Adam(params, lr=lr)
        curve = []
        n = latents_all.shape[0]
        for it in range(steps):
            idx = torch.randint(0, n, (min(4, n),))
            loss = self._denoising_loss(latents_all[idx], adapter)
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(float(loss.detach()))
        for a, b in tensors.values():
            a.requires_grad_(False)
            b.requires_grad_(False)
        if curve_path:
            _write_curve(curve_path, curve)
        return adapter

    # ------------------------------------------------------------ persistence

    def save(self, path: str | Path, adapter: AdapterWeights | None = None) -> None:
        """Single-file checkpoint with the config embedded as JSON."""
        blob = {
            "config_json": json.dumps(self.cfg.to_json()),
            "ae": self.ae.state_dict(),
            "unet": self.unet.state_dict(),
            "latent_mean": self.latent_mean,
            "latent_std": self.latent_std,
            "adapter_train_count": self.adapter_train_count,
        }
        if adapter is not None:
            blob["adapter"] = {
                "rank": adapter.rank,
                "scale": adapter.scale,
                "tensors": adapter.tensors,
                "trained_on": adapter.trained_on,
                "steps_trained": adapter.steps_trained,
            }
        torch.save(blob, path)

    @classmethod
    def load(cls, path: str | Path) -> tuple["ToyDiffusionBackend", AdapterWeights | None]:
        blob = torch.load(path, map_location="cpu", weights_only=False)
        cfg = BackendConfig.from_json(json.loads(blob["config_json"]))
        backend = cls(cfg)
        backend.ae.load_state_dict(blob["ae"])
        backend.unet.load_state_dict(blob["unet"])
        backend.latent_mean = blob["latent_mean"]
        backend.latent_std = blob["latent_std"]
        backend.adapter_train_count = int(blob.get("adapter_train_count", 0))
        adapter = None
        if "adapter" in blob:
            a = blob["adapter"]
            adapter = AdapterWeights(rank=a["rank"], scale=a["scale"], tensors=a["tensors"],
                                     trained_on=a["trained_on"], steps_trained=a["steps_trained"])
        return backend, adapter


def _write_curve(path: str | Path, curve: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            writer.writerow([i, f"{v:.8f}"])
