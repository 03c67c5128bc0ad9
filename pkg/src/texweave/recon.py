"""Decoder fine-tuning that reinstates detail outside the edited region.

Decoding a drag result through the shared decoder loses high-frequency
texture everywhere, and those losses compound across successive edits. Each
job therefore clones the decoder and fine-tunes the clone so its decode of
the final latent matches the edited image inside the reconstruction mask and
the original render outside it, then returns that decode.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backend import LatentGrid, ToyDiffusionBackend
from .util import binarize

DEFAULT_LAMBDA = 1.0
DEFAULT_STEPS = 100
DEFAULT_LR = 1e-4
DIVERGENCE_FACTOR = 10.0


class ReconError(ValueError):
    pass


@dataclass
class ReconJob:
    z0: LatentGrid
    edited: np.ndarray      # image the masked region should reproduce
    original: np.ndarray    # render the unmasked region should reproduce
    m_recon: np.ndarray
    lambda_recon: float = DEFAULT_LAMBDA
    steps: int = DEFAULT_STEPS
    lr: float = DEFAULT_LR

    def __post_init__(self):
        if self.z0.step != 0:
            raise ReconError("reconstruction needs a step-0 latent")
        if self.edited.shape != self.original.shape:
            raise ReconError("edited/original image dims differ")
        if self.m_recon.shape != self.edited.shape[:2]:
            raise ReconError("m_recon dims do not match the images")
        self.m_recon = binarize(self.m_recon)


@dataclass
class ReconResult:
    image: np.ndarray
    initial_loss: float
    final_loss: float
    curve: list[float]
    status: str  # "ok" or "diverged"


def recon_objective(decoded: torch.Tensor, edited: torch.Tensor,
                    original: torch.Tensor, mask: torch.Tensor,
                    lambda_recon: float) -> torch.Tensor:
    """L1 fit to the edit inside the mask plus weighted L1 fit to the
    original outside it; all tensors are (3, H, W) with mask (1, H, W)."""
    inside = ((decoded - edited) * mask).abs().mean()
    outside = ((decoded - original) * (1.0 - mask)).abs().mean()
    return inside + lambda_recon * outside


def reconstruct_details(backend: ToyDiffusionBackend, job: ReconJob,
                        curve_path: str | Path | None = None) -> ReconResult:
    """Fine-tune a decoder clone per the job and decode z0 with it.

    The backend's shared decoder is never mutated. If the loss diverges past
    10x its initial value the pre-fine-tune decode is returned with a
    "diverged" status.
    """
    decoder = copy.deepcopy(backend.ae.decoder)
    decoder.train()
    z = backend.denormalize_latent(job.z0.data)[None].detach()
    edited = torch.from_numpy(np.asarray(job.edited, dtype=np.float32)).permute(2, 0, 1)
    original = torch.from_numpy(np.asarray(job.original, dtype=np.float32)).permute(2, 0, 1)
    mask = torch.from_numpy(job.m_recon.astype(np.float32))[None]

    opt = torch.optim.Adam(decoder.parameters(), lr=job.lr)
    curve: list[float] = []
    status = "ok"
    for _ in range(job.steps):
        out = decoder(z)[0]
        loss = recon_objective(out, edited, original, mask, job.lambda_recon)
        curve.append(float(loss.detach()))
        if curve[-1] > DIVERGENCE_FACTOR * max(curve[0], 1e-8):
            status = "diverged"
            break
        opt.zero_grad()
        loss.backward()
        opt.step()

    if curve_path:
        with open(curve_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for i, v in enumerate(curve):
                writer.writerow([i, f"{v:.8f}"])

    if status == "diverged":
        image = backend.decode(job.z0)
        return ReconResult(image=image, initial_loss=curve[0],
                           final_loss=curve[-1], curve=curve, status=status)

    decoder.eval()
    with torch.no_grad():
        image = decoder(z)[0].permute(1, 2, 0).numpy().astype(np.float32)
    return ReconResult(image=image, initial_loss=curve[0], final_loss=curve[-1],
                       curve=curve, status=status)
