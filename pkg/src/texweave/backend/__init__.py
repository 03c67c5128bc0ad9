from .core import (
    AdapterWeights,
    BackendConfig,
    BackendError,
    LatentGrid,
    ToyDiffusionBackend,
    cosine_alpha_bar,
)

__all__ = [
    "AdapterWeights",
    "BackendConfig",
    "BackendError",
    "LatentGrid",
    "ToyDiffusionBackend",
    "cosine_alpha_bar",
]
