"""8-bit PNG I/O. Stored sRGB values are mapped to floats in [0, 1] by /255 without a
gamma transform."""

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def read_png(path: str | Path, dtype: torch.dtype | None = None) -> torch.Tensor:
    """(H, W, 3) float image. Alpha channels are dropped, grayscale is expanded."""
    with Image.open(path) as image:
        array = np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
    return torch.as_tensor(array, dtype=dtype or torch.get_default_dtype())


def to_uint8(image: torch.Tensor | np.ndarray) -> np.ndarray:
    array = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    return np.clip(np.rint(array.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(image: torch.Tensor | np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
