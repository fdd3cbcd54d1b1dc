"""Tile-based differentiable Gaussian rasterizer on CPU tensors.

Splats are projected with the EWA approximation, sorted once by (depth, id), binned into
square tiles and composited front to back. Each tile batch is a padded
[tiles, pixels, splats] tensor; padding and out-of-support entries carry alpha = 0, and
transmittance/colour are accumulated with ordered prefix reductions along the splat
axis, so a pixel's value does not depend on the tile size or on how tiles are grouped.
Gradients come from torch autograd and are exposed through `render_backward`.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch

from app.src.models.splat_model import WorldGaussians
from app.src.rendering.camera import Camera
from app.src.rendering.sh import eval_sh
from app.src.schemas.config import RenderConfig

logger = logging.getLogger(__name__)


class RenderStateError(RuntimeError):
    """Backward pass requested without a matching, unconsumed forward pass."""


@dataclass(frozen=True)
class RenderSettings:
    tile_size: int = 16
    radius_sigma: float = 3.0
    alpha_max: float = 0.99
    transmittance_min: float = 1e-4
    lowpass: float = 0.3
    frustum_margin: float = 1.3
    max_tile_batch_elements: int = 4_000_000

    @classmethod
    def from_config(cls, cfg: RenderConfig) -> "RenderSettings":
        return cls(**cfg.model_dump())


@dataclass
class Splat2D:
    """Projected, non-culled splats. conic holds (a, b, c) of the inverse 2D covariance
    [[a, b], [b, c]]; radius is the per-axis half extent of the support box."""

    mean2d: torch.Tensor
    cov2d: torch.Tensor
    conic: torch.Tensor
    radius: torch.Tensor
    depth: torch.Tensor
    color: torch.Tensor
    opacity: torch.Tensor
    ids: torch.Tensor
    n_culled: int = 0
    n_nonfinite: int = 0

    def __len__(self) -> int:
        return int(self.mean2d.shape[0])

    def select(self, mask: torch.Tensor) -> "Splat2D":
        return Splat2D(
            mean2d=self.mean2d[mask],
            cov2d=self.cov2d[mask],
            conic=self.conic[mask],
            radius=self.radius[mask],
            depth=self.depth[mask],
            color=self.color[mask],
            opacity=self.opacity[mask],
            ids=self.ids[mask],
            n_culled=self.n_culled,
            n_nonfinite=self.n_nonfinite,
        )


class ScreenGradAccumulator:
    """Per-splat sums of |dL/d mean2d| (normalized device units) and observation counts
    since the last reset."""

    def __init__(self, capacity: int, dtype: Optional[torch.dtype] = None):
        dtype = dtype or torch.get_default_dtype()
        self.grad_sum: torch.Tensor = torch.zeros(capacity, dtype=dtype)
        self.count: torch.Tensor = torch.zeros(capacity, dtype=torch.long)

    @property
    def capacity(self) -> int:
        return int(self.count.shape[0])

    def add(self, ids: torch.Tensor, magnitudes: torch.Tensor) -> None:
        self.grad_sum.index_add_(0, ids, magnitudes.detach().to(self.grad_sum.dtype))
        self.count.index_add_(0, ids, torch.ones_like(ids))

    def merge(self, other: "ScreenGradAccumulator") -> None:
        self.grad_sum += other.grad_sum
        self.count += other.count

    def mean(self) -> torch.Tensor:
        return self.grad_sum / self.count.clamp_min(1).to(self.grad_sum.dtype)

    def reset(self, ids: Optional[torch.Tensor] = None) -> None:
        if ids is None:
            self.grad_sum.zero_()
            self.count.zero_()
        else:
            self.grad_sum[ids] = 0
            self.count[ids] = 0

    def extend(self, n: int) -> None:
        self.grad_sum = torch.cat([self.grad_sum, self.grad_sum.new_zeros(n)])
        self.count = torch.cat([self.count, self.count.new_zeros(n)])

    def select(self, keep: torch.Tensor) -> None:
        self.grad_sum = self.grad_sum[keep]
        self.count = self.count[keep]


@dataclass
class RenderContext:
    """Forward state retained for one backward pass."""

    image: torch.Tensor
    mean2d: torch.Tensor
    ids: torch.Tensor
    inputs: Dict[str, torch.Tensor] = field(default_factory=dict)
    consumed: bool = False


@dataclass
class RenderOutput:
    image: torch.Tensor
    alpha: torch.Tensor
    n_rendered: int
    n_culled: int
    n_nonfinite: int
    context: RenderContext


def _empty_splats(dtype: torch.dtype, n_culled: int, n_nonfinite: int) -> Splat2D:
    return Splat2D(
        mean2d=torch.zeros(0, 2, dtype=dtype),
        cov2d=torch.zeros(0, 2, 2, dtype=dtype),
        conic=torch.zeros(0, 3, dtype=dtype),
        radius=torch.zeros(0, 2, dtype=dtype),
        depth=torch.zeros(0, dtype=dtype),
        color=torch.zeros(0, 3, dtype=dtype),
        opacity=torch.zeros(0, dtype=dtype),
        ids=torch.zeros(0, dtype=torch.long),
        n_culled=n_culled,
        n_nonfinite=n_nonfinite,
    )


def _finite_rows(*tensors: torch.Tensor) -> torch.Tensor:
    mask = torch.ones(tensors[0].shape[0], dtype=torch.bool)
    for tensor in tensors:
        mask &= torch.isfinite(tensor.detach().reshape(tensor.shape[0], -1)).all(dim=1)
    return mask


def project(
    gaussians: WorldGaussians,
    cam: Camera,
    settings: RenderSettings = RenderSettings(),
    active_sh_degree: int = 0,
) -> Splat2D:
    """Projects world Gaussians into the camera.

    Splats at or behind the near plane, or whose support box lies fully outside the
    image grown by `frustum_margin`, are culled. Non-finite splats are dropped and
    counted.
    """
    dtype: torch.dtype = gaussians.mu.dtype
    finite = _finite_rows(gaussians.mu, gaussians.cov, gaussians.opacity, gaussians.sh)
    n_nonfinite: int = int((~finite).sum())
    rotation = cam.rotation.to(dtype)
    translation = cam.translation.to(dtype)
    p_cam = gaussians.mu @ rotation.T + translation
    in_front = finite & (p_cam[:, 2].detach() > cam.near)
    keep = torch.nonzero(in_front, as_tuple=False).squeeze(-1)
    n_behind: int = int(finite.sum()) - int(keep.shape[0])
    if keep.numel() == 0:
        return _empty_splats(dtype, n_behind, n_nonfinite)

    p = p_cam[keep]
    x, y, z = p.unbind(-1)
    # Clamp the Jacobian's lateral slope outside the guard band.
    lim_x = settings.frustum_margin * 0.5 * cam.width / cam.fx
    lim_y = settings.frustum_margin * 0.5 * cam.height / cam.fy
    tx = torch.clamp(x / z, -lim_x, lim_x) * z
    ty = torch.clamp(y / z, -lim_y, lim_y) * z
    zeros = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([cam.fx / z, zeros, -cam.fx * tx / (z * z)], dim=-1),
            torch.stack([zeros, cam.fy / z, -cam.fy * ty / (z * z)], dim=-1),
        ],
        dim=-2,
    )
    m = jac @ rotation
    cov2d = m @ gaussians.cov[keep] @ m.transpose(-1, -2)
    cov2d = cov2d + settings.lowpass * torch.eye(2, dtype=dtype)
    mean2d = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], dim=-1)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    radius = settings.radius_sigma * torch.sqrt(torch.stack([a, c], dim=-1))

    view_dir = torch.nn.functional.normalize(gaussians.mu[keep] - cam.center.to(dtype), dim=-1)
    color = eval_sh(gaussians.sh[keep], view_dir, active_sh_degree)

    with torch.no_grad():
        grow_x = 0.5 * settings.frustum_margin * cam.width
        grow_y = 0.5 * settings.frustum_margin * cam.height
        mid_x = 0.5 * (cam.width - 1)
        mid_y = 0.5 * (cam.height - 1)
        inside = (
            (mean2d[:, 0] + radius[:, 0] >= mid_x - grow_x)
            & (mean2d[:, 0] - radius[:, 0] <= mid_x + grow_x)
            & (mean2d[:, 1] + radius[:, 1] >= mid_y - grow_y)
            & (mean2d[:, 1] - radius[:, 1] <= mid_y + grow_y)
        )
    splats = Splat2D(
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        radius=radius,
        depth=z,
        color=color,
        opacity=gaussians.opacity[keep],
        ids=gaussians.ids[keep],
        n_culled=n_behind + int((~inside).sum()),
        n_nonfinite=n_nonfinite,
    )
    return splats.select(inside)


def _tile_table(splats: Splat2D, width: int, height: int, tile_size: int) -> torch.Tensor:
    """(tiles, K) splat indices per tile in list order, padded with -1. Tiles are
    numbered row-major."""
    tiles_x: int = math.ceil(width / tile_size)
    tiles_y: int = math.ceil(height / tile_size)
    n_tiles: int = tiles_x * tiles_y
    n: int = len(splats)
    if n == 0:
        return torch.full((n_tiles, 0), -1, dtype=torch.long)
    mean = splats.mean2d.detach()
    radius = splats.radius.detach()
    lo_x = torch.arange(tiles_x, dtype=mean.dtype) * tile_size
    hi_x = torch.clamp(lo_x + tile_size, max=width) - 1
    lo_y = torch.arange(tiles_y, dtype=mean.dtype) * tile_size
    hi_y = torch.clamp(lo_y + tile_size, max=height) - 1
    over_x = (mean[:, :1] + radius[:, :1] >= lo_x) & (mean[:, :1] - radius[:, :1] <= hi_x)
    over_y = (mean[:, 1:] + radius[:, 1:] >= lo_y) & (mean[:, 1:] - radius[:, 1:] <= hi_y)
    overlap = (over_y[:, :, None] & over_x[:, None, :]).reshape(n, n_tiles)
    k_max: int = int(overlap.sum(dim=0).max())
    slot = torch.cumsum(overlap.long(), dim=0) - 1
    splat_idx, tile_idx = torch.nonzero(overlap, as_tuple=True)
    table = torch.full((n_tiles, k_max), -1, dtype=torch.long)
    table[tile_idx, slot[splat_idx, tile_idx]] = splat_idx
    return table


def _tile_pixels(width: int, height: int, tile_size: int, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """(tiles, P, 2) pixel centres and (tiles, P) linear pixel index (-1 outside)."""
    tiles_x: int = math.ceil(width / tile_size)
    tiles_y: int = math.ceil(height / tile_size)
    local = torch.arange(tile_size * tile_size)
    ty, tx = torch.meshgrid(torch.arange(tiles_y), torch.arange(tiles_x), indexing="ij")
    px = (tx.reshape(-1, 1) * tile_size + local % tile_size).long()
    py = (ty.reshape(-1, 1) * tile_size + local // tile_size).long()
    valid = (px < width) & (py < height)
    linear = torch.where(valid, py * width + px, torch.full_like(px, -1))
    coords = torch.stack([px, py], dim=-1).to(dtype)
    return coords, linear


def _composite(
    splats: Splat2D,
    idx: torch.Tensor,
    pix: torch.Tensor,
    background: torch.Tensor,
    settings: RenderSettings,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Front-to-back compositing of one tile batch -> (tiles, P, 3) colour and
    (tiles, P) final transmittance."""
    n_tiles, n_pix = pix.shape[:2]
    dtype = pix.dtype
    if idx.shape[1] == 0:
        colour = background.to(dtype).expand(n_tiles, n_pix, 3)
        return colour, torch.ones(n_tiles, n_pix, dtype=dtype)
    valid = idx >= 0
    safe = idx.clamp_min(0)
    mean = splats.mean2d[safe]
    conic = splats.conic[safe]
    radius = splats.radius[safe].detach()
    opacity = splats.opacity[safe]
    color = splats.color[safe]

    dx = pix[:, :, None, 0] - mean[:, None, :, 0]
    dy = pix[:, :, None, 1] - mean[:, None, :, 1]
    a, b, c = conic[:, None, :, 0], conic[:, None, :, 1], conic[:, None, :, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    with torch.no_grad():
        support = (
            (dx.abs() <= radius[:, None, :, 0])
            & (dy.abs() <= radius[:, None, :, 1])
            & valid[:, None, :]
        )
    if dtype == torch.float32:
        # Evaluated in float64 so the rounded result does not depend on the SIMD lane.
        falloff = torch.exp(power.double()).to(dtype)
    else:
        falloff = torch.exp(power)
    alpha = torch.clamp(opacity[:, None, :] * falloff, max=settings.alpha_max)
    zero = torch.zeros_like(alpha)
    alpha = torch.where(support, alpha, zero)
    with torch.no_grad():
        # A splat that would drop transmittance below the floor ends the pixel's list.
        reached = torch.cumprod(1.0 - alpha, dim=-1) >= settings.transmittance_min
    alpha = torch.where(reached, alpha, zero)
    trans_incl = torch.cumprod(1.0 - alpha, dim=-1)
    trans_excl = torch.cat([torch.ones_like(trans_incl[..., :1]), trans_incl[..., :-1]], dim=-1)
    weight = alpha * trans_excl
    colour = torch.cumsum(weight.unsqueeze(-1) * color[:, None, :, :], dim=2)[:, :, -1]
    final_t = trans_incl[..., -1]
    return colour + final_t.unsqueeze(-1) * background.to(dtype), final_t


def render(
    splats: Splat2D,
    cam: Camera,
    background: torch.Tensor,
    settings: RenderSettings = RenderSettings(),
) -> RenderOutput:
    """Composites projected splats into an (H, W, 3) image over `background`.

    Splats are ordered by depth with ties broken by ascending id. Non-finite splats are
    skipped and counted in `n_nonfinite`.
    """
    dtype: torch.dtype = splats.mean2d.dtype
    background = torch.as_tensor(background, dtype=dtype).reshape(3)
    finite = _finite_rows(
        splats.mean2d, splats.conic, splats.radius, splats.depth, splats.color, splats.opacity
    )
    n_skipped: int = int((~finite).sum())
    if n_skipped:
        logger.warning(f"Skipping {n_skipped} splats with non-finite parameters")
    splats = splats.select(finite)

    # Stable sort on depth over id-ordered splats gives (depth, id) order.
    by_id = torch.argsort(splats.ids, stable=True)
    by_depth = torch.argsort(splats.depth.detach()[by_id], stable=True)
    ordered = splats.select(by_id[by_depth])

    width, height, tile = cam.width, cam.height, settings.tile_size
    table = _tile_table(ordered, width, height, tile)
    coords, linear = _tile_pixels(width, height, tile, dtype)
    n_pix: int = tile * tile
    per_tile: int = max(1, n_pix * max(1, table.shape[1]))
    group: int = max(1, settings.max_tile_batch_elements // per_tile)

    colours: List[torch.Tensor] = []
    transmittances: List[torch.Tensor] = []
    for start in range(0, table.shape[0], group):
        stop = min(start + group, table.shape[0])
        counts = (table[start:stop] >= 0).sum(dim=1)
        k_chunk: int = int(counts.max()) if counts.numel() else 0
        colour, final_t = _composite(
            ordered, table[start:stop, :k_chunk], coords[start:stop], background, settings
        )
        colours.append(colour.reshape(-1, 3))
        transmittances.append(final_t.reshape(-1))

    flat_index = linear.reshape(-1)
    on_image = flat_index >= 0
    target = flat_index[on_image]
    colour_flat = torch.cat(colours)[on_image]
    trans_flat = torch.cat(transmittances)[on_image]
    image = torch.zeros(height * width, 3, dtype=dtype).index_copy(0, target, colour_flat)
    final_t = torch.ones(height * width, dtype=dtype).index_copy(0, target, trans_flat)
    image = image.reshape(height, width, 3)
    context = RenderContext(image=image, mean2d=ordered.mean2d, ids=ordered.ids)
    return RenderOutput(
        image=image,
        alpha=(1.0 - final_t).reshape(height, width),
        n_rendered=len(ordered),
        n_culled=splats.n_culled,
        n_nonfinite=splats.n_nonfinite + n_skipped,
        context=context,
    )


def render_gaussians(
    gaussians: WorldGaussians,
    cam: Camera,
    background: torch.Tensor,
    settings: RenderSettings = RenderSettings(),
    active_sh_degree: int = 0,
    inputs: Optional[Dict[str, torch.Tensor]] = None,
) -> RenderOutput:
    """project + render; `inputs` names the tensors `render_backward` differentiates."""
    output = render(project(gaussians, cam, settings, active_sh_degree), cam, background, settings)
    output.context.inputs = dict(inputs or {})
    return output


def render_backward(
    output_grad: torch.Tensor,
    context: Optional[RenderContext],
    accumulator: Optional[ScreenGradAccumulator] = None,
    retain_graph: bool = False,
) -> Dict[str, torch.Tensor]:
    """Reverse pass of one forward render.

    Args:
        output_grad (torch.Tensor): dLoss/dImage, (H, W, 3).
        context (Optional[RenderContext]): The context of the matching forward pass.
        accumulator (Optional[ScreenGradAccumulator]): Receives |dL/d mean2d| in
            normalized device units and one observation for every rendered splat.
        retain_graph (bool): Keep the forward graph for another backward pass.

    Returns:
        Dict[str, torch.Tensor]: Gradient per named input (zeros where unused) and
            "mean2d" for the rendered splats in render order.

    Raises:
        RenderStateError: If the context is missing or already consumed.
        ValueError: If output_grad does not match the image shape.
    """
    if context is None or context.consumed:
        raise RenderStateError("render_backward needs the context of an unconsumed forward render")
    if tuple(output_grad.shape) != tuple(context.image.shape):
        raise ValueError(
            f"output_grad shape {tuple(output_grad.shape)} does not match image {tuple(context.image.shape)}"
        )
    names: List[str] = [n for n, t in context.inputs.items() if t.requires_grad]
    targets: List[torch.Tensor] = [context.inputs[n] for n in names]
    track_mean: bool = context.mean2d.requires_grad
    if track_mean:
        targets.append(context.mean2d)
    grads: Dict[str, torch.Tensor] = {n: torch.zeros_like(t) for n, t in context.inputs.items()}
    mean_grad = torch.zeros_like(context.mean2d)
    if targets and context.image.requires_grad:
        computed = torch.autograd.grad(
            context.image,
            targets,
            grad_outputs=output_grad.to(context.image.dtype),
            allow_unused=True,
            retain_graph=retain_graph,
        )
        for name, grad in zip(names, computed[: len(names)]):
            if grad is not None:
                grads[name] = grad
        if track_mean and computed[-1] is not None:
            mean_grad = computed[-1]
    context.consumed = not retain_graph
    if accumulator is not None and context.ids.numel():
        height, width = context.image.shape[:2]
        # Normalized device units: the threshold does not depend on the image size.
        half_extent = mean_grad.new_tensor([0.5 * width, 0.5 * height])
        accumulator.add(context.ids, (mean_grad * half_extent).norm(dim=-1))
    grads["mean2d"] = mean_grad.detach()
    return grads
