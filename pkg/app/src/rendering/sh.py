"""Real spherical harmonics up to degree 3 for view-dependent splat colour.

Coefficients are stored coefficient-major, (N, 16, 3). Colour = 0.5 + sum_i c_i Y_i,
clamped to [0, 1].
"""

import torch

SH_C0: float = 0.28209479177387814
SH_C1: float = 0.4886025119029199
SH_C2 = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
]
SH_C3 = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
]
MAX_DEGREE: int = 3


def n_coefficients(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """(N, 3) unit directions -> (N, (degree + 1)^2) basis values."""
    x, y, z = dirs.unbind(-1)
    terms = [torch.full_like(x, SH_C0)]
    if degree > 0:
        terms += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        terms += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
        if degree > 2:
            terms += [
                SH_C3[0] * y * (3.0 * xx - yy),
                SH_C3[1] * xy * z,
                SH_C3[2] * y * (4.0 * zz - xx - yy),
                SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                SH_C3[4] * x * (4.0 * zz - xx - yy),
                SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3.0 * yy),
            ]
    return torch.stack(terms, dim=-1)


def eval_sh(sh: torch.Tensor, view_dir: torch.Tensor, active_degree: int) -> torch.Tensor:
    """RGB of (N, >=(d+1)^2, 3) coefficients seen along (N, 3) unit directions. Only the
    first (active_degree + 1)^2 coefficients contribute."""
    if not 0 <= active_degree <= MAX_DEGREE:
        raise ValueError(f"active_degree must be in [0, {MAX_DEGREE}], got {active_degree}")
    basis = sh_basis(view_dir, active_degree)
    n: int = n_coefficients(active_degree)
    color = torch.einsum("nk,nkc->nc", basis, sh[:, :n])
    return torch.clamp(color + 0.5, 0.0, 1.0)


def rgb_to_dc(rgb: torch.Tensor) -> torch.Tensor:
    """DC coefficient that reproduces `rgb` at degree 0."""
    return (rgb - 0.5) / SH_C0
