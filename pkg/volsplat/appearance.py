"""View-dependent color from real spherical harmonics (3DGS basis and sign convention)."""

import numpy as np

from volsplat.exceptions import ConfigurationError
from volsplat.models import MAX_SH_DEGREE, sh_coefficient_count

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

RGB_OFFSET = 0.5


def _check_degree(degree: int) -> None:
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ConfigurationError(f"SH degree must be in 0..{MAX_SH_DEGREE}, got {degree}")


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values (…, (degree+1)²) at unit directions (…, 3)."""
    _check_degree(degree)
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full(x.shape, C0)]
    if degree > 0:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2.0 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if degree > 2:
        out += [
            C3[0] * y * (3.0 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4.0 * zz - xx - yy),
            C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * x * (4.0 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """∂basis/∂(x, y, z) treating the components as independent, shape (…, K, 3)."""
    _check_degree(degree)
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree > 0:
        c = np.full_like(x, C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree > 1:
        rows += [
            (C2[0] * y, C2[0] * x, zero),
            (zero, C2[1] * z, C2[1] * y),
            (-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z),
            (C2[3] * z, zero, C2[3] * x),
            (2.0 * C2[4] * x, -2.0 * C2[4] * y, zero),
        ]
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), zero),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (C3[2] * -2.0 * x * y, C3[2] * (4.0 * zz - xx - 3.0 * yy), C3[2] * 8.0 * y * z),
            (C3[3] * -6.0 * x * z, C3[3] * -6.0 * y * z, C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)),
            (C3[4] * (4.0 * zz - 3.0 * xx - yy), C3[4] * -2.0 * x * y, C3[4] * 8.0 * x * z),
            (C3[5] * 2.0 * x * z, C3[5] * -2.0 * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3.0 * xx - 3.0 * yy), C3[6] * -6.0 * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh_batch(sh_coeffs: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """SH + 0.5 before clamping, for (N, K, 3) coefficients and (N, 3) directions.

    Only the first (degree+1)² coefficients take part; the rest stay stored.
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    k = sh_coefficient_count(degree)
    if sh_coeffs.shape[-2] < k:
        raise ConfigurationError(f"Degree {degree} needs {k} coefficients, have {sh_coeffs.shape[-2]}")
    basis = sh_basis(dirs, degree)
    return np.einsum("...k,...kc->...c", basis, sh_coeffs[..., :k, :]) + RGB_OFFSET


def eval_sh(sh_coeffs: np.ndarray, direction: np.ndarray, degree: int | None = None) -> np.ndarray:
    """RGB for one Gaussian: standard SH contraction, +0.5, clamped at 0."""
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    if degree is None:
        count = sh_coeffs.shape[0]
        degree = int(round(np.sqrt(count))) - 1
        if (degree + 1) ** 2 != count:
            raise ConfigurationError(f"{count} SH coefficients do not match any degree")
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > 1e-6:
        raise ConfigurationError(f"SH direction must be unit length, got norm {norm:.8f}")
    return np.maximum(eval_sh_batch(sh_coeffs, direction, degree), 0.0)


def rgb_to_sh(rgb: np.ndarray) -> np.ndarray:
    """DC coefficient producing the given color."""
    return (np.asarray(rgb, dtype=np.float64) - RGB_OFFSET) / C0


def sh_to_rgb(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc, dtype=np.float64) * C0 + RGB_OFFSET
