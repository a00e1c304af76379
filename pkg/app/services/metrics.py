import math
from typing import NamedTuple

import numpy as np

from app.services.media_io import Frame, Plane

PEAK = 255.0
MSE_FLOOR = PEAK**2 * 1e-10
DEFAULT_YUV_WEIGHTS = (6 / 8, 1 / 8, 1 / 8)


class PsnrResult(NamedTuple):
    psnr_y: float
    psnr_u: float
    psnr_v: float
    psnr_yuv: float


def plane_mse(a: Plane, b: Plane) -> float:
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr_from_mse(mse: float) -> float:
    # floored MSE caps identical planes at 100 dB
    return 10.0 * math.log10(PEAK**2 / max(mse, MSE_FLOOR))


def psnr_yuv420(
    a: Frame,
    b: Frame,
    weights: tuple[float, float, float] = DEFAULT_YUV_WEIGHTS,
) -> PsnrResult:
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"Cannot compare {a.width}x{a.height} with {b.width}x{b.height}")
    mse_y, mse_u, mse_v = (plane_mse(p, q) for p, q in zip(a.planes, b.planes, strict=True))
    w_y, w_u, w_v = weights
    return PsnrResult(
        psnr_y=psnr_from_mse(mse_y),
        psnr_u=psnr_from_mse(mse_u),
        psnr_v=psnr_from_mse(mse_v),
        psnr_yuv=psnr_from_mse(w_y * mse_y + w_u * mse_u + w_v * mse_v),
    )
