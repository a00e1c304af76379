from pydantic import BaseModel, Field

from app.services.codec_model import ModelConfig
from app.services.evaluation import RDPoint


class FrameTrace(BaseModel):
    frame_index: int
    bits: float
    bpp: float
    psnr_y: float
    psnr_u: float
    psnr_v: float
    psnr_yuv: float


class EncodeResult(BaseModel):
    name: str
    width: int
    height: int
    frames: int
    pairs: int
    base_qp: int
    total_bits: float
    total_bpp: float
    mean_psnr: float
    peak_bpp: float
    bpp_stdev: float
    trace: list[FrameTrace]


class CurveIn(BaseModel):
    label: str = "curve"
    points: list[RDPoint] = Field(min_length=4)


class BdRateRequest(BaseModel):
    anchor: CurveIn
    test: CurveIn


class BdRateResult(BaseModel):
    bd_rate: float
    bd_psnr: float | None
    anchor_psnr_range: tuple[float, float]
    test_psnr_range: tuple[float, float]


class CodecInfo(BaseModel):
    model: ModelConfig
    parameters: int
