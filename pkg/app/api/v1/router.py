import logging
import time
import uuid

from fastapi import APIRouter, Depends, HTTPException, Query, Request, UploadFile
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse

from app.api.v1.schemas import BdRateRequest, BdRateResult, CodecInfo, EncodeResult, FrameTrace
from app.core.config import get_settings
from app.core.security import verify_api_key
from app.services.codec_model import CodecModel, ShapeError, count_parameters
from app.services.evaluation import (
    CurveError,
    RDCurve,
    bd_psnr,
    bd_rate,
    per_frame_trace,
)
from app.services.media_io import MediaError, yuv420_from_bytes
from app.services.pipeline import CodingConfig, encode_sequence

logger = logging.getLogger(__name__)

router = APIRouter(dependencies=[Depends(verify_api_key)])


def _encode(model: CodecModel, data: bytes, width: int, height: int, qp: int, name: str) -> EncodeResult:
    sequence = yuv420_from_bytes(data, width, height, name=name)
    packets, report = encode_sequence(model, sequence, CodingConfig(base_qp=qp))
    return EncodeResult(
        name=report.name,
        width=width,
        height=height,
        frames=len(sequence),
        pairs=len(packets),
        base_qp=qp,
        total_bits=report.total_bits,
        total_bpp=report.total_bpp,
        mean_psnr=report.mean_psnr,
        peak_bpp=report.peak_bpp,
        bpp_stdev=report.bpp_stdev,
        trace=[FrameTrace(**row._asdict()) for row in per_frame_trace(report)],
    )


@router.post("/encode")
async def encode(
    file: UploadFile,
    request: Request,
    width: int = Query(gt=0),
    height: int = Query(gt=0),
    qp: int = Query(default=32, ge=0, le=63),
) -> JSONResponse:
    request_id = str(uuid.uuid4())
    start = time.monotonic()
    status_code = 500
    upload_bytes: int | None = None
    frames: int | None = None

    try:
        settings = get_settings()
        data = await file.read()
        upload_bytes = len(data)
        if upload_bytes > settings.max_upload_mb * 1024 * 1024:
            status_code = 413
            raise HTTPException(
                status_code=413, detail=f"Upload exceeds the {settings.max_upload_mb} MB limit"
            )
        model: CodecModel = request.app.state.codec
        factor = model.config.downsample_factor
        if width % factor or height % factor:
            status_code = 400
            raise HTTPException(
                status_code=400, detail=f"Frame size {width}x{height} must be a multiple of {factor}"
            )
        try:
            result = await run_in_threadpool(
                _encode, model, data, width, height, qp, file.filename or "upload"
            )
        except (MediaError, ShapeError) as e:
            status_code = 400
            raise HTTPException(status_code=400, detail=str(e)) from e
        frames = result.frames
        status_code = 200
        return JSONResponse(
            result.model_dump(mode="json"),
            status_code=200,
            headers={"X-Request-Id": request_id},
        )
    finally:
        logger.info(
            "encode complete",
            extra={
                "request_id": request_id,
                "method": request.method,
                "path": str(request.url.path),
                "status_code": status_code,
                "upload_bytes": upload_bytes,
                "frames": frames,
                "qp": qp,
                "duration_ms": int((time.monotonic() - start) * 1000),
            },
        )


@router.post("/bd-rate")
async def compare_curves(body: BdRateRequest) -> BdRateResult:
    try:
        anchor = RDCurve(label=body.anchor.label, points=tuple(body.anchor.points))
        test = RDCurve(label=body.test.label, points=tuple(body.test.points))
        rate = bd_rate(anchor, test)
    except ValueError as e:
        # CurveError, overlap failures and invalid curves alike
        raise HTTPException(status_code=422, detail=str(e)) from e
    try:
        quality: float | None = bd_psnr(anchor, test)
    except CurveError:
        quality = None
    return BdRateResult(
        bd_rate=rate,
        bd_psnr=quality,
        anchor_psnr_range=anchor.psnr_range,
        test_psnr_range=test.psnr_range,
    )


@router.get("/model")
async def model_info(request: Request) -> CodecInfo:
    model: CodecModel = request.app.state.codec
    return CodecInfo(model=model.config, parameters=count_parameters(model))
