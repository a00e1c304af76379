from pathlib import Path

import numpy as np

from app.services.evaluation import RDCurve, RDPoint
from app.services.media_io import Frame, Sequence, write_yuv420


def solid_frame(width: int, height: int, y: int = 128, u: int = 128, v: int = 128) -> Frame:
    return Frame(
        y_plane=np.full((height, width), y, dtype=np.uint8),
        u_plane=np.full((height // 2, width // 2), u, dtype=np.uint8),
        v_plane=np.full((height // 2, width // 2), v, dtype=np.uint8),
    )


def write_dataset(root: Path, sequences: list[Sequence]) -> Path:
    """Raw files plus one TOML description per sequence, as the train command expects."""
    root.mkdir(parents=True, exist_ok=True)
    for seq in sequences:
        write_yuv420(seq, root / f"{seq.name}.yuv")
        (root / f"{seq.name}.toml").write_text(
            f'name = "{seq.name}"\n'
            f'path = "{seq.name}.yuv"\n'
            f"width = {seq.width}\n"
            f"height = {seq.height}\n"
        )
    return root


def make_curve(
    label: str = "anchor",
    bpp: tuple[float, ...] = (0.05, 0.1, 0.2, 0.4, 0.8),
    psnr: tuple[float, ...] = (30.0, 32.5, 35.0, 37.0, 38.5),
    dataset: str = "default",
) -> RDCurve:
    return RDCurve(
        label=label,
        dataset=dataset,
        points=tuple(RDPoint(bpp=b, psnr=q) for b, q in zip(bpp, psnr, strict=True)),
    )
