import json
import logging
from datetime import UTC, datetime
from pathlib import Path
from typing import Any, Literal, TextIO

_RESERVED = frozenset(logging.makeLogRecord({}).__dict__) | {"message", "taskName"}

_HANDLER_NAME = "uvc"


def _jsonable(value: Any) -> Any:
    # numpy / torch scalars expose item(); arrays and tensors fall back to lists
    if hasattr(value, "item") and getattr(value, "ndim", 0) == 0:
        return value.item()
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    return repr(value)


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        record.message = record.getMessage()
        payload: dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created, tz=UTC).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.message,
        }
        for key, value in record.__dict__.items():
            if key not in _RESERVED:
                payload[key] = value
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=_jsonable)


class KeyValueFormatter(logging.Formatter):
    """Single-line ``message key=value ...`` output for interactive runs."""

    def format(self, record: logging.LogRecord) -> str:
        line = f"{record.levelname:<7} {record.name}: {record.getMessage()}"
        extras = [
            f"{key}={_jsonable(value) if not isinstance(value, (str, int, float)) else value}"
            for key, value in record.__dict__.items()
            if key not in _RESERVED
        ]
        if extras:
            line += " " + " ".join(extras)
        if record.exc_info:
            line += "\n" + self.formatException(record.exc_info)
        return line


def configure_logging(
    log_level: str = "INFO",
    fmt: Literal["json", "text"] = "json",
    stream: TextIO | None = None,
) -> None:
    root = logging.getLogger()
    for existing in list(root.handlers):
        if existing.get_name() == _HANDLER_NAME:
            root.removeHandler(existing)
    handler = logging.StreamHandler(stream)
    handler.set_name(_HANDLER_NAME)
    handler.setFormatter(JsonFormatter() if fmt == "json" else KeyValueFormatter())
    root.addHandler(handler)
    root.setLevel(getattr(logging, log_level.upper(), logging.INFO))
