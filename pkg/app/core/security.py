import hmac

from fastapi import Header, HTTPException

from app.core.config import get_settings


async def verify_api_key(x_api_key: str = Header(default="")) -> None:
    settings = get_settings()
    # an unset key locks the API instead of opening it
    if settings.api_key is None or not hmac.compare_digest(
        x_api_key.encode(), settings.api_key.encode()
    ):
        raise HTTPException(status_code=401, detail="Invalid or missing API key")
