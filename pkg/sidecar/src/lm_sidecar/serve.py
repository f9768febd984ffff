"""Entry point: run the sidecar under uvicorn using environment configuration."""
from __future__ import annotations

import os

import uvicorn

from .service import create_app


def main() -> None:
    port = int(os.environ.get("SIDECAR_PORT", "8900"))
    uvicorn.run(create_app(), host="127.0.0.1", port=port, log_level="info")


if __name__ == "__main__":
    main()
