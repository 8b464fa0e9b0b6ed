from __future__ import annotations

import threading
import time
from pathlib import Path

import pytest
import uvicorn

from toxfilter_shim import ShimConfig, create_app

FIXTURES = Path(__file__).resolve().parent.parent.parent / "fixtures"


@pytest.fixture(scope="session")
def shim_url():
    """Mock-mode shim served by uvicorn on an ephemeral localhost port."""
    config = uvicorn.Config(
        create_app(ShimConfig(mode="mock")), host="127.0.0.1", port=0, log_level="warning"
    )
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 15
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("shim server did not start")
        time.sleep(0.05)
    port = server.servers[0].sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=10)
