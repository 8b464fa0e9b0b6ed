"""FastAPI application exposing the classifier wire protocol.

Endpoints (JSON over HTTP):

    POST /v1/classify/image  {"id", "image_path", "image_b64"?}
        -> {"rating", "category", "rationale"}
    POST /v1/classify/text   {"id", "text"} -> {"scores": {...}}
    POST /v1/judge           {"id", "preamble", "verdict"} -> {"unsafe", "reason"}
    GET  /v1/health          -> {"status": "ok"}

Malformed request bodies get a 400 with an error object, never a crash.
Mock-mode responses are pure functions of the request body.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import mock

MODES = ("mock", "real")


@dataclass
class ShimConfig:
    """Service configuration.

    Mock mode needs no network and no model downloads. Real mode
    requires explicit model identifiers for the roles it should serve;
    requests for an unconfigured role get a 503.
    """

    mode: str = "mock"
    host: str = "127.0.0.1"
    port: int = 8800
    image_model: str | None = None
    text_model: str | None = None
    judge_model: str | None = None
    markers: dict[str, str] = field(default_factory=lambda: dict(mock.DEFAULT_MARKERS))
    max_concurrency: int = 64

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        unknown = {code for code in self.markers.values()} - {f"O{k}" for k in range(1, 10)}
        if unknown:
            raise ValueError(f"marker table maps to unknown categories: {sorted(unknown)}")


class ImageRequest(BaseModel):
    id: str
    image_path: str
    image_b64: str | None = None


class TextRequest(BaseModel):
    id: str
    text: str


class VerdictBody(BaseModel):
    rating: str
    category: str | None = None
    rationale: str


class JudgeRequest(BaseModel):
    id: str
    preamble: str
    verdict: VerdictBody


def create_app(config: ShimConfig | None = None) -> FastAPI:
    config = config or ShimConfig()
    app = FastAPI(title="toxfilter-shim", version="0.1.0")

    real_image = real_text = real_judge = None
    if config.mode == "real":
        from . import real as real_mode

        if config.image_model:
            real_image = real_mode.RealImageClassifier(config.image_model)
        if config.text_model:
            real_text = real_mode.RealTextClassifier(config.text_model)
        if config.judge_model:
            real_judge = real_mode.RealJudge(config.judge_model)

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "malformed request body"})

    @app.exception_handler(json.JSONDecodeError)
    async def json_handler(request: Request, exc: json.JSONDecodeError):
        return JSONResponse(status_code=400, content={"error": "request body is not valid JSON"})

    def unavailable(role: str) -> JSONResponse:
        return JSONResponse(
            status_code=503, content={"error": f"no {role} model configured in real mode"}
        )

    def model_failure(exc: Exception) -> JSONResponse:
        return JSONResponse(status_code=502, content={"error": f"model output unusable: {exc}"})

    @app.get("/v1/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/v1/classify/image")
    def classify_image(body: ImageRequest):
        if config.mode == "mock":
            return mock.classify_image(body.image_path, config.markers)
        if real_image is None:
            return unavailable("image")
        from .real import ModelOutputError

        try:
            return real_image.classify(body.image_path)
        except ModelOutputError as exc:
            return model_failure(exc)

    @app.post("/v1/classify/text")
    def classify_text(body: TextRequest):
        if config.mode == "mock":
            return mock.classify_text(body.text)
        if real_text is None:
            return unavailable("text")
        from .real import ModelOutputError

        try:
            return real_text.classify(body.text)
        except ModelOutputError as exc:
            return model_failure(exc)

    @app.post("/v1/judge")
    def judge(body: JudgeRequest):
        if config.mode == "mock":
            return mock.judge(body.verdict.rationale)
        if real_judge is None:
            return unavailable("judge")
        from .real import ModelOutputError

        try:
            return real_judge.judge(body.preamble, body.verdict.model_dump())
        except ModelOutputError as exc:
            return model_failure(exc)

    return app
