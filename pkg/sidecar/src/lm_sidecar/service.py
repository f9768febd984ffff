"""HTTP surface: /embed, /score, /health.

Configuration comes from environment variables (overridable per app):
SIDECAR_MODEL, SIDECAR_PORT, SIDECAR_MAX_BATCH, SIDECAR_CONTEXT_LEN. All
responses are deterministic for a fixed model; there is no per-request
mutable state, so concurrent requests need no locking.
"""
from __future__ import annotations

import os

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .model import DEFAULT_MODEL, ByteLm, load_model

EXEMPLAR_TEMPLATE = "Input: {input}\nOutput: {output}\n\n"
QUERY_TEMPLATE = "Input: {query}\nOutput:"


def render_prompt(exemplars: list[dict], query_input: str) -> str:
    blocks = [
        EXEMPLAR_TEMPLATE.format(input=e["input"], output=e["output"])
        for e in exemplars
    ]
    return "".join(blocks) + QUERY_TEMPLATE.format(query=query_input)


def truncate_to_context(
    model: ByteLm, exemplars: list[dict], query_input: str,
    target_output: str, context_len: int,
) -> str:
    """Drop earliest exemplars until prompt plus target fit the context.

    The last exemplars are the most similar under ascending-similarity
    prompt order, so they are the ones kept.
    """
    kept = list(exemplars)
    target_tokens = len(model.encode(target_output))
    while True:
        prompt = render_prompt(kept, query_input)
        if 1 + len(model.encode(prompt)) + target_tokens <= context_len:
            return prompt
        if not kept:
            raise HTTPException(
                status_code=413,
                detail="prompt exceeds model context even with no exemplars",
            )
        kept.pop(0)


def _require_str(payload: dict, key: str) -> str:
    value = payload.get(key)
    if not isinstance(value, str):
        raise HTTPException(status_code=400, detail=f"{key} must be a string")
    return value


def create_app(
    model_name: str | None = None,
    context_len: int | None = None,
    max_batch: int | None = None,
) -> FastAPI:
    name = model_name if model_name is not None else os.environ.get(
        "SIDECAR_MODEL", DEFAULT_MODEL)
    context = context_len if context_len is not None else int(os.environ.get(
        "SIDECAR_CONTEXT_LEN", "2048"))
    batch = max_batch if max_batch is not None else int(os.environ.get(
        "SIDECAR_MAX_BATCH", "64"))

    app = FastAPI(title="lm-sidecar", docs_url=None, redoc_url=None)
    app.state.model = load_model(name)
    app.state.model_name = name
    app.state.context_len = context
    app.state.max_batch = batch

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": "malformed request body"})

    def require_model() -> ByteLm:
        model = app.state.model
        if model is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return model

    @app.get("/health")
    async def health():
        if app.state.model is None:
            return JSONResponse(
                status_code=503,
                content={"status": "unavailable", "model_name": app.state.model_name},
            )
        return {
            "status": "ok",
            "model_name": app.state.model_name,
            "context_length": app.state.context_len,
        }

    @app.post("/embed")
    async def embed(payload: dict):
        model = require_model()
        texts = payload.get("texts")
        if not isinstance(texts, list) or not texts:
            raise HTTPException(status_code=400, detail="texts must be a non-empty list")
        if not all(isinstance(t, str) for t in texts):
            raise HTTPException(status_code=400, detail="texts must all be strings")
        for t in texts:
            if 1 + len(model.encode(t)) > app.state.context_len:
                raise HTTPException(status_code=413, detail="text too long for context")
        vectors: list[list[float]] = []
        for start in range(0, len(texts), app.state.max_batch):
            chunk = texts[start:start + app.state.max_batch]
            vectors.extend(model.embed(t).tolist() for t in chunk)
        return {"vectors": vectors, "dim": model.dim}

    @app.post("/score")
    async def score(payload: dict):
        model = require_model()
        exemplars = payload.get("exemplars")
        if not isinstance(exemplars, list):
            raise HTTPException(status_code=400, detail="exemplars must be a list")
        for e in exemplars:
            if not (isinstance(e, dict)
                    and isinstance(e.get("input"), str)
                    and isinstance(e.get("output"), str)):
                raise HTTPException(
                    status_code=400,
                    detail="each exemplar needs string input and output fields",
                )
        query_input = _require_str(payload, "query_input")
        target_output = _require_str(payload, "target_output")
        if not target_output:
            raise HTTPException(status_code=400, detail="target_output must be non-empty")
        prompt = truncate_to_context(
            model, exemplars, query_input, target_output, app.state.context_len)
        log_likelihood, num_tokens = model.score(prompt, target_output)
        return {"log_likelihood": log_likelihood, "num_target_tokens": num_tokens}

    return app
