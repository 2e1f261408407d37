"""HTTP layer: exact /embed wire protocol.

POST /embed with {"text": string, "layer": int} answers
{"dim": int, "tokens": int, "data": [float ...]} (row-major); every error is
{"error": string} with a non-200 status: 400 for malformed requests or bad
layers, 413 for overlong text, 500 for unexpected failures.
"""
from __future__ import annotations

import json

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .config import SidecarConfig
from .service import EmbeddingService, LayerOutOfRange, TextTooLong


def create_app(config: SidecarConfig, service: EmbeddingService | None = None) -> FastAPI:
    app = FastAPI(title="embed-sidecar")
    svc = service if service is not None else EmbeddingService(config)
    app.state.service = svc

    @app.post("/embed")
    async def embed(request: Request):
        try:
            payload = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            return JSONResponse({"error": f"malformed JSON: {exc}"}, status_code=400)
        if not isinstance(payload, dict) or "text" not in payload:
            return JSONResponse({"error": "request must be {'text': str, 'layer': int}"},
                                status_code=400)
        text = payload["text"]
        layer = payload.get("layer")
        if not isinstance(text, str) or (layer is not None and not isinstance(layer, int)):
            return JSONResponse({"error": "text must be a string and layer an integer"},
                                status_code=400)
        try:
            matrix = svc.embed(text, layer)
        except TextTooLong as exc:
            return JSONResponse({"error": str(exc)}, status_code=413)
        except (LayerOutOfRange, ValueError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        except Exception as exc:  # pragma: no cover - defensive
            return JSONResponse({"error": f"inference failed: {exc}"}, status_code=500)
        tokens, dim = matrix.shape
        return JSONResponse(
            {"dim": int(dim), "tokens": int(tokens),
             "data": [float(x) for x in matrix.ravel()]}
        )

    @app.get("/health")
    async def health():
        return {"status": "ok", "depth": svc.depth,
                "model": config.model_name}

    return app


def serve(config: SidecarConfig, host: str = "127.0.0.1", port: int = 8765) -> None:
    """Run the service until interrupted."""
    import uvicorn

    uvicorn.run(create_app(config), host=host, port=port, log_level="warning")
