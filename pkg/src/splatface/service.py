"""Interactive render service.

WebSocket endpoint `/ws`:

  client -> {"type": "open", "checkpoint": path, "manifest": path}
  server -> {"type": "opened", "session": id, "emotions": [...],
             "styles": [...], "frames": T}
  client -> {"type": "render", "id": n, "t": frame,
             "cam": {"W": [12 floats], "fx", "fy", "cx", "cy", "w", "h"},
             "emo": {"a": label, "b": label, "alpha": x},
             "sty": {"a": label, "b": label, "alpha": x} | null,
             "quality": "draft" | "full", "format": "raw" | "png"}
  server -> binary frame: u8 version=1, u32 request id (LE), u16 width,
            u16 height, then RGB8 rows (or a PNG payload when format=png),
            followed by {"type": "rendered", "id": n, "ms": render_ms}
  client -> {"type": "close"}
  server -> {"type": "closed", "session": id}

Errors are reported as {"type": "error", "id"?: n, "message": str}; the
session survives request-level errors.  Render requests use latest-wins
coalescing: while one render runs, newer requests replace queued ones.
GET /healthz reports liveness; GET /sessions lists open sessions.
"""

from __future__ import annotations

import asyncio
import io
import itertools
import json
import struct
import time

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .camera import CameraModel
from .inference import InferenceSession

PROTOCOL_VERSION = 1
DRAFT_SCALE = 0.5


class RequestError(ValueError):
    pass


def encode_frame(request_id: int, image: np.ndarray, fmt: str = "raw") -> bytes:
    """Binary frame: u8 version, u32 request id, u16 w, u16 h, payload."""
    h, w = image.shape[:2]
    rgb = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    header = struct.pack("<BIHH", PROTOCOL_VERSION, request_id, w, h)
    if fmt == "png":
        from PIL import Image
        buf = io.BytesIO()
        Image.fromarray(rgb).save(buf, format="PNG")
        return header + buf.getvalue()
    return header + rgb.tobytes()


def decode_frame_header(payload: bytes):
    """(version, request id, width, height, body offset)."""
    version, request_id, w, h = struct.unpack_from("<BIHH", payload, 0)
    return version, request_id, w, h, struct.calcsize("<BIHH")


def _field(msg: dict, name: str, typ=None):
    if name not in msg:
        raise RequestError(f"missing field {name!r}")
    v = msg[name]
    if typ is not None:
        try:
            v = typ(v)
        except (TypeError, ValueError):
            raise RequestError(f"field {name!r}: expected {typ.__name__}")
    return v


def parse_camera(d: dict) -> CameraModel:
    try:
        return CameraModel.from_dict(d)
    except (KeyError, ValueError, TypeError) as exc:
        raise RequestError(f"field 'cam': {exc}") from exc


class Session:
    _ids = itertools.count(1)

    def __init__(self, inf: InferenceSession, idle_timeout: float):
        self.id = f"s{next(Session._ids)}"
        self.inf = inf
        self.idle_timeout = idle_timeout
        self.last_used = time.monotonic()

    def touch(self):
        self.last_used = time.monotonic()

    @property
    def expired(self) -> bool:
        return (self.idle_timeout > 0
                and time.monotonic() - self.last_used > self.idle_timeout)

    def render(self, msg: dict):
        """(image, elapsed ms) for a validated render request."""
        t = _field(msg, "t", int)
        cam = parse_camera(_field(msg, "cam"))
        quality = msg.get("quality", "full")
        if quality not in ("draft", "full"):
            raise RequestError(f"field 'quality': unknown value {quality!r}")
        if quality == "draft":
            cam = cam.scaled(DRAFT_SCALE)

        e = None
        if msg.get("emo") is not None:
            emo = msg["emo"]
            try:
                e = self.inf.interpolated_emotion(
                    _field(emo, "a"), _field(emo, "b"),
                    _field(emo, "alpha", float))
            except KeyError as exc:
                raise RequestError(str(exc.args[0])) from exc

        style = None
        if msg.get("sty") is not None:
            sty = msg["sty"]
            self.inf.require_stage("stylization", "style rendering")
            try:
                style = self.inf.interpolated_style(
                    _field(sty, "a"), _field(sty, "b"),
                    _field(sty, "alpha", float))
            except KeyError as exc:
                raise RequestError(str(exc.args[0])) from exc

        t0 = time.perf_counter()
        out, _ = self.inf.render_frame(t, cam=cam, e=e, style_descriptor=style)
        ms = (time.perf_counter() - t0) * 1e3
        return out.color, ms


def create_app(default_checkpoint=None, default_manifest=None,
               idle_timeout: float = 300.0, static_dir=None) -> FastAPI:
    app = FastAPI()
    app.state.sessions = {}
    # loaded model/manifest pairs shared read-only across sessions
    app.state.inference_cache = {}

    def open_session(checkpoint, manifest) -> Session:
        checkpoint = checkpoint or default_checkpoint
        manifest = manifest or default_manifest
        if not checkpoint or not manifest:
            raise RequestError("open needs 'checkpoint' and 'manifest' paths")
        key = (checkpoint, manifest)
        if key not in app.state.inference_cache:
            app.state.inference_cache[key] = InferenceSession(checkpoint, manifest)
        session = Session(app.state.inference_cache[key], idle_timeout)
        app.state.sessions[session.id] = session
        return session

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "sessions": len(app.state.sessions)}

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": [
            {"id": s.id, "frames": s.inf.frame_count, "stage": s.inf.stage,
             "idle_s": round(time.monotonic() - s.last_used, 3)}
            for s in app.state.sessions.values()]}

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        session: Session | None = None
        pending: dict = {"msg": None}
        wake = asyncio.Event()
        send_lock = asyncio.Lock()

        async def send_json(obj):
            async with send_lock:
                await ws.send_text(json.dumps(obj))

        async def send_error(message, request_id=None):
            obj = {"type": "error", "message": str(message)}
            if request_id is not None:
                obj["id"] = request_id
            await send_json(obj)

        async def worker():
            """Serialized render loop with latest-wins coalescing."""
            while True:
                await wake.wait()
                wake.clear()
                msg = pending["msg"]
                pending["msg"] = None
                if msg is None:
                    continue
                request_id = msg.get("id")
                try:
                    if session is None:
                        raise RequestError("no open session")
                    if session.expired:
                        app.state.sessions.pop(session.id, None)
                        raise RequestError("session expired")
                    session.touch()
                    image, ms = session.render(msg)
                    payload = encode_frame(int(request_id), image,
                                           msg.get("format", "raw"))
                    async with send_lock:
                        await ws.send_bytes(payload)
                    await send_json({"type": "rendered", "id": request_id,
                                     "ms": round(ms, 3)})
                except RequestError as exc:
                    await send_error(exc, request_id)
                except Exception as exc:
                    await send_error(f"render failed: {exc}", request_id)

        task = asyncio.create_task(worker())
        try:
            while True:
                try:
                    raw = await ws.receive_text()
                    msg = json.loads(raw)
                    if not isinstance(msg, dict):
                        raise RequestError("message must be a JSON object")
                    mtype = _field(msg, "type")
                except (json.JSONDecodeError, RequestError) as exc:
                    await send_error(exc)
                    continue

                if mtype == "open":
                    try:
                        session = open_session(msg.get("checkpoint"),
                                               msg.get("manifest"))
                    except RequestError as exc:
                        await send_error(exc)
                        continue
                    except Exception as exc:
                        await send_error(f"open failed: {exc}")
                        continue
                    await send_json({
                        "type": "opened", "session": session.id,
                        "emotions": session.inf.emotions,
                        "styles": session.inf.styles,
                        "frames": session.inf.frame_count,
                        "stage": session.inf.stage,
                        "version": PROTOCOL_VERSION})
                elif mtype == "render":
                    if msg.get("id") is None:
                        await send_error("missing field 'id'")
                        continue
                    pending["msg"] = msg   # latest request wins
                    wake.set()
                elif mtype == "close":
                    sid = session.id if session else None
                    if session:
                        app.state.sessions.pop(session.id, None)
                        session = None
                    await send_json({"type": "closed", "session": sid})
                else:
                    await send_error(f"unknown message type {mtype!r}")
        except WebSocketDisconnect:
            pass
        finally:
            task.cancel()
            if session:
                app.state.sessions.pop(session.id, None)

    if static_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="viewer")
    return app
