"""WebSocket render service: protocol, coalescing, sessions, errors."""

import io
import json

import numpy as np
import pytest
from starlette.testclient import TestClient

from splatface.camera import orbit_camera
from splatface.service import PROTOCOL_VERSION, create_app, decode_frame_header


def _cam_dict(size=40):
    cam = orbit_camera(0.0, 0.0, 2.5, (0, 0, 0), 1.2 * size, 1.2 * size,
                       size / 2, size / 2, size, size)
    return cam.to_dict()


@pytest.fixture()
def client(tiny_pipeline):
    app = create_app(default_checkpoint=tiny_pipeline["stylization"],
                     default_manifest=tiny_pipeline["manifest"])
    with TestClient(app) as c:
        yield c


def _open(ws, **overrides):
    msg = {"type": "open"}
    msg.update(overrides)
    ws.send_text(json.dumps(msg))
    reply = json.loads(ws.receive_text())
    assert reply["type"] == "opened", reply
    return reply


def _render_round_trip(ws, msg):
    """Send one render request; return (binary payload, rendered reply)."""
    ws.send_text(json.dumps(msg))
    payload = ws.receive_bytes()
    done = json.loads(ws.receive_text())
    return payload, done


def _basic_render(request_id=1, size=40, **extra):
    msg = {"type": "render", "id": request_id, "t": 0, "cam": _cam_dict(size),
           "emo": None, "sty": None, "quality": "full", "format": "raw"}
    msg.update(extra)
    return msg


def test_healthz(client):
    r = client.get("/healthz")
    assert r.status_code == 200
    assert r.json() == {"status": "ok", "sessions": 0}


def test_open_reports_session_capabilities(client, tiny_pipeline):
    with client.websocket_connect("/ws") as ws:
        opened = _open(ws)
        assert opened["version"] == PROTOCOL_VERSION
        assert opened["frames"] == 6
        assert opened["stage"] == "stylization"
        assert len(opened["emotions"]) == 4
        assert len(opened["styles"]) == 2
        assert opened["session"].startswith("s")

        sessions = client.get("/sessions").json()["sessions"]
        assert [s["id"] for s in sessions] == [opened["session"]]


def test_render_binary_frame_layout(client):
    with client.websocket_connect("/ws") as ws:
        _open(ws)
        payload, done = _render_round_trip(ws, _basic_render(request_id=7))
        version, request_id, w, h, off = decode_frame_header(payload)
        assert (version, request_id, w, h) == (PROTOCOL_VERSION, 7, 40, 40)
        assert len(payload) == off + 40 * 40 * 3
        assert done["type"] == "rendered" and done["id"] == 7
        assert done["ms"] > 0


def test_draft_quality_halves_resolution(client):
    with client.websocket_connect("/ws") as ws:
        _open(ws)
        payload, _ = _render_round_trip(
            ws, _basic_render(request_id=2, quality="draft"))
        _, _, w, h, off = decode_frame_header(payload)
        assert (w, h) == (20, 20)
        assert len(payload) == off + 20 * 20 * 3


def test_png_format_round_trips(client):
    from PIL import Image
    with client.websocket_connect("/ws") as ws:
        _open(ws)
        raw, _ = _render_round_trip(ws, _basic_render(request_id=3))
        png, _ = _render_round_trip(ws, _basic_render(request_id=4,
                                                      format="png"))
        _, _, w, h, off = decode_frame_header(png)
        decoded = np.asarray(Image.open(io.BytesIO(png[off:])))
        rgb = np.frombuffer(raw[off:], np.uint8).reshape(h, w, 3)
        np.testing.assert_array_equal(decoded, rgb)


def test_identical_requests_are_byte_identical(client):
    with client.websocket_connect("/ws") as ws:
        _open(ws)
        msg = _basic_render(request_id=5,
                            emo={"a": "happy", "b": "sad", "alpha": 0.5},
                            sty={"a": "style0", "b": "style1", "alpha": 0.25})
        a, _ = _render_round_trip(ws, msg)
        b, _ = _render_round_trip(ws, msg)
        assert a == b


def test_unknown_emotion_errors_but_session_survives(client):
    with client.websocket_connect("/ws") as ws:
        _open(ws)
        ws.send_text(json.dumps(_basic_render(
            request_id=8, emo={"a": "nope", "b": "sad", "alpha": 0.5})))
        err = json.loads(ws.receive_text())
        assert err["type"] == "error" and err["id"] == 8
        assert "nope" in err["message"]
        payload, _ = _render_round_trip(ws, _basic_render(request_id=9))
        assert decode_frame_header(payload)[1] == 9


def test_malformed_request_names_missing_field(client):
    with client.websocket_connect("/ws") as ws:
        _open(ws)
        msg = _basic_render(request_id=10)
        del msg["cam"]
        ws.send_text(json.dumps(msg))
        err = json.loads(ws.receive_text())
        assert err["type"] == "error"
        assert "'cam'" in err["message"]


def test_render_without_open_session_errors(client):
    with client.websocket_connect("/ws") as ws:
        ws.send_text(json.dumps(_basic_render(request_id=1)))
        err = json.loads(ws.receive_text())
        assert err["type"] == "error"
        assert "no open session" in err["message"]


def test_style_request_needs_stage3_checkpoint(tiny_pipeline):
    app = create_app(default_checkpoint=tiny_pipeline["neutral"],
                     default_manifest=tiny_pipeline["manifest"])
    with TestClient(app) as client:
        with client.websocket_connect("/ws") as ws:
            _open(ws)
            ws.send_text(json.dumps(_basic_render(
                request_id=1, sty={"a": "style0", "b": "style0", "alpha": 1.0})))
            err = json.loads(ws.receive_text())
            assert err["type"] == "error"
            assert "stylization" in err["message"]


def test_burst_coalesces_to_latest_request(client):
    """A burst of requests may drop intermediates but must end on the last id."""
    with client.websocket_connect("/ws") as ws:
        _open(ws)
        ids = list(range(100, 110))
        for i in ids:
            ws.send_text(json.dumps(_basic_render(request_id=i, t=i % 6)))
        seen = []
        while True:
            payload = ws.receive_bytes()
            done = json.loads(ws.receive_text())
            assert done["type"] == "rendered"
            assert decode_frame_header(payload)[1] == done["id"]
            seen.append(done["id"])
            if done["id"] == ids[-1]:
                break
        assert len(seen) <= len(ids)
        assert seen == sorted(seen)  # never regresses to an older request


def test_two_sessions_with_different_checkpoints_differ(client, tiny_pipeline):
    with client.websocket_connect("/ws") as a, \
         client.websocket_connect("/ws") as b:
        _open(a, checkpoint=tiny_pipeline["neutral"])
        _open(b, checkpoint=tiny_pipeline["stylization"])
        assert len(client.get("/sessions").json()["sessions"]) == 2
        pa, _ = _render_round_trip(a, _basic_render(request_id=1))
        pb, _ = _render_round_trip(b, _basic_render(request_id=1))
        off = decode_frame_header(pa)[4]
        assert pa[:off] == pb[:off]
        assert pa[off:] != pb[off:]


def test_idle_session_expires(tiny_pipeline):
    app = create_app(default_checkpoint=tiny_pipeline["neutral"],
                     default_manifest=tiny_pipeline["manifest"],
                     idle_timeout=1e-6)
    with TestClient(app) as client:
        with client.websocket_connect("/ws") as ws:
            _open(ws)
            import time
            time.sleep(0.01)
            ws.send_text(json.dumps(_basic_render(request_id=1)))
            err = json.loads(ws.receive_text())
            assert err["type"] == "error"
            assert "session expired" in err["message"]
        assert client.get("/sessions").json()["sessions"] == []


def test_close_removes_session(client):
    with client.websocket_connect("/ws") as ws:
        opened = _open(ws)
        ws.send_text(json.dumps({"type": "close"}))
        closed = json.loads(ws.receive_text())
        assert closed == {"type": "closed", "session": opened["session"]}
    assert client.get("/sessions").json()["sessions"] == []


def test_disconnect_removes_session(client):
    with client.websocket_connect("/ws") as ws:
        _open(ws)
    assert client.get("/sessions").json()["sessions"] == []


def test_unknown_message_type_errors(client):
    with client.websocket_connect("/ws") as ws:
        ws.send_text(json.dumps({"type": "wibble"}))
        err = json.loads(ws.receive_text())
        assert err["type"] == "error"
        assert "wibble" in err["message"]


def test_invalid_json_errors(client):
    with client.websocket_connect("/ws") as ws:
        ws.send_text("not json {")
        err = json.loads(ws.receive_text())
        assert err["type"] == "error"
