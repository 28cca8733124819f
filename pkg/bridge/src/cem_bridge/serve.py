"""The serve loop: handshake, probe, then one request in flight at a time."""

from __future__ import annotations

import sys

import numpy as np

from .protocol import (
    PROTOCOL_VERSION,
    EndOfStream,
    MalformedFrame,
    read_frame,
    write_frame,
)
from .runners import BridgeConfig, build_runner

PROBE_SIZE = 16


def probe_scale(runner, config: BridgeConfig) -> None:
    """Verify the declared scale with one random inference; refuse to serve
    a checkpoint whose actual output ratio disagrees."""
    rng = np.random.default_rng(0)
    x = rng.random((PROBE_SIZE, PROBE_SIZE, config.channels), dtype=np.float32)
    y = runner(x)
    want = (PROBE_SIZE * config.scale, PROBE_SIZE * config.scale, config.channels)
    if tuple(y.shape) != want:
        raise SystemExit(
            f"checkpoint violates declared scale {config.scale}: "
            f"probe {x.shape} -> {tuple(y.shape)}, expected {want}"
        )


def _model_info(config: BridgeConfig) -> dict:
    return {
        "type": "model_info",
        "name": config.model_name,
        "task": config.task,
        "scale": config.scale,
        "channels": config.channels,
        "concurrent": config.concurrent,
    }


def _handle_infer(stdout, runner, config: BridgeConfig, header: dict, payload: bytes) -> None:
    req_id = header.get("id")
    try:
        h, w, c = int(header["height"]), int(header["width"]), int(header["channels"])
        if header.get("dtype") != "f32le":
            raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
        if len(payload) != h * w * c * 4:
            raise ValueError(
                f"payload is {len(payload)} bytes, expected {h * w * c * 4} "
                f"for {h}x{w}x{c} f32le"
            )
        data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
        out = np.ascontiguousarray(runner(data), dtype="<f4")
        oh, ow, oc = out.shape
        write_frame(
            stdout,
            {
                "type": "result",
                "id": req_id,
                "height": oh,
                "width": ow,
                "channels": oc,
                "dtype": "f32le",
                "payload_bytes": out.nbytes,
            },
            out.tobytes(),
        )
    except Exception as exc:  # reply, never die on a bad request
        write_frame(stdout, {"type": "error", "id": req_id, "message": str(exc)})


def serve(config: BridgeConfig) -> int:
    """Speak protocol v1 on stdin/stdout until shutdown or EOF."""
    try:
        runner = build_runner(config)
    except Exception as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return 3
    if not config.echo:
        probe_scale(runner, config)

    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    try:
        header, _ = read_frame(stdin)
    except (EndOfStream, MalformedFrame):
        return 2
    if header.get("type") != "hello":
        write_frame(stdout, {"type": "error", "id": None,
                             "message": f"expected hello, got {header.get('type')!r}"})
        return 2
    if header.get("protocol") != PROTOCOL_VERSION:
        write_frame(stdout, {"type": "error", "id": None,
                             "message": f"unsupported protocol {header.get('protocol')}"})
        return 2
    write_frame(stdout, _model_info(config))

    while True:
        try:
            header, payload = read_frame(stdin)
        except EndOfStream:
            return 0
        except MalformedFrame as exc:
            # the frame length already bounded the bad bytes; keep serving
            write_frame(stdout, {"type": "error", "id": exc.request_id,
                                 "message": f"malformed frame: {exc}"})
            continue
        kind = header.get("type")
        if kind == "shutdown":
            return 0
        if kind == "infer":
            _handle_infer(stdout, runner, config, header, payload)
            continue
        write_frame(stdout, {"type": "error", "id": header.get("id"),
                             "message": f"unknown frame type {kind!r}"})
