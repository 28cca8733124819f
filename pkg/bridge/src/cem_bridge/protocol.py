"""Framed stdin/stdout protocol, child side.

Frames are a 4-byte big-endian length, a UTF-8 JSON header, then
`payload_bytes` raw bytes when the header says so. Because the header is
length-delimited, a malformed header never desynchronizes the stream: the
bad bytes are already consumed and the next frame starts cleanly.
"""

from __future__ import annotations

import json
import struct

PROTOCOL_VERSION = 1


class EndOfStream(Exception):
    pass


class MalformedFrame(Exception):
    def __init__(self, message: str, request_id=None):
        super().__init__(message)
        self.request_id = request_id


def read_exact(stream, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise EndOfStream()
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream) -> tuple[dict, bytes]:
    """Read one frame; raises MalformedFrame with the stream already
    positioned at the next frame."""
    header_len = struct.unpack(">I", read_exact(stream, 4))[0]
    raw = read_exact(stream, header_len)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedFrame("header is not a JSON object")
    payload = b""
    nbytes = header.get("payload_bytes", 0) or 0
    if not isinstance(nbytes, int) or nbytes < 0:
        raise MalformedFrame("bad payload_bytes", header.get("id"))
    if nbytes:
        payload = read_exact(stream, nbytes)
    return header, payload


def write_frame(stream, header: dict, payload: bytes = b"") -> None:
    body = json.dumps(header, separators=(",", ":")).encode("utf-8")
    stream.write(struct.pack(">I", len(body)))
    stream.write(body)
    if payload:
        stream.write(payload)
    stream.flush()
