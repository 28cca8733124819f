"""The black-box model boundary.

Every restoration model is a function from a degraded image to a restored
image plus declared metadata. Built-in analytic models give the engine
exact oracles (identity, strictly local filters, a deliberately nonlocal
bias) without any deep-learning runtime; real networks attach through a
framed subprocess protocol or an optional ONNX backend.
"""

from __future__ import annotations

import json
import queue
import select
import shlex
import struct
import subprocess
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .degradations import resize_bicubic
from .imaging import ImageBuffer

PROTOCOL_VERSION = 1
HANDSHAKE_TIMEOUT_S = 30.0


class ProtocolError(RuntimeError):
    """Subprocess bridge violated the wire protocol or its declared shape."""


@dataclass
class ModelHandle:
    """Opaque restoration function with declared metadata.

    `runner` maps a (H, W, C) float64 array in [0,1] to a clamped
    (H*scale, W*scale, C) float64 array.
    """

    name: str
    task: str
    scale: int
    deterministic: bool
    concurrent_safe: bool
    backend: str
    channels: int = 0  # 0 accepts any channel count
    runner: object = None

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.scale > 1 and self.task != "sr":
            raise ValueError("scale > 1 only valid for task sr")

    def run(self, data: np.ndarray) -> np.ndarray:
        """Raw inference on an array; validates the output contract."""
        out = self.runner(data)
        want = (data.shape[0] * self.scale, data.shape[1] * self.scale, data.shape[2])
        if out.shape != want:
            raise ProtocolError(
                f"model {self.name} returned shape {out.shape}, expected {want}"
            )
        return out

    def close(self) -> None:
        closer = getattr(self.runner, "close", None)
        if closer is not None:
            closer()


def infer(model: ModelHandle, image: ImageBuffer) -> ImageBuffer:
    """One black-box inference; output dims = input dims x scale, clamped."""
    if model.channels and image.channels != model.channels:
        raise ValueError(
            f"model {model.name} expects {model.channels} channels, got {image.channels}"
        )
    return ImageBuffer._wrap(model.run(image.data))


# --------------------------------------------------------------------------
# Built-in analytic models


def _window_sum(data: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 Chebyshev window, replicate border.

    Accumulates shifted copies so each output depends only on its own
    window samples; distant pixels cannot perturb it even at the bit level.
    """
    r = radius
    padded = np.pad(data, ((r, r), (r, r), (0, 0)), mode="edge")
    h, w = data.shape[:2]
    acc = np.zeros_like(data, dtype=np.float64)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            acc += padded[dy : dy + h, dx : dx + w]
    return acc


class BuiltinRunner:
    """Picklable runner for the named analytic models."""

    def __init__(self, kind: str, params: dict):
        self.kind = kind
        self.params = params

    def __call__(self, data: np.ndarray) -> np.ndarray:
        kind = self.kind
        if kind == "identity":
            return np.clip(data, 0.0, 1.0)
        if kind == "bicubic_up":
            s = self.params["scale"]
            return resize_bicubic(data, data.shape[0] * s, data.shape[1] * s, antialias=False)
        if kind == "box_denoise":
            r = self.params["radius"]
            k = (2 * r + 1) ** 2
            return np.clip(_window_sum(data, r) / k, 0.0, 1.0)
        if kind == "median":
            r = self.params["radius"]
            padded = np.pad(data, ((r, r), (r, r), (0, 0)), mode="edge")
            win = np.lib.stride_tricks.sliding_window_view(padded, (2 * r + 1, 2 * r + 1), axis=(0, 1))
            return np.clip(np.median(win, axis=(-2, -1)), 0.0, 1.0)
        if kind == "local_window":
            r = self.params["radius"]
            k = (2 * r + 1) ** 2
            mean = _window_sum(data, r) / k
            return np.clip(0.5 * (mean + data), 0.0, 1.0)
        if kind == "global_bias":
            kk = self.params["k"]
            mean = np.mean(data, axis=(0, 1), dtype=np.float64)
            return np.clip(data + kk * (mean - 0.5), 0.0, 1.0)
        raise ValueError(f"unknown builtin {kind!r}")


_BUILTIN_META = {
    # kind: (task, param name, default, scale getter)
    "identity": ("other", None, None),
    "bicubic_up": ("sr", "scale", 4),
    "box_denoise": ("dn", "radius", 1),
    "median": ("dn", "radius", 1),
    "local_window": ("other", "radius", 4),
    "global_bias": ("other", "k", 8.0),
}


def make_builtin(name: str, **params) -> ModelHandle:
    """Construct a built-in analytic model by name.

    Known names: identity, bicubic_up(scale), box_denoise(radius),
    median(radius), local_window(radius), global_bias(k).
    """
    if name not in _BUILTIN_META:
        raise ValueError(f"unknown builtin model {name!r}")
    task, pname, default = _BUILTIN_META[name]
    if pname is None:
        if params:
            raise ValueError(f"{name} takes no parameters")
        resolved = {}
    else:
        value = params.pop(pname, default)
        if params:
            raise ValueError(f"unexpected parameters for {name}: {sorted(params)}")
        if pname in ("scale", "radius"):
            value = int(value)
            if value < 1:
                raise ValueError(f"{pname} must be >= 1")
        else:
            value = float(value)
        resolved = {pname: value}
    scale = resolved.get("scale", 1)
    label = name if not resolved else f"{name}({pname}={resolved[pname]})"
    return ModelHandle(
        name=label,
        task=task,
        scale=scale,
        deterministic=True,
        concurrent_safe=True,
        backend="builtin",
        runner=BuiltinRunner(name, resolved),
    )


def parse_builtin_spec(spec: str) -> ModelHandle:
    """Parse 'name' or 'name:param' (e.g. bicubic_up:4, global_bias:8)."""
    name, _, arg = spec.partition(":")
    if name not in _BUILTIN_META:
        raise ValueError(f"unknown builtin model {name!r}")
    _, pname, _ = _BUILTIN_META[name]
    if not arg:
        return make_builtin(name)
    if pname is None:
        raise ValueError(f"{name} takes no parameters")
    return make_builtin(name, **{pname: arg})


# --------------------------------------------------------------------------
# Subprocess protocol (parent side)


def write_frame(stream, header: dict, payload: bytes = b"") -> None:
    body = json.dumps(header, separators=(",", ":")).encode("utf-8")
    stream.write(struct.pack(">I", len(body)))
    stream.write(body)
    if payload:
        stream.write(payload)
    stream.flush()


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise ProtocolError("child closed the stream mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream) -> tuple[dict, bytes]:
    header_len = struct.unpack(">I", _read_exact(stream, 4))[0]
    header = json.loads(_read_exact(stream, header_len).decode("utf-8"))
    payload = b""
    nbytes = int(header.get("payload_bytes", 0) or 0)
    if nbytes:
        payload = _read_exact(stream, nbytes)
    return header, payload


class _Child:
    """One bridge process with completed handshake."""

    def __init__(self, argv: list[str], env: dict | None, timeout: float):
        self.proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, env=env, bufsize=0
        )
        try:
            write_frame(self.proc.stdin, {"type": "hello", "protocol": PROTOCOL_VERSION})
            deadline = time.monotonic() + timeout
            ready, _, _ = select.select(
                [self.proc.stdout], [], [], max(deadline - time.monotonic(), 0.0)
            )
            if not ready:
                raise ProtocolError(f"handshake timed out after {timeout}s")
            header, _ = read_frame(self.proc.stdout)
        except Exception:
            self.kill()
            raise
        if header.get("type") != "model_info":
            self.kill()
            raise ProtocolError(f"expected model_info, got {header.get('type')!r}")
        if header.get("protocol", PROTOCOL_VERSION) != PROTOCOL_VERSION:
            self.kill()
            raise ProtocolError(f"protocol version mismatch: {header.get('protocol')}")
        self.info = header

    def round_trip(self, req_id: int, data: np.ndarray) -> np.ndarray:
        h, w, c = data.shape
        payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
        write_frame(
            self.proc.stdin,
            {
                "type": "infer",
                "id": req_id,
                "height": h,
                "width": w,
                "channels": c,
                "dtype": "f32le",
                "payload_bytes": len(payload),
            },
            payload,
        )
        header, reply = read_frame(self.proc.stdout)
        if header.get("type") == "error":
            raise ProtocolError(f"bridge error: {header.get('message')}")
        if header.get("type") != "result" or header.get("id") != req_id:
            raise ProtocolError(f"unexpected reply {header}")
        scale_h = header["height"]
        scale_w = header["width"]
        want = scale_h * scale_w * header["channels"] * 4
        if header.get("dtype") != "f32le" or len(reply) != want:
            raise ProtocolError(
                f"malformed result payload: {len(reply)} bytes for "
                f"{scale_h}x{scale_w}x{header['channels']} f32le"
            )
        out = np.frombuffer(reply, dtype="<f4").reshape(scale_h, scale_w, header["channels"])
        return out.astype(np.float64)

    def shutdown(self) -> None:
        try:
            write_frame(self.proc.stdin, {"type": "shutdown"})
            self.proc.wait(timeout=5)
        except Exception:
            self.kill()

    def kill(self) -> None:
        try:
            self.proc.kill()
            self.proc.wait(timeout=5)
        except Exception:
            pass


class SubprocessRunner:
    """Framed request/response runner over a pool of bridge children.

    One request is in flight per child; a non-concurrent bridge keeps a
    single child and callers serialize on it. A crashed child is respawned
    and the inference retried once.
    """

    def __init__(self, argv: list[str], env: dict | None, timeout: float):
        self.argv = argv
        self.env = env
        self.timeout = timeout
        self._idle: queue.Queue[_Child] = queue.Queue()
        self._children: list[_Child] = []
        self._lock = threading.Lock()
        self._next_id = 0
        first = _Child(argv, env, timeout)
        self._children.append(first)
        self._idle.put(first)
        self.info = first.info

    def ensure_pool(self, n: int) -> None:
        if not self.info.get("concurrent", False):
            return
        with self._lock:
            while len(self._children) < n:
                child = _Child(self.argv, self.env, self.timeout)
                self._children.append(child)
                self._idle.put(child)

    def _take_id(self) -> int:
        with self._lock:
            self._next_id += 1
            return self._next_id

    def __call__(self, data: np.ndarray) -> np.ndarray:
        child = self._idle.get()
        try:
            try:
                out = child.round_trip(self._take_id(), data)
            except ProtocolError:
                if child.proc.poll() is None:
                    raise  # child alive: semantic violation, do not retry
                # Child died mid-stream: respawn and retry once.
                with self._lock:
                    self._children.remove(child)
                child = _Child(self.argv, self.env, self.timeout)
                with self._lock:
                    self._children.append(child)
                out = child.round_trip(self._take_id(), data)
            return np.clip(out, 0.0, 1.0)
        finally:
            self._idle.put(child)

    def close(self) -> None:
        with self._lock:
            children, self._children = self._children, []
        for child in children:
            child.shutdown()

    def __getstate__(self):
        raise TypeError("subprocess models cannot cross process boundaries")


def spawn_subprocess_model(
    command: str | list[str],
    env: dict | None = None,
    handshake_timeout: float = HANDSHAKE_TIMEOUT_S,
) -> ModelHandle:
    """Start a bridge process and complete the protocol handshake."""
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    runner = SubprocessRunner(argv, env, handshake_timeout)
    info = runner.info
    return ModelHandle(
        name=str(info.get("name", argv[0])),
        task=str(info.get("task", "other")),
        scale=int(info.get("scale", 1)),
        deterministic=bool(info.get("deterministic", True)),
        concurrent_safe=bool(info.get("concurrent", False)),
        backend="subprocess",
        channels=int(info.get("channels", 0)),
        runner=runner,
    )


# --------------------------------------------------------------------------
# Optional ONNX backend


class OnnxRunner:
    """Runs an image-to-image ONNX model (1xCxHxW float32 in [0,1])."""

    def __init__(self, path: str):
        try:
            import onnxruntime
        except ImportError as exc:
            raise RuntimeError(
                "onnx backend requires the onnxruntime package (install cemkit[onnx])"
            ) from exc
        self.path = path
        self.session = onnxruntime.InferenceSession(path, providers=["CPUExecutionProvider"])
        self.input_name = self.session.get_inputs()[0].name

    def __call__(self, data: np.ndarray) -> np.ndarray:
        chw = np.transpose(data, (2, 0, 1)).astype(np.float32)[None]
        out = self.session.run(None, {self.input_name: chw})[0]
        hwc = np.transpose(out[0], (1, 2, 0)).astype(np.float64)
        return np.clip(hwc, 0.0, 1.0)


def load_onnx_model(
    path: str, task: str = "other", scale: int = 1, name: str | None = None
) -> ModelHandle:
    return ModelHandle(
        name=name or path,
        task=task,
        scale=scale,
        deterministic=True,
        concurrent_safe=False,
        backend="onnx-file",
        runner=OnnxRunner(path),
    )


def parse_model_spec(spec: str, handshake_timeout: float = HANDSHAKE_TIMEOUT_S) -> ModelHandle:
    """Parse the CLI model grammar: builtin:NAME, subprocess:CMD, onnx:FILE."""
    kind, _, rest = spec.partition(":")
    if not rest:
        raise ValueError(f"model spec {spec!r} missing ':' argument")
    if kind == "builtin":
        return parse_builtin_spec(rest)
    if kind == "subprocess":
        return spawn_subprocess_model(rest, handshake_timeout=handshake_timeout)
    if kind == "onnx":
        return load_onnx_model(rest)
    raise ValueError(f"unknown model backend {kind!r}")
