import json
import struct
import subprocess
import sys

import numpy as np
import pytest

torch = pytest.importorskip("torch")


class Driver:
    """Minimal parent-side protocol driver for exercising the bridge."""

    def __init__(self, args):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "cem_bridge", *args],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            bufsize=0,
        )

    def write_frame(self, header, payload=b""):
        body = json.dumps(header, separators=(",", ":")).encode()
        self.proc.stdin.write(struct.pack(">I", len(body)) + body + payload)
        self.proc.stdin.flush()

    def write_raw(self, blob):
        self.proc.stdin.write(blob)
        self.proc.stdin.flush()

    def read_frame(self):
        n = struct.unpack(">I", self._read(4))[0]
        header = json.loads(self._read(n))
        payload = b""
        nbytes = header.get("payload_bytes", 0) or 0
        if nbytes:
            payload = self._read(nbytes)
        return header, payload

    def _read(self, n):
        chunks = b""
        while len(chunks) < n:
            chunk = self.proc.stdout.read(n - len(chunks))
            assert chunk, "bridge closed the stream"
            chunks += chunk
        return chunks

    def hello(self):
        self.write_frame({"type": "hello", "protocol": 1})
        header, _ = self.read_frame()
        return header

    def infer(self, arr, req_id=1):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        h, w, c = arr.shape
        self.write_frame(
            {
                "type": "infer",
                "id": req_id,
                "height": h,
                "width": w,
                "channels": c,
                "dtype": "f32le",
                "payload_bytes": arr.nbytes,
            },
            arr.tobytes(),
        )
        header, payload = self.read_frame()
        if header["type"] == "error":
            return header, None
        out = np.frombuffer(payload, dtype="<f4").reshape(
            header["height"], header["width"], header["channels"]
        )
        return header, out

    def shutdown(self):
        self.write_frame({"type": "shutdown"})
        return self.proc.wait(timeout=10)

    def kill(self):
        try:
            self.proc.kill()
            self.proc.wait(timeout=5)
        except Exception:
            pass


@pytest.fixture
def driver_factory():
    drivers = []

    def make(args):
        d = Driver(args)
        drivers.append(d)
        return d

    yield make
    for d in drivers:
        d.kill()


class _Identity3(torch.nn.Module):
    """1x1 conv over 3 channels initialized to the identity map."""

    def __init__(self):
        super().__init__()
        self.conv = torch.nn.Conv2d(3, 3, kernel_size=1, bias=False)
        with torch.no_grad():
            self.conv.weight.copy_(torch.eye(3).reshape(3, 3, 1, 1))

    def forward(self, x):
        return self.conv(x)


class _Upscale2(torch.nn.Module):
    def forward(self, x):
        return torch.nn.functional.interpolate(x, scale_factor=2.0, mode="nearest")


@pytest.fixture(scope="session")
def identity_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "identity3.pt"
    torch.jit.script(_Identity3()).save(str(path))
    return str(path)


@pytest.fixture(scope="session")
def upscale2_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "upscale2.pt"
    torch.jit.script(_Upscale2()).save(str(path))
    return str(path)
