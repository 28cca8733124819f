"""Checkpoint runners: HWC [0,1] float arrays in, HWC [0,1] arrays out.

Normalization recipes are explicit per checkpoint and never guessed; a
wrong silent default would invalidate every analysis built on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Normalization:
    """Tensor conversion recipe: channel order plus mean/std per channel.

    The model sees (x[order] - mean) / std; its output is mapped back with
    the inverse before clamping to [0, 1].
    """

    channel_order: str = "rgb"
    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.channel_order not in ("rgb", "bgr"):
            raise ValueError(f"unknown channel order {self.channel_order!r}")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")


@dataclass(frozen=True)
class BridgeConfig:
    checkpoint: str | None
    task: str = "other"
    scale: int = 1
    channels: int = 3
    device: str = "cpu"
    normalization: Normalization = field(default_factory=Normalization)
    concurrent: bool = False
    echo: bool = False
    name: str | None = None

    def __post_init__(self):
        if self.task not in ("sr", "dn", "dr", "other"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if not self.echo and not self.checkpoint:
            raise ValueError("either --echo or --checkpoint is required")

    @property
    def model_name(self) -> str:
        if self.name:
            return self.name
        return "cem-bridge-echo" if self.echo else f"cem-bridge:{self.checkpoint}"


class EchoRunner:
    """Identity model: replies with the request payload unchanged."""

    def __call__(self, data: np.ndarray) -> np.ndarray:
        return data


class TorchRunner:
    """TorchScript checkpoint: HWC -> 1xCxHxW normalized tensor and back."""

    def __init__(self, config: BridgeConfig):
        try:
            import torch
        except ImportError as exc:
            raise RuntimeError("torch is required for framework checkpoints") from exc
        self.torch = torch
        self.config = config
        self.module = torch.jit.load(config.checkpoint, map_location=config.device)
        self.module.eval()
        n = config.normalization
        shape = (1, -1, 1, 1)
        self.mean = torch.tensor(n.mean, dtype=torch.float32).reshape(shape)
        self.std = torch.tensor(n.std, dtype=torch.float32).reshape(shape)
        self.flip = n.channel_order == "bgr"

    def __call__(self, data: np.ndarray) -> np.ndarray:
        torch = self.torch
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))
            x = x.permute(2, 0, 1).unsqueeze(0)
            if self.flip:
                x = x.flip(1)
            x = (x - self.mean) / self.std
            y = self.module(x.to(self.config.device))
            y = y.detach().to("cpu").float()
            y = y * self.std + self.mean
            if self.flip:
                y = y.flip(1)
            out = y.squeeze(0).permute(1, 2, 0).numpy()
        return np.clip(out, 0.0, 1.0)


class OnnxRunner:
    """ONNX checkpoint through onnxruntime, same tensor recipe."""

    def __init__(self, config: BridgeConfig):
        try:
            import onnxruntime
        except ImportError as exc:
            raise RuntimeError("onnxruntime is required for .onnx checkpoints") from exc
        self.config = config
        providers = ["CPUExecutionProvider"]
        self.session = onnxruntime.InferenceSession(config.checkpoint, providers=providers)
        self.input_name = self.session.get_inputs()[0].name
        n = config.normalization
        self.mean = np.asarray(n.mean, dtype=np.float32).reshape(1, -1, 1, 1)
        self.std = np.asarray(n.std, dtype=np.float32).reshape(1, -1, 1, 1)
        self.flip = n.channel_order == "bgr"

    def __call__(self, data: np.ndarray) -> np.ndarray:
        x = np.transpose(data.astype(np.float32), (2, 0, 1))[None]
        if self.flip:
            x = x[:, ::-1]
        x = (x - self.mean) / self.std
        y = self.session.run(None, {self.input_name: np.ascontiguousarray(x)})[0]
        y = y * self.std + self.mean
        if self.flip:
            y = y[:, ::-1]
        out = np.transpose(y[0], (1, 2, 0))
        return np.clip(out.astype(np.float32), 0.0, 1.0)


def build_runner(config: BridgeConfig):
    if config.echo:
        return EchoRunner()
    if config.checkpoint.endswith(".onnx"):
        return OnnxRunner(config)
    return TorchRunner(config)
