import argparse
import sys

from .runners import BridgeConfig, Normalization
from .serve import serve


def parse_triple(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(","))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cem-bridge",
        description="Serve a restoration checkpoint over the framed stdin/stdout protocol",
    )
    parser.add_argument("--checkpoint", help="TorchScript (.pt) or ONNX (.onnx) file")
    parser.add_argument("--task", choices=["sr", "dn", "dr", "other"], default="other")
    parser.add_argument("--scale", type=int, default=1)
    parser.add_argument("--channels", type=int, default=3)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--echo", action="store_true", help="identity test mode")
    parser.add_argument("--concurrent", action="store_true",
                        help="declare that several bridge processes may run at once")
    parser.add_argument("--name", default=None)
    parser.add_argument("--channel-order", choices=["rgb", "bgr"], default="rgb")
    parser.add_argument("--mean", default="0", help="per-channel mean, comma separated")
    parser.add_argument("--std", default="1", help="per-channel std, comma separated")
    args = parser.parse_args(argv)

    config = BridgeConfig(
        checkpoint=args.checkpoint,
        task=args.task,
        scale=args.scale,
        channels=args.channels,
        device=args.device,
        normalization=Normalization(
            channel_order=args.channel_order,
            mean=parse_triple(args.mean),
            std=parse_triple(args.std),
        ),
        concurrent=args.concurrent or args.echo,
        echo=args.echo,
        name=args.name,
    )
    return serve(config)


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
