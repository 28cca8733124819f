"""Reference inference bridge speaking the framed stdin/stdout protocol."""

__version__ = "0.1.0"

from .protocol import PROTOCOL_VERSION, read_frame, write_frame
from .runners import BridgeConfig, Normalization
from .serve import serve
