"""Variable-rate learned image codec with a decoder-side cognition/distortion dial."""

from .bitstream import CodedStream, compress, decompress
from .codec_core import ModelConfig, VersatileCodec
from .cognition import ContrastiveEncoder, ProxyConfig, pretrain_proxy
from .config import RunConfig, load_config
from .training import StageIConfig, StageIIConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "CodedStream", "ContrastiveEncoder", "ModelConfig", "ProxyConfig", "RunConfig",
    "StageIConfig", "StageIIConfig", "VersatileCodec", "compress", "decompress",
    "load_config", "pretrain_proxy", "train_stage1", "train_stage2",
]
