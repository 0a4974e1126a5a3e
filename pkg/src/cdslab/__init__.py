"""Contrastive deep supervision on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .config import TrainConfig, load_config, parse_config_text  # noqa: E402
from .errors import (CDSError, CheckpointError, ConfigError, DataError, DimensionError,  # noqa: E402
                     FormatError, NumericDomainError, NumericError)
from .network import attach_heads, build_backbone, forward_tapped, head_discard  # noqa: E402
from .tensor import Tensor, backward, no_grad  # noqa: E402

__all__ = [
    "__version__", "TrainConfig", "load_config", "parse_config_text", "CDSError", "CheckpointError",
    "ConfigError", "DataError", "DimensionError", "FormatError", "NumericDomainError", "NumericError",
    "attach_heads", "build_backbone", "forward_tapped", "head_discard", "Tensor", "backward", "no_grad",
]
