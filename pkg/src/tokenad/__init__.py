"""Zero-shot anomaly detection with learnable anomaly/normal tokens in a frozen toy ViT."""
from .backbone import ViTConfig
from .config import RunConfig, load_config, parse_config
from .errors import TokenADError
from .model import AnomalyModel, ModelConfig
from .sca import ScaConfig

__all__ = ["AnomalyModel", "ModelConfig", "RunConfig", "ScaConfig", "TokenADError", "ViTConfig",
           "load_config", "parse_config"]
__version__ = "0.1.0"
