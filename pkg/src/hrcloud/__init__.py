"""Cloud detection with a high-resolution multi-branch network."""
from .config import RunConfig, load_config
from .model import HRCloudNet, build_model

__all__ = ["HRCloudNet", "RunConfig", "build_model", "load_config"]
__version__ = "0.1.0"
