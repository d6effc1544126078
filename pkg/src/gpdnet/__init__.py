"""Graph-convolutional point cloud denoising on a small numpy autodiff engine."""

from .errors import (ConfigError, ContractError, DataIOError, DimensionError, GeometryError,
                     GpdError, NumericError, VersionError)
from .geometry import PointCloud, TriangleMesh
from .graph import NeighborGraph
from .network import DESK_NET, PAPER_NET, GpdNet, GpdNetConfig
from .training import DESK_TRAIN, PAPER_TRAIN, TrainingConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataIOError", "DimensionError", "GeometryError", "GpdError",
    "NumericError", "VersionError", "PointCloud", "TriangleMesh", "NeighborGraph", "GpdNet",
    "GpdNetConfig", "DESK_NET", "PAPER_NET", "TrainingConfig", "DESK_TRAIN", "PAPER_TRAIN",
    "train",
]
