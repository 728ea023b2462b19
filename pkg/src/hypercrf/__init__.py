"""Hyperspectral segmentation with band-group 3D CNNs and a deep CRF."""

from .cube import HyperCube, LabelMap, read_cube, read_labels, write_cube, write_labels
from .layers import Conv3dLayer, PoolRecord, SgdConfig
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "Conv3dLayer",
    "HyperCube",
    "LabelMap",
    "PoolRecord",
    "SgdConfig",
    "Tensor",
    "read_cube",
    "read_labels",
    "write_cube",
    "write_labels",
    "__version__",
]
