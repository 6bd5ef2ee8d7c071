"""Joint source-channel transmission of 3D point clouds over AWGN channels."""

from .channel import ChannelConfig, Normalizer, cpp, pack_complex, transmit_awgn, unpack_complex
from .codec import Codec, CodecConfig
from .geometry import (
    DatasetSpec,
    PointCloud,
    farthest_point_sample,
    generate_dataset,
    knn_radius,
    normalize_unit_cube,
    read_ply,
    write_ply,
)
from .metrics import MetricsConfig, chamfer, d1, d2
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ChannelConfig", "Normalizer", "cpp", "pack_complex", "transmit_awgn",
    "unpack_complex", "Codec", "CodecConfig", "DatasetSpec", "PointCloud",
    "farthest_point_sample", "generate_dataset", "knn_radius",
    "normalize_unit_cube", "read_ply", "write_ply", "MetricsConfig", "chamfer",
    "d1", "d2", "TrainConfig", "evaluate", "train", "__version__",
]
