"""FMEN super-resolution toolkit: graph engine, re-parameterization, memory planning and analysis."""
from .blocks import FmenConfig, build_erb, build_fmen, build_hfab, build_rrrb, he_init
from .errors import (ConfigError, FmenError, ImageFormatError, PatternError, ShapeError,
                     WeightFileError)
from .graph import BufferPolicy, Graph, count_ops, execute, forward, param_count, run
from .memory import MemoryReport, measure_peak, plan_memory
from .reparam import check_equivalence, fold_bn_into_following_conv, fuse_network, fuse_rrrb
from .tensor import BnParams, ConvWeights

__version__ = "0.1.0"

__all__ = [
    "BnParams", "BufferPolicy", "ConfigError", "ConvWeights", "FmenConfig", "FmenError", "Graph",
    "ImageFormatError", "MemoryReport", "PatternError", "ShapeError", "WeightFileError",
    "build_erb", "build_fmen", "build_hfab", "build_rrrb", "check_equivalence", "count_ops",
    "execute", "fold_bn_into_following_conv", "forward", "fuse_network", "fuse_rrrb", "he_init",
    "measure_peak", "param_count", "plan_memory", "run",
]
