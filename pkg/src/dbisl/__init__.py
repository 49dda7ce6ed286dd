"""Differentiable segmentation <-> signed-distance transforms and dual-task
semi-supervised training on small synthetic volumes."""

from .dtrans import (TransformConfig, approx_dt, exact_edt, exact_signed, make_kernel,
                     t_r2s, t_s2r)
from .errors import DbislError
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "TransformConfig", "approx_dt", "exact_edt",
           "exact_signed", "make_kernel", "t_r2s", "t_s2r", "DbislError", "__version__"]
