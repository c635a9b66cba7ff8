"""moleseg: multi-modal semantic segmentation with per-modality low-rank
adapters fused by a learned top-k router, trained with hard-pixel mining."""

__version__ = "0.1.0"

from .tensor import Tensor, Parameter, ParameterRegistry, no_grad  # noqa: F401
