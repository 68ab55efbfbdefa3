"""Gated multimodal machine translation on a small numpy autodiff core."""

from .model import (GatedMMTModel, ModelConfig, attach_adapters, build_base, count_parameters, gate_values,
                    greedy_decode)

__version__ = "0.1.0"

__all__ = ["GatedMMTModel", "ModelConfig", "attach_adapters", "build_base", "count_parameters", "gate_values",
           "greedy_decode", "__version__"]
