"""Multi-scale learned-mask saliency for frozen classifiers.

Modules: :mod:`tensorcore` (autodiff + Adam), :mod:`models` (scorers and
selectors), :mod:`explain` (mask training and fusion), :mod:`metrics`
(saliency evaluation), :mod:`imageio`, :mod:`plotting` and :mod:`cli`.
"""

from .explain import FusedExplanation, MdmConfig, run_mdm
from .models import ActivationSelector, ModelSpec, build_tiny_cnn, load_model, save_model

__all__ = [
    "ActivationSelector",
    "FusedExplanation",
    "MdmConfig",
    "ModelSpec",
    "build_tiny_cnn",
    "load_model",
    "run_mdm",
    "save_model",
]
__version__ = "0.1.0"
