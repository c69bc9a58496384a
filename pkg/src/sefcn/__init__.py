"""Squeeze & excitation blocks for fully convolutional segmentation networks,
implemented on numpy with hand-written backpropagation."""
__version__ = "0.1.0"

from .architectures import NetworkSpec, assemble_network, count_parameters  # noqa: E402
from .se import SEConfig, se_param_count  # noqa: E402
from .trainer import TrainConfig, grad_check, train  # noqa: E402

__all__ = ["NetworkSpec", "SEConfig", "SEFCNSegmenter", "TrainConfig", "assemble_network",
           "count_parameters", "grad_check", "se_param_count", "train", "__version__"]


def __getattr__(name):
    # scikit-learn takes seconds to import; only the estimator needs it
    if name == "SEFCNSegmenter":
        from .estimator import SEFCNSegmenter
        return SEFCNSegmenter
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
